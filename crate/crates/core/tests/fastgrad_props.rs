use hierax::fastgrad::*;
use hierax::linalg::Mat;
use hierax::network::Profile;
use hierax::plant::{
    build_benchmark, InputBox, LinearCoreModel, LocalCostSpec, Saturation, SubsystemModel,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            m.set(i, j, rng.random_range(-scale..scale));
        }
    }
    m
}

struct Instance {
    model: LinearCoreModel,
    cost: LocalCostSpec,
    x0: Vec<f64>,
    r: Vec<f64>,
    v: Profile,
    w: Profile,
    bounds: BoxBounds,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_x = rng.random_range(1..5);
    let n_u = rng.random_range(1..4);
    let n_y = rng.random_range(1..4);
    let n_v = rng.random_range(0..4);
    let n_w = rng.random_range(0..3);
    let n = rng.random_range(1..8);
    let model = LinearCoreModel {
        a: mat(&mut rng, n_x, n_x, 0.5),
        b: mat(&mut rng, n_x, n_u, 1.0),
        e: mat(&mut rng, n_x, n_v, 0.3),
        c: mat(&mut rng, n_y, n_x, 1.0),
        cv: mat(&mut rng, 2, n_x, 1.0),
        dw: mat(&mut rng, n_y, n_w, 1.0),
        saturation: rng.random_bool(0.5).then(|| Saturation {
            channel: 0,
            level: rng.random_range(2.0..20.0),
        }),
    };
    model.validate().unwrap();
    let q: Vec<f64> = (0..n_y).map(|_| rng.random_range(0.1..10.0)).collect();
    let cost = if rng.random_bool(0.7) {
        LocalCostSpec::tracking(q, (0..n_u).map(|_| rng.random_range(0.0..1.0)).collect())
    } else {
        LocalCostSpec::constraint(q, (0..n_y).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let lo: Vec<f64> = (0..n_u).map(|_| rng.random_range(-3.0..0.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.5..4.0)).collect();
    let mut rv = |len| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    Instance {
        x0: rv(n_x),
        r: rv(n_y),
        v: Profile::new(rv(n_v * n), n_v, n).unwrap(),
        w: Profile::new(rv(n_w * n), n_w, n).unwrap(),
        bounds: BoxBounds::repeat(&InputBox::new(lo, hi).unwrap(), n),
        model,
        cost,
    }
}

impl Instance {
    fn problem(&self) -> LocalProblem<'_> {
        LocalProblem::new(
            &self.model,
            self.x0.clone(),
            self.r.clone(),
            self.v.clone(),
            self.w.clone(),
            self.bounds.clone(),
            &self.cost,
        )
        .unwrap()
    }
}

/// Central differences on the value only.
fn fd_gradient(obj: &dyn Objective, u: &[f64]) -> Vec<f64> {
    let mut up = u.to_vec();
    (0..u.len())
        .map(|k| {
            let h = 1e-6 * (1.0 + u[k].abs());
            up[k] = u[k] + h;
            let jp = obj.value(&up).unwrap();
            up[k] = u[k] - h;
            let jm = obj.value(&up).unwrap();
            up[k] = u[k];
            (jp - jm) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

/// Cost recomputed by explicit simulation, independent of the rollout.
fn direct_cost(inst: &Instance, u: &[f64]) -> f64 {
    let m = &inst.model;
    let n = inst.v.horizon();
    let n_u = m.b.cols();
    let mut x = inst.x0.clone();
    let mut j = 0.0;
    for i in 0..n {
        let ui = &u[i * n_u..(i + 1) * n_u];
        let mut xn = vec![0.0; x.len()];
        m.a.mul_acc(&x, &mut xn);
        m.b.mul_acc(ui, &mut xn);
        m.e.mul_acc(inst.v.step(i), &mut xn);
        x = xn;
        let mut y = m.output_of_state(&x);
        m.dw.mul_acc(inst.w.step(i), &mut y);
        j += inst.cost.stage_cost(&y, ui, &inst.r);
    }
    j
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_matches_central_differences(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let prob = inst.problem();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let u: Vec<f64> = (0..prob.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = vec![0.0; u.len()];
        let j = prob.value_and_gradient(&u, &mut g).unwrap();
        prop_assert!((j - prob.value(&u).unwrap()).abs() <= 1e-12 * (1.0 + j.abs()));
        prop_assert!((j - direct_cost(&inst, &u)).abs() <= 1e-10 * (1.0 + j.abs()));
        let fd = fd_gradient(&prob, &u);
        prop_assert!(rel_err(&g, &fd) < 1e-5, "rel err {}", rel_err(&g, &fd));
    }

    #[test]
    fn projection_is_idempotent_and_feasible(seed in any::<u64>(), len in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..3.0)).collect();
        let b = BoxBounds::new(lo, hi).unwrap();
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let once = project_box(&p, &b).unwrap();
        prop_assert!(b.contains(&once));
        prop_assert_eq!(project_box(&once, &b).unwrap(), once.clone());
        // nearest point: no feasible coordinate is closer
        for k in 0..len {
            let d = (once[k] - p[k]).abs();
            prop_assert!(d <= (b.lo[k] - p[k]).abs() + 1e-15 && d <= (b.hi[k] - p[k]).abs() + 1e-15 || b.lo[k] <= p[k] && p[k] <= b.hi[k]);
        }
    }

    #[test]
    fn bb_step_stays_clamped(
        du in proptest::collection::vec(-1e3f64..1e3, 1..10),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dg: Vec<f64> = du.iter().map(|_| rng.random_range(-1e3..1e3)).collect();
        let cfg = SolverConfig::default();
        let g = bb_step(&du, &dg, &cfg, 0.123);
        prop_assert!(g == 0.123 || (cfg.gamma_min..=cfg.gamma_max).contains(&g));
    }

    #[test]
    fn iterates_stay_feasible_and_trace_matches_reference(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let prob = inst.problem();
        let cfg = SolverConfig { n_max: 23, n_rstr: 4, ..Default::default() };
        let (rep, trace) = minimize_traced(&prob, &prob.bounds, &cfg, None).unwrap();
        prop_assert_eq!(trace.len(), cfg.n_max + 1);
        for u in &trace {
            prop_assert!(prob.bounds.contains(u));
        }
        let reference = reference_trace(&prob, &prob.bounds, &cfg);
        for (a, b) in trace.iter().zip(&reference) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
        // the reported solution is the lowest-cost iterate
        let costs: Vec<f64> = trace.iter().map(|u| prob.value(u).unwrap()).collect();
        let lowest = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(trace.contains(&rep.u_star));
        prop_assert!((rep.j_final - lowest).abs() <= 1e-12 * (1.0 + lowest.abs()));
    }

    #[test]
    fn oracle_is_never_worse_than_truncated(seed in any::<u64>()) {
        let inst = random_instance(seed);
        let prob = inst.problem();
        // Saturated outputs make the problem nonconvex; skip those.
        prop_assume!(inst.model.saturation.is_none());
        let t = solve(&prob, &SolverConfig::default()).unwrap();
        let o = solve_oracle(&prob).unwrap();
        prop_assert!(o.converged);
        prop_assert!(o.j_final <= t.j_final + 1e-9 * (1.0 + t.j_final.abs()));
    }
}

/// Step-by-step transcription of the restart rule: every `n_rstr`-th
/// iteration takes a plain projected gradient step, the others add the
/// momentum term built from the unprojected gradient points.
fn reference_trace(obj: &dyn Objective, b: &BoxBounds, cfg: &SolverConfig) -> Vec<Vec<f64>> {
    let n = obj.dim();
    let clamp = |v: Vec<f64>| -> Vec<f64> {
        v.iter().enumerate().map(|(k, x)| x.clamp(b.lo[k], b.hi[k])).collect()
    };
    let mut u = clamp(vec![0.0; n]);
    let mut g = vec![0.0; n];
    obj.value_and_gradient(&u, &mut g).unwrap();
    let mut z_prev = u.clone();
    let mut gamma = cfg.gamma0;
    let mut out = vec![u.clone()];
    for i in 1..=cfg.n_max {
        let z: Vec<f64> = (0..n).map(|k| u[k] - gamma * g[k]).collect();
        let next = if i % cfg.n_rstr == 0 {
            clamp(z.clone())
        } else {
            clamp((0..n).map(|k| z[k] + cfg.c * (z[k] - z_prev[k])).collect())
        };
        z_prev = z;
        let mut g_next = vec![0.0; n];
        obj.value_and_gradient(&next, &mut g_next).unwrap();
        let du: Vec<f64> = (0..n).map(|k| next[k] - u[k]).collect();
        let dg: Vec<f64> = (0..n).map(|k| g_next[k] - g[k]).collect();
        let dd: f64 = dg.iter().map(|v| v * v).sum();
        if dd >= 1e-30 {
            let s: f64 = du.iter().zip(&dg).map(|(a, b)| a * b).sum();
            gamma = (s.abs() / dd).clamp(cfg.gamma_min, cfg.gamma_max);
        }
        u = next;
        g = g_next;
        out.push(u.clone());
    }
    out
}

/// `½ (u − c)ᵀ H (u − c)` with `H` symmetric positive definite.
struct Quadratic {
    h: Vec<Vec<f64>>,
    c: Vec<f64>,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn value(&self, u: &[f64]) -> hierax::Result<f64> {
        let d: Vec<f64> = u.iter().zip(&self.c).map(|(a, b)| a - b).collect();
        let mut j = 0.0;
        for i in 0..d.len() {
            for k in 0..d.len() {
                j += 0.5 * d[i] * self.h[i][k] * d[k];
            }
        }
        Ok(j)
    }
    fn value_and_gradient(&self, u: &[f64], g: &mut [f64]) -> hierax::Result<f64> {
        let d: Vec<f64> = u.iter().zip(&self.c).map(|(a, b)| a - b).collect();
        for i in 0..d.len() {
            g[i] = (0..d.len()).map(|k| self.h[i][k] * d[k]).sum();
        }
        self.value(u)
    }
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let m: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|k| {
                    let mm: f64 = (0..n).map(|l| m[l][i] * m[l][k]).sum::<f64>() / n as f64;
                    mm + if i == k { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

/// Minimizer of a box QP by enumerating every active set and keeping the
/// KKT point.
fn active_set_minimizer(q: &Quadratic, b: &BoxBounds) -> Vec<f64> {
    let n = q.c.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut c = code;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let mut u = vec![0.0; n];
        let free: Vec<usize> = (0..n).filter(|&k| state[k] == 0).collect();
        for k in 0..n {
            u[k] = match state[k] {
                1 => b.lo[k],
                2 => b.hi[k],
                _ => 0.0,
            };
        }
        if !free.is_empty() {
            // H_ff (u_f − c_f) = −H_fa (u_a − c_a)
            let nf = free.len();
            let mut a = nalgebra::DMatrix::zeros(nf, nf);
            let mut rhs = nalgebra::DVector::zeros(nf);
            for (i, &fi) in free.iter().enumerate() {
                for (k, &fk) in free.iter().enumerate() {
                    a[(i, k)] = q.h[fi][fk];
                }
                rhs[i] = q.h[fi].iter().enumerate().map(|(k, h)| h * q.c[k]).sum::<f64>()
                    - (0..n).filter(|k| state[*k] != 0).map(|k| q.h[fi][k] * u[k]).sum::<f64>();
            }
            let sol = match a.lu().solve(&rhs) {
                Some(s) => s,
                None => continue,
            };
            for (i, &fi) in free.iter().enumerate() {
                u[fi] = sol[i];
            }
        }
        if !b.contains(&u) && !u.iter().zip(b.lo.iter().zip(&b.hi)).all(|(v, (l, h))| *l - 1e-12 <= *v && *v <= *h + 1e-12) {
            continue;
        }
        let mut g = vec![0.0; n];
        let j = q.value_and_gradient(&u, &mut g).unwrap();
        let kkt = (0..n).all(|k| match state[k] {
            1 => g[k] >= -1e-10,
            2 => g[k] <= 1e-10,
            _ => true,
        });
        if kkt && best.as_ref().is_none_or(|(bj, _)| j < *bj) {
            best = Some((j, u));
        }
    }
    best.expect("strictly convex box QP has a KKT point").1
}

#[test]
fn truncated_solver_reaches_box_qp_minimizers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..40 {
        let n = rng.random_range(1..5);
        let q = Quadratic {
            h: random_spd(&mut rng, n),
            c: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        };
        let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.5)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.2..2.5)).collect();
        let b = BoxBounds::new(lo, hi).unwrap();
        let exact = active_set_minimizer(&q, &b);
        let rep = minimize(&q, &b, &SolverConfig::default(), None).unwrap();
        let err = rep
            .u_star
            .iter()
            .zip(&exact)
            .map(|(a, e)| (a - e).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "error {err} on n = {n}");
    }
}

#[test]
fn benchmark_adjoint_matches_central_differences() {
    let bench = build_benchmark();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in [0usize, 3] {
        let m = &bench.models[s];
        let d = m.dims();
        let n = bench.horizon();
        for _ in 0..10 {
            let x0: Vec<f64> = (0..d.n_x).map(|_| rng.random_range(0.0..60.0)).collect();
            let v = Profile::new((0..d.n_vin * n).map(|_| rng.random_range(0.0..20.0)).collect(), d.n_vin, n).unwrap();
            let w = Profile::new((0..d.n_w * n).map(|_| rng.random_range(-3.0..3.0)).collect(), d.n_w, n).unwrap();
            let r: Vec<f64> = (0..d.n_y).map(|_| rng.random_range(5.0..60.0)).collect();
            let b = BoxBounds::repeat(bench.input_boxes[s].as_ref().unwrap(), n);
            let prob = LocalProblem::new(m, x0, r, v, w, b.clone(), &bench.costs[s]).unwrap();
            let u: Vec<f64> = (0..prob.dim()).map(|k| rng.random_range(b.lo[k]..b.hi[k])).collect();
            let mut g = vec![0.0; u.len()];
            prob.value_and_gradient(&u, &mut g).unwrap();
            assert!(rel_err(&g, &fd_gradient(&prob, &u)) < 1e-5);
        }
    }
}
