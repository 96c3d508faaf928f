use hierax::coordinator::*;
use hierax::network::*;
use hierax::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `v_out = M v_in + c + K r`, independent of any controller.
struct AffineAgent {
    m: DMatrix<f64>,
    c: DVector<f64>,
    k: DMatrix<f64>,
}

impl SubsystemAgent for AffineAgent {
    fn setpoint_dim(&self) -> usize {
        self.k.ncols()
    }

    fn respond(&self, r_s: &[f64], v_in: &[f64]) -> hierax::Result<AgentResponse> {
        let v = DVector::from_column_slice(v_in);
        let r = DVector::from_column_slice(r_s);
        let out = &self.m * v + &self.c + &self.k * r;
        Ok(AgentResponse {
            u: Vec::new(),
            cost: out.iter().map(|x| x * x).sum(),
            v_out: out.as_slice().to_vec(),
            solve_time: 0.0,
        })
    }
}

struct Case {
    topology: CouplingTopology,
    agents: Vec<AffineAgent>,
    r: Vec<f64>,
}

/// Random graph on a ring plus chords, with every agent's `M` scaled so the
/// routed map has ∞-norm `rho`.
fn affine_case(seed: u64, rho: f64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_s = rng.random_range(2..5);
    let horizon = rng.random_range(1..4);
    let mut edges = Vec::new();
    for a in 0..n_s {
        for b in 0..n_s {
            if a != b && (b == (a + 1) % n_s || rng.random_bool(0.3)) {
                edges.push(CouplingEdge::new(a, b, rng.random_range(1..3)));
            }
        }
    }
    let topology = CouplingTopology::new(n_s, vec![0], edges, horizon).unwrap();
    let mut agents = Vec::new();
    for s in 0..n_s {
        let (ni, no) = (topology.incoming_layout(s).len(), topology.outgoing_layout(s).len());
        let nr = if s == 0 { 2 } else { 0 };
        let mut m: DMatrix<f64> = DMatrix::from_fn(no, ni, |_, _| rng.random_range(-1.0..1.0));
        // every outgoing entry feeds exactly one incoming entry, so the row
        // sums of |M| bound the ∞-norm of the routed map
        let worst = (0..no)
            .map(|i| m.row(i).iter().map(|v: &f64| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if worst > 0.0 {
            m *= rho / worst;
        }
        agents.push(AffineAgent {
            m,
            c: DVector::from_fn(no, |_, _| rng.random_range(-5.0..5.0)),
            k: DMatrix::from_fn(no, nr, |_, _| rng.random_range(-1.0..1.0)),
        });
    }
    Case {
        topology,
        agents,
        r: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
    }
}

/// Solves `v = G (M v + c + K r)` directly.
fn direct_fixed_point(case: &Case) -> Vec<f64> {
    let t = &case.topology;
    let g = build_routing(t).unwrap();
    let n_in = t.stacked_len();
    let n_out = g.cols();
    let mut big_m = DMatrix::zeros(n_out, n_in);
    let mut rhs_out = DVector::zeros(n_out);
    let (mut ro, mut ri) = (0, 0);
    for (s, a) in case.agents.iter().enumerate() {
        let r = if s == 0 { DVector::from_column_slice(&case.r) } else { DVector::zeros(0) };
        let off = &a.c + &a.k * r;
        big_m.view_mut((ro, ri), (a.m.nrows(), a.m.ncols())).copy_from(&a.m);
        rhs_out.rows_mut(ro, a.m.nrows()).copy_from(&off);
        ro += a.m.nrows();
        ri += a.m.ncols();
    }
    let gd = DMatrix::from_fn(n_in, n_out, |i, j| g.dense()[i][j]);
    let lhs = DMatrix::identity(n_in, n_in) - &gd * big_m;
    let rhs = gd * rhs_out;
    lhs.lu().solve(&rhs).unwrap().as_slice().to_vec()
}

fn coordinator(case: &Case) -> Coordinator<'_> {
    let refs: Vec<&dyn SubsystemAgent> = case.agents.iter().map(|a| a as &dyn SubsystemAgent).collect();
    Coordinator::new(&case.topology, refs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn affine_fixed_point_matches_linear_solve(seed in any::<u64>(), rho in 0.05f64..0.9) {
        let case = affine_case(seed, rho);
        let coord = coordinator(&case);
        let cfg = FixedPointConfig { sigma_max: 2000, eps_tol: 1e-12, alpha: 1.0 };
        let v0 = vec![0.0; case.topology.stacked_len()];
        let res = coord.evaluate_setpoint(&case.r, &v0, &cfg).unwrap();
        prop_assert!(res.converged);
        let direct = direct_fixed_point(&case);
        let err = res.v_in_star.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-8, "error {err}");
        for w in res.residuals.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(*res.residuals.last().unwrap() <= cfg.eps_tol);
    }

    #[test]
    fn relaxation_reaches_the_same_point(seed in any::<u64>(), alpha in 0.2f64..1.0) {
        let case = affine_case(seed, 0.6);
        let coord = coordinator(&case);
        let cfg = FixedPointConfig { sigma_max: 5000, eps_tol: 1e-12, alpha };
        let v0 = vec![0.0; case.topology.stacked_len()];
        let res = coord.evaluate_setpoint(&case.r, &v0, &cfg).unwrap();
        prop_assert!(res.converged);
        let direct = direct_fixed_point(&case);
        let err = res.v_in_star.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // the filtered step is (1 − α + αρ)-contractive, so the distance to
        // the fixed point is at most eps_tol·(1 − α + αρ) / (α(1 − ρ))
        let bound = 1e-12 * (1.0 - alpha + alpha * 0.6) / (alpha * 0.4);
        prop_assert!(err <= bound + 1e-13, "error {err} bound {bound}");
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree(seed in any::<u64>()) {
        let case = affine_case(seed, 0.5);
        let v0 = vec![0.3; case.topology.stacked_len()];
        let cfg = FixedPointConfig::default();
        let a = coordinator(&case).evaluate_setpoint(&case.r, &v0, &cfg).unwrap();
        let b = coordinator(&case).sequential().evaluate_setpoint(&case.r, &v0, &cfg).unwrap();
        prop_assert_eq!(a.v_in_star, b.v_in_star);
        prop_assert_eq!(a.residuals, b.residuals);
    }

    #[test]
    fn central_cost_is_sum_of_local_costs(seed in any::<u64>()) {
        let case = affine_case(seed, 0.5);
        let v0 = vec![0.0; case.topology.stacked_len()];
        let res = coordinator(&case).evaluate_setpoint(&case.r, &v0, &FixedPointConfig::default()).unwrap();
        let sum: f64 = res.costs.iter().sum();
        prop_assert_eq!(res.j_c, sum);
        prop_assert_eq!(res.costs.len(), case.agents.len());
    }
}

#[test]
fn zero_coupling_converges_after_two_sweeps() {
    let mut case = affine_case(3, 0.5);
    for a in &mut case.agents {
        a.m.fill(0.0);
    }
    let v0 = vec![0.0; case.topology.stacked_len()];
    let cfg = FixedPointConfig { alpha: 1.0, ..Default::default() };
    let res = coordinator(&case).evaluate_setpoint(&case.r, &v0, &cfg).unwrap();
    assert!(res.converged);
    assert_eq!(res.sweeps, 2);
    assert_eq!(res.residuals[1], 0.0);
}

#[test]
fn unconverged_result_is_flagged() {
    let case = affine_case(9, 0.89);
    let cfg = FixedPointConfig { sigma_max: 2, eps_tol: 1e-14, alpha: 0.5 };
    let v0 = vec![0.0; case.topology.stacked_len()];
    let res = coordinator(&case).evaluate_setpoint(&case.r, &v0, &cfg).unwrap();
    assert!(!res.converged);
    assert_eq!(res.sweeps, 2);
}

#[test]
fn compass_search_finds_box_minimizer() {
    let bounds = SetpointBounds {
        lo: vec![-1.0, 0.0],
        hi: vec![1.0, 2.0],
    };
    // unconstrained minimizer (0.25, 3.0) lies outside; box minimizer (0.25, 2.0)
    let opt = pattern_search(&[0.9, 0.1], &bounds, 400, |r| {
        Ok(Some((r[0] - 0.25).powi(2) + 2.0 * (r[1] - 3.0).powi(2)))
    })
    .unwrap();
    assert!((opt.r_opt[0] - 0.25).abs() < 1e-3);
    assert!((opt.r_opt[1] - 2.0).abs() < 1e-9);
    assert!(opt.evaluations <= 400);
    for (v, (l, h)) in opt.r_opt.iter().zip(bounds.lo.iter().zip(&bounds.hi)) {
        assert!(l <= v && v <= h);
    }
}

#[test]
fn compass_search_skips_unconverged_candidates() {
    let bounds = SetpointBounds {
        lo: vec![0.0],
        hi: vec![4.0],
    };
    // scores above 2 are reported as non-converged
    let opt = pattern_search(&[1.0], &bounds, 100, |r| {
        Ok((r[0] <= 2.0).then_some((r[0] - 3.0).powi(2)))
    })
    .unwrap();
    assert!(opt.r_opt[0] <= 2.0);
    assert!((opt.r_opt[0] - 2.0).abs() < 1e-2);
    let err = pattern_search(&[1.0], &bounds, 10, |_| Ok(None)).unwrap_err();
    assert!(matches!(err, Error::NoConvergedCandidate { .. }));
}
