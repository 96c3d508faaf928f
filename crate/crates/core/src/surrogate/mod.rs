//! Neural approximation of a local NMPC law: network, RPROP training,
//! PRBS excitation and closed-loop data generation.

mod dataset;
mod mlp;
pub mod prbs;
mod rprop;

pub(crate) use dataset::collect_with_logs;
pub use dataset::{
    collect_dataset, collect_excitation_dataset, excitation_run, excitation_scenario, surrogate_input, Dataset, DatasetLayout, TrainingRecord,
};
pub use mlp::{mlp_forward, mlp_gradient, Layer, MlpParams, Normalization};
pub use prbs::generate_prbs;
pub use rprop::{rprop_train, RpropConfig, RpropState, TrainingOutcome};

use crate::error::{check_len, Error, Result};
use crate::fastgrad::BoxBounds;
use crate::network::Profile;

/// Evaluates the surrogate at `z = (x, r, v_in, w)` and projects the
/// predicted profile onto the actuator box.
pub fn surrogate_control(
    params: &MlpParams,
    x: &[f64],
    r: &[f64],
    v_in: &Profile,
    w: &Profile,
    bounds: &BoxBounds,
) -> Result<Profile> {
    check_len("surrogate output", params.n_out(), bounds.dim())?;
    let n = v_in.horizon();
    if n == 0 || params.n_out() % n != 0 {
        return Err(Error::Surrogate(format!(
            "output size {} does not fit horizon {n}",
            params.n_out()
        )));
    }
    let z = surrogate_input(x, r, v_in, w);
    let mut u = mlp_forward(params, &z)?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Surrogate("network output is not finite".into()));
    }
    bounds.project_in_place(&mut u);
    Profile::new(u, params.n_out() / n, n)
}
