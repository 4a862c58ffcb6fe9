//! Central finite-difference verification of tape gradients.
//!
//! The checker re-runs a model closure with individually perturbed parameter
//! coordinates and compares the resulting difference quotients against the
//! analytic gradients from one backward pass. Relative error uses the
//! symmetric denominator `|analytic| + |fd| + 1e-12`; coordinates where both
//! sides sit under [`ZERO_GRADIENT_FLOOR`] count as exact zeros instead of
//! being compared as ratios of rounding noise.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, UpdError};
use crate::numerics::optim::Params;
use crate::numerics::random::rng_from_seed;
use crate::numerics::tape::{GradientTape, NodeId};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Central differences of an O(1) loss carry about |f| * eps_mach / epsilon
/// of cancellation dust, around 1e-10 here. A coordinate whose analytic and
/// numeric derivatives both sit below this floor is mathematically zero
/// (softmax shift-invariance makes the attention key bias such a case), and
/// comparing dust against dust would report a spurious mismatch.
pub const ZERO_GRADIENT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Worst relative error seen per parameter.
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Verifies analytic gradients of `build` at `params`.
///
/// `build` must register every entry of `params` on the tape it returns (the
/// loss node is the second element). Up to `max_coords_per_param` coordinates
/// of each parameter are probed, chosen by a seeded RNG when the parameter is
/// larger than that budget.
pub fn check_gradients<F>(
    build: F,
    params: &Params,
    epsilon: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Params) -> Result<(GradientTape, NodeId)>,
{
    let (tape, loss) = build(params)?;
    let base_loss = tape.scalar(loss)?;
    if !base_loss.is_finite() {
        return Err(UpdError::NonFinite {
            context: "gradient check base loss",
            name: "<unperturbed>".to_string(),
        });
    }
    let analytic = tape.backward(loss)?;
    for name in params.keys() {
        if !analytic.contains_key(name) {
            return Err(UpdError::contract(format!(
                "closure did not register parameter {name:?} on its tape"
            )));
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        per_param: BTreeMap::new(),
    };

    for (name, value) in params {
        let total = value.data().len();
        let coords: Vec<usize> = if total <= max_coords_per_param {
            (0..total).collect()
        } else {
            // Sampling without replacement keeps the probe set spread out.
            let mut chosen = std::collections::BTreeSet::new();
            while chosen.len() < max_coords_per_param {
                chosen.insert(rng.gen_range(0..total));
            }
            chosen.into_iter().collect()
        };

        let mut worst = 0.0f64;
        for coord in coords {
            let fd = {
                let probe = |delta: f64| -> Result<f64> {
                    let mut perturbed = params.clone();
                    let entry = perturbed.get_mut(name).expect("key from same map");
                    entry.data_mut()[coord] += delta;
                    let (tape, loss) = build(&perturbed)?;
                    let v = tape.scalar(loss)?;
                    if !v.is_finite() {
                        return Err(UpdError::NonFinite {
                            context: "finite-difference loss",
                            name: name.clone(),
                        });
                    }
                    Ok(v)
                };
                let plus = probe(epsilon)?;
                let minus = probe(-epsilon)?;
                (plus - minus) / (2.0 * epsilon)
            };
            let a = analytic[name].data()[coord];
            let rel = if a.abs() < ZERO_GRADIENT_FLOOR && fd.abs() < ZERO_GRADIENT_FLOOR {
                0.0
            } else {
                (a - fd).abs() / (a.abs() + fd.abs() + 1e-12)
            };
            worst = worst.max(rel);
            report.coords_checked += 1;
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
