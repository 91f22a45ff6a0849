//! Finite-difference gradient oracle.
//!
//! Central differences with step `h` (default 1e-3), run in f64: the same
//! generic forward/backward code the f32 trainer uses is instantiated at
//! double precision so the comparison measures the math, not the rounding.
//! Per parameter tensor a sampled subset of at least `min_coords`
//! coordinates is probed (all of them for small tensors).

use crate::error::Result;
use crate::model::Model;
use crate::rng::Pcg32;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Relative error with an absolute floor so zero-gradient parameters
/// compare as zero-vs-zero instead of dividing by nothing.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences of `loss`.
///
/// `analytic[i]` aligns with `model.state().params()[i]`; a `None` entry
/// is treated as an all-zero gradient (a parameter the loss never
/// touches). `loss` must be a pure function of the parameters.
pub fn finite_diff_check(
    model: &mut Model<f64>,
    analytic: &[Option<Tensor<f64>>],
    mut loss: impl FnMut(&Model<f64>) -> Result<f64>,
    h: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = Pcg32::for_purpose(seed, "gradcheck-coords");
    let mut max_rel_err = 0.0f64;
    let mut coords_checked = 0usize;
    let n_params = model.state().params().len();
    for p in 0..n_params {
        let len = model.state().params()[p].len();
        let coords: Vec<usize> = if len <= min_coords {
            (0..len).collect()
        } else {
            // partial Fisher-Yates: first `min_coords` of a shuffle
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..min_coords {
                let j = i + rng.uniform_below((len - i) as u32) as usize;
                idx.swap(i, j);
            }
            idx.truncate(min_coords);
            idx
        };
        for c in coords {
            let original = model.state().params()[p].data()[c];
            model.state_mut().params_mut()[p].data_mut()[c] = original + h;
            let plus = loss(model)?;
            model.state_mut().params_mut()[p].data_mut()[c] = original - h;
            let minus = loss(model)?;
            model.state_mut().params_mut()[p].data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].as_ref().map_or(0.0, |g| g.data()[c]);
            let e = rel_err(a, numeric);
            if e > max_rel_err {
                max_rel_err = e;
            }
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        coords_checked,
    })
}
