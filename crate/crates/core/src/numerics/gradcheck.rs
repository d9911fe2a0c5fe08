//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub rel_tol: f64,
    /// Denominator floor of the relative error: `|a - n| / max(|a|, |n|, floor)`.
    /// Keeps entries whose true gradient is ~0 from reporting round-off as error.
    pub magnitude_floor: f64,
    /// Coordinates probed per parameter block; `None` probes every coordinate.
    pub max_entries_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            rel_tol: 1e-5,
            magnitude_floor: 1e-4,
            max_entries_per_block: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude among the probed entries.
    pub max_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub rel_tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst_block(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `objective(params, want_grad)` must return the scalar loss and, when
/// `want_grad` is set, the analytic gradients. It must be deterministic: the
/// objective is evaluated twice at the base point and any difference rejects
/// the check before probing.
pub fn grad_check<Obj>(
    params: &ParamStore<f64>,
    options: &GradCheckOptions,
    mut objective: Obj,
) -> Result<GradCheckReport>
where
    Obj: FnMut(&ParamStore<f64>, bool) -> Result<(f64, Option<Gradients<f64>>)>,
{
    let (base, grads) = objective(params, true)?;
    let (again, _) = objective(params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::invalid(format!(
            "objective is not deterministic ({base} vs {again}); disable dropout before checking gradients"
        )));
    }
    let grads = grads.ok_or_else(|| Error::invalid("objective returned no gradients"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(params.len());
    for (id, name, tensor) in params.iter() {
        let n = tensor.len();
        let analytic = grads.get_or_zeros(id, n);
        let entries: Vec<usize> = match options.max_entries_per_block {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut block = BlockReport {
            name: name.to_string(),
            entries_checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: 0.0,
        };
        for &k in &entries {
            let original = tensor.data()[k];
            probe.get_mut(id).data_mut()[k] = original + options.step;
            let (plus, _) = objective(&probe, false)?;
            probe.get_mut(id).data_mut()[k] = original - options.step;
            let (minus, _) = objective(&probe, false)?;
            probe.get_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(options.magnitude_floor);
            block.max_abs_err = block.max_abs_err.max(abs);
            block.max_rel_err = block.max_rel_err.max(rel);
            block.max_grad = block.max_grad.max(a.abs());
        }
        blocks.push(block);
    }
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        blocks,
        max_rel_err,
        rel_tol: options.rel_tol,
        passed: max_rel_err <= options.rel_tol,
    })
}
