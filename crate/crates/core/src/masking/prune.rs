use super::supermask::smallest_magnitude_indices;
use super::{BinaryMask, MaskableSet};
use crate::encoder::ParameterSet;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Gradual magnitude pruning schedule, `s(t) = s_f·(1 - (1 - t/T)³)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSchedule {
    pub final_sparsity: f64,
    pub total_steps: usize,
    pub prune_every: usize,
}

impl PruneSchedule {
    pub fn new(final_sparsity: f64, total_steps: usize, prune_every: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&final_sparsity) {
            return Err(Error::OutOfRange(format!(
                "final sparsity {final_sparsity} outside [0, 1)"
            )));
        }
        if total_steps == 0 || prune_every == 0 {
            return Err(Error::Config("total_steps and prune_every must be positive".into()));
        }
        Ok(PruneSchedule {
            final_sparsity,
            total_steps,
            prune_every,
        })
    }

    /// Whether a pruning event happens after update `t` (1-based).
    pub fn prunes_at(&self, t: usize) -> bool {
        t.is_multiple_of(self.prune_every) || t == self.total_steps
    }
}

pub fn cubic_sparsity(t: usize, schedule: &PruneSchedule) -> Result<f64> {
    if t > schedule.total_steps {
        return Err(Error::OutOfRange(format!(
            "step {t} beyond schedule length {}",
            schedule.total_steps
        )));
    }
    let frac = 1.0 - t as f64 / schedule.total_steps as f64;
    Ok(schedule.final_sparsity * (1.0 - frac * frac * frac))
}

/// Mask zeroing the `⌊s·size⌋` smallest-magnitude entries of one tensor.
pub fn magnitude_prune_tensor(w: &Tensor, target: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::OutOfRange(format!("target sparsity {target} outside [0, 1)")));
    }
    let k = (target * w.len() as f64).floor() as usize;
    let mut m = Tensor::ones(w.shape());
    for i in smallest_magnitude_indices(w.data(), k) {
        m.data_mut()[i] = 0.0;
    }
    Ok(m)
}

/// Per-tensor magnitude pruning over the maskable set.
pub fn magnitude_prune(params: &ParameterSet, maskable: &MaskableSet, target: f64) -> Result<BinaryMask> {
    let mut entries = Vec::new();
    for n in maskable.names() {
        entries.push((n.clone(), magnitude_prune_tensor(params.get(n)?, target)?));
    }
    BinaryMask::new(entries)
}

/// Independently permutes the entries of each maskable tensor; every other
/// tensor is copied unchanged.
pub fn shuffle_within_tensors(
    params: &ParameterSet,
    maskable: &MaskableSet,
    rng: &RngStream,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    for n in maskable.names() {
        let mut s = rng.derive(n);
        s.shuffle(out.get_mut(n)?.data_mut());
    }
    Ok(out)
}
