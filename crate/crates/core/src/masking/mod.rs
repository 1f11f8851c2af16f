//! Binary supermasks over pre-trained weights, magnitude pruning with a cubic
//! sparsity schedule, and frozen-tensor sets for L0-close fine-tuning.

mod freeze;
mod prune;
mod supermask;

pub use freeze::{FreezePreset, FreezeSpec};
pub use prune::{cubic_sparsity, magnitude_prune, magnitude_prune_tensor, shuffle_within_tensors, PruneSchedule};
pub use supermask::{
    init_mask_params, sample_mask, straight_through_grad, threshold_mask, MaskParameters,
    SteVariant, DEFAULT_LOGIT_MAGNITUDE,
};

use indexmap::IndexMap;

use crate::encoder::{block_matrix_name, ModelConfig, ParameterSet, BLOCK_MATRIX_ROLES};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Ordered names of tensors eligible for masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskableSet {
    names: Vec<String>,
}

impl MaskableSet {
    /// The six block matrices of every block, plus the word embedding when
    /// `include_embedding` is set. Biases, layer norms, pooler and head are
    /// never maskable.
    pub fn default_for(config: &ModelConfig, include_embedding: bool) -> Self {
        let mut names = Vec::new();
        if include_embedding {
            names.push("embed.word".to_string());
        }
        for b in 1..=config.num_blocks {
            for role in BLOCK_MATRIX_ROLES {
                names.push(block_matrix_name(b, role));
            }
        }
        MaskableSet { names }
    }

    pub fn new(names: Vec<String>, params: &ParameterSet) -> Result<Self> {
        for n in &names {
            if !params.contains(n) {
                return Err(Error::UnknownTensor(n.clone()));
            }
            if !(n.ends_with(".w") || n == "embed.word") || n.starts_with("pool") {
                return Err(Error::Config(format!("{n} is not a maskable weight matrix")));
            }
        }
        Ok(MaskableSet { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn without_embedding(&self) -> Self {
        MaskableSet {
            names: self
                .names
                .iter()
                .filter(|n| *n != "embed.word")
                .cloned()
                .collect(),
        }
    }

    pub fn num_entries(&self, params: &ParameterSet) -> Result<usize> {
        self.names
            .iter()
            .map(|n| params.get(n).map(Tensor::len))
            .sum()
    }
}

/// Named `{0,1}` tensors congruent with the maskable subset of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    entries: IndexMap<String, Tensor>,
}

/// Fractions of zeros, per tensor and overall.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub per_tensor: Vec<(String, f64)>,
    /// Zeros over all masked entries.
    pub global: f64,
    /// Same, excluding `embed.word`.
    pub global_without_embedding: f64,
}

impl BinaryMask {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (name, t) in &entries {
            if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::OutOfRange(format!("mask {name} has non-binary entries")));
            }
        }
        Ok(BinaryMask {
            entries: entries.into_iter().collect(),
        })
    }

    pub fn ones(params: &ParameterSet, maskable: &MaskableSet) -> Result<Self> {
        Self::full(params, maskable, 1.0)
    }

    pub fn zeros(params: &ParameterSet, maskable: &MaskableSet) -> Result<Self> {
        Self::full(params, maskable, 0.0)
    }

    fn full(params: &ParameterSet, maskable: &MaskableSet, v: f64) -> Result<Self> {
        let mut entries = IndexMap::new();
        for n in maskable.names() {
            entries.insert(n.clone(), Tensor::full(params.get(n)?.shape(), v));
        }
        Ok(BinaryMask { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Crate-internal: lets gradient checks perturb mask entries off `{0,1}`.
    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_entries(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn num_zeros(&self) -> usize {
        self.entries
            .values()
            .map(|t| t.data().iter().filter(|&&v| v == 0.0).count())
            .sum()
    }

    /// Every mask tensor names a parameter of the same shape.
    pub fn check_congruent(&self, params: &ParameterSet) -> Result<()> {
        for (n, m) in &self.entries {
            let p = params.get(n)?;
            if p.shape() != m.shape() {
                return Err(Error::shape("mask congruence", m.shape(), p.shape()));
            }
        }
        Ok(())
    }

    pub fn sparsity(&self) -> SparsityReport {
        let mut per_tensor = Vec::new();
        let (mut zeros, mut total, mut zeros_ne, mut total_ne) = (0usize, 0usize, 0usize, 0usize);
        for (n, t) in &self.entries {
            let z = t.data().iter().filter(|&&v| v == 0.0).count();
            per_tensor.push((n.clone(), z as f64 / t.len() as f64));
            zeros += z;
            total += t.len();
            if n != "embed.word" {
                zeros_ne += z;
                total_ne += t.len();
            }
        }
        let frac = |z: usize, t: usize| if t == 0 { 0.0 } else { z as f64 / t as f64 };
        SparsityReport {
            per_tensor,
            global: frac(zeros, total),
            global_without_embedding: frac(zeros_ne, total_ne),
        }
    }

    /// `θ̃ ⊙ μ` on masked names; other tensors are copied unchanged.
    pub fn apply(&self, params: &ParameterSet) -> Result<ParameterSet> {
        self.check_congruent(params)?;
        let mut out = params.clone();
        for (n, m) in &self.entries {
            let t = out.get_mut(n)?;
            for (w, &mv) in t.data_mut().iter_mut().zip(m.data()) {
                *w *= mv;
            }
        }
        Ok(out)
    }

    /// Elementwise AND.
    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        let mut entries = IndexMap::new();
        for (n, a) in &self.entries {
            let b = other
                .entries
                .get(n)
                .ok_or_else(|| Error::UnknownTensor(n.clone()))?;
            entries.insert(n.clone(), a.zip_map(b, |x, y| x * y)?);
        }
        Ok(BinaryMask { entries })
    }
}

/// The sparsity operation: per-tensor and global zero fractions.
pub fn sparsity(mask: &BinaryMask) -> SparsityReport {
    mask.sparsity()
}
