use indexmap::IndexMap;

use super::{BinaryMask, MaskableSet};
use crate::encoder::ParameterSet;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, RngStream, Tensor};

/// Magnitude of the initial mask logits: pruned entries start at `-5`,
/// retained ones at `+5`.
pub const DEFAULT_LOGIT_MAGNITUDE: f64 = 5.0;

/// Real-valued mask logits ν; `μ ~ Bernoulli(σ(ν))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParameters {
    entries: IndexMap<String, Tensor>,
}

impl MaskParameters {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (n, t) in &entries {
            if !t.is_finite() {
                return Err(Error::OutOfRange(format!("mask logits {n} not finite")));
            }
        }
        Ok(MaskParameters {
            entries: entries.into_iter().collect(),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_entries(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Expected fraction of zeros under Bernoulli sampling, `mean(1 - σ(ν))`.
    pub fn expected_sparsity(&self) -> f64 {
        let total = self.num_entries();
        let s: f64 = self
            .entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| 1.0 - sigmoid(v))
            .sum();
        s / total as f64
    }
}

/// Indices of the `count` smallest `|values|`, ties broken by lower index.
pub(crate) fn smallest_magnitude_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .abs()
            .total_cmp(&values[b].abs())
            .then(a.cmp(&b))
    });
    idx.truncate(count);
    idx
}

/// Soft magnitude-pruning initialisation: within each maskable tensor the
/// `⌊s·size⌋` smallest-magnitude entries get `-magnitude`, the rest
/// `+magnitude`.
pub fn init_mask_params(
    pretrained: &ParameterSet,
    maskable: &MaskableSet,
    initial_sparsity: f64,
    magnitude: f64,
) -> Result<MaskParameters> {
    if !(0.0..1.0).contains(&initial_sparsity) {
        return Err(Error::OutOfRange(format!(
            "initial sparsity {initial_sparsity} outside [0, 1)"
        )));
    }
    let mut entries = IndexMap::new();
    for n in maskable.names() {
        let w = pretrained.get(n)?;
        let k = (initial_sparsity * w.len() as f64).floor() as usize;
        let mut nu = Tensor::full(w.shape(), magnitude);
        for i in smallest_magnitude_indices(w.data(), k) {
            nu.data_mut()[i] = -magnitude;
        }
        entries.insert(n.clone(), nu);
    }
    Ok(MaskParameters { entries })
}

/// Draws `μ_i ~ Bernoulli(σ(ν_i))` independently. Each tensor samples from a
/// child stream keyed by its name.
pub fn sample_mask(nu: &MaskParameters, rng: &RngStream) -> BinaryMask {
    let entries = nu
        .entries
        .iter()
        .map(|(n, t)| {
            let mut s = rng.derive(n);
            let data = t
                .data()
                .iter()
                .map(|&v| if s.uniform() < sigmoid(v) { 1.0 } else { 0.0 })
                .collect();
            (n.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        })
        .collect();
    BinaryMask { entries }
}

/// Deterministic mask `μ = 1[σ(ν) > 0.5]`.
pub fn threshold_mask(nu: &MaskParameters) -> BinaryMask {
    let entries = nu
        .entries
        .iter()
        .map(|(n, t)| (n.clone(), t.map(|v| if v > 0.0 { 1.0 } else { 0.0 })))
        .collect();
    BinaryMask { entries }
}

/// Backward rule through the Bernoulli sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SteVariant {
    /// `∂L/∂ν = ∂L/∂μ · σ(ν)(1 - σ(ν))`: sampler treated as identity, sigmoid kept.
    #[default]
    SigmoidDerivative,
    /// `∂L/∂ν = ∂L/∂μ`.
    Identity,
}

/// Maps an upstream gradient with respect to μ to a gradient with respect to ν.
pub fn straight_through_grad(upstream: &Tensor, nu: &Tensor, variant: SteVariant) -> Result<Tensor> {
    match variant {
        SteVariant::SigmoidDerivative => upstream.zip_map(nu, |g, v| {
            let s = sigmoid(v);
            g * s * (1.0 - s)
        }),
        SteVariant::Identity => {
            if upstream.shape() != nu.shape() {
                return Err(Error::shape("straight_through_grad", upstream.shape(), nu.shape()));
            }
            Ok(upstream.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tensor(values: &[f64]) -> (ParameterSet, MaskableSet) {
        let mut p = ParameterSet::new();
        p.insert("block1.attn.q.w", Tensor::vector(values));
        let m = MaskableSet::new(vec!["block1.attn.q.w".into()], &p).unwrap();
        (p, m)
    }

    #[test]
    fn init_marks_smallest_magnitudes() {
        let (p, m) = one_tensor(&[0.1, -0.05, 0.3, 0.02]);
        let nu = init_mask_params(&p, &m, 0.5, 5.0).unwrap();
        assert_eq!(nu.get("block1.attn.q.w").unwrap().data(), &[5.0, -5.0, 5.0, -5.0]);
        let nu0 = init_mask_params(&p, &m, 0.0, 5.0).unwrap();
        assert!(nu0.get("block1.attn.q.w").unwrap().data().iter().all(|&v| v == 5.0));
        assert!(init_mask_params(&p, &m, 1.0, 5.0).is_err());
        assert!(init_mask_params(&p, &m, -0.1, 5.0).is_err());
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let (p, m) = one_tensor(&[0.2, 0.1, -0.1, 0.1]);
        let nu = init_mask_params(&p, &m, 0.5, 5.0).unwrap();
        assert_eq!(nu.get("block1.attn.q.w").unwrap().data(), &[5.0, -5.0, -5.0, 5.0]);
    }

    #[test]
    fn expected_initial_sparsity() {
        // s·σ(5) + (1-s)·(1-σ(5)) at s = 0.3 is 0.302677
        let s5 = sigmoid(5.0);
        assert!((s5 - 0.993307).abs() < 1e-6);
        let values: Vec<f64> = (0..1000).map(|i| (i as f64 + 1.0) * 1e-3).collect();
        let (p, m) = one_tensor(&values);
        let nu = init_mask_params(&p, &m, 0.3, 5.0).unwrap();
        assert!((nu.expected_sparsity() - 0.302677).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_all_ones() {
        let nu = MaskParameters::new(vec![("w".into(), Tensor::full(&[64], 50.0))]).unwrap();
        let m = sample_mask(&nu, &RngStream::named(1, "m"));
        assert_eq!(m.num_zeros(), 0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let nu = MaskParameters::new(vec![("w".into(), Tensor::zeros(&[256]))]).unwrap();
        let r = RngStream::named(4, "mask");
        assert_eq!(sample_mask(&nu, &r), sample_mask(&nu, &r));
    }

    #[test]
    fn ste_values() {
        let one = Tensor::vector(&[1.0]);
        let g = straight_through_grad(&one, &Tensor::vector(&[0.0]), SteVariant::default()).unwrap();
        assert_eq!(g.data(), &[0.25]);
        let g5 = straight_through_grad(&one, &Tensor::vector(&[5.0]), SteVariant::default()).unwrap();
        let gm5 = straight_through_grad(&one, &Tensor::vector(&[-5.0]), SteVariant::default()).unwrap();
        assert!((g5.data()[0] - 0.006648).abs() < 1e-6);
        assert!((gm5.data()[0] - 0.006648).abs() < 1e-6);
        let z = straight_through_grad(&Tensor::vector(&[0.0]), &Tensor::vector(&[3.0]), SteVariant::default()).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let id = straight_through_grad(&Tensor::vector(&[0.7]), &Tensor::vector(&[3.0]), SteVariant::Identity).unwrap();
        assert_eq!(id.data(), &[0.7]);
    }

    #[test]
    fn threshold_is_sign_of_logit() {
        let nu = MaskParameters::new(vec![("w".into(), Tensor::vector(&[-1.0, 0.0, 2.0]))]).unwrap();
        assert_eq!(threshold_mask(&nu).get("w").unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
