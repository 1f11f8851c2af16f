use crate::error::{Error, Result};
use crate::masking::{magnitude_prune_tensor, BinaryMask};
use crate::encoder::ParameterSet;
use crate::numerics::RngStream;

/// Which entries of the masks an overlap is computed over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OverlapScope {
    Global,
    Tensor(String),
}

/// Row-normalised zero-set overlaps between task masks.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapGrid {
    pub tasks: Vec<String>,
    /// `values[a][b]`: fraction of A's zeros that are also zero in B;
    /// `None` when A has no zeros.
    pub values: Vec<Vec<Option<f64>>>,
    /// `chance[a][b] = sparsity(B)`, the expected overlap of independent masks.
    pub chance: Vec<Vec<f64>>,
    /// Same grid for independent uniformly random masks at matched sparsities.
    pub random_reference: Vec<Vec<Option<f64>>>,
    /// Zero count of each mask within the scope.
    pub zeros: Vec<usize>,
    /// Number of entries within the scope.
    pub size: usize,
}

impl OverlapGrid {
    /// Binomial standard deviation of `values[a][b]` under independence.
    pub fn chance_std(&self, a: usize, b: usize) -> Option<f64> {
        let n = self.zeros[a];
        let p = self.chance[a][b];
        (n > 0).then(|| (p * (1.0 - p) / n as f64).sqrt())
    }
}

fn scoped(mask: &BinaryMask, scope: &OverlapScope) -> Result<Vec<bool>> {
    match scope {
        OverlapScope::Global => Ok(mask
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|&v| v == 0.0))
            .collect()),
        OverlapScope::Tensor(n) => Ok(mask
            .get(n)
            .ok_or_else(|| Error::UnknownTensor(n.clone()))?
            .data()
            .iter()
            .map(|&v| v == 0.0)
            .collect()),
    }
}

fn overlap(za: &[bool], zb: &[bool]) -> Option<f64> {
    let na = za.iter().filter(|&&z| z).count();
    let both = za.iter().zip(zb).filter(|(&a, &b)| a && b).count();
    (na > 0).then(|| both as f64 / na as f64)
}

fn grid(zs: &[Vec<bool>]) -> Vec<Vec<Option<f64>>> {
    zs.iter()
        .map(|a| zs.iter().map(|b| overlap(a, b)).collect())
        .collect()
}

/// Zero-set overlap grid for named masks, with chance levels and a random
/// reference grid drawn from `rng` at each mask's exact zero count.
pub fn mask_overlap(
    masks: &[(String, BinaryMask)],
    scope: &OverlapScope,
    rng: &RngStream,
) -> Result<OverlapGrid> {
    if masks.is_empty() {
        return Err(Error::Config("overlap needs at least one mask".into()));
    }
    let zs: Vec<Vec<bool>> = masks.iter().map(|(_, m)| scoped(m, scope)).collect::<Result<_>>()?;
    let size = zs[0].len();
    if zs.iter().any(|z| z.len() != size) {
        return Err(Error::shape("mask_overlap", &[size], &[zs.iter().map(Vec::len).max().unwrap()]));
    }
    let zeros: Vec<usize> = zs.iter().map(|z| z.iter().filter(|&&v| v).count()).collect();
    let sparsity: Vec<f64> = zeros.iter().map(|&z| z as f64 / size as f64).collect();
    let random: Vec<Vec<bool>> = zeros
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let mut r = rng.derive_index("overlap.random", i as u64);
            let mut v: Vec<bool> = (0..size).map(|j| j < z).collect();
            r.shuffle(&mut v);
            v
        })
        .collect();
    Ok(OverlapGrid {
        tasks: masks.iter().map(|(n, _)| n.clone()).collect(),
        values: grid(&zs),
        chance: (0..masks.len()).map(|_| sparsity.clone()).collect(),
        random_reference: grid(&random),
        zeros,
        size,
    })
}

/// Magnitudes of pre-trained weights removed by a mask, against magnitude
/// pruning at the same per-tensor zero counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeStats {
    pub sparsity: f64,
    pub mask_max: f64,
    pub mask_mean: f64,
    pub pruned_max: f64,
    pub pruned_mean: f64,
    /// Fraction of the mask's zeros that magnitude pruning also removes.
    pub overlap: f64,
}

pub fn pruned_magnitude_stats(pretrained: &ParameterSet, mask: &BinaryMask) -> Result<MagnitudeStats> {
    mask.check_congruent(pretrained)?;
    let (mut m_vals, mut p_vals) = (Vec::new(), Vec::new());
    let (mut both, mut total) = (0usize, 0usize);
    for (name, mu) in mask.iter() {
        let w = pretrained.get(name)?;
        let zeros = mu.data().iter().filter(|&&v| v == 0.0).count();
        total += mu.len();
        if zeros == 0 {
            continue;
        }
        // Exactly `zeros` entries: floor((zeros + 0.5) / size · size) = zeros.
        let target = (zeros as f64 + 0.5) / w.len() as f64;
        let pm = magnitude_prune_tensor(w, target)?;
        for ((&x, &a), &b) in w.data().iter().zip(mu.data()).zip(pm.data()) {
            if a == 0.0 {
                m_vals.push(x.abs());
                if b == 0.0 {
                    both += 1;
                }
            }
            if b == 0.0 {
                p_vals.push(x.abs());
            }
        }
    }
    if m_vals.is_empty() {
        return Err(Error::Undefined("mask has no zeros; magnitude statistics undefined".into()));
    }
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MagnitudeStats {
        sparsity: m_vals.len() as f64 / total as f64,
        mask_max: max(&m_vals),
        mask_mean: mean(&m_vals),
        pruned_max: max(&p_vals),
        pruned_mean: mean(&p_vals),
        overlap: both as f64 / m_vals.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn mask(v: &[f64]) -> BinaryMask {
        BinaryMask::new(vec![("w".into(), Tensor::vector(v))]).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask(&[0.0, 1.0, 0.0, 1.0]);
        let b = mask(&[1.0, 0.0, 1.0, 0.0]);
        let g = mask_overlap(
            &[("a".into(), a.clone()), ("a2".into(), a), ("b".into(), b)],
            &OverlapScope::Global,
            &RngStream::named(0, "o"),
        )
        .unwrap();
        assert_eq!(g.values[0][1], Some(1.0));
        assert_eq!(g.values[0][0], Some(1.0));
        assert_eq!(g.values[0][2], Some(0.0));
        assert_eq!(g.chance[0][2], 0.5);
    }

    #[test]
    fn empty_zero_set_is_undefined() {
        let g = mask_overlap(
            &[("ones".into(), mask(&[1.0, 1.0])), ("z".into(), mask(&[0.0, 1.0]))],
            &OverlapScope::Tensor("w".into()),
            &RngStream::named(0, "o"),
        )
        .unwrap();
        assert_eq!(g.values[0][1], None);
        assert_eq!(g.values[1][0], Some(0.0));
    }

    #[test]
    fn magnitude_hand_case() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(&[0.01, 1.0, 0.02, 2.0]));
        let s = pruned_magnitude_stats(&p, &mask(&[1.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(s.sparsity, 0.25);
        assert_eq!(s.mask_mean, 1.0);
        assert_eq!(s.pruned_mean, 0.01);
        assert_eq!(s.overlap, 0.0);
        let same = pruned_magnitude_stats(&p, &mask(&[0.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(same.overlap, 1.0);
        assert_eq!(same.mask_mean, same.pruned_mean);
        assert!(pruned_magnitude_stats(&p, &mask(&[1.0; 4])).is_err());
    }
}
