use crate::encoder::{block_matrix_name, ModelConfig, ParameterSet, BLOCK_MATRIX_ROLES};
use crate::error::{Error, Result};

/// Sum of absolute differences.
pub fn l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("l1_distance", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// `arccos(cos∠(a, b)) / π`, in `[0, 1]`.
///
/// Evaluated as `2·atan2(‖â - b̂‖, ‖â + b̂‖)` on the unit vectors, which equals
/// the clamped arccos but stays accurate for nearly parallel vectors, where
/// the cosine rounds to 1 and arccos loses all precision.
pub fn angular_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("angular_distance", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("angular distance of a zero vector".into()));
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()) / std::f64::consts::PI)
}

/// Distances restricted to one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorDistance {
    pub name: String,
    pub size: usize,
    /// `Σ|aᵢ - bᵢ|`.
    pub l1: f64,
    /// `l1 / size`.
    pub l1_mean: f64,
    /// `None` when either side is the zero vector.
    pub angular: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceReport {
    pub per_tensor: Vec<TensorDistance>,
    pub global_l1: f64,
    pub global_l1_mean: f64,
    /// Angular distance between the concatenations over all names.
    pub global_angular: f64,
}

fn tensor_distance(name: &str, a: &[f64], b: &[f64]) -> Result<TensorDistance> {
    let d = l1(a, b)?;
    let angular = match angular_distance(a, b) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TensorDistance {
        name: name.to_string(),
        size: a.len(),
        l1: d,
        l1_mean: d / a.len() as f64,
        angular,
    })
}

fn congruent<'a>(a: &'a ParameterSet, b: &'a ParameterSet, name: &str) -> Result<(&'a [f64], &'a [f64])> {
    let (ta, tb) = (a.get(name)?, b.get(name)?);
    if ta.shape() != tb.shape() {
        return Err(Error::shape("distance", ta.shape(), tb.shape()));
    }
    Ok((ta.data(), tb.data()))
}

/// Per-tensor and global L1 and angular distances over `names`.
pub fn distance_report<S: AsRef<str>>(
    a: &ParameterSet,
    b: &ParameterSet,
    names: &[S],
) -> Result<DistanceReport> {
    let mut per_tensor = Vec::with_capacity(names.len());
    for n in names {
        let (x, y) = congruent(a, b, n.as_ref())?;
        per_tensor.push(tensor_distance(n.as_ref(), x, y)?);
    }
    let global_l1: f64 = per_tensor.iter().map(|t| t.l1).sum();
    let size: usize = per_tensor.iter().map(|t| t.size).sum();
    let global_angular = angular_distance(&a.flatten_subset(names)?, &b.flatten_subset(names)?)?;
    Ok(DistanceReport {
        per_tensor,
        global_l1,
        global_l1_mean: global_l1 / size.max(1) as f64,
        global_angular,
    })
}

/// [`distance_report`] over every tensor of `a`.
pub fn full_distance_report(a: &ParameterSet, b: &ParameterSet) -> Result<DistanceReport> {
    let names: Vec<String> = a.names().map(str::to_string).collect();
    distance_report(a, b, &names)
}

/// One row of the per-layer closeness table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCloseness {
    pub block: usize,
    /// One of `q, k, v, d, in, out`.
    pub role: &'static str,
    pub l1: f64,
    pub l1_mean: f64,
    pub angular: Option<f64>,
}

/// Distances for the six weight matrices of every block.
pub fn per_layer_closeness(
    pretrained: &ParameterSet,
    tuned: &ParameterSet,
    config: &ModelConfig,
) -> Result<Vec<LayerCloseness>> {
    let mut rows = Vec::new();
    for block in 1..=config.num_blocks {
        for role in BLOCK_MATRIX_ROLES {
            let name = block_matrix_name(block, role);
            let (a, b) = congruent(pretrained, tuned, &name)?;
            let d = tensor_distance(&name, a, b)?;
            rows.push(LayerCloseness {
                block,
                role,
                l1: d.l1,
                l1_mean: d.l1_mean,
                angular: d.angular,
            });
        }
    }
    Ok(rows)
}
