use indexmap::IndexMap;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Roles of the six weight matrices inside a block, in canonical order.
pub const BLOCK_MATRIX_ROLES: [&str; 6] = ["q", "k", "v", "d", "in", "out"];

pub fn block_matrix_name(block: usize, role: &str) -> String {
    match role {
        "q" | "k" | "v" | "d" => format!("block{block}.attn.{role}.w"),
        "in" | "out" => format!("block{block}.ff.{role}.w"),
        _ => panic!("unknown block role {role}"),
    }
}

/// Canonical tensor names and shapes for `config`, in flattening order.
pub fn canonical_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, i, v, s) = (
        config.hidden_size,
        config.intermediate_size,
        config.vocab_size,
        config.max_seq_len,
    );
    let mut out = vec![
        ("embed.word".to_string(), vec![v, h]),
        ("embed.pos".to_string(), vec![s, h]),
        ("embed.ln.gain".to_string(), vec![h]),
        ("embed.ln.bias".to_string(), vec![h]),
    ];
    for b in 1..=config.num_blocks {
        for role in ["q", "k", "v", "d"] {
            out.push((format!("block{b}.attn.{role}.w"), vec![h, h]));
            out.push((format!("block{b}.attn.{role}.b"), vec![h]));
        }
        out.push((format!("block{b}.ff.in.w"), vec![h, i]));
        out.push((format!("block{b}.ff.in.b"), vec![i]));
        out.push((format!("block{b}.ff.out.w"), vec![i, h]));
        out.push((format!("block{b}.ff.out.b"), vec![h]));
        for ln in ["ln1", "ln2"] {
            out.push((format!("block{b}.{ln}.gain"), vec![h]));
            out.push((format!("block{b}.{ln}.bias"), vec![h]));
        }
    }
    out.push(("pool.w".to_string(), vec![h, h]));
    out.push(("pool.b".to_string(), vec![h]));
    out
}

/// Tensor kinds that determine initialisation.
pub fn is_weight_matrix(name: &str) -> bool {
    name.ends_with(".w") || name == "embed.word" || name == "embed.pos"
}

pub fn is_layernorm_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

/// Distribution for weight-matrix initialisation at scale `c = 1/√H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on `[-c, c]`.
    Uniform,
    /// Normal with standard deviation `c/2`, so ±c spans two standard deviations.
    Normal,
}

impl InitScheme {
    pub fn sample(self, scale: f64, rng: &mut RngStream) -> f64 {
        match self {
            InitScheme::Uniform => rng.uniform_range(-scale, scale),
            InitScheme::Normal => 0.5 * scale * rng.normal(),
        }
    }

    pub fn fill(self, shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.sample(scale, rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape from layout")
    }
}

/// Ordered named tensors of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            entries: IndexMap::new(),
        }
    }

    /// Builds a set from `(name, tensor)` pairs, checking them against the
    /// layout `config` demands.
    pub fn from_entries(config: &ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = canonical_layout(config);
        if layout.len() != entries.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                layout.len(),
                entries.len()
            )));
        }
        let mut map: IndexMap<String, Tensor> = entries.into_iter().collect();
        let mut ordered = IndexMap::new();
        for (name, shape) in layout {
            let t = map
                .swap_remove(&name)
                .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "parameter layout",
                    left: t.shape().to_vec(),
                    right: shape,
                });
            }
            ordered.insert(name, t);
        }
        Ok(ParameterSet { entries: ordered })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters, N.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Concatenation of all tensors in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Flattening restricted to `names`, in the given order.
    pub fn flatten_subset<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for n in names {
            out.extend_from_slice(self.get(n.as_ref())?.data());
        }
        Ok(out)
    }

    /// FNV-1a over the bit patterns of every value, in canonical order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = canonical_layout(config);
        if layout.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config expects {}",
                self.entries.len(),
                layout.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(&self.entries) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {n} {:?} does not match layout {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Fresh encoder parameters: weight matrices and embeddings drawn at scale
/// `1/√H`, biases zero, layer-norm gains one. Each tensor draws from its own
/// child stream keyed by name.
pub fn init_model(config: &ModelConfig, scheme: InitScheme, rng: &RngStream) -> Result<ParameterSet> {
    config.validate()?;
    let scale = 1.0 / (config.hidden_size as f64).sqrt();
    let mut set = ParameterSet::new();
    for (name, shape) in canonical_layout(config) {
        let t = if is_weight_matrix(&name) {
            let mut s = rng.derive(&name);
            scheme.fill(&shape, scale, &mut s)
        } else if is_layernorm_gain(&name) {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        set.insert(name, t);
    }
    Ok(set)
}
