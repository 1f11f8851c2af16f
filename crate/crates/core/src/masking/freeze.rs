use std::collections::BTreeSet;
use std::str::FromStr;

use crate::encoder::{ModelConfig, ParameterSet};
use crate::error::{Error, Result};

/// Named groups of tensors excluded from fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FreezePreset {
    /// `attn.k.w` and `attn.k.b` of every block.
    KeyProjections,
    /// Every tensor of blocks `L-1` and `L`.
    DeepestBlocks,
    /// `embed.word`.
    WordEmbedding,
}

impl FreezePreset {
    pub fn tensor_names(self, config: &ModelConfig) -> Vec<String> {
        let l = config.num_blocks;
        match self {
            FreezePreset::KeyProjections => (1..=l)
                .flat_map(|b| [format!("block{b}.attn.k.w"), format!("block{b}.attn.k.b")])
                .collect(),
            FreezePreset::DeepestBlocks => {
                let first = l.saturating_sub(1).max(1);
                crate::encoder::canonical_layout(config)
                    .into_iter()
                    .map(|(n, _)| n)
                    .filter(|n| {
                        (first..=l).any(|b| n.starts_with(&format!("block{b}.")))
                    })
                    .collect()
            }
            FreezePreset::WordEmbedding => vec!["embed.word".to_string()],
        }
    }
}

impl FromStr for FreezePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" | "keys" => Ok(FreezePreset::KeyProjections),
            "deepest2" | "deepest" => Ok(FreezePreset::DeepestBlocks),
            "embed" | "embedding" => Ok(FreezePreset::WordEmbedding),
            other => Err(Error::Config(format!("unknown freeze preset `{other}`"))),
        }
    }
}

/// Tensors whose gradients are forced to zero during fine-tuning.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeSpec {
    excluded: BTreeSet<String>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = String>>(names: I, params: &ParameterSet) -> Result<Self> {
        let excluded: BTreeSet<String> = names.into_iter().collect();
        if let Some(n) = excluded.iter().find(|n| !params.contains(n)) {
            return Err(Error::UnknownTensor(n.clone()));
        }
        Ok(FreezeSpec { excluded })
    }

    pub fn from_presets(presets: &[FreezePreset], config: &ModelConfig) -> Self {
        FreezeSpec {
            excluded: presets
                .iter()
                .flat_map(|p| p.tensor_names(config))
                .collect(),
        }
    }

    /// Every encoder tensor; only the task head remains trainable.
    pub fn all_encoder(config: &ModelConfig) -> Self {
        FreezeSpec {
            excluded: crate::encoder::canonical_layout(config)
                .into_iter()
                .map(|(n, _)| n)
                .collect(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.excluded.contains(name)
    }

    pub fn excluded(&self) -> impl Iterator<Item = &str> {
        self.excluded.iter().map(String::as_str)
    }

    pub fn num_excluded_tensors(&self) -> usize {
        self.excluded.len()
    }

    /// Scalar count of frozen encoder parameters.
    pub fn excluded_count(&self, params: &ParameterSet) -> Result<usize> {
        self.excluded.iter().map(|n| params.get(n).map(|t| t.len())).sum()
    }

    /// `N - excluded`, the encoder parameters left to fine-tune.
    pub fn trainable_count(&self, params: &ParameterSet) -> Result<usize> {
        Ok(params.num_params() - self.excluded_count(params)?)
    }

    /// Checks that every excluded name exists in `params`.
    pub fn validate(&self, params: &ParameterSet) -> Result<()> {
        match self.excluded.iter().find(|n| !params.contains(n)) {
            Some(n) => Err(Error::UnknownTensor(n.clone())),
            None => Ok(()),
        }
    }
}
