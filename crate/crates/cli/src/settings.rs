//! Flat `key=value` configuration shared by every command.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ftune::encoder::ModelConfig;
use ftune::masking::SteVariant;
use ftune::par::ExecMode;
use ftune::taskgen::CorpusSpec;
use ftune::trainers::{MaskMode, OptimizerConfig, RunOptions};

/// Keys a configuration file may set, with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("num_blocks", "encoder blocks L"),
    ("hidden_size", "hidden width H"),
    ("num_heads", "attention heads"),
    ("intermediate_size", "feed-forward width I"),
    ("vocab_size", "vocabulary size V"),
    ("max_seq_len", "maximum sequence length S"),
    ("dropout_rate", "dropout probability during training"),
    ("layernorm_eps", "layer-norm epsilon"),
    ("weight_lr", "peak learning rate for weights and heads"),
    ("mask_lr", "peak learning rate for mask logits"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam epsilon"),
    ("warmup_fraction", "fraction of steps spent in linear warmup"),
    ("steps", "optimizer updates"),
    ("batch_size", "examples per update"),
    ("checkpoint_every", "steps between checkpoint evaluations (0: final only)"),
    ("checkpoint_eval_limit", "eval examples at intermediate checkpoints (0: all)"),
    ("eval_samples", "mask samples averaged for the final metric"),
    ("metric", "accuracy | f1 | matthews"),
    ("dropout", "true | false: apply dropout while training"),
    ("ste", "sigmoid | identity straight-through rule"),
    ("mask_mode", "sampled | threshold"),
    ("include_embedding", "true | false: mask and prune the word embedding"),
    ("logit_magnitude", "initial |ν| for supermask logits"),
    ("prune_every", "steps between magnitude-pruning events"),
    ("exec", "parallel | sequential batch execution"),
    ("corpus_min_len", "shortest corpus sequence, including CLS"),
    ("corpus_max_len", "longest corpus sequence, including CLS"),
    ("corpus_dominant_prob", "probability of the dominant next class"),
    ("corpus_follow_prob", "probability a member follows its predecessor"),
    ("corpus_chain_seed", "seed of the Markov transition structure"),
];

/// Parsed configuration; unset keys fall back to per-command defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| anyhow::anyhow!("config key {key}: cannot parse `{v}`: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("config key {key}: expected true or false, got `{v}`"),
    }
}

impl Settings {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected key=value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                bail!("config line {}: unknown key `{k}`", i + 1);
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                bail!("config line {}: duplicate key `{k}`", i + 1);
            }
        }
        let s = Settings { values };
        s.model()?;
        s.optimizer(OptimizerConfig::default())?;
        s.run_options(0)?;
        s.corpus_spec()?;
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse_str(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    /// Overrides one key, as a command-line flag does.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            Some(v) => parse(key, v),
            None => Ok(default),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key) {
            Some(v) => parse_bool(key, v),
            None => Ok(default),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let c = ModelConfig {
            num_blocks: self.get("num_blocks", d.num_blocks)?,
            hidden_size: self.get("hidden_size", d.hidden_size)?,
            num_heads: self.get("num_heads", d.num_heads)?,
            intermediate_size: self.get("intermediate_size", d.intermediate_size)?,
            vocab_size: self.get("vocab_size", d.vocab_size)?,
            max_seq_len: self.get("max_seq_len", d.max_seq_len)?,
            dropout_rate: self.get("dropout_rate", d.dropout_rate)?,
            layernorm_eps: self.get("layernorm_eps", d.layernorm_eps)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Optimizer settings over `base` (fine-tuning or pre-training defaults).
    pub fn optimizer(&self, base: OptimizerConfig) -> Result<OptimizerConfig> {
        let c = OptimizerConfig {
            weight_lr: self.get("weight_lr", base.weight_lr)?,
            mask_lr: self.get("mask_lr", base.mask_lr)?,
            beta1: self.get("beta1", base.beta1)?,
            beta2: self.get("beta2", base.beta2)?,
            eps: self.get("eps", base.eps)?,
            warmup_fraction: self.get("warmup_fraction", base.warmup_fraction)?,
            total_steps: self.get("steps", base.total_steps)?,
            batch_size: self.get("batch_size", base.batch_size)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn exec(&self) -> Result<ExecMode> {
        match self.values.get("exec").map(String::as_str) {
            None | Some("parallel") => Ok(ExecMode::Parallel),
            Some("sequential") => Ok(ExecMode::Sequential),
            Some(v) => bail!("config key exec: expected parallel or sequential, got `{v}`"),
        }
    }

    pub fn run_options(&self, seed: u64) -> Result<RunOptions> {
        let d = RunOptions::default();
        let ste = match self.values.get("ste").map(String::as_str) {
            None | Some("sigmoid") => SteVariant::SigmoidDerivative,
            Some("identity") => SteVariant::Identity,
            Some(v) => bail!("config key ste: expected sigmoid or identity, got `{v}`"),
        };
        let mask_mode = match self.values.get("mask_mode").map(String::as_str) {
            None | Some("sampled") => MaskMode::Sampled,
            Some("threshold") => MaskMode::Threshold,
            Some(v) => bail!("config key mask_mode: expected sampled or threshold, got `{v}`"),
        };
        let limit: usize = self.get("checkpoint_eval_limit", d.checkpoint_eval_limit.unwrap_or(0))?;
        Ok(RunOptions {
            seed,
            exec: self.exec()?,
            checkpoint_every: self.get("checkpoint_every", d.checkpoint_every)?,
            checkpoint_eval_limit: (limit > 0).then_some(limit),
            checkpoint_eval_samples: d.checkpoint_eval_samples,
            final_eval_samples: self.get("eval_samples", d.final_eval_samples)?,
            metric: self.get("metric", d.metric)?,
            dropout: self.get_bool("dropout", d.dropout)?,
            ste,
            mask_mode,
            include_embedding: self.get_bool("include_embedding", d.include_embedding)?,
            logit_magnitude: self.get("logit_magnitude", d.logit_magnitude)?,
        })
    }

    pub fn prune_every(&self) -> Result<usize> {
        self.get("prune_every", 10)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        let d = CorpusSpec::default();
        let s = CorpusSpec {
            vocab_size: self.get("vocab_size", d.vocab_size)?,
            min_len: self.get("corpus_min_len", d.min_len)?,
            max_len: self.get("corpus_max_len", d.max_len)?,
            dominant_prob: self.get("corpus_dominant_prob", d.dominant_prob)?,
            follow_prob: self.get("corpus_follow_prob", d.follow_prob)?,
            chain_seed: self.get("corpus_chain_seed", d.chain_seed)?,
            ..d
        };
        s.validate()?;
        Ok(s)
    }

    /// Every key with the value in effect, for manifests.
    pub fn resolved(&self, opt_base: OptimizerConfig, seed: u64) -> Result<Vec<(String, String)>> {
        let m = self.model()?;
        let o = self.optimizer(opt_base)?;
        let r = self.run_options(seed)?;
        let c = self.corpus_spec()?;
        let mut out = vec![
            ("num_blocks", m.num_blocks.to_string()),
            ("hidden_size", m.hidden_size.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("intermediate_size", m.intermediate_size.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("dropout_rate", m.dropout_rate.to_string()),
            ("layernorm_eps", m.layernorm_eps.to_string()),
            ("weight_lr", o.weight_lr.to_string()),
            ("mask_lr", o.mask_lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("eps", o.eps.to_string()),
            ("warmup_fraction", o.warmup_fraction.to_string()),
            ("steps", o.total_steps.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("checkpoint_every", r.checkpoint_every.to_string()),
            ("checkpoint_eval_limit", r.checkpoint_eval_limit.unwrap_or(0).to_string()),
            ("eval_samples", r.final_eval_samples.to_string()),
            ("metric", format!("{:?}", r.metric).to_lowercase()),
            ("dropout", r.dropout.to_string()),
            ("ste", match r.ste {
                SteVariant::SigmoidDerivative => "sigmoid",
                SteVariant::Identity => "identity",
            }.to_string()),
            ("mask_mode", match r.mask_mode {
                MaskMode::Sampled => "sampled",
                MaskMode::Threshold => "threshold",
            }.to_string()),
            ("include_embedding", r.include_embedding.to_string()),
            ("logit_magnitude", r.logit_magnitude.to_string()),
            ("prune_every", self.prune_every()?.to_string()),
            ("exec", match r.exec {
                ExecMode::Parallel => "parallel",
                ExecMode::Sequential => "sequential",
            }.to_string()),
            ("corpus_min_len", c.min_len.to_string()),
            ("corpus_max_len", c.max_len.to_string()),
            ("corpus_dominant_prob", c.dominant_prob.to_string()),
            ("corpus_follow_prob", c.follow_prob.to_string()),
            ("corpus_chain_seed", c.chain_seed.to_string()),
        ];
        Ok(out.drain(..).map(|(k, v)| (k.to_string(), v)).collect())
    }
}
