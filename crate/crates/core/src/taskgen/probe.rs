use nalgebra::{DMatrix, DVector};

use super::tasks::{Example, Task};
use crate::encoder::{encode, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, RngStream};

/// L2-regularised logistic regression fitted by Newton's method (IRLS).
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    /// Feature weights followed by the (unregularised) bias.
    pub weights: Vec<f64>,
}

impl LogisticRegression {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], ridge: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::shape("logistic regression", &[n], &[labels.len()]));
        }
        let d = features[0].len() + 1;
        let x = DMatrix::from_fn(n, d, |i, j| if j + 1 == d { 1.0 } else { features[i][j] });
        let y = DVector::from_iterator(n, labels.iter().map(|&l| l as f64));
        let mut w = DVector::zeros(d);
        let mut reg = DMatrix::identity(d, d) * ridge;
        reg[(d - 1, d - 1)] = 0.0;
        for _ in 0..100 {
            let z = &x * &w;
            let p = z.map(sigmoid);
            let s = p.map(|v| (v * (1.0 - v)).max(1e-10));
            let grad = x.transpose() * (&p - &y) + &reg * &w;
            let mut xs = x.clone();
            for (i, mut row) in xs.row_iter_mut().enumerate() {
                row *= s[i];
            }
            let hess = x.transpose() * xs + &reg;
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Undefined("logistic Hessian not positive definite".into()))?
                .solve(&grad);
            w -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logistic regression"));
        }
        Ok(LogisticRegression {
            weights: w.iter().copied().collect(),
        })
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let d = self.weights.len() - 1;
        let z: f64 = features.iter().zip(&self.weights[..d]).map(|(a, b)| a * b).sum::<f64>()
            + self.weights[d];
        usize::from(z > 0.0)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Train and eval accuracies of a probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Ridge strength used by both probes.
pub const PROBE_RIDGE: f64 = 1e-3;

fn probe(train: (&[Vec<f64>], Vec<usize>), eval: (&[Vec<f64>], Vec<usize>)) -> Result<ProbeResult> {
    let lr = LogisticRegression::fit(train.0, &train.1, PROBE_RIDGE)?;
    Ok(ProbeResult {
        train_accuracy: lr.accuracy(train.0, &train.1),
        eval_accuracy: lr.accuracy(eval.0, &eval.1),
    })
}

fn labels(examples: &[Example]) -> Vec<usize> {
    examples.iter().map(|e| e.label).collect()
}

/// Token-count features.
pub fn bag_of_tokens(tokens: &[usize], vocab_size: usize) -> Vec<f64> {
    let mut f = vec![0.0; vocab_size];
    for &t in tokens {
        f[t] += 1.0;
    }
    f
}

/// Logistic regression on token counts: the lower-bound baseline any
/// contextual model should match on bag-separable tasks.
pub fn bag_of_tokens_baseline(task: &Task, vocab_size: usize) -> Result<ProbeResult> {
    let feats = |ex: &[Example]| -> Vec<Vec<f64>> {
        ex.iter().map(|e| bag_of_tokens(&e.tokens, vocab_size)).collect()
    };
    let (tr, ev) = (feats(&task.train), feats(&task.eval));
    probe((&tr, labels(&task.train)), (&ev, labels(&task.eval)))
}

/// Pooled eval-mode encoder outputs for every example.
pub fn pooled_features(
    params: &ParameterSet,
    config: &ModelConfig,
    examples: &[Example],
) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngStream::named(0, "probe.unused");
    examples
        .iter()
        .map(|e| Ok(encode(params, config, None, &e.tokens, &mut rng, false)?.into_data()))
        .collect()
}

/// Logistic regression on frozen pooled features of `params`: the best a
/// task head can do without changing the encoder.
pub fn linear_probe(params: &ParameterSet, config: &ModelConfig, task: &Task) -> Result<ProbeResult> {
    let tr = pooled_features(params, config, &task.train)?;
    let ev = pooled_features(params, config, &task.eval)?;
    probe((&tr, labels(&task.train)), (&ev, labels(&task.eval)))
}

/// Validity evidence emitted alongside a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCertificate {
    pub label_imbalance: f64,
    pub split_overlap: usize,
    pub majority_rate: f64,
    pub bag_of_tokens: ProbeResult,
    /// Present when certified against a pre-trained encoder.
    pub frozen_probe: Option<ProbeResult>,
}

impl TaskCertificate {
    /// Labels balanced within 2% and splits disjoint.
    pub fn is_valid(&self) -> bool {
        self.label_imbalance <= 0.02 && self.split_overlap == 0
    }

    /// A linear head on frozen features stays below 0.6 eval accuracy.
    pub fn is_head_inseparable(&self) -> bool {
        self.frozen_probe.is_some_and(|p| p.eval_accuracy < 0.6)
    }
}

pub fn certify_task(
    task: &Task,
    vocab_size: usize,
    frozen: Option<(&ParameterSet, &ModelConfig)>,
) -> Result<TaskCertificate> {
    Ok(TaskCertificate {
        label_imbalance: task.label_imbalance(),
        split_overlap: task.split_overlap(),
        majority_rate: task.majority_rate(),
        bag_of_tokens: bag_of_tokens_baseline(task, vocab_size)?,
        frozen_probe: frozen.map(|(p, c)| linear_probe(p, c, task)).transpose()?,
    })
}
