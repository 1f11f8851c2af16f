//! Per-example forward/backward passes and their deterministic batch
//! reduction.

use crate::encoder::{bind_params, encode, encoder_graph, ModelConfig, ParameterSet, TaskHead};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::numerics::{Graph, RngStream, Tensor};
use crate::par::{map_indexed, ExecMode};
use crate::taskgen::{evaluate, Example, Metric, MetricValue};

/// Which leaves receive gradients.
pub(crate) struct GradRequest<'a> {
    pub param_grad: &'a (dyn Fn(&str) -> bool + Sync),
    pub mask_grad: bool,
}

/// Gradients of one example's loss (or their batch mean).
#[derive(Clone, Debug, Default)]
pub(crate) struct Grads {
    pub loss: f64,
    pub params: Vec<(String, Tensor)>,
    pub mask: Vec<(String, Tensor)>,
    pub head_weight: Option<Tensor>,
    pub head_bias: Option<Tensor>,
}

fn add_named(acc: &mut Vec<(String, Tensor)>, g: Vec<(String, Tensor)>) -> Result<()> {
    if acc.is_empty() {
        *acc = g;
        return Ok(());
    }
    for ((an, at), (gn, gt)) in acc.iter_mut().zip(g) {
        debug_assert_eq!(*an, gn);
        at.add_assign(&gt)?;
    }
    Ok(())
}

fn add_opt(acc: &mut Option<Tensor>, g: Option<Tensor>) -> Result<()> {
    match (acc.as_mut(), g) {
        (Some(a), Some(g)) => a.add_assign(&g),
        (None, g) => {
            *acc = g;
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Mean of per-example gradients, summed in index order so the result does
/// not depend on how the examples were scheduled.
pub(crate) fn mean_grads(parts: Vec<Grads>) -> Result<Grads> {
    let n = parts.len() as f64;
    let mut acc = Grads::default();
    for g in parts {
        acc.loss += g.loss;
        add_named(&mut acc.params, g.params)?;
        add_named(&mut acc.mask, g.mask)?;
        add_opt(&mut acc.head_weight, g.head_weight)?;
        add_opt(&mut acc.head_bias, g.head_bias)?;
    }
    let s = 1.0 / n;
    acc.loss *= s;
    for (_, t) in acc.params.iter_mut().chain(acc.mask.iter_mut()) {
        t.scale_in_place(s);
    }
    for t in [acc.head_weight.as_mut(), acc.head_bias.as_mut()].into_iter().flatten() {
        t.scale_in_place(s);
    }
    Ok(acc)
}

/// Cross-entropy of one classification example and the requested gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn classification_grads(
    config: &ModelConfig,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    head: &TaskHead,
    example: &Example,
    dropout: Option<&mut RngStream>,
    req: &GradRequest<'_>,
) -> Result<Grads> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, mask, req.param_grad, req.mask_grad)?;
    let enc = encoder_graph(&mut g, config, &bound, &example.tokens, dropout)?;
    let w = g.leaf(head.weight.clone(), true)?;
    let b = g.leaf(head.bias.clone(), true)?;
    let z = g.matmul(enc.pooled, w)?;
    let logits = g.add_row(z, b)?;
    let loss = g.cross_entropy(logits, &[example.label])?;
    let mut grads = g.backward(loss)?;
    let collect = |ids: &indexmap::IndexMap<String, crate::numerics::NodeId>,
                   want: &dyn Fn(&str) -> bool,
                   grads: &mut crate::numerics::Gradients| {
        ids.iter()
            .filter(|(n, _)| want(n))
            .map(|(n, &id)| (n.clone(), grads.take(id)))
            .collect::<Vec<_>>()
    };
    let params_g = collect(&bound.leaves, req.param_grad, &mut grads);
    let mask_g = if req.mask_grad {
        collect(&bound.mask_leaves, &|_| true, &mut grads)
    } else {
        Vec::new()
    };
    Ok(Grads {
        loss: g.value(loss).data()[0],
        params: params_g,
        mask: mask_g,
        head_weight: Some(grads.take(w)),
        head_bias: Some(grads.take(b)),
    })
}

/// Eval-mode class prediction.
pub fn predict(
    config: &ModelConfig,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    head: &TaskHead,
    tokens: &[usize],
) -> Result<usize> {
    let mut unused = RngStream::named(0, "eval");
    let pooled = encode(params, config, mask, tokens, &mut unused, false)?;
    head.predict(&pooled)
}

/// Predictions for every example, computed in parallel when allowed.
pub fn predict_all(
    config: &ModelConfig,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    head: &TaskHead,
    examples: &[Example],
    exec: ExecMode,
) -> Result<Vec<usize>> {
    map_indexed(exec, examples.len(), |i| {
        predict(config, params, mask, head, &examples[i].tokens)
    })
}

pub fn evaluate_examples(
    config: &ModelConfig,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    head: &TaskHead,
    examples: &[Example],
    metric: Metric,
    exec: ExecMode,
) -> Result<MetricValue> {
    let preds = predict_all(config, params, mask, head, examples, exec)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    evaluate(&preds, &labels, metric)
}

/// Maps non-finite failures inside a training step to a divergence error.
pub(crate) fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged {
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Deterministic epoch-shuffled index stream over `n` items.
pub(crate) struct BatchSampler {
    n: usize,
    rng: RngStream,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, rng: RngStream) -> Self {
        BatchSampler {
            n,
            rng,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.rng.derive_index("epoch", self.epoch).shuffle(&mut self.order);
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
