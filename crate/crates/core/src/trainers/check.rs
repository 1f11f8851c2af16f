//! Finite-difference verification of the full fine-tuning loss: every
//! encoder tensor, the mask leaves and the task head.

use crate::encoder::{bind_params, encoder_graph, ModelConfig, ParameterSet, TaskHead};
use crate::error::Result;
use crate::masking::BinaryMask;
use crate::numerics::gradcheck::{check_coordinates, CheckConfig, CheckReport};
use crate::numerics::{Graph, RngStream, Tensor};
use crate::taskgen::Example;

/// Which leaf of the loss a checked tensor is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Mask,
    Head,
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub kind: LeafKind,
    pub size: usize,
    pub report: CheckReport,
}

/// Gradient of every leaf, in binding order.
type LeafGrads = Vec<(String, LeafKind, Tensor)>;

struct Point<'a> {
    config: &'a ModelConfig,
    params: ParameterSet,
    mask: Option<BinaryMask>,
    head: TaskHead,
    examples: &'a [Example],
}

/// Mean cross-entropy in eval mode, with gradients for every leaf when
/// `grads` is set. Mask entries are treated as continuous leaves.
fn loss_and_grads(p: &Point<'_>, grads: bool) -> Result<(f64, LeafGrads)> {
    let n = p.examples.len() as f64;
    let mut total = 0.0;
    let mut acc: LeafGrads = Vec::new();
    for ex in p.examples {
        let mut g = Graph::new();
        let want = |_: &str| grads;
        let bound = bind_params(&mut g, &p.params, p.mask.as_ref(), &want, grads)?;
        let enc = encoder_graph(&mut g, p.config, &bound, &ex.tokens, None)?;
        let w = g.leaf(p.head.weight.clone(), grads)?;
        let b = g.leaf(p.head.bias.clone(), grads)?;
        let z = g.matmul(enc.pooled, w)?;
        let logits = g.add_row(z, b)?;
        let loss = g.cross_entropy(logits, &[ex.label])?;
        total += g.value(loss).data()[0];
        if !grads {
            continue;
        }
        let mut gr = g.backward(loss)?;
        let mut these: LeafGrads = Vec::new();
        for (name, &id) in &bound.leaves {
            these.push((name.clone(), LeafKind::Param, gr.take(id)));
        }
        for (name, &id) in &bound.mask_leaves {
            these.push((name.clone(), LeafKind::Mask, gr.take(id)));
        }
        these.push(("head.w".into(), LeafKind::Head, gr.take(w)));
        these.push(("head.b".into(), LeafKind::Head, gr.take(b)));
        if acc.is_empty() {
            acc = these;
        } else {
            for (a, t) in acc.iter_mut().zip(these) {
                a.2.add_assign(&t.2)?;
            }
        }
    }
    for a in acc.iter_mut() {
        a.2.scale_in_place(1.0 / n);
    }
    Ok((total / n, acc))
}

fn leaf_mut<'a>(p: &'a mut Point<'_>, name: &str, kind: LeafKind) -> &'a mut Tensor {
    match kind {
        LeafKind::Param => p.params.get_mut(name).expect("bound parameter"),
        LeafKind::Mask => p.mask.as_mut().and_then(|m| m.get_mut(name)).expect("bound mask"),
        LeafKind::Head if name == "head.w" => &mut p.head.weight,
        LeafKind::Head => &mut p.head.bias,
    }
}

/// Result of [`full_model_gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckSummary {
    /// Loss at the checked point.
    pub loss: f64,
    /// The configuration actually applied, including the round-off floor.
    pub config: CheckConfig,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.config.rel_tol
    }
}

/// Compares analytic gradients of the mean eval-mode cross-entropy over
/// `examples` with central differences on `per_tensor` random coordinates
/// of every leaf (all coordinates of smaller tensors). The denominator floor
/// is raised to the round-off level of the loss
/// ([`CheckConfig::with_roundoff_floor`]).
#[allow(clippy::too_many_arguments)]
pub fn full_model_gradcheck(
    config: &ModelConfig,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    head: &TaskHead,
    examples: &[Example],
    per_tensor: usize,
    rng: &RngStream,
    cfg: CheckConfig,
) -> Result<GradcheckSummary> {
    let mut point = Point {
        config,
        params: params.clone(),
        mask: mask.cloned(),
        head: head.clone(),
        examples,
    };
    let (loss, analytic) = loss_and_grads(&point, true)?;
    let cfg = cfg.with_roundoff_floor(loss);
    let mut out = Vec::with_capacity(analytic.len());
    for (name, kind, grad) in analytic {
        let x = leaf_mut(&mut point, &name, kind).data().to_vec();
        let mut failure = None;
        let mut f = |v: &[f64]| -> f64 {
            leaf_mut(&mut point, &name, kind).data_mut().copy_from_slice(v);
            match loss_and_grads(&point, false) {
                Ok((l, _)) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let mut r = rng.derive(&format!("{kind:?}.{name}"));
        let report = check_coordinates(&mut f, &x, grad.data(), per_tensor, &mut r, cfg);
        leaf_mut(&mut point, &name, kind).data_mut().copy_from_slice(&x);
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(TensorCheck {
            name,
            kind,
            size: x.len(),
            report,
        });
    }
    Ok(GradcheckSummary {
        loss,
        config: cfg,
        tensors: out,
    })
}
