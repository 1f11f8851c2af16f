use indexmap::IndexMap;

use super::config::ModelConfig;
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::numerics::{Graph, NodeId, RngStream, Tensor};

/// Graph nodes for one encoder parameter set.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    /// Raw parameter leaves, by name.
    pub leaves: IndexMap<String, NodeId>,
    /// Mask leaves, for masked names only.
    pub mask_leaves: IndexMap<String, NodeId>,
    /// The weight actually used by the forward pass: `W ⊙ μ` on masked
    /// names, the raw leaf elsewhere.
    pub effective: IndexMap<String, NodeId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.effective
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }
}

/// Records every parameter as a leaf of `g`. `param_grad` decides which raw
/// tensors receive gradients; when a mask is given, each masked tensor is
/// multiplied by its mask leaf (which receives gradients iff `mask_grad`).
pub fn bind_params(
    g: &mut Graph,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    param_grad: &dyn Fn(&str) -> bool,
    mask_grad: bool,
) -> Result<BoundParams> {
    if let Some(m) = mask {
        m.check_congruent(params)?;
    }
    let mut out = BoundParams::default();
    for (name, t) in params.iter() {
        let leaf = g.leaf(t.clone(), param_grad(name))?;
        out.leaves.insert(name.to_string(), leaf);
        let eff = match mask.and_then(|m| m.get(name)) {
            Some(mu) => {
                let ml = g.leaf(mu.clone(), mask_grad)?;
                out.mask_leaves.insert(name.to_string(), ml);
                g.mul(leaf, ml)?
            }
            None => leaf,
        };
        out.effective.insert(name.to_string(), eff);
    }
    Ok(out)
}

/// Rejects empty, over-long and out-of-vocabulary inputs.
pub fn validate_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidShape {
            shape: vec![0],
            len: 0,
        });
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Nodes produced by [`encoder_graph`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    /// Final per-token states, `[seq×H]`.
    pub hidden: NodeId,
    /// Pooled representation, `[1×H]`.
    pub pooled: NodeId,
}

fn affine(g: &mut Graph, x: NodeId, p: &BoundParams, prefix: &str) -> Result<NodeId> {
    let xw = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    g.add_row(xw, p.get(&format!("{prefix}.b"))?)
}

/// One block, exactly as composed in the post-layernorm transformer:
/// `inner = LN(x + DO(A(xW_Q, xW_K, xW_V)·W_D))`,
/// `out = LN(inner + DO(GeLU(inner·W_I)·W_O))`.
pub fn block_graph(
    g: &mut Graph,
    config: &ModelConfig,
    p: &BoundParams,
    block: usize,
    x: NodeId,
    mut dropout: Option<&mut RngStream>,
) -> Result<NodeId> {
    let b = format!("block{block}");
    let q = affine(g, x, p, &format!("{b}.attn.q"))?;
    let k = affine(g, x, p, &format!("{b}.attn.k"))?;
    let v = affine(g, x, p, &format!("{b}.attn.v"))?;
    let a = g.attention(q, k, v, config.num_heads)?;
    let d = affine(g, a, p, &format!("{b}.attn.d"))?;
    let d = g.dropout(d, config.dropout_rate, dropout.as_deref_mut())?;
    let r1 = g.add(x, d)?;
    let inner = g.layernorm(
        r1,
        p.get(&format!("{b}.ln1.gain"))?,
        p.get(&format!("{b}.ln1.bias"))?,
        config.layernorm_eps,
    )?;
    let f = affine(g, inner, p, &format!("{b}.ff.in"))?;
    let f = g.gelu(f)?;
    let o = affine(g, f, p, &format!("{b}.ff.out"))?;
    let o = g.dropout(o, config.dropout_rate, dropout)?;
    let r2 = g.add(inner, o)?;
    g.layernorm(
        r2,
        p.get(&format!("{b}.ln2.gain"))?,
        p.get(&format!("{b}.ln2.bias"))?,
        config.layernorm_eps,
    )
}

/// Embedding, all blocks and the tanh pooler over the first token.
/// Dropout is active iff `dropout` carries a stream.
pub fn encoder_graph(
    g: &mut Graph,
    config: &ModelConfig,
    p: &BoundParams,
    tokens: &[usize],
    mut dropout: Option<&mut RngStream>,
) -> Result<EncoderNodes> {
    validate_tokens(config, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let w = g.gather_rows(p.get("embed.word")?, tokens)?;
    let pos = g.gather_rows(p.get("embed.pos")?, &positions)?;
    let e = g.add(w, pos)?;
    let mut x = g.layernorm(
        e,
        p.get("embed.ln.gain")?,
        p.get("embed.ln.bias")?,
        config.layernorm_eps,
    )?;
    for b in 1..=config.num_blocks {
        x = block_graph(g, config, p, b, x, dropout.as_deref_mut())?;
    }
    let first = g.gather_rows(x, &[0])?;
    let pooled = affine(g, first, p, "pool")?;
    let pooled = g.tanh(pooled)?;
    Ok(EncoderNodes { hidden: x, pooled })
}

fn no_grad(_: &str) -> bool {
    false
}

fn training_stream(rng: &mut RngStream, training: bool) -> Option<&mut RngStream> {
    if training {
        Some(rng)
    } else {
        None
    }
}

/// Pooled encoder output `F_θ(tokens)`, `[H]`. With a mask, every masked
/// tensor `W` is replaced by `W ⊙ μ`.
pub fn encode(
    params: &ParameterSet,
    config: &ModelConfig,
    mask: Option<&BinaryMask>,
    tokens: &[usize],
    rng: &mut RngStream,
    training: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, mask, &no_grad, false)?;
    let n = encoder_graph(&mut g, config, &p, tokens, training_stream(rng, training))?;
    g.value(n.pooled).clone().reshape(vec![config.hidden_size])
}

/// Final per-token states before pooling, `[seq×H]`.
pub fn encode_hidden(
    params: &ParameterSet,
    config: &ModelConfig,
    mask: Option<&BinaryMask>,
    tokens: &[usize],
    rng: &mut RngStream,
    training: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, mask, &no_grad, false)?;
    let n = encoder_graph(&mut g, config, &p, tokens, training_stream(rng, training))?;
    Ok(g.value(n.hidden).clone())
}

/// Multi-head scaled dot-product attention over `[seq×H]` projections.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qn, kn, vn) = (
        g.constant(q.clone())?,
        g.constant(k.clone())?,
        g.constant(v.clone())?,
    );
    let a = g.attention(qn, kn, vn, num_heads)?;
    Ok(g.value(a).clone())
}

/// Applies block `block` of `params` to `x` (`[seq×H]`).
pub fn block_forward(
    params: &ParameterSet,
    config: &ModelConfig,
    block: usize,
    x: &Tensor,
    rng: &mut RngStream,
    training: bool,
) -> Result<Tensor> {
    if block == 0 || block > config.num_blocks {
        return Err(Error::OutOfRange(format!(
            "block {block} outside 1..={}",
            config.num_blocks
        )));
    }
    match x.shape() {
        [s, h] if *h == config.hidden_size && *s >= 1 => {}
        s => return Err(Error::shape("block_forward", s, &[config.max_seq_len, config.hidden_size])),
    }
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, None, &no_grad, false)?;
    let xn = g.constant(x.clone())?;
    let out = block_graph(&mut g, config, &p, block, xn, training_stream(rng, training))?;
    Ok(g.value(out).clone())
}
