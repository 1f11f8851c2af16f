use std::time::Instant;

use super::engine::{diverged, BatchSampler};
use super::optim::{Adam, OptimizerConfig};
use super::record::{RunRecord, StepRow};
use crate::encoder::{bind_params, encoder_graph, init_model, InitScheme, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::numerics::{Graph, RngStream, Tensor};
use crate::par::{map_indexed, ExecMode};
use crate::taskgen::{Corpus, FIRST_CONTENT, MASK};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub seed: u64,
    pub exec: ExecMode,
    pub init: InitScheme,
    /// Fraction of content positions replaced by MASK (at least one per sequence).
    pub mask_rate: f64,
    /// Held-out sequences used for checkpoint metrics (taken from the end
    /// of the corpus; capped at a tenth of it).
    pub heldout: usize,
    /// Checkpoint period in steps; 0 evaluates only after the last step.
    pub checkpoint_every: usize,
    pub dropout: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            seed: 0,
            exec: ExecMode::default(),
            init: InitScheme::Uniform,
            mask_rate: 0.15,
            heldout: 256,
            checkpoint_every: 100,
            dropout: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    /// The pre-trained encoder θ̃.
    pub params: ParameterSet,
    /// Output bias of the tied masked-token predictor.
    pub mlm_bias: Tensor,
    /// Metric column: held-out masked-token accuracy.
    pub record: RunRecord,
    /// Held-out masked-token loss of the initial model.
    pub initial_loss: f64,
    /// Held-out masked-token loss of θ̃.
    pub final_loss: f64,
    /// Held-out masked-token accuracy of θ̃.
    pub masked_accuracy: f64,
    /// Accuracy of always predicting the most frequent content token.
    pub unigram_baseline: f64,
}

/// Replaces a `rate` fraction of content positions by MASK; returns the
/// corrupted sequence, masked positions and their original tokens.
pub fn mask_tokens(tokens: &[usize], rate: f64, rng: &mut RngStream) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] >= FIRST_CONTENT).collect();
    let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.uniform() < rate).collect();
    if positions.is_empty() && !candidates.is_empty() {
        positions.push(candidates[rng.below(candidates.len())]);
    }
    let mut corrupted = tokens.to_vec();
    let targets = positions.iter().map(|&p| tokens[p]).collect();
    for &p in &positions {
        corrupted[p] = MASK;
    }
    (corrupted, positions, targets)
}

struct MlmResult {
    loss: f64,
    correct: usize,
    count: usize,
    grads: Option<(Vec<(String, Tensor)>, Tensor)>,
}

#[allow(clippy::too_many_arguments)]
fn mlm_example(
    config: &ModelConfig,
    params: &ParameterSet,
    bias: &Tensor,
    tokens: &[usize],
    mask_rng: &mut RngStream,
    mask_rate: f64,
    dropout: Option<&mut RngStream>,
    with_grad: bool,
) -> Result<MlmResult> {
    let (corrupted, positions, targets) = mask_tokens(tokens, mask_rate, mask_rng);
    if positions.is_empty() {
        return Err(Error::Config("sequence has no content tokens to mask".into()));
    }
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, None, &|_| with_grad, false)?;
    let enc = encoder_graph(&mut g, config, &bound, &corrupted, dropout)?;
    let sel = g.gather_rows(enc.hidden, &positions)?;
    let logits = g.matmul_bt(sel, bound.get("embed.word")?)?;
    let b = g.leaf(bias.clone(), with_grad)?;
    let logits = g.add_row(logits, b)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let lv = g.value(logits);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|(r, &t)| crate::encoder::argmax(lv.row(*r)) == t)
        .count();
    let grads = if with_grad {
        let mut gr = g.backward(loss)?;
        let pg = bound
            .leaves
            .iter()
            .map(|(n, &id)| (n.clone(), gr.take(id)))
            .collect();
        Some((pg, gr.take(b)))
    } else {
        None
    };
    Ok(MlmResult {
        loss: g.value(loss).data()[0],
        correct,
        count: targets.len(),
        grads,
    })
}

/// Mean held-out loss and masked-token accuracy, with fixed mask positions.
fn heldout_eval(
    config: &ModelConfig,
    params: &ParameterSet,
    bias: &Tensor,
    seqs: &[Vec<usize>],
    rng: &RngStream,
    opts: &PretrainOptions,
) -> Result<(f64, f64)> {
    let res = map_indexed(opts.exec, seqs.len(), |i| {
        let mut m = rng.derive_index("heldout-mask", i as u64);
        mlm_example(config, params, bias, &seqs[i], &mut m, opts.mask_rate, None, false)
    })?;
    let loss = res.iter().map(|r| r.loss).sum::<f64>() / res.len() as f64;
    let (c, n) = res.iter().fold((0, 0), |(c, n), r| (c + r.correct, n + r.count));
    Ok((loss, c as f64 / n as f64))
}

/// Masked-token pre-training with word embeddings tied to the output layer.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &Corpus,
    opt: &OptimizerConfig,
    opts: &PretrainOptions,
) -> Result<PretrainOutput> {
    config.validate()?;
    opt.validate()?;
    if corpus.sequences.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    for s in &corpus.sequences {
        crate::encoder::validate_tokens(config, s)?;
    }
    let start = Instant::now();
    let rng = RngStream::named(opts.seed, "pretrain");
    let n = corpus.sequences.len();
    let held = opts.heldout.min(n / 10);
    let (train, heldout) = if held == 0 {
        (&corpus.sequences[..], &corpus.sequences[..])
    } else {
        corpus.sequences.split_at(n - held)
    };

    let mut params = init_model(config, opts.init, &rng.derive("init"))?;
    let mut bias = Tensor::zeros(&[config.vocab_size]);
    let (initial_loss, _) = heldout_eval(config, &params, &bias, heldout, &rng, opts)?;

    let mut adam = Adam::new(opt);
    let mut sampler = BatchSampler::new(train.len(), rng.derive("batches"));
    let mut record = RunRecord::default();
    let (mut final_loss, mut accuracy) = (initial_loss, 0.0);
    let mut evaluated_at = None;
    for t in 0..opt.total_steps {
        let step = t + 1;
        let batch = sampler.next_batch(opt.batch_size);
        let step_rng = rng.derive_index("step", t as u64);
        let parts = map_indexed(opts.exec, batch.len(), |i| {
            let ex_rng = step_rng.derive_index("example", i as u64);
            let mut m = ex_rng.derive("mask");
            let mut d = ex_rng.derive("dropout");
            mlm_example(
                config,
                &params,
                &bias,
                &train[batch[i]],
                &mut m,
                opts.mask_rate,
                opts.dropout.then_some(&mut d),
                true,
            )
        })
        .map_err(diverged(step))?;
        let k = parts.len() as f64;
        let mut loss = 0.0;
        let mut acc_p: Vec<(String, Tensor)> = Vec::new();
        let mut acc_b = Tensor::zeros(&[config.vocab_size]);
        for r in parts {
            loss += r.loss;
            let (pg, bg) = r.grads.expect("gradients requested");
            if acc_p.is_empty() {
                acc_p = pg;
            } else {
                for ((_, a), (_, g)) in acc_p.iter_mut().zip(pg) {
                    a.add_assign(&g)?;
                }
            }
            acc_b.add_assign(&bg)?;
        }
        loss /= k;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = opt.weight_lr * opt.lr_scale(t);
        adam.begin_step();
        for (name, mut g) in acc_p {
            g.scale_in_place(1.0 / k);
            adam.update(&name, params.get_mut(&name)?, &g, lr).map_err(diverged(step))?;
        }
        acc_b.scale_in_place(1.0 / k);
        adam.update("mlm.bias", &mut bias, &acc_b, lr).map_err(diverged(step))?;

        let mut row = StepRow {
            step,
            loss,
            metric: None,
            sparsity: None,
            angular_distance: None,
            l1_distance: None,
        };
        let is_ckpt = step == opt.total_steps
            || (opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0);
        if is_ckpt {
            let (l, a) = heldout_eval(config, &params, &bias, heldout, &rng, opts)?;
            final_loss = l;
            accuracy = a;
            evaluated_at = Some(step);
            row.metric = Some(a);
        }
        record.rows.push(row);
    }
    if evaluated_at.is_none() {
        let (l, a) = heldout_eval(config, &params, &bias, heldout, &rng, opts)?;
        final_loss = l;
        accuracy = a;
    }
    record.iterations = opt.total_steps;
    record.final_metric_samples = vec![accuracy];
    record.final_metric_mean = accuracy;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(PretrainOutput {
        params,
        mlm_bias: bias,
        record,
        initial_loss,
        final_loss,
        masked_accuracy: accuracy,
        unigram_baseline: corpus.unigram_majority_rate(),
    })
}
