use std::time::Instant;

use super::engine::{classification_grads, diverged, evaluate_examples, mean_grads, BatchSampler, GradRequest};
use super::optim::{Adam, OptimizerConfig};
use super::record::{RunRecord, StepRow};
use crate::encoder::{HeadKind, ModelConfig, ParameterSet, TaskHead};
use crate::error::{Error, Result};
use crate::geometry::{angular_distance, l1, mean_std};
use crate::masking::{
    cubic_sparsity, init_mask_params, magnitude_prune, sample_mask, shuffle_within_tensors,
    straight_through_grad, threshold_mask, BinaryMask, FreezeSpec, MaskParameters, MaskableSet,
    PruneSchedule, SteVariant, DEFAULT_LOGIT_MAGNITUDE,
};
use crate::numerics::RngStream;
use crate::par::{map_indexed, ExecMode};
use crate::taskgen::{Metric, Task};

/// How a supermask turns ν into μ during training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// `μ ~ Bernoulli(σ(ν))`, resampled at every training step.
    #[default]
    Sampled,
    /// `μ = 1[σ(ν) > 0.5]`.
    Threshold,
}

/// Run-level settings shared by every fine-tuning procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub exec: ExecMode,
    /// Checkpoint period in steps; 0 checkpoints only after the last step.
    pub checkpoint_every: usize,
    /// Eval examples used at intermediate checkpoints (all when `None`).
    pub checkpoint_eval_limit: Option<usize>,
    /// Mask samples averaged at intermediate checkpoints.
    pub checkpoint_eval_samples: usize,
    /// Mask samples averaged for the final metric.
    pub final_eval_samples: usize,
    pub metric: Metric,
    /// Apply dropout while training (composes with mask sampling).
    pub dropout: bool,
    pub ste: SteVariant,
    pub mask_mode: MaskMode,
    /// Mask (and prune) `embed.word` in addition to the block matrices.
    pub include_embedding: bool,
    pub logit_magnitude: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            exec: ExecMode::default(),
            checkpoint_every: 50,
            checkpoint_eval_limit: Some(256),
            checkpoint_eval_samples: 1,
            final_eval_samples: 10,
            metric: Metric::Accuracy,
            dropout: true,
            ste: SteVariant::default(),
            mask_mode: MaskMode::default(),
            include_embedding: true,
            logit_magnitude: DEFAULT_LOGIT_MAGNITUDE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    /// Encoder weights θ. For supermask runs this is θ̃ itself (never
    /// modified); for pruning runs pruned entries are exactly zero.
    pub params: ParameterSet,
    pub head: TaskHead,
    /// Final mask: the sampled supermask or the pruning mask.
    pub mask: Option<BinaryMask>,
    pub mask_params: Option<MaskParameters>,
    /// Pruning runs: the mask after every prune event, in step order.
    pub prune_events: Vec<PruneEvent>,
    pub record: RunRecord,
}

/// One pruning event of an iterative-pruning run.
#[derive(Clone, Debug)]
pub struct PruneEvent {
    /// 1-based update after which the event fired.
    pub step: usize,
    /// Scheduled sparsity `s(step)`.
    pub target: f64,
    pub mask: BinaryMask,
}

impl FinetuneOutput {
    /// The weights the model actually uses, `θ ⊙ μ` when a mask is present.
    pub fn effective_params(&self) -> Result<ParameterSet> {
        match &self.mask {
            Some(m) => m.apply(&self.params),
            None => Ok(self.params.clone()),
        }
    }
}

enum Procedure {
    Dense(FreezeSpec),
    Supermask(MaskParameters),
    Prune(PruneSchedule, MaskableSet),
}

struct Run<'a> {
    pretrained: &'a ParameterSet,
    config: &'a ModelConfig,
    task: &'a Task,
    opt: &'a OptimizerConfig,
    run: &'a RunOptions,
    rng: RngStream,
}

impl Run<'_> {
    fn mask_for(&self, nu: &MaskParameters, rng: &RngStream) -> BinaryMask {
        match self.run.mask_mode {
            MaskMode::Sampled => sample_mask(nu, rng),
            MaskMode::Threshold => threshold_mask(nu),
        }
    }

    /// Metric averaged over `samples` masks, plus the first mask.
    #[allow(clippy::too_many_arguments)]
    fn eval_point(
        &self,
        params: &ParameterSet,
        head: &TaskHead,
        fixed_mask: Option<&BinaryMask>,
        nu: Option<&MaskParameters>,
        samples: usize,
        eval_rng: &RngStream,
        limit: Option<usize>,
    ) -> Result<(Vec<f64>, Option<BinaryMask>)> {
        let ex = &self.task.eval[..limit.unwrap_or(usize::MAX).min(self.task.eval.len())];
        let metric = self.run.metric;
        let exec = self.run.exec;
        match nu {
            None => {
                let v = evaluate_examples(self.config, params, fixed_mask, head, ex, metric, exec)?;
                Ok((v.value.into_iter().collect(), fixed_mask.cloned()))
            }
            Some(nu) => {
                let samples = samples.max(1);
                let mut values = Vec::with_capacity(samples);
                let mut first = None;
                for j in 0..samples {
                    let m = self.mask_for(nu, &eval_rng.derive_index("sample", j as u64));
                    let v = evaluate_examples(self.config, params, Some(&m), head, ex, metric, exec)?;
                    values.extend(v.value);
                    if j == 0 {
                        first = Some(m);
                    }
                }
                Ok((values, first))
            }
        }
    }

    fn distances(&self, params: &ParameterSet, mask: Option<&BinaryMask>) -> Result<(f64, f64)> {
        let eff = match mask {
            Some(m) => m.apply(params)?,
            None => params.clone(),
        };
        let (a, b) = (eff.flatten(), self.pretrained.flatten());
        Ok((angular_distance(&a, &b)?, l1(&a, &b)?))
    }

    fn execute(&self, mut procedure: Procedure) -> Result<FinetuneOutput> {
        let start = Instant::now();
        let (config, opt, run, task) = (self.config, self.opt, self.run, self.task);
        config.validate()?;
        opt.validate()?;
        if task.train.is_empty() || task.eval.is_empty() {
            return Err(Error::Config(format!("task {} has an empty split", task.name)));
        }
        let mut params = self.pretrained.clone();
        params.check_layout(config)?;
        let mut head = TaskHead::init(
            HeadKind::Classification(task.num_classes),
            config.hidden_size,
            &mut self.rng.derive("head"),
        );
        let mut adam = Adam::new(opt);
        let mut mask_adam = Adam::new(opt);
        let mut sampler = BatchSampler::new(task.train.len(), self.rng.derive("batches"));
        let mut prune_mask = match &procedure {
            Procedure::Prune(_, ms) => Some(BinaryMask::ones(&params, ms)?),
            _ => None,
        };

        let trainable: Box<dyn Fn(&str) -> bool + Sync> = match &procedure {
            Procedure::Dense(f) => {
                f.validate(&params)?;
                let f = f.clone();
                Box::new(move |n: &str| !f.is_frozen(n))
            }
            Procedure::Supermask(..) => Box::new(|_: &str| false),
            Procedure::Prune(..) => Box::new(|_: &str| true),
        };
        let req = GradRequest {
            param_grad: trainable.as_ref(),
            mask_grad: matches!(procedure, Procedure::Supermask(..)),
        };

        let mut record = RunRecord::default();
        let mut prune_events = Vec::new();
        for t in 0..opt.total_steps {
            let step = t + 1;
            let batch = sampler.next_batch(opt.batch_size);
            let step_rng = self.rng.derive_index("step", t as u64);
            let step_mask = match &procedure {
                Procedure::Supermask(nu) => Some(self.mask_for(nu, &step_rng.derive("mask"))),
                Procedure::Prune(..) => prune_mask.clone(),
                Procedure::Dense(_) => None,
            };
            let parts = map_indexed(run.exec, batch.len(), |i| {
                let mut d = step_rng.derive_index("dropout", i as u64);
                classification_grads(
                    config,
                    &params,
                    step_mask.as_ref(),
                    &head,
                    &task.train[batch[i]],
                    run.dropout.then_some(&mut d),
                    &req,
                )
            })
            .map_err(diverged(step))?;
            let grads = mean_grads(parts)?;
            if !grads.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: grads.loss,
                });
            }

            let scale = opt.lr_scale(t);
            let (lr_w, lr_m) = (opt.weight_lr * scale, opt.mask_lr * scale);
            adam.begin_step();
            mask_adam.begin_step();
            let hw = grads.head_weight.as_ref().expect("head gradient");
            let hb = grads.head_bias.as_ref().expect("head gradient");
            adam.update("head.w", &mut head.weight, hw, lr_w).map_err(diverged(step))?;
            adam.update("head.b", &mut head.bias, hb, lr_w).map_err(diverged(step))?;
            for (name, g) in &grads.params {
                adam.update(name, params.get_mut(name)?, g, lr_w).map_err(diverged(step))?;
            }
            match &mut procedure {
                Procedure::Supermask(nu) => {
                    for (name, g) in &grads.mask {
                        let v = nu.get_mut(name).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
                        let gnu = straight_through_grad(g, v, run.ste)?;
                        mask_adam.update(name, v, &gnu, lr_m).map_err(diverged(step))?;
                    }
                }
                Procedure::Prune(schedule, ms) => {
                    let mut mask = prune_mask.take().expect("pruning mask");
                    params = mask.apply(&params)?;
                    if schedule.prunes_at(step) {
                        let target = cubic_sparsity(step, schedule)?;
                        mask = magnitude_prune(&params, ms, target)?.intersect(&mask)?;
                        params = mask.apply(&params)?;
                        prune_events.push(PruneEvent {
                            step,
                            target,
                            mask: mask.clone(),
                        });
                    }
                    prune_mask = Some(mask);
                }
                Procedure::Dense(_) => {}
            }

            let mut row = StepRow {
                step,
                loss: grads.loss,
                metric: None,
                sparsity: None,
                angular_distance: None,
                l1_distance: None,
            };
            let is_ckpt =
                step == opt.total_steps || (run.checkpoint_every > 0 && step % run.checkpoint_every == 0);
            if is_ckpt {
                let nu = match &procedure {
                    Procedure::Supermask(nu) => Some(nu),
                    _ => None,
                };
                let eval_rng = self.rng.derive_index("checkpoint", step as u64);
                let (values, mask) = self.eval_point(
                    &params,
                    &head,
                    prune_mask.as_ref(),
                    nu,
                    run.checkpoint_eval_samples,
                    &eval_rng,
                    run.checkpoint_eval_limit,
                )?;
                if !values.is_empty() {
                    row.metric = Some(mean_std(&values).0);
                }
                row.sparsity = mask.as_ref().map(|m| m.sparsity().global);
                let (ang, dl1) = self.distances(&params, mask.as_ref())?;
                row.angular_distance = Some(ang);
                row.l1_distance = Some(dl1);
            }
            record.rows.push(row);
        }
        record.iterations = opt.total_steps;

        let (nu, mask_params) = match procedure {
            Procedure::Supermask(nu) => (Some(nu.clone()), Some(nu)),
            _ => (None, None),
        };
        let samples = if nu.is_some() { run.final_eval_samples } else { 1 };
        let (values, final_mask) = self.eval_point(
            &params,
            &head,
            prune_mask.as_ref(),
            nu.as_ref(),
            samples,
            &self.rng.derive("final"),
            None,
        )?;
        let (mean, std) = if values.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&values)
        };
        record.final_metric_samples = values;
        record.final_metric_mean = mean;
        record.final_metric_std = std;
        if let Some(m) = &final_mask {
            let s = m.sparsity();
            record.final_sparsity = Some(s.global);
            record.final_sparsity_without_embedding = Some(s.global_without_embedding);
        }
        record.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok(FinetuneOutput {
            params,
            head,
            mask: final_mask,
            mask_params,
            prune_events,
            record,
        })
    }
}

fn runner<'a>(
    pretrained: &'a ParameterSet,
    config: &'a ModelConfig,
    task: &'a Task,
    opt: &'a OptimizerConfig,
    run: &'a RunOptions,
) -> Run<'a> {
    Run {
        pretrained,
        config,
        task,
        opt,
        run,
        rng: RngStream::named(run.seed, "finetune").derive(&task.name),
    }
}

/// Trains every non-frozen encoder tensor and the head. Frozen tensors are
/// never touched, so they are bit-identical to θ̃ on return.
pub fn finetune_baseline(
    pretrained: &ParameterSet,
    config: &ModelConfig,
    task: &Task,
    freeze: Option<&FreezeSpec>,
    opt: &OptimizerConfig,
    run: &RunOptions,
) -> Result<FinetuneOutput> {
    let f = freeze.cloned().unwrap_or_default();
    runner(pretrained, config, task, opt, run).execute(Procedure::Dense(f))
}

/// Learns mask logits ν over frozen θ̃ (at the mask learning rate) together
/// with the head (at the weight learning rate).
pub fn finetune_supermask(
    pretrained: &ParameterSet,
    config: &ModelConfig,
    task: &Task,
    initial_sparsity: f64,
    opt: &OptimizerConfig,
    run: &RunOptions,
) -> Result<FinetuneOutput> {
    let ms = MaskableSet::default_for(config, run.include_embedding);
    let nu = init_mask_params(pretrained, &ms, initial_sparsity, run.logit_magnitude)?;
    runner(pretrained, config, task, opt, run).execute(Procedure::Supermask(nu))
}

/// Trains all weights while magnitude-pruning the maskable tensors to the
/// cubic schedule; pruned entries stay zero.
pub fn finetune_iterative_prune(
    pretrained: &ParameterSet,
    config: &ModelConfig,
    task: &Task,
    schedule: &PruneSchedule,
    opt: &OptimizerConfig,
    run: &RunOptions,
) -> Result<FinetuneOutput> {
    if schedule.total_steps != opt.total_steps {
        return Err(Error::Config(format!(
            "pruning schedule length {} differs from training length {}",
            schedule.total_steps, opt.total_steps
        )));
    }
    let ms = MaskableSet::default_for(config, run.include_embedding);
    runner(pretrained, config, task, opt, run).execute(Procedure::Prune(*schedule, ms))
}

/// Trains only the task head on frozen θ̃; encoder gradients are never
/// computed.
pub fn head_only_control(
    pretrained: &ParameterSet,
    config: &ModelConfig,
    task: &Task,
    opt: &OptimizerConfig,
    run: &RunOptions,
) -> Result<FinetuneOutput> {
    let all = FreezeSpec::all_encoder(config);
    finetune_baseline(pretrained, config, task, Some(&all), opt, run)
}

/// A supermask run on θ̃ and the same run on θ̃ shuffled within each
/// maskable tensor.
#[derive(Clone, Debug)]
pub struct ShuffledControl {
    pub reference: FinetuneOutput,
    pub shuffled: FinetuneOutput,
    /// `reference − shuffled` final metric means.
    pub gap: f64,
}

pub fn shuffled_control(
    pretrained: &ParameterSet,
    config: &ModelConfig,
    task: &Task,
    initial_sparsity: f64,
    opt: &OptimizerConfig,
    run: &RunOptions,
) -> Result<ShuffledControl> {
    let ms = MaskableSet::default_for(config, run.include_embedding);
    let shuffled_params =
        shuffle_within_tensors(pretrained, &ms, &RngStream::named(run.seed, "shuffle"))?;
    let reference = finetune_supermask(pretrained, config, task, initial_sparsity, opt, run)?;
    let shuffled = finetune_supermask(&shuffled_params, config, task, initial_sparsity, opt, run)?;
    let gap = reference.record.final_metric_mean - shuffled.record.final_metric_mean;
    Ok(ShuffledControl {
        reference,
        shuffled,
        gap,
    })
}
