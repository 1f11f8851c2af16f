use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use ftune::artifacts::{save_bundle, save_checkpoint, quantize_f32, BundleMeta, Checkpoint, MaskBundle};
use ftune::encoder::{ModelConfig, ParameterSet, TaskHead};
use ftune::masking::{FreezePreset, FreezeSpec, PruneSchedule};
use ftune::taskgen::Task;
use ftune::trainers::{
    finetune_baseline, finetune_iterative_prune, finetune_supermask, head_only_control, shuffled_control,
    FinetuneOutput, OptimizerConfig, RunOptions, ShuffledControl,
};

use super::{load_reference, load_task, opt_cell, prepare_out, settings_for, write_record, write_summary};
use crate::manifest::Manifest;
use crate::{usage, FinetuneArgs, Mode};

/// A fully validated fine-tuning request.
#[derive(Clone, Debug)]
pub enum Plan {
    Baseline,
    L0Close(Vec<FreezePreset>),
    HeadOnly,
    Supermask { init_sparsity: f64 },
    Shuffled { init_sparsity: f64 },
    Prune { final_sparsity: f64, prune_every: usize },
}

// One value per run; the size difference between variants is irrelevant.
#[allow(clippy::large_enum_variant)]
pub enum Outcome {
    Dense { out: FinetuneOutput, freeze: FreezeSpec },
    Supermask { out: FinetuneOutput, init_sparsity: f64 },
    Prune { out: FinetuneOutput },
    Shuffled { control: ShuffledControl, init_sparsity: f64 },
}

impl Outcome {
    /// The run whose metric represents the cell.
    pub fn primary(&self) -> &FinetuneOutput {
        match self {
            Outcome::Dense { out, .. } | Outcome::Supermask { out, .. } | Outcome::Prune { out } => out,
            Outcome::Shuffled { control, .. } => &control.reference,
        }
    }
}

fn check_sparsity(flag: &str, v: f64) -> Result<f64> {
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(usage(format!("{flag} {v} outside [0, 1)")))
    }
}

/// Rejects flags that do not belong to the mode, before any compute.
pub fn plan(a: &FinetuneArgs, default_prune_every: usize) -> Result<Plan> {
    let mode_name = format!("{:?}", a.mode).to_lowercase();
    let only = |flag: &str, set: bool, allowed: &[Mode]| -> Result<()> {
        if set && !allowed.contains(&a.mode) {
            return Err(usage(format!("{flag} is not accepted by --mode {mode_name}")));
        }
        Ok(())
    };
    only("--freeze", a.freeze.is_some(), &[Mode::L0close])?;
    only("--init-sparsity", a.init_sparsity.is_some(), &[Mode::Supermask, Mode::Shuffled])?;
    only("--final-sparsity", a.final_sparsity.is_some(), &[Mode::Prune])?;
    only("--prune-every", a.prune_every.is_some(), &[Mode::Prune])?;
    Ok(match a.mode {
        Mode::Baseline => Plan::Baseline,
        Mode::HeadOnly => Plan::HeadOnly,
        Mode::L0close => {
            let list = a
                .freeze
                .as_deref()
                .ok_or_else(|| usage("--mode l0close requires --freeze"))?;
            let presets = list
                .split(',')
                .map(|s| s.trim().parse::<FreezePreset>().map_err(|e| usage(format!("--freeze: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Plan::L0Close(presets)
        }
        Mode::Supermask => Plan::Supermask {
            init_sparsity: check_sparsity("--init-sparsity", a.init_sparsity.unwrap_or(0.0))?,
        },
        Mode::Shuffled => Plan::Shuffled {
            init_sparsity: check_sparsity("--init-sparsity", a.init_sparsity.unwrap_or(0.0))?,
        },
        Mode::Prune => {
            let s = a
                .final_sparsity
                .ok_or_else(|| usage("--mode prune requires --final-sparsity"))?;
            let k = a.prune_every.unwrap_or(default_prune_every);
            if k == 0 {
                return Err(usage("--prune-every must be positive"));
            }
            Plan::Prune {
                final_sparsity: check_sparsity("--final-sparsity", s)?,
                prune_every: k,
            }
        }
    })
}

pub fn train(
    plan: &Plan,
    pretrained: &ParameterSet,
    config: &ModelConfig,
    task: &Task,
    opt: &OptimizerConfig,
    run: &RunOptions,
) -> Result<Outcome> {
    Ok(match plan {
        Plan::Baseline => Outcome::Dense {
            out: finetune_baseline(pretrained, config, task, None, opt, run)?,
            freeze: FreezeSpec::none(),
        },
        Plan::L0Close(presets) => {
            let freeze = FreezeSpec::from_presets(presets, config);
            Outcome::Dense {
                out: finetune_baseline(pretrained, config, task, Some(&freeze), opt, run)?,
                freeze,
            }
        }
        Plan::HeadOnly => Outcome::Dense {
            out: head_only_control(pretrained, config, task, opt, run)?,
            freeze: FreezeSpec::all_encoder(config),
        },
        Plan::Supermask { init_sparsity } => Outcome::Supermask {
            out: finetune_supermask(pretrained, config, task, *init_sparsity, opt, run)?,
            init_sparsity: *init_sparsity,
        },
        Plan::Shuffled { init_sparsity } => Outcome::Shuffled {
            control: shuffled_control(pretrained, config, task, *init_sparsity, opt, run)?,
            init_sparsity: *init_sparsity,
        },
        Plan::Prune {
            final_sparsity,
            prune_every,
        } => {
            let schedule = PruneSchedule::new(*final_sparsity, opt.total_steps, *prune_every)?;
            Outcome::Prune {
                out: finetune_iterative_prune(pretrained, config, task, &schedule, opt, run)?,
            }
        }
    })
}

/// Encoder tensors plus `head.w` / `head.b`.
pub fn with_head(params: &ParameterSet, head: &TaskHead) -> ParameterSet {
    let mut p = params.clone();
    p.insert("head.w", head.weight.clone());
    p.insert("head.b", head.bias.clone());
    p
}

fn bundle_for(out: &FinetuneOutput, reference: &Checkpoint, task: &Task, init: Option<f64>) -> Result<MaskBundle> {
    let mask = out
        .mask
        .clone()
        .ok_or_else(|| anyhow::anyhow!("run produced no mask"))?;
    Ok(MaskBundle {
        reference_crc: reference.crc,
        meta: BundleMeta {
            task: task.name.clone(),
            initial_sparsity: init,
            final_sparsity: mask.sparsity().global,
            iterations: out.record.iterations as u64,
        },
        mask,
        head: out.head.clone(),
    })
}

/// Saves `params` and returns the checkpoint as it will be read back.
fn save_reference(params: &ParameterSet, path: &Path) -> Result<Checkpoint> {
    let crc = save_checkpoint(params, path)?;
    Ok(Checkpoint {
        params: quantize_f32(params),
        crc,
    })
}

fn record_summary(rows: &mut Vec<(&'static str, String)>, out: &FinetuneOutput) {
    let r = &out.record;
    rows.push(("iterations", r.iterations.to_string()));
    rows.push(("final_metric_mean", r.final_metric_mean.to_string()));
    rows.push(("final_metric_std", r.final_metric_std.to_string()));
    rows.push((
        "final_metric_samples",
        r.final_metric_samples.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
    ));
    rows.push(("final_sparsity", opt_cell(r.final_sparsity)));
    rows.push(("final_sparsity_without_embedding", opt_cell(r.final_sparsity_without_embedding)));
}

pub fn run(a: FinetuneArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut settings = settings_for(a.common.config.as_deref())?;
    if let Some(s) = a.steps {
        settings.set("steps", s);
    }
    let plan = plan(&a, settings.prune_every()?)?;
    let config = settings.model()?;
    let opt = settings.optimizer(OptimizerConfig::default())?;
    let run = settings.run_options(a.common.seed)?;
    let reference = load_reference(&a.checkpoint, &config)?;
    let task = load_task(&a.task, &config)?;
    prepare_out(&a.out)?;

    let outcome = train(&plan, &reference.params, &config, &task, &opt, &run)?;
    let mut outputs = Vec::new();
    let mut rows: Vec<(&'static str, String)> = vec![
        ("task", task.name.clone()),
        ("mode", format!("{:?}", a.mode).to_lowercase()),
        ("majority_rate", task.majority_rate().to_string()),
    ];
    let record_path = a.out.join("record.csv");
    write_record(&record_path, &outcome.primary().record)?;
    outputs.push(record_path);
    match &outcome {
        Outcome::Dense { out, freeze } => {
            let trainable = freeze.trainable_count(&reference.params)?;
            let total = reference.params.num_params();
            println!(
                "trainable encoder parameters: {trainable} of {total} ({} frozen tensors); head parameters: {}",
                freeze.num_excluded_tensors(),
                out.head.num_params()
            );
            rows.push(("trainable_encoder_params", trainable.to_string()));
            rows.push(("total_encoder_params", total.to_string()));
            rows.push(("head_params", out.head.num_params().to_string()));
            rows.push(("frozen_tensors", freeze.excluded().collect::<Vec<_>>().join(";")));
            let path = a.out.join("model.ftck");
            save_checkpoint(&with_head(&out.params, &out.head), &path)?;
            outputs.push(path);
            record_summary(&mut rows, out);
        }
        Outcome::Supermask { out, init_sparsity } => {
            let bundle = bundle_for(out, &reference, &task, Some(*init_sparsity))?;
            let path = a.out.join("bundle.ftmk");
            let n = save_bundle(&bundle, &reference, &path)?;
            rows.push(("initial_sparsity", init_sparsity.to_string()));
            rows.push(("bundle_bytes", n.to_string()));
            outputs.push(path);
            record_summary(&mut rows, out);
        }
        Outcome::Prune { out } => {
            let ck_path = a.out.join("pruned.ftck");
            let pruned = save_reference(&out.params, &ck_path)?;
            let path = a.out.join("bundle.ftmk");
            save_bundle(&bundle_for(out, &pruned, &task, None)?, &pruned, &path)?;
            outputs.push(ck_path);
            outputs.push(path);
            record_summary(&mut rows, out);
        }
        Outcome::Shuffled { control, init_sparsity } => {
            let path = a.out.join("bundle.ftmk");
            save_bundle(&bundle_for(&control.reference, &reference, &task, Some(*init_sparsity))?, &reference, &path)?;
            outputs.push(path);
            let sh_ck = a.out.join("shuffled.ftck");
            let shuffled = save_reference(&control.shuffled.params, &sh_ck)?;
            let sh_bundle = a.out.join("shuffled-bundle.ftmk");
            save_bundle(
                &bundle_for(&control.shuffled, &shuffled, &task, Some(*init_sparsity))?,
                &shuffled,
                &sh_bundle,
            )?;
            let sh_rec = a.out.join("record-shuffled.csv");
            write_record(&sh_rec, &control.shuffled.record)?;
            outputs.extend([sh_ck, sh_bundle, sh_rec]);
            rows.push(("initial_sparsity", init_sparsity.to_string()));
            record_summary(&mut rows, &control.reference);
            rows.push(("shuffled_metric_mean", control.shuffled.record.final_metric_mean.to_string()));
            rows.push(("gap", control.gap.to_string()));
        }
    }
    let primary = outcome.primary();
    println!(
        "{} {}: final {:?} {:.4} ± {:.4}{}",
        task.name,
        format!("{:?}", a.mode).to_lowercase(),
        run.metric,
        primary.record.final_metric_mean,
        primary.record.final_metric_std,
        primary
            .record
            .final_sparsity
            .map(|s| format!(", sparsity {s:.4}"))
            .unwrap_or_default()
    );
    if let Outcome::Shuffled { control, .. } = &outcome {
        println!("shuffled θ̃: {:.4}, gap {:.4}", control.shuffled.record.final_metric_mean, control.gap);
    }
    let summary = a.out.join("summary.txt");
    write_summary(&summary, &rows)?;
    outputs.push(summary);

    let mut m = Manifest::new("finetune", args, Some(a.common.seed), a.common.config.as_deref());
    m.input("task", &a.task);
    m.input("checkpoint", &a.checkpoint);
    for p in &outputs {
        m.output(p);
    }
    m.options = settings.resolved(OptimizerConfig::default(), a.common.seed)?;
    m.write(&a.out, started)
}
