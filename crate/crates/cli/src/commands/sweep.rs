use std::time::Instant;

use anyhow::{Context, Result};
use ftune::geometry::mean_std;
use ftune::trainers::OptimizerConfig;

use super::finetune::{train, Plan};
use super::{load_reference, load_task, prepare_out, settings_for};
use crate::manifest::Manifest;
use crate::{usage, SweepArgs, SweepMode};

pub const SWEEP_HEADER: [&str; 8] = [
    "task",
    "mode",
    "init_sparsity",
    "final_sparsity",
    "metric_mean",
    "metric_std",
    "seeds",
    "error",
];

pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let v: f64 = t.trim().parse().map_err(|_| usage(format!("--sparsity-grid: bad value `{t}`")))?;
            if (0.0..1.0).contains(&v) {
                Ok(v)
            } else {
                Err(usage(format!("--sparsity-grid: {v} outside [0, 1)")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    if grid.is_empty() {
        return Err(usage("--sparsity-grid is empty"));
    }
    Ok(grid)
}

pub fn run(a: SweepArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let grid = parse_grid(&a.sparsity_grid)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let mut settings = settings_for(a.common.config.as_deref())?;
    if let Some(s) = a.steps {
        settings.set("steps", s);
    }
    let config = settings.model()?;
    let opt = settings.optimizer(OptimizerConfig::default())?;
    let prune_every = settings.prune_every()?;
    let reference = load_reference(&a.checkpoint, &config)?;
    let task = load_task(&a.task, &config)?;
    prepare_out(&a.out)?;
    let path = a.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(SWEEP_HEADER)?;
    let mode = match a.mode {
        SweepMode::Supermask => "supermask",
        SweepMode::Prune => "prune",
    };
    for &s in &grid {
        let plan = match a.mode {
            SweepMode::Supermask => Plan::Supermask { init_sparsity: s },
            SweepMode::Prune => Plan::Prune {
                final_sparsity: s,
                prune_every,
            },
        };
        let (mut metrics, mut finals, mut errors) = (Vec::new(), Vec::new(), Vec::new());
        for seed in a.common.seed..a.common.seed + a.seeds {
            let run = settings.run_options(seed)?;
            match train(&plan, &reference.params, &config, &task, &opt, &run) {
                Ok(o) => {
                    let r = &o.primary().record;
                    metrics.push(r.final_metric_mean);
                    finals.extend(r.final_sparsity);
                }
                Err(e) => errors.push(format!("seed {seed}: {e:#}")),
            }
        }
        let init = match a.mode {
            SweepMode::Supermask => s,
            SweepMode::Prune => 0.0,
        };
        let cell = |v: &[f64], std: bool| -> String {
            if v.is_empty() || (std && v.len() < 2) {
                return String::new();
            }
            let (m, sd) = mean_std(v);
            if std { sd } else { m }.to_string()
        };
        w.write_record([
            task.name.clone(),
            mode.to_string(),
            init.to_string(),
            cell(&finals, false),
            cell(&metrics, false),
            cell(&metrics, true),
            metrics.len().to_string(),
            errors.join(" | "),
        ])?;
        w.flush()?;
        println!(
            "{mode} {s}: metric {} final sparsity {}{}",
            cell(&metrics, false),
            cell(&finals, false),
            if errors.is_empty() { String::new() } else { format!(" ({} failed)", errors.len()) }
        );
    }
    drop(w);
    let mut m = Manifest::new("sweep", args, Some(a.common.seed), a.common.config.as_deref());
    m.input("task", &a.task);
    m.input("checkpoint", &a.checkpoint);
    m.output(&path);
    m.options = settings.resolved(OptimizerConfig::default(), a.common.seed)?;
    m.write(&a.out, started)
}
