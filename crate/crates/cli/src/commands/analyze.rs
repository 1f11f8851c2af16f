use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ftune::artifacts::{load_bundle, load_checkpoint, Checkpoint, MaskBundle};
use ftune::encoder::ParameterSet;
use ftune::geometry::{
    distance_report, mask_overlap, per_layer_closeness, powerlaw_fit, pruned_magnitude_stats, spearman,
    OverlapScope,
};
use ftune::numerics::RngStream;
use ftune::trainers::{OptimizerConfig, RunRecord};

use super::{load_reference, opt_cell, prepare_out, settings_for};
use crate::manifest::Manifest;
use crate::{usage, AnalyzeArgs, Analysis, DistanceColumn};

fn need<'a>(v: &'a Option<PathBuf>, flag: &str, what: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| usage(format!("--what {what} requires {flag}")))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn bundles(paths: &[PathBuf], reference: &Checkpoint) -> Result<Vec<MaskBundle>> {
    paths
        .iter()
        .map(|p| load_bundle(p, reference).with_context(|| format!("loading bundle {}", p.display())))
        .collect()
}

/// The fine-tuned side of a comparison: another checkpoint, or the
/// reference under a mask.
fn tuned(a: &AnalyzeArgs, reference: &Checkpoint, what: &str) -> Result<ParameterSet> {
    match (&a.against, a.bundle.as_slice()) {
        (Some(p), []) => Ok(load_checkpoint(p)
            .with_context(|| format!("loading checkpoint {}", p.display()))?
            .params),
        (None, [b]) => {
            let b = bundles(std::slice::from_ref(b), reference)?.remove(0);
            Ok(b.mask.apply(&reference.params)?)
        }
        _ => Err(usage(format!("--what {what} requires exactly one of --against or a single --bundle"))),
    }
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 2 {
            bail!("{}: expected two columns", path.display());
        }
        let x: f64 = rec[0].trim().parse().with_context(|| format!("bad number `{}`", &rec[0]))?;
        let y: f64 = rec[1].trim().parse().with_context(|| format!("bad number `{}`", &rec[1]))?;
        out.push((x, y));
    }
    Ok(out)
}

pub fn run(a: AnalyzeArgs, args: &[String]) -> Result<()> {
    let started = Instant::now();
    let settings = settings_for(a.common.config.as_deref())?;
    let config = settings.model()?;
    let what = format!("{:?}", a.what);
    let reference = match a.what {
        Analysis::Distances | Analysis::Layers | Analysis::Overlap | Analysis::Magnitudes => {
            Some(load_reference(need(&a.checkpoint, "--checkpoint", &what)?, &config)?)
        }
        _ => None,
    };
    prepare_out(&a.out)?;
    let out_path;
    match a.what {
        Analysis::Distances => {
            let r = reference.as_ref().expect("loaded");
            let t = tuned(&a, r, "distances")?;
            let names: Vec<&str> = r.params.names().collect();
            let rep = distance_report(&r.params, &t, &names)?;
            out_path = a.out.join("distances.csv");
            let mut w = writer(&out_path)?;
            w.write_record(["tensor", "size", "l1", "l1_mean", "angular"])?;
            for d in &rep.per_tensor {
                w.write_record([
                    d.name.clone(),
                    d.size.to_string(),
                    d.l1.to_string(),
                    d.l1_mean.to_string(),
                    opt_cell(d.angular),
                ])?;
            }
            w.write_record([
                "global".to_string(),
                r.params.num_params().to_string(),
                rep.global_l1.to_string(),
                rep.global_l1_mean.to_string(),
                rep.global_angular.to_string(),
            ])?;
            w.flush()?;
            println!("global angular distance {:.6}, l1 {:.6}", rep.global_angular, rep.global_l1);
        }
        Analysis::Layers => {
            let r = reference.as_ref().expect("loaded");
            let t = tuned(&a, r, "layers")?;
            out_path = a.out.join("layers.csv");
            let mut w = writer(&out_path)?;
            w.write_record(["block", "role", "l1", "l1_mean", "angular"])?;
            for l in per_layer_closeness(&r.params, &t, &config)? {
                w.write_record([
                    l.block.to_string(),
                    l.role.to_string(),
                    l.l1.to_string(),
                    l.l1_mean.to_string(),
                    opt_cell(l.angular),
                ])?;
            }
            w.flush()?;
        }
        Analysis::Overlap => {
            let r = reference.as_ref().expect("loaded");
            if a.bundle.is_empty() {
                return Err(usage("--what overlap requires at least one --bundle"));
            }
            let bs = bundles(&a.bundle, r)?;
            let masks: Vec<(String, _)> = bs
                .iter()
                .enumerate()
                .map(|(i, b)| (format!("{}#{}", b.meta.task, i + 1), b.mask.clone()))
                .collect();
            let scope = match &a.tensor {
                Some(t) => OverlapScope::Tensor(t.clone()),
                None => OverlapScope::Global,
            };
            let g = mask_overlap(&masks, &scope, &RngStream::named(a.common.seed, "overlap"))?;
            out_path = a.out.join("overlap.csv");
            let mut w = writer(&out_path)?;
            w.write_record(["task_a", "task_b", "overlap", "chance", "chance_std", "random_reference", "zeros_a", "size"])?;
            for i in 0..g.tasks.len() {
                for j in 0..g.tasks.len() {
                    w.write_record([
                        g.tasks[i].clone(),
                        g.tasks[j].clone(),
                        opt_cell(g.values[i][j]),
                        g.chance[i][j].to_string(),
                        opt_cell(g.chance_std(i, j)),
                        opt_cell(g.random_reference[i][j]),
                        g.zeros[i].to_string(),
                        g.size.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
        Analysis::Magnitudes => {
            let r = reference.as_ref().expect("loaded");
            if a.bundle.is_empty() {
                return Err(usage("--what magnitudes requires --bundle"));
            }
            out_path = a.out.join("magnitudes.csv");
            let mut w = writer(&out_path)?;
            w.write_record(["task", "sparsity", "mask_max", "mask_mean", "pruned_max", "pruned_mean", "overlap"])?;
            for b in bundles(&a.bundle, r)? {
                let s = pruned_magnitude_stats(&r.params, &b.mask)?;
                w.write_record([
                    b.meta.task.clone(),
                    s.sparsity.to_string(),
                    s.mask_max.to_string(),
                    s.mask_mean.to_string(),
                    s.pruned_max.to_string(),
                    s.pruned_mean.to_string(),
                    s.overlap.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Analysis::Powerlaw => {
            let points = match (&a.points, &a.record) {
                (Some(p), None) => read_points(p)?,
                (None, Some(r)) => {
                    let rows = RunRecord::read_csv(File::open(r).with_context(|| format!("reading {}", r.display()))?)?;
                    rows.iter()
                        .filter_map(|row| {
                            let d = match a.column {
                                DistanceColumn::Angular => row.angular_distance,
                                DistanceColumn::L1 => row.l1_distance,
                            };
                            d.map(|d| (row.step as f64, d))
                        })
                        .collect()
                }
                _ => return Err(usage("--what powerlaw requires exactly one of --points or --record")),
            };
            let fit = powerlaw_fit(&points)?;
            out_path = a.out.join("powerlaw.csv");
            let mut w = writer(&out_path)?;
            w.write_record(["exponent", "intercept", "r_squared", "points"])?;
            w.write_record([
                fit.exponent.to_string(),
                fit.intercept.to_string(),
                fit.r_squared.to_string(),
                points.len().to_string(),
            ])?;
            w.flush()?;
            println!("exponent {:.6}, r² {:.6}", fit.exponent, fit.r_squared);
        }
        Analysis::LearningCurve => {
            let r = need(&a.record, "--record", &what)?;
            let rows = RunRecord::read_csv(File::open(r).with_context(|| format!("reading {}", r.display()))?)?;
            out_path = a.out.join("learning_curve.csv");
            let mut w = writer(&out_path)?;
            w.write_record(["step", "metric", "sparsity", "angular_distance", "l1_distance"])?;
            for row in rows.iter().filter(|r| r.metric.is_some() || r.sparsity.is_some() || r.angular_distance.is_some()) {
                w.write_record([
                    row.step.to_string(),
                    opt_cell(row.metric),
                    opt_cell(row.sparsity),
                    opt_cell(row.angular_distance),
                    opt_cell(row.l1_distance),
                ])?;
            }
            w.flush()?;
        }
        Analysis::InitFinal => {
            let s = need(&a.sweep, "--sweep", &what)?;
            let mut rd = csv::Reader::from_path(s).with_context(|| format!("reading {}", s.display()))?;
            let mut pts = Vec::new();
            for rec in rd.records() {
                let rec = rec?;
                if let (Ok(i), Ok(f)) = (rec[2].parse::<f64>(), rec[3].parse::<f64>()) {
                    pts.push((i, f));
                }
            }
            if pts.len() < 2 {
                bail!("init-final needs at least two completed sweep cells");
            }
            let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
            let rho = spearman(&x, &y)?;
            let lowest = pts.iter().copied().fold(pts[0], |m, p| if p.0 < m.0 { p } else { m });
            out_path = a.out.join("init_final.csv");
            let mut w = writer(&out_path)?;
            w.write_record(["points", "spearman", "lowest_init", "final_at_lowest_init", "pushed_up"])?;
            w.write_record([
                pts.len().to_string(),
                rho.to_string(),
                lowest.0.to_string(),
                lowest.1.to_string(),
                (lowest.1 > lowest.0).to_string(),
            ])?;
            w.flush()?;
            println!("spearman(init, final) = {rho:.6}");
        }
    }
    let mut m = Manifest::new("analyze", args, Some(a.common.seed), a.common.config.as_deref());
    for (role, p) in [("checkpoint", &a.checkpoint), ("against", &a.against), ("record", &a.record), ("points", &a.points), ("sweep", &a.sweep)] {
        if let Some(p) = p {
            m.input(role, p);
        }
    }
    for b in &a.bundle {
        m.input("bundle", b);
    }
    m.output(&out_path);
    m.options = settings.resolved(OptimizerConfig::default(), a.common.seed)?;
    m.write(&a.out, started)
}
