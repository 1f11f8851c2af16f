//! Acceptance suite: fifteen end-to-end properties of the fine-tuning
//! toolkit, each printed as one PASS/FAIL line. Runs as a plain binary
//! (`harness = false`) so the expensive pre-trained fixture is built once
//! and shared by every criterion; exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ftune::artifacts::{
    decode_bundle, decode_checkpoint, encode_bundle, encode_checkpoint, quantize_f32, sparse_encode, BundleMeta,
    Checkpoint, MaskBundle, SparseModel,
};
use ftune::encoder::{encode, init_model, is_weight_matrix, HeadKind, InitScheme, ModelConfig, ParameterSet, TaskHead};
use ftune::error::Error;
use ftune::geometry::{
    angular_distance, distance_report, l1, mask_overlap, mean_std, per_layer_closeness, pruned_magnitude_stats,
    spearman, OverlapScope,
};
use ftune::masking::{cubic_sparsity, init_mask_params, sample_mask, BinaryMask, FreezePreset, FreezeSpec, MaskableSet, PruneSchedule};
use ftune::numerics::gradcheck::CheckConfig;
use ftune::numerics::{RngStream, Tensor};
use ftune::taskgen::{
    certify_task, gen_corpus, gen_task, CorpusSpec, Difficulty, Example, Task, TaskCertificate, TaskFamily, TaskSizes,
};
use ftune::trainers::{
    finetune_baseline, finetune_iterative_prune, finetune_supermask, full_model_gradcheck, head_only_control,
    pretrain, shuffled_control, FinetuneOutput, OptimizerConfig, PretrainOptions, RunOptions, ShuffledControl,
};

const SEEDS: u64 = 5;

/// Shared state: the pre-trained checkpoint θ̃, the tasks, and runs reused
/// by several criteria.
struct Fixture {
    cfg: ModelConfig,
    spec: CorpusSpec,
    reference: Checkpoint,
    pretrain_summary: String,
    easy: Task,
    hard: Task,
    hard_cert: TaskCertificate,
    other_hard: Task,
    opt: OptimizerConfig,
    baseline_easy: OnceLock<Vec<FinetuneOutput>>,
    supermask_easy: OnceLock<Vec<FinetuneOutput>>,
    shuffled_hard: OnceLock<Vec<ShuffledControl>>,
}

fn run_options(seed: u64) -> RunOptions {
    RunOptions {
        seed,
        checkpoint_every: 0,
        ..RunOptions::default()
    }
}

fn accuracy(out: &FinetuneOutput) -> f64 {
    out.record.final_metric_mean
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    mean_std(&v).0
}

fn fmt_list(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

impl Fixture {
    fn build() -> Result<Fixture> {
        let cfg = ModelConfig::default();
        let spec = CorpusSpec::default();
        let corpus = gen_corpus(&spec, 8000, &RngStream::named(1, "corpus"))?;
        let pre = pretrain(
            &cfg,
            &corpus,
            &OptimizerConfig::pretraining(),
            &PretrainOptions {
                seed: 1,
                ..PretrainOptions::default()
            },
        )?;
        // θ̃ is the checkpoint as stored: every value is exactly an f32.
        let reference = decode_checkpoint(&encode_checkpoint(&pre.params)?)?;
        let pretrain_summary = format!(
            "pre-training: held-out loss {:.3} -> {:.3}, masked accuracy {:.3}, unigram baseline {:.3}",
            pre.initial_loss,
            pre.final_loss,
            pre.masked_accuracy,
            corpus.unigram_majority_rate()
        );
        let task = |family, difficulty| gen_task(&spec, family, difficulty, TaskSizes::default(), &RngStream::named(7, "task"));
        let easy = task(TaskFamily::Pattern, Difficulty::Easy)?;
        let hard = task(TaskFamily::Pattern, Difficulty::Hard)?;
        let other_hard = task(TaskFamily::PairMatch, Difficulty::Hard)?;
        let hard_cert = certify_task(&hard, cfg.vocab_size, Some((&reference.params, &cfg)))?;
        Ok(Fixture {
            cfg,
            spec,
            reference,
            pretrain_summary,
            easy,
            hard,
            hard_cert,
            other_hard,
            opt: OptimizerConfig::default(),
            baseline_easy: OnceLock::new(),
            supermask_easy: OnceLock::new(),
            shuffled_hard: OnceLock::new(),
        })
    }

    fn theta(&self) -> &ParameterSet {
        &self.reference.params
    }

    fn baseline_easy(&self) -> Result<&[FinetuneOutput]> {
        cached(&self.baseline_easy, || {
            (0..SEEDS)
                .map(|s| Ok(finetune_baseline(self.theta(), &self.cfg, &self.easy, None, &self.opt, &run_options(s))?))
                .collect()
        })
    }

    fn supermask_easy(&self) -> Result<&[FinetuneOutput]> {
        cached(&self.supermask_easy, || {
            (0..SEEDS)
                .map(|s| Ok(finetune_supermask(self.theta(), &self.cfg, &self.easy, 0.0, &self.opt, &run_options(s))?))
                .collect()
        })
    }

    fn shuffled_hard(&self) -> Result<&[ShuffledControl]> {
        cached(&self.shuffled_hard, || {
            (0..SEEDS)
                .map(|s| Ok(shuffled_control(self.theta(), &self.cfg, &self.hard, 0.0, &self.opt, &run_options(s))?))
                .collect()
        })
    }
}

fn cached<T>(cell: &OnceLock<Vec<T>>, make: impl FnOnce() -> Result<Vec<T>>) -> Result<&[T]> {
    if cell.get().is_none() {
        let v = make()?;
        let _ = cell.set(v);
    }
    Ok(cell.get().expect("just set"))
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

// 1 ─────────────────────────────────────────────────────────────────────────
fn gradient_soundness(fx: &Fixture) -> Result<Verdict> {
    let start = Instant::now();
    let cfg = &fx.cfg;
    let params = init_model(cfg, InitScheme::Uniform, &RngStream::named(21, "init"))?;
    let ms = MaskableSet::default_for(cfg, true);
    let mask = sample_mask(&init_mask_params(&params, &ms, 0.3, 0.5)?, &RngStream::named(21, "mask"));
    let head = TaskHead::init(HeadKind::Classification(2), cfg.hidden_size, &mut RngStream::named(21, "head"));
    let examples: Vec<Example> = fx.easy.train[..4].to_vec();
    let s = full_model_gradcheck(cfg, &params, Some(&mask), &head, &examples, 100, &RngStream::named(21, "coords"), CheckConfig::default())?;
    let elapsed = start.elapsed().as_secs_f64();
    let coords: usize = s.tensors.iter().map(|t| t.report.checks.len()).sum();
    let full = s.tensors.iter().all(|t| t.report.checks.len() == t.size.min(100));
    let pass = s.passed() && full && s.config.step == 1e-6 && s.config.rel_tol == 1e-4 && elapsed < 120.0;
    verdict(
        pass,
        format!(
            "{} leaves ({} parameter tensors), {coords} coordinates, worst relative error {:.2e} (floor {:.1e})",
            s.tensors.len(),
            params.len(),
            s.max_rel_error(),
            s.config.abs_floor
        ),
    )
}

// 2 ─────────────────────────────────────────────────────────────────────────
fn random_baseline_geometry(fx: &Fixture) -> Result<Verdict> {
    let a = init_model(&fx.cfg, InitScheme::Uniform, &RngStream::named(31, "init"))?;
    let b = init_model(&fx.cfg, InitScheme::Uniform, &RngStream::named(32, "init"))?;
    let names: Vec<&str> = a.names().filter(|n| is_weight_matrix(n)).collect();
    let (x, y) = (a.flatten_subset(&names)?, b.flatten_subset(&names)?);
    let ang = angular_distance(&x, &y)?;
    let c = 1.0 / (fx.cfg.hidden_size as f64).sqrt();
    let n = 1_000_000;
    let (mut r1, mut r2) = (RngStream::named(33, "mc"), RngStream::named(34, "mc"));
    let u: Vec<f64> = (0..n).map(|_| r1.uniform_range(-c, c)).collect();
    let v: Vec<f64> = (0..n).map(|_| r2.uniform_range(-c, c)).collect();
    let per_elem = l1(&u, &v)? / n as f64;
    let closed = 2.0 * c / 3.0;
    let rel = (per_elem / closed - 1.0).abs();
    verdict(
        x.len() >= 10_000 && (ang - 0.5).abs() <= 0.01 && rel < 0.01,
        format!(
            "angular {ang:.4} over {} dims; L1/elem {per_elem:.5} vs 2c/3 = {closed:.5} (rel {rel:.4})",
            x.len()
        ),
    )
}

// 3 ─────────────────────────────────────────────────────────────────────────
fn closeness(fx: &Fixture) -> Result<Verdict> {
    let out = &fx.baseline_easy()?[0];
    let names: Vec<&str> = fx.theta().names().collect();
    let rep = distance_report(fx.theta(), &out.params, &names)?;
    let layers = per_layer_closeness(fx.theta(), &out.params, &fx.cfg)?;
    let table = layers
        .iter()
        .map(|l| format!("{}.{}={:.4}", l.block, l.role, l.angular.unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join(" ");
    println!("      per-layer angular distance: {table}");
    let random = {
        let r = init_model(&fx.cfg, InitScheme::Uniform, &RngStream::named(41, "init"))?;
        let w: Vec<&str> = r.names().filter(|n| is_weight_matrix(n)).collect();
        let other = init_model(&fx.cfg, InitScheme::Uniform, &RngStream::named(42, "init"))?;
        angular_distance(&r.flatten_subset(&w)?, &other.flatten_subset(&w)?)?
    };
    let d = rep.global_angular;
    verdict(
        out.record.iterations <= 2000 && d < 0.1 && 5.0 * d <= random,
        format!(
            "baseline ({} steps, accuracy {:.3}): global angular {d:.4}, random pair {random:.4} ({:.0}x)",
            out.record.iterations,
            accuracy(out),
            random / d
        ),
    )
}

// 4 ─────────────────────────────────────────────────────────────────────────
fn l0_closeness(fx: &Fixture) -> Result<Verdict> {
    let start = Instant::now();
    let base = fx.baseline_easy()?;
    let presets = [FreezePreset::KeyProjections, FreezePreset::DeepestBlocks, FreezePreset::WordEmbedding];
    let spec = FreezeSpec::from_presets(&presets, &fx.cfg);
    let mut expected: BTreeMap<String, usize> = BTreeMap::new();
    for p in presets {
        for n in p.tensor_names(&fx.cfg) {
            expected.insert(n.clone(), fx.theta().get(&n)?.len());
        }
    }
    let expected_trainable = fx.theta().num_params() - expected.values().sum::<usize>();
    ensure!(spec.trainable_count(fx.theta())? == expected_trainable, "trainable count disagrees with preset accounting");
    let mut accs = Vec::new();
    let mut identical = true;
    for s in 0..SEEDS {
        let out = finetune_baseline(fx.theta(), &fx.cfg, &fx.easy, Some(&spec), &fx.opt, &run_options(s))?;
        for name in spec.excluded() {
            identical &= out.params.get(name)? == fx.theta().get(name)?;
        }
        accs.push(accuracy(&out));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (m, b) = (mean(accs.iter().copied()), mean(base.iter().map(accuracy)));
    verdict(
        identical && (m - b).abs() <= 0.05 && elapsed < 600.0,
        format!(
            "{} frozen tensors bit-identical: {identical}; trainable {expected_trainable} of {}; accuracy {m:.3} [{}] vs baseline {b:.3} [{}]; {elapsed:.0}s",
            spec.num_excluded_tensors(),
            fx.theta().num_params(),
            fmt_list(accs),
            fmt_list(base.iter().map(accuracy))
        ),
    )
}

// 5 ─────────────────────────────────────────────────────────────────────────
fn supermask_learns(fx: &Fixture) -> Result<Verdict> {
    let before = fx.theta().checksum();
    let b = mean(fx.baseline_easy()?.iter().map(accuracy));
    let zero = fx.supermask_easy()?;
    let mut dense_weights_untouched = zero.iter().all(|o| o.params.checksum() == before);
    let mut at03 = Vec::new();
    for s in 0..SEEDS {
        let o = finetune_supermask(fx.theta(), &fx.cfg, &fx.easy, 0.3, &fx.opt, &run_options(s))?;
        dense_weights_untouched &= o.params.checksum() == before;
        ensure!(o.record.final_metric_samples.len() == 10, "final metric must average 10 mask samples");
        at03.push(o);
    }
    let unchanged = fx.theta().checksum() == before && dense_weights_untouched;
    let (m0, m3) = (mean(zero.iter().map(accuracy)), mean(at03.iter().map(accuracy)));
    verdict(
        unchanged && (m0 - b).abs() <= 0.05 && (m3 - b).abs() <= 0.05,
        format!(
            "baseline {b:.3}; init 0: {m0:.3} [{}]; init 0.3: {m3:.3} [{}]; θ̃ checksum unchanged: {unchanged}",
            fmt_list(zero.iter().map(accuracy)),
            fmt_list(at03.iter().map(accuracy))
        ),
    )
}

// 6 ─────────────────────────────────────────────────────────────────────────
fn learning_rate_sensitivity(fx: &Fixture) -> Result<Verdict> {
    let majority = fx.hard.majority_rate();
    let default = &fx.shuffled_hard()?[0].reference;
    let equal = OptimizerConfig {
        mask_lr: fx.opt.weight_lr,
        ..fx.opt.clone()
    };
    let slow = finetune_supermask(fx.theta(), &fx.cfg, &fx.hard, 0.0, &equal, &run_options(0))?;
    let flipped = |o: &FinetuneOutput| -> f64 {
        let nu = o.mask_params.as_ref().expect("supermask logits");
        let neg = nu.iter().flat_map(|(_, t)| t.data().iter()).filter(|&&v| v < 0.0).count();
        neg as f64 / nu.num_entries() as f64
    };
    verdict(
        accuracy(&slow) <= majority + 0.05 && accuracy(default) > majority + 0.05,
        format!(
            "majority {majority:.3}; mask-lr = weight-lr ({:.0e}): {:.3} ({:.4}% logits flipped); default ratio {:.0}: {:.3} ({:.2}% flipped)",
            equal.mask_lr,
            accuracy(&slow),
            100.0 * flipped(&slow),
            fx.opt.mask_lr / fx.opt.weight_lr,
            accuracy(default),
            100.0 * flipped(default)
        ),
    )
}

// 7 ─────────────────────────────────────────────────────────────────────────
fn sparsity_control(fx: &Fixture) -> Result<Verdict> {
    let grid: Vec<f64> = (0..=6).map(|i| i as f64 / 10.0).collect();
    let mut finals = Vec::new();
    for &init in &grid {
        let f = if init == 0.0 {
            fx.supermask_easy()?[0].record.final_sparsity
        } else {
            finetune_supermask(fx.theta(), &fx.cfg, &fx.easy, init, &fx.opt, &run_options(0))?.record.final_sparsity
        };
        finals.push(f.ok_or_else(|| anyhow!("supermask run without final sparsity"))?);
    }
    let rho = spearman(&grid, &finals)?;
    let pushed_up = finals[0] > grid[0];
    verdict(
        rho > 0.9 && pushed_up,
        format!(
            "init {} -> final {}; Spearman {rho:.3}; final > init at 0: {pushed_up}",
            fmt_list(grid.iter().copied()),
            fmt_list(finals.iter().copied())
        ),
    )
}

// 8 ─────────────────────────────────────────────────────────────────────────
fn head_only(fx: &Fixture) -> Result<Verdict> {
    let majority = fx.hard.majority_rate();
    let certified = fx.hard_cert.is_valid() && fx.hard_cert.is_head_inseparable();
    let mut accs = Vec::new();
    for s in 0..SEEDS {
        let o = head_only_control(fx.theta(), &fx.cfg, &fx.hard, &fx.opt, &run_options(s))?;
        ensure!(o.params == *fx.theta(), "head-only run changed the encoder");
        ensure!(o.record.iterations == fx.opt.total_steps, "iteration count");
        accs.push(accuracy(&o));
    }
    let within = accs.iter().all(|a| (a - majority).abs() <= 0.1);
    verdict(
        certified && within,
        format!(
            "{}: certified head-inseparable {certified} (frozen probe {:.3}); majority {majority:.3}; head-only [{}]",
            fx.hard.name,
            fx.hard_cert.frozen_probe.as_ref().map_or(f64::NAN, |p| p.eval_accuracy),
            fmt_list(accs)
        ),
    )
}

// 9 ─────────────────────────────────────────────────────────────────────────
fn shuffled(fx: &Fixture) -> Result<Verdict> {
    let runs = fx.shuffled_hard()?;
    let positive = runs.iter().filter(|r| r.gap > 0.0).count();
    verdict(
        positive >= 4,
        format!(
            "{}: θ̃ [{}] vs shuffled [{}]; gaps [{}]; positive on {positive} of {SEEDS}",
            fx.hard.name,
            fmt_list(runs.iter().map(|r| accuracy(&r.reference))),
            fmt_list(runs.iter().map(|r| accuracy(&r.shuffled))),
            fmt_list(runs.iter().map(|r| r.gap))
        ),
    )
}

// 10 ────────────────────────────────────────────────────────────────────────
fn nontrivial_masks(fx: &Fixture) -> Result<Verdict> {
    let out = &fx.supermask_easy()?[0];
    let mask = out.mask.as_ref().ok_or_else(|| anyhow!("no mask"))?;
    let s = pruned_magnitude_stats(fx.theta(), mask)?;
    let ratio = s.mask_mean / s.pruned_mean;
    verdict(
        ratio >= 3.0 && s.overlap < 0.5,
        format!(
            "sparsity {:.3}: mean |θ̃| on mask zeros {:.4} vs magnitude-pruned {:.4} ({ratio:.1}x); zero-set overlap {:.1}%",
            s.sparsity,
            s.mask_mean,
            s.pruned_mean,
            100.0 * s.overlap
        ),
    )
}

// 11 ────────────────────────────────────────────────────────────────────────
fn iterative_pruning(fx: &Fixture) -> Result<Verdict> {
    let mut exact = true;
    for (total, sf) in [(500usize, 0.5), (100, 0.9), (2, 0.3), (1000, 0.125)] {
        let s = PruneSchedule::new(sf, total, 10)?;
        exact &= cubic_sparsity(0, &s)? == 0.0
            && cubic_sparsity(total / 2, &s)? == 0.875 * sf
            && cubic_sparsity(total, &s)? == sf;
    }
    let schedule = PruneSchedule::new(0.5, fx.opt.total_steps, 10)?;
    let mut monotone = true;
    let mut on_target = true;
    let mut accs = Vec::new();
    let mut events = 0;
    for seed in 0..SEEDS {
        let o = finetune_iterative_prune(fx.theta(), &fx.cfg, &fx.easy, &schedule, &fx.opt, &run_options(seed))?;
        events = o.prune_events.len();
        let ones = BinaryMask::ones(fx.theta(), &MaskableSet::default_for(&fx.cfg, true))?;
        let mut prev = &ones;
        for e in &o.prune_events {
            for (name, m) in e.mask.iter() {
                let p = prev.get(name).expect("same tensors");
                monotone &= m.data().iter().zip(p.data()).all(|(a, b)| a <= b);
                let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
                on_target &= zeros == (e.target * m.len() as f64).floor() as usize;
            }
            prev = &e.mask;
        }
        let last = o.prune_events.last().ok_or_else(|| anyhow!("no prune events"))?;
        on_target &= last.target == 0.5 && o.mask.as_ref() == Some(&last.mask);
        accs.push(accuracy(&o));
    }
    let b = mean(fx.baseline_easy()?.iter().map(accuracy));
    let m = mean(accs.iter().copied());
    verdict(
        exact && monotone && on_target && (m - b).abs() <= 0.05,
        format!(
            "schedule exact: {exact}; {events} prune events per run, monotone: {monotone}, per-tensor counts on schedule: {on_target}; s_f=0.5 accuracy {m:.3} [{}] vs baseline {b:.3}",
            fmt_list(accs)
        ),
    )
}

// 12 ────────────────────────────────────────────────────────────────────────
fn mask_overlap_chance(fx: &Fixture) -> Result<Verdict> {
    let runs = fx.shuffled_hard()?;
    let a = runs[0].reference.mask.clone().ok_or_else(|| anyhow!("no mask"))?;
    let a_seed = runs[1].reference.mask.clone().ok_or_else(|| anyhow!("no mask"))?;
    let other = finetune_supermask(fx.theta(), &fx.cfg, &fx.other_hard, 0.0, &fx.opt, &run_options(0))?;
    let b = other.mask.clone().ok_or_else(|| anyhow!("no mask"))?;
    let masks = vec![
        (fx.hard.name.clone(), a),
        (fx.other_hard.name.clone(), b),
        (format!("{} seed 1", fx.hard.name), a_seed),
    ];
    let g = mask_overlap(&masks, &OverlapScope::Global, &RngStream::named(0, "overlap"))?;
    let z = |i: usize, j: usize| -> Result<f64> {
        let v = g.values[i][j].ok_or_else(|| anyhow!("empty zero set"))?;
        let sd = g.chance_std(i, j).ok_or_else(|| anyhow!("empty zero set"))?;
        Ok((v - g.chance[i][j]) / sd)
    };
    let (zab, zba, zseed) = (z(0, 1)?, z(1, 0)?, z(0, 2)?);
    verdict(
        zab.abs() <= 3.0 && zba.abs() <= 3.0,
        format!(
            "{} vs {} (accuracies {:.3}/{:.3}): overlap {:.4} vs chance {:.4} ({zab:+.2} sd), reverse {:.4} vs {:.4} ({zba:+.2} sd); same task other seed {:.4} vs {:.4} ({zseed:+.2} sd, informational)",
            fx.hard.name,
            fx.other_hard.name,
            accuracy(&runs[0].reference),
            accuracy(&other),
            g.values[0][1].unwrap_or(f64::NAN),
            g.chance[0][1],
            g.values[1][0].unwrap_or(f64::NAN),
            g.chance[1][0],
            g.values[0][2].unwrap_or(f64::NAN),
            g.chance[0][2]
        ),
    )
}

// 13 ────────────────────────────────────────────────────────────────────────
fn storage_and_compute(fx: &Fixture) -> Result<Verdict> {
    let out = &fx.shuffled_hard()?[0].reference;
    let mask = out.mask.clone().ok_or_else(|| anyhow!("no mask"))?;
    let ck_bytes = encode_checkpoint(fx.theta())?;
    let bundle = MaskBundle {
        reference_crc: fx.reference.crc,
        meta: BundleMeta {
            task: fx.hard.name.clone(),
            initial_sparsity: Some(0.0),
            final_sparsity: mask.sparsity().global,
            iterations: out.record.iterations as u64,
        },
        mask: mask.clone(),
        head: out.head.clone(),
    };
    let bundle_bytes = encode_bundle(&bundle, &fx.reference)?;
    let restored = decode_bundle(&bundle_bytes, &fx.reference)?;
    ensure!(restored.mask == mask, "bundle mask round trip");
    let size_ratio = ck_bytes.len() as f64 / bundle_bytes.len() as f64;

    let model = SparseModel::new(fx.theta(), Some(&restored.mask), &fx.cfg)?;
    let block_sparsity = restored.mask.sparsity().global_without_embedding;
    let mut max_diff: f64 = 0.0;
    let mut worst_ratio_err: f64 = 0.0;
    let mut agree = 0;
    let mut unused = RngStream::named(0, "eval");
    for ex in &fx.hard.eval {
        let dense = encode(fx.theta(), &fx.cfg, Some(&restored.mask), &ex.tokens, &mut unused, false)?;
        let sparse = sparse_encode(&model, &ex.tokens)?;
        max_diff = max_diff.max(dense.max_abs_diff(&sparse.pooled));
        worst_ratio_err = worst_ratio_err.max((sparse.multiply_ratio() - (1.0 - block_sparsity)).abs());
        agree += usize::from(restored.head.predict(&dense)? == restored.head.predict(&sparse.pooled)?);
    }
    verdict(
        size_ratio >= 30.0 && max_diff < 1e-10 && worst_ratio_err <= 0.01 && agree == fx.hard.eval.len(),
        format!(
            "checkpoint {} B vs bundle {} B ({size_ratio:.1}x); sparse vs dense max |diff| {max_diff:.1e}, predictions agree {agree}/{}; multiply ratio vs 1 - block sparsity ({:.4}): worst error {worst_ratio_err:.2e}",
            ck_bytes.len(),
            bundle_bytes.len(),
            fx.hard.eval.len(),
            1.0 - block_sparsity
        ),
    )
}

// 14 ────────────────────────────────────────────────────────────────────────
fn random_params(rng: &mut RngStream) -> ParameterSet {
    let mut p = ParameterSet::new();
    let count = 1 + rng.below(5);
    for i in 0..count {
        let name_len = rng.below(24);
        let mut name: String = (0..name_len).map(|_| (b'a' + rng.below(26) as u8) as char).collect();
        name.push_str(&format!(".{i}"));
        let rank = 1 + rng.below(3);
        let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(9)).collect();
        let n: usize = shape.iter().product();
        let scale = 10f64.powi(rng.below(7) as i32 - 3);
        let data = (0..n).map(|_| rng.normal() * scale).collect();
        p.insert(name, Tensor::new(shape, data).expect("shape"));
    }
    p
}

fn crc_detected(e: &Error, pos: usize) -> bool {
    // A damaged length field that claims more bytes than the file holds is
    // reported as truncation after the checksum has already failed.
    matches!(e, Error::CrcMismatch { .. }) || (matches!(e, Error::Truncated { .. }) && (12..16).contains(&pos))
}

fn serialization(_fx: &Fixture) -> Result<Verdict> {
    let mut rng = RngStream::named(14, "fuzz");
    let (mut mismatches, mut undetected) = (0usize, 0usize);
    let iterations = 1000;
    for _ in 0..iterations {
        let p = random_params(&mut rng);
        let bytes = encode_checkpoint(&p)?;
        let ck = decode_checkpoint(&bytes)?;
        mismatches += usize::from(ck.params != quantize_f32(&p));

        let mut maskable: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in p.iter() {
            if rng.uniform() < 0.7 {
                let density = rng.uniform();
                let bits = t.data().iter().map(|_| f64::from(u8::from(rng.uniform() < density))).collect();
                maskable.push((n.to_string(), Tensor::new(t.shape().to_vec(), bits)?));
            }
        }
        let mask = BinaryMask::new(maskable)?;
        let hidden = 1 + rng.below(8);
        let kind = if rng.uniform() < 0.5 { HeadKind::Regression } else { HeadKind::Classification(2 + rng.below(3)) };
        let w = (0..hidden * kind.outputs()).map(|_| rng.normal() as f32 as f64).collect();
        let b = (0..kind.outputs()).map(|_| rng.normal() as f32 as f64).collect();
        let bundle = MaskBundle {
            reference_crc: ck.crc,
            meta: BundleMeta {
                task: format!("task-{}", rng.below(1000)),
                initial_sparsity: if rng.uniform() < 0.5 { None } else { Some(rng.uniform()) },
                final_sparsity: mask.sparsity().global,
                iterations: rng.below(100_000) as u64,
            },
            mask,
            head: TaskHead::new(kind, Tensor::new(vec![hidden, kind.outputs()], w)?, Tensor::new(vec![kind.outputs()], b)?)?,
        };
        let bb = encode_bundle(&bundle, &ck)?;
        mismatches += usize::from(decode_bundle(&bb, &ck)? != bundle);

        for (orig, is_bundle) in [(&bytes, false), (&bb, true)] {
            let mut damaged = orig.clone();
            let pos = rng.below(damaged.len());
            damaged[pos] ^= 1 + rng.below(255) as u8;
            let res = if is_bundle { decode_bundle(&damaged, &ck).map(|_| ()) } else { decode_checkpoint(&damaged).map(|_| ()) };
            match res {
                Err(e) if crc_detected(&e, pos) => {}
                _ => undetected += 1,
            }
        }
    }
    verdict(
        mismatches == 0 && undetected == 0,
        format!("{iterations} iterations: {mismatches} round-trip mismatches, {undetected} of {} single-byte corruptions undetected", 2 * iterations),
    )
}

// 15 ────────────────────────────────────────────────────────────────────────
fn ftune(args: &[&str]) -> Result<Output> {
    let out = Command::new(env!("CARGO_BIN_EXE_ftune"))
        .args(args)
        .env_remove("FT_SEED")
        .output()
        .with_context(|| format!("running ftune {}", args.join(" ")))?;
    if !out.status.success() {
        bail!("ftune {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(out)
}

fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name != "manifest.txt" && e.file_type()?.is_file() {
            out.insert(name, fs::read(e.path())?);
        }
    }
    Ok(out)
}

fn reproducibility(_fx: &Fixture) -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let p = |d: &Path, s: &str| -> String { d.join(s).to_string_lossy().into_owned() };
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# reproducibility fixture\nexec = sequential\ncheckpoint_every = 10\nbatch_size = 8\n")?;
    let cfg = cfg.to_string_lossy().into_owned();
    let steps: &[&[&str]] = &[
        &["gen-corpus", "--seed", "3", "--size", "400", "--out", "corpus"],
        &["pretrain", "--seed", "3", "--corpus", "corpus/corpus.txt", "--steps", "30", "--out", "pre"],
        &["gen-task", "--seed", "3", "--family", "pattern", "--difficulty", "easy", "--train", "120", "--eval", "60", "--checkpoint", "pre/checkpoint.ftck", "--out", "task"],
        &["finetune", "--mode", "supermask", "--init-sparsity", "0.3", "--task", "task", "--checkpoint", "pre/checkpoint.ftck", "--steps", "30", "--config", "CFG", "--out", "sm"],
        &["finetune", "--mode", "prune", "--final-sparsity", "0.5", "--task", "task", "--checkpoint", "pre/checkpoint.ftck", "--steps", "30", "--out", "prune"],
        &["finetune", "--mode", "l0close", "--freeze", "key,embed", "--task", "task", "--checkpoint", "pre/checkpoint.ftck", "--steps", "30", "--out", "l0"],
        &["finetune", "--mode", "shuffled", "--task", "task", "--checkpoint", "pre/checkpoint.ftck", "--steps", "20", "--out", "shuf"],
        &["sweep", "--mode", "supermask", "--sparsity-grid", "0,0.5", "--seeds", "2", "--task", "task", "--checkpoint", "pre/checkpoint.ftck", "--steps", "20", "--out", "sweep"],
        &["analyze", "--what", "distances", "--checkpoint", "pre/checkpoint.ftck", "--against", "l0/model.ftck", "--out", "an-dist"],
        &["analyze", "--what", "overlap", "--checkpoint", "pre/checkpoint.ftck", "--bundle", "sm/bundle.ftmk", "--bundle", "shuf/bundle.ftmk", "--out", "an-overlap"],
        &["analyze", "--what", "powerlaw", "--record", "sm/record.csv", "--out", "an-powerlaw"],
        &["analyze", "--what", "init-final", "--sweep", "sweep/sweep.csv", "--out", "an-init"],
    ];
    let mut dirs: Vec<PathBuf> = Vec::new();
    for step in steps {
        let args: Vec<String> = step
            .iter()
            .enumerate()
            .map(|(i, s)| match *s {
                "CFG" => cfg.clone(),
                s if i > 0 && !s.starts_with("--") && step[i - 1].starts_with("--") && ["--out", "--corpus", "--checkpoint", "--task", "--against", "--bundle", "--record", "--sweep"].contains(&step[i - 1]) => p(&a, s),
                s => s.to_string(),
            })
            .collect();
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ftune(&refs)?;
        dirs.push(a.join(step[step.len() - 1]));
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for d in &dirs {
        let name = d.file_name().expect("dir name").to_string_lossy().into_owned();
        let replay = b.join(&name);
        ftune(&["rerun", "--manifest", &p(d, "manifest.txt"), "--out", &replay.to_string_lossy()])?;
        let (orig, again) = (files(d)?, files(&replay)?);
        ensure!(!orig.is_empty(), "{name} produced no files");
        if orig.keys().ne(again.keys()) {
            differing.push(format!("{name}: file sets differ"));
        }
        for (f, bytes) in &orig {
            compared += 1;
            if again.get(f) != Some(bytes) {
                differing.push(format!("{name}/{f}"));
            }
        }
    }
    verdict(
        differing.is_empty(),
        format!(
            "{} commands rerun from their manifests, {compared} CSVs/artifacts compared, {} differ{}",
            dirs.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

type Criterion = (&'static str, fn(&Fixture) -> Result<Verdict>);

const CRITERIA: [Criterion; 15] = [
    ("gradient soundness", gradient_soundness),
    ("random-baseline geometry", random_baseline_geometry),
    ("closeness after fine-tuning", closeness),
    ("L0-close fine-tuning", l0_closeness),
    ("supermask learns", supermask_learns),
    ("learning-rate sensitivity", learning_rate_sensitivity),
    ("sparsity control", sparsity_control),
    ("head-only control", head_only),
    ("shuffled-weights control", shuffled),
    ("supermasks are non-trivial", nontrivial_masks),
    ("iterative pruning", iterative_pruning),
    ("mask overlap at chance", mask_overlap_chance),
    ("storage and compute", storage_and_compute),
    ("serialization", serialization),
    ("reproducibility", reproducibility),
];

fn main() {
    // `cargo test -- <filter>` runs the criteria whose number or name
    // contains the filter; flags passed by cargo are ignored.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<(usize, &Criterion)> = CRITERIA
        .iter()
        .enumerate()
        .map(|(i, c)| (i + 1, c))
        .filter(|(i, (name, _))| {
            filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()) || *f == i.to_string())
        })
        .collect();
    if selected.is_empty() {
        println!("acceptance: no criteria match {filters:?}");
        return;
    }
    let start = Instant::now();
    println!("acceptance: building shared fixture (pre-training the desk-scale encoder)");
    let fx = match Fixture::build() {
        Ok(f) => f,
        Err(e) => {
            println!("FAIL  fixture: {e:#}");
            std::process::exit(1);
        }
    };
    println!("      {} ({:.0}s)", fx.pretrain_summary, start.elapsed().as_secs_f64());
    println!(
        "      tasks: easy {} / hard {} (probe {:.3}) / second hard {}; corpus vocabulary {}",
        fx.easy.name, fx.hard.name, fx.hard_cert.frozen_probe.as_ref().map_or(f64::NAN, |p| p.eval_accuracy), fx.other_hard.name, fx.spec.vocab_size
    );
    let mut failed = 0;
    for (i, (name, check)) in &selected {
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| check(&fx)));
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(p) => (
                false,
                format!(
                    "panicked: {}",
                    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
                ),
            ),
        };
        failed += usize::from(!pass);
        println!("{}  [{i:02}] {name}: {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        selected.len() - failed,
        selected.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
