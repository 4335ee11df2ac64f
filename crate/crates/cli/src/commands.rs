//! The six subcommands. Each one consumes its slice of the flat config,
//! does its work under the output directory, and leaves a resolved-config
//! snapshot there so the exact run can be reproduced from the snapshot
//! alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use t2d_core::infer::{
    binarize, count_windows, fuse_views, fuse_views_mean, predict_axis_net, WindowScheme,
    BINARIZE_THRESHOLD,
};
use t2d_core::metrics::{
    dsc, inter_slice_similarity, inter_slice_similarity_normalized, EvalReport,
};
use t2d_core::model::{FusionMode, T2DNet};
use t2d_core::phantom;
use t2d_core::train::{train, GroupSampler};
use t2d_core::volume::{Axis, Volume};
use t2d_core::Real;

use crate::config::{model_from, parse_list, phantom_from, train_from, Config};
use crate::error::{runtime, validation, CliError, Result};
use crate::format::{
    aggregate_report, eval_csv, loss_csv, manifest_tsv, read_checkpoint, read_manifest,
    read_volume, write_checkpoint, write_text, write_volume, ManifestRow,
};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_snapshot(out: &Path, resolved: &BTreeMap<String, String>) -> Result<()> {
    write_text(&out.join("config.resolved"), &Config::snapshot(resolved))
}

pub fn cmd_generate(mut cfg: Config, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let count = cfg.parse("generate.count", 8usize)?;
    let train_fraction = cfg.parse("generate.train_fraction", 0.8 as Real)?;
    let phantom_cfg = phantom_from(&mut cfg, seed)?;
    let resolved = cfg.finish()?;

    let (train_cases, test_cases) = phantom::make_dataset(count, &phantom_cfg, train_fraction)?;
    ensure_dir(out)?;

    let mut rows = Vec::new();
    for (split, cases) in [("train", &train_cases), ("test", &test_cases)] {
        for case in cases.iter() {
            let idx = case.seed.wrapping_sub(phantom_cfg.seed);
            let img_name = format!("case_{idx:03}_img.t2dv");
            let mask_name = format!("case_{idx:03}_mask.t2dv");
            write_volume(&out.join(&img_name), &case.intensity)?;
            write_volume(&out.join(&mask_name), &case.mask)?;
            for name in [img_name, mask_name] {
                rows.push(ManifestRow {
                    filename: name,
                    seed: case.seed,
                    family: phantom_cfg.family.name().to_string(),
                    split: split.to_string(),
                });
            }
        }
    }
    write_text(&out.join("manifest.tsv"), &manifest_tsv(&rows))?;
    write_snapshot(out, &resolved)?;
    println!(
        "generated {count} volumes ({} train, {} test) under {}",
        train_cases.len(),
        test_cases.len(),
        out.display()
    );
    Ok(())
}

/// Loads `(image, mask)` pairs for both splits from a dataset directory,
/// pairing manifest rows by their `_img` / `_mask` stems.
fn load_splits(dir: &Path) -> Result<(Vec<(Volume, Volume)>, Vec<(Volume, Volume)>)> {
    let rows = read_manifest(&dir.join("manifest.tsv"))?;
    // stem -> (split, img path, mask path)
    let mut pairs: BTreeMap<String, (String, Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for row in &rows {
        let (stem, is_img) = if let Some(s) = row.filename.strip_suffix("_img.t2dv") {
            (s, true)
        } else if let Some(s) = row.filename.strip_suffix("_mask.t2dv") {
            (s, false)
        } else {
            return Err(validation(format!(
                "manifest filename '{}' does not end in _img.t2dv or _mask.t2dv",
                row.filename
            )));
        };
        if row.split != "train" && row.split != "test" {
            return Err(validation(format!(
                "manifest split '{}' is neither train nor test",
                row.split
            )));
        }
        let entry = pairs
            .entry(stem.to_string())
            .or_insert_with(|| (row.split.clone(), None, None));
        if entry.0 != row.split {
            return Err(validation(format!(
                "case '{stem}' appears in both splits"
            )));
        }
        let slot = if is_img { &mut entry.1 } else { &mut entry.2 };
        if slot.replace(dir.join(&row.filename)).is_some() {
            return Err(validation(format!(
                "duplicate manifest entry for '{}'",
                row.filename
            )));
        }
    }

    let mut train_cases = Vec::new();
    let mut test_cases = Vec::new();
    for (stem, (split, img, mask)) in pairs {
        let (img, mask) = match (img, mask) {
            (Some(i), Some(m)) => (i, m),
            _ => {
                return Err(validation(format!(
                    "case '{stem}' is missing its image or mask file in the manifest"
                )))
            }
        };
        let pair = (read_volume(&img)?, read_volume(&mask)?);
        if split == "train" {
            train_cases.push(pair);
        } else {
            test_cases.push(pair);
        }
    }
    Ok((train_cases, test_cases))
}

/// Sliding inference along all three axes, majority fusion, full metrics.
/// Returns the core error type so it can run inside training callbacks.
pub fn evaluate_net(
    net: &T2DNet,
    img: &Volume,
    gt: &Volume,
    case: String,
) -> t2d_core::Result<EvalReport> {
    let mut masks = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let prob = predict_axis_net(net, img, axis)?;
        masks.push(binarize(&prob, BINARIZE_THRESHOLD)?);
    }
    let fused = fuse_views(&masks[0], &masks[1], &masks[2])?;
    Ok(EvalReport {
        case,
        dsc_coronal: dsc(gt, &masks[0])?,
        dsc_sagittal: dsc(gt, &masks[1])?,
        dsc_axial: dsc(gt, &masks[2])?,
        dsc_fused: dsc(gt, &fused)?,
        inter_slice: inter_slice_similarity(&fused, gt)?,
        inter_slice_normalized: inter_slice_similarity_normalized(&fused, gt)?,
        cost: None,
    })
}

pub fn cmd_train(mut cfg: Config, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let data_dir = PathBuf::from(cfg.require("train.data")?);
    let model_cfg = model_from(&mut cfg, seed)?;
    let train_cfg = train_from(&mut cfg, seed)?;
    let resolved = cfg.finish()?;

    let (train_cases, test_cases) = load_splits(&data_dir)?;
    if train_cases.is_empty() {
        return Err(validation(format!(
            "no training cases in {}",
            data_dir.display()
        )));
    }
    if train_cfg.eval_every > 0 && test_cases.is_empty() {
        return Err(validation(
            "train.eval_every needs a test split in the dataset".to_string(),
        ));
    }
    ensure_dir(out)?;

    let mut net = T2DNet::build(model_cfg)?;
    println!(
        "training {} (k={}, {} parameters) on {} volumes",
        net.config.fusion_mode.name(),
        net.config.k,
        net.param_count(),
        train_cases.len()
    );

    let mut sampler = GroupSampler::new(
        &train_cases,
        train_cfg.axis,
        net.config.k,
        net.config.input_size,
        train_cfg.seed,
    )?;
    let mut best: Option<(Real, T2DNet)> = None;
    let mut eval_rows: Vec<EvalReport> = Vec::new();
    let eval_every = train_cfg.eval_every;
    let curve = train(
        &mut net,
        |_| sampler.next_batch(train_cfg.batch_size),
        &train_cfg,
        |n, p| {
            if best.as_ref().map_or(true, |(l, _)| p.loss < *l) {
                best = Some((p.loss, n.clone()));
            }
            if eval_every > 0 && (p.iteration + 1) % eval_every == 0 {
                let (img, gt) = &test_cases[0];
                let row = evaluate_net(n, img, gt, format!("iter_{:05}", p.iteration + 1))?;
                println!(
                    "iter {:>5}  loss {:.4}  fused dsc {:.4}",
                    p.iteration + 1,
                    p.loss,
                    row.dsc_fused
                );
                eval_rows.push(row);
            }
            Ok(())
        },
    )?;

    let (best_loss, best_net) = best.expect("at least one iteration ran");
    write_checkpoint(&out.join("model_final.t2dc"), &net)?;
    write_checkpoint(&out.join("model_best.t2dc"), &best_net)?;
    write_text(&out.join("loss.csv"), &loss_csv(&curve))?;
    if !eval_rows.is_empty() {
        write_text(&out.join("eval.csv"), &eval_csv(&eval_rows))?;
    }
    write_snapshot(out, &resolved)?;
    println!(
        "final loss {:.6}, best loss {:.6}; checkpoints under {}",
        curve.last().expect("non-empty curve").loss,
        best_loss,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum FusionRule {
    Majority,
    Mean,
}

fn fusion_rule(cfg: &mut Config, key: &str) -> Result<FusionRule> {
    let raw = cfg.parse(key, "majority".to_string())?;
    match raw.as_str() {
        "majority" => Ok(FusionRule::Majority),
        "mean" => Ok(FusionRule::Mean),
        other => Err(validation(format!(
            "config key '{key}': unknown fusion rule '{other}' (majority or mean)"
        ))),
    }
}

/// Combines three per-axis probability volumes into one fused mask.
fn fuse_probs(probs: &[Volume], rule: FusionRule) -> Result<Volume> {
    match rule {
        FusionRule::Majority => {
            let m: Vec<Volume> = probs
                .iter()
                .map(|p| binarize(p, BINARIZE_THRESHOLD))
                .collect::<t2d_core::Result<_>>()?;
            Ok(fuse_views(&m[0], &m[1], &m[2])?)
        }
        FusionRule::Mean => {
            let mean = fuse_views_mean(&probs[0], &probs[1], &probs[2])?;
            Ok(binarize(&mean, BINARIZE_THRESHOLD)?)
        }
    }
}

/// `data/case_007_img.t2dv -> case_007`
fn volume_stem(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    stem.strip_suffix("_img").map(str::to_string).unwrap_or(stem)
}

pub fn cmd_predict(mut cfg: Config, out: &Path) -> Result<()> {
    let _seed = cfg.seed()?;
    let checkpoint = PathBuf::from(cfg.require("predict.checkpoint")?);
    let volume_path = PathBuf::from(cfg.require("predict.volume")?);
    let axis_raw = cfg.parse("predict.axis", "three_view".to_string())?;
    let rule = fusion_rule(&mut cfg, "predict.fusion")?;
    let resolved = cfg.finish()?;

    let net = read_checkpoint(&checkpoint)?;
    let vol = read_volume(&volume_path)?;
    ensure_dir(out)?;
    let stem = volume_stem(&volume_path);

    let axes: Vec<Axis> = match axis_raw.as_str() {
        "three_view" => Axis::ALL.to_vec(),
        other => vec![Axis::parse(other)?],
    };

    let mut probs = Vec::new();
    for &axis in &axes {
        let started = Instant::now();
        let prob = predict_axis_net(&net, &vol, axis)?;
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        let cost = count_windows(
            vol.dims(),
            WindowScheme::Thick2d {
                axis,
                k: net.config.k,
            },
            &net.config,
        )?;
        println!(
            "{}: {} windows, {:.3e} MACs, {elapsed:.0} ms",
            axis.name(),
            cost.windows,
            cost.total_macs as f64
        );
        let path = out.join(format!("{stem}_prob_{}.t2dv", axis.name()));
        write_volume(&path, &prob)?;
        println!("wrote {}", path.display());
        probs.push(prob);
    }

    if axes.len() == 3 {
        let fused = fuse_probs(&probs, rule)?;
        let path = out.join(format!("{stem}_mask_fused.t2dv"));
        write_volume(&path, &fused)?;
        println!("wrote {}", path.display());
    } else {
        let mask = binarize(&probs[0], BINARIZE_THRESHOLD)?;
        let path = out.join(format!("{stem}_mask_{}.t2dv", axes[0].name()));
        write_volume(&path, &mask)?;
        println!("wrote {}", path.display());
    }
    write_snapshot(out, &resolved)?;
    Ok(())
}

pub fn cmd_evaluate(mut cfg: Config, out: &Path) -> Result<()> {
    let _seed = cfg.seed()?;
    let pred_dir = PathBuf::from(cfg.require("evaluate.pred")?);
    let gt_dir = PathBuf::from(cfg.require("evaluate.gt")?);
    let rule = fusion_rule(&mut cfg, "evaluate.fusion")?;
    let resolved = cfg.finish()?;

    let mut stems = Vec::new();
    let entries = std::fs::read_dir(&gt_dir)
        .map_err(|e| validation(format!("cannot read {}: {e}", gt_dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| validation(format!("cannot scan {}: {e}", gt_dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_mask.t2dv") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();

    let mut reports = Vec::new();
    for stem in &stems {
        let prob_paths: Vec<PathBuf> = Axis::ALL
            .iter()
            .map(|a| pred_dir.join(format!("{stem}_prob_{}.t2dv", a.name())))
            .collect();
        if !prob_paths.iter().all(|p| p.exists()) {
            continue;
        }
        let gt = read_volume(&gt_dir.join(format!("{stem}_mask.t2dv")))?;
        let probs: Vec<Volume> = prob_paths
            .iter()
            .map(|p| read_volume(p))
            .collect::<Result<_>>()?;
        let masks: Vec<Volume> = probs
            .iter()
            .map(|p| binarize(p, BINARIZE_THRESHOLD))
            .collect::<t2d_core::Result<_>>()?;
        let fused = fuse_probs(&probs, rule)?;
        reports.push(EvalReport {
            case: stem.clone(),
            dsc_coronal: dsc(&gt, &masks[0])?,
            dsc_sagittal: dsc(&gt, &masks[1])?,
            dsc_axial: dsc(&gt, &masks[2])?,
            dsc_fused: dsc(&gt, &fused)?,
            inter_slice: inter_slice_similarity(&fused, &gt)?,
            inter_slice_normalized: inter_slice_similarity_normalized(&fused, &gt)?,
            cost: None,
        });
    }
    if reports.is_empty() {
        return Err(validation(format!(
            "no ground-truth volume in {} has a full set of predictions in {}",
            gt_dir.display(),
            pred_dir.display()
        )));
    }
    let mean = aggregate_report(&reports).expect("non-empty reports");
    for r in reports.iter().chain([&mean]) {
        println!(
            "{:<12} dsc_c {:.4}  dsc_s {:.4}  dsc_a {:.4}  dsc_fused {:.4}  isim {:.4}",
            r.case, r.dsc_coronal, r.dsc_sagittal, r.dsc_axial, r.dsc_fused, r.inter_slice
        );
    }
    reports.push(mean);
    ensure_dir(out)?;
    write_text(&out.join("report.csv"), &eval_csv(&reports))?;
    write_snapshot(out, &resolved)?;
    Ok(())
}

/// How many ablation workers to run; `T2D_THREADS` caps it, default 1.
fn worker_cap() -> Result<usize> {
    match std::env::var("T2D_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(validation(format!("T2D_THREADS: {e}"))),
        Ok(s) => {
            let n: usize = s
                .parse()
                .map_err(|e| validation(format!("T2D_THREADS '{s}': {e}")))?;
            Ok(n.max(1))
        }
    }
}

struct AblateRow {
    mode: &'static str,
    k: usize,
    report: EvalReport,
}

pub fn cmd_ablate(mut cfg: Config, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let modes = parse_list(
        &mut cfg,
        "ablate.modes",
        "plain,esm,esm_concat,esm_dot,esm_ssa",
        |s| FusionMode::parse(s).map_err(CliError::from),
    )?;
    let ks = parse_list(&mut cfg, "ablate.ks", "3,6,9,12,15", |s| {
        s.parse::<usize>()
            .map_err(|e| validation(format!("ablate.ks '{s}': {e}")))
    })?;
    let count = cfg.parse("ablate.count", 10usize)?;
    let train_fraction = cfg.parse("ablate.train_fraction", 0.8 as Real)?;
    let phantom_cfg = phantom_from(&mut cfg, seed)?;
    let base_model = model_from(&mut cfg, seed)?;
    let train_cfg = train_from(&mut cfg, seed)?;
    let resolved = cfg.finish()?;

    // Every cell must be buildable before any training starts.
    let mut cells = Vec::new();
    for &mode in &modes {
        for &k in &ks {
            let mut m = base_model.clone();
            m.k = k;
            m.fusion_mode = mode;
            m.validate()?;
            cells.push(m);
        }
    }

    let (train_split, test_split) = phantom::make_dataset(count, &phantom_cfg, train_fraction)?;
    let to_pairs = |cases: Vec<phantom::PhantomCase>| -> Vec<(Volume, Volume)> {
        cases.into_iter().map(|c| (c.intensity, c.mask)).collect()
    };
    let train_cases = to_pairs(train_split);
    let test_cases = to_pairs(test_split);
    if train_cases.is_empty() || test_cases.is_empty() {
        return Err(validation(
            "ablation needs non-empty train and test splits".to_string(),
        ));
    }

    let workers = worker_cap()?.min(cells.len());
    let next_job = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<AblateRow>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let failure: Mutex<Option<CliError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = next_job.fetch_add(1, Ordering::SeqCst);
                if job >= cells.len() || failure.lock().unwrap().is_some() {
                    return;
                }
                match run_cell(&cells[job], &train_cases, &test_cases, &train_cfg) {
                    Ok(row) => {
                        slots.lock().unwrap()[job] = Some(row);
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let rows: Vec<AblateRow> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("all cells ran"))
        .collect();

    println!("{:<11} {:>3} {:>8} {:>8} {:>8} {:>8} {:>8}", "mode", "k", "dsc_c", "dsc_s", "dsc_a", "dsc_f", "isim");
    let mut csv = String::from("mode,k,dsc_coronal,dsc_sagittal,dsc_axial,dsc_fused,inter_slice\n");
    for row in &rows {
        let r = &row.report;
        println!(
            "{:<11} {:>3} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            row.mode, row.k, r.dsc_coronal, r.dsc_sagittal, r.dsc_axial, r.dsc_fused, r.inter_slice
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.mode, row.k, r.dsc_coronal, r.dsc_sagittal, r.dsc_axial, r.dsc_fused, r.inter_slice
        ));
    }
    ensure_dir(out)?;
    write_text(&out.join("ablate.csv"), &csv)?;
    write_snapshot(out, &resolved)?;
    Ok(())
}

/// Trains one ablation cell and reports test-set means.
fn run_cell(
    model_cfg: &t2d_core::model::ModelConfig,
    train_cases: &[(Volume, Volume)],
    test_cases: &[(Volume, Volume)],
    train_cfg: &t2d_core::train::TrainConfig,
) -> Result<AblateRow> {
    let mut net = T2DNet::build(model_cfg.clone())?;
    let mut sampler = GroupSampler::new(
        train_cases,
        train_cfg.axis,
        net.config.k,
        net.config.input_size,
        train_cfg.seed,
    )?;
    train(
        &mut net,
        |_| sampler.next_batch(train_cfg.batch_size),
        train_cfg,
        |_, _| Ok(()),
    )?;
    let mut reports = Vec::new();
    for (i, (img, gt)) in test_cases.iter().enumerate() {
        reports.push(evaluate_net(&net, img, gt, format!("case_{i}"))?);
    }
    let mean = aggregate_report(&reports).expect("non-empty test split");
    Ok(AblateRow {
        mode: model_cfg.fusion_mode.name(),
        k: model_cfg.k,
        report: mean,
    })
}

pub fn cmd_bench(mut cfg: Config, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let h = cfg.parse("bench.h", 512usize)?;
    let w = cfg.parse("bench.w", 512usize)?;
    let d = cfg.parse("bench.d", 394usize)?;
    let patch = (
        cfg.parse("bench.patch_h", 128usize)?,
        cfg.parse("bench.patch_w", 128usize)?,
        cfg.parse("bench.patch_d", 64usize)?,
    );
    let stride = (
        cfg.parse("bench.stride_h", 32usize)?,
        cfg.parse("bench.stride_w", 32usize)?,
        cfg.parse("bench.stride_d", 16usize)?,
    );
    let model_cfg = model_from(&mut cfg, seed)?;
    let resolved = cfg.finish()?;

    let dims = (h, w, d);
    let schemes = [
        WindowScheme::Slice2d { axis: Axis::Axial },
        WindowScheme::Thick2d {
            axis: Axis::Axial,
            k: model_cfg.k,
        },
        WindowScheme::Patch3d { patch, stride },
    ];
    let mut csv = String::from("scheme,windows,macs_per_window,total_macs\n");
    println!("{:<8} {:>8} {:>16} {:>18}", "scheme", "windows", "macs_per_window", "total_macs");
    for scheme in schemes {
        let report = count_windows(dims, scheme, &model_cfg)?;
        println!(
            "{:<8} {:>8} {:>16} {:>18}",
            report.scheme, report.windows, report.macs_per_window, report.total_macs
        );
        csv.push_str(&format!(
            "{},{},{},{}\n",
            report.scheme, report.windows, report.macs_per_window, report.total_macs
        ));
    }
    ensure_dir(out)?;
    write_text(&out.join("bench.csv"), &csv)?;
    write_snapshot(out, &resolved)?;
    Ok(())
}
