//! The command sequence: prepare folds, train the coarse box network, crop,
//! train segmenters, evaluate, compare crop modes and render reports.
//!
//! Every stage reads its inputs from and writes its outputs into one run
//! directory:
//!
//! ```text
//! run/
//!   folds.json                      fold plan shared by every later stage
//!   splits.json                     train / validation / test ids per fold
//!   prepare/                        config.json, imbalance.json
//!   coarse/fold_K/                  model.ckpt, history.csv, summary.json
//!   crops/MODE/fold_K/              cropped dataset, records.json, containment.json
//!   seg/MODE/ARCH/fold_K/           model.ckpt, history.csv, summary.json
//!   eval/MODE/                      records.csv, records.json, imbalance.json
//!   compare/                        table.csv, report.json, records.json, imbalance.json
//!   report/                         table.csv, boxplots.json, *.svg, summary.md
//!   checksums.json                  sha256 of every other file
//! ```

pub mod config;
pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{load_dataset, read_json, write_dataset, write_json, write_text, Dataset, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval_stats::{
    aggregate_report, box_stats, dice, imbalance_stats, make_folds, rand_error, records_csv, regional_slices,
    AggregateReport, BoxStats, Fold, FoldPlan, ImbalanceStats, MetricRecord, Region,
};
use crate::models::{build_model, ModelSpec};
use crate::plane::Mask;
use crate::preprocess::{augment_dataset, center_crop, minmax_normalize, SlicePair};
use crate::smartcrop::{make_boxmask_targets, paste_back, run_smartcrop, BoxSource, ContainmentReport, CropRecord};
use crate::train::{history_csv, predict_maps, train_loop, TrainConfig, TrainOutcome};

pub use config::{load_config, CropMode, EvalFrame, RunConfig};

pub const CHECKSUMS_FILE: &str = "checksums.json";
const COMPARE_METHODS: [CropMode; 2] = [CropMode::Center, CropMode::Smart];

fn fold_dir(k: usize) -> String {
    format!("fold_{k}")
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{} is missing; {hint}", path.display())))
    }
}

/// SHA-256 of every file under `dir` except the checksum file, keyed by
/// `/`-separated relative path.
pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if key == CHECKSUMS_FILE {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let hex = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            out.insert(key, hex);
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

pub fn write_checksums(dir: &Path) -> Result<()> {
    let sums = checksums(dir)?;
    write_json(&dir.join(CHECKSUMS_FILE), &sums)
}

/// Cuts the centered window from every slice.
pub fn center_frame(pairs: &[SlicePair], size: usize) -> Result<Vec<SlicePair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(SlicePair {
                image: center_crop(&p.image, size)?,
                mask: center_crop(&p.mask, size)?,
                ..p.clone()
            })
        })
        .collect()
}

fn normalize_all(pairs: &[SlicePair]) -> Vec<SlicePair> {
    pairs
        .iter()
        .map(|p| SlicePair {
            image: minmax_normalize(&p.image),
            ..p.clone()
        })
        .collect()
}

/// Whole-frame resize of every slice to `target`.
fn resize_all(pairs: &[SlicePair], target: usize) -> Result<Vec<SlicePair>> {
    Ok(run_smartcrop(pairs, BoxSource::Full, target)?.pairs)
}

/// Splits a fold's training patients into training and validation ids.
pub fn split_validation(fold: &Fold, fraction: f64, seed: u64, index: usize) -> (Vec<String>, Vec<String>) {
    let n = fold.train.len();
    let mut n_val = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut ids = fold.train.clone();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    ids.shuffle(&mut rng);
    let val = ids.split_off(n - n_val);
    ids.sort();
    let mut val = val;
    val.sort();
    (ids, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

fn splits(cfg: &RunConfig, plan: &FoldPlan) -> Vec<FoldSplit> {
    plan.folds
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let (train, validation) = split_validation(f, cfg.folds.validation_fraction, plan.seed, k);
            FoldSplit {
                fold: k,
                train,
                validation,
                test: f.test.clone(),
            }
        })
        .collect()
}

fn load_plan(run: &Path) -> Result<FoldPlan> {
    read_json(&require(run.join("folds.json"), "run `prepare` first")?)
}

fn load_source(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_dataset(&cfg.dataset)?;
    if ds.patients.is_empty() {
        return Err(Error::EmptyDataset(format!("{} lists no patients", cfg.dataset.display())));
    }
    for p in &ds.patients {
        for s in &p.pairs {
            if s.image.height < cfg.geometry.center_crop || s.image.width < cfg.geometry.center_crop {
                return Err(Error::Config(format!(
                    "geometry.center_crop {} exceeds {}×{} slice {} of patient {}",
                    cfg.geometry.center_crop, s.image.height, s.image.width, s.slice, p.id
                )));
            }
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetImbalance {
    pub original_frame: ImbalanceStats,
    pub center_crop: ImbalanceStats,
}

/// Builds the fold plan and audits the label imbalance of the raw data.
pub fn prepare(cfg: &RunConfig, run: &Path) -> Result<FoldPlan> {
    let ds = load_source(cfg)?;
    let plan = make_folds(&ds.patient_ids(), cfg.folds.k, cfg.folds.seed)
        .map_err(|e| Error::Config(format!("folds: {e}")))?;
    let plan_path = run.join("folds.json");
    if plan_path.exists() {
        let old: FoldPlan = read_json(&plan_path)?;
        if old != plan {
            return Err(Error::Config(format!(
                "{} holds a different fold plan; use a fresh run directory",
                plan_path.display()
            )));
        }
    }
    write_json(&plan_path, &plan)?;
    write_json(&run.join("splits.json"), &splits(cfg, &plan))?;

    let all = ds.all_slices();
    let framed = center_frame(&all, cfg.geometry.center_crop)?;
    let audit = DatasetImbalance {
        original_frame: imbalance_stats(all.iter().map(|p| &p.mask))?,
        center_crop: imbalance_stats(framed.iter().map(|p| &p.mask))?,
    };
    let dir = run.join("prepare");
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("imbalance.json"), &audit)?;
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub spec: ModelSpec,
    pub seed: u64,
    pub train_slices: usize,
    pub validation_slices: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub adam_steps: u64,
}

fn fit_and_save(
    spec: &ModelSpec,
    seed: u64,
    train: &[SlicePair],
    val: &[SlicePair],
    tcfg: &TrainConfig,
    dir: &Path,
) -> Result<TrainOutcome> {
    let (model, store) = build_model::<f32>(spec, seed)?;
    let out = train_loop(&model, store, train, val, tcfg)?;
    let meta = CheckpointMeta::new(spec, &out.store, seed, out.best_epoch, out.best_val_dice, out.adam_steps);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&dir.join("model.ckpt"), &meta, &out.store)?;
    write_text(&dir.join("history.csv"), &history_csv(&out.history))?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            spec: spec.clone(),
            seed,
            train_slices: train.len(),
            validation_slices: val.len(),
            epochs_run: out.history.len(),
            best_epoch: out.best_epoch,
            best_val_dice: out.best_val_dice,
            stopped_early: out.stopped_early,
            adam_steps: out.adam_steps,
        },
    )?;
    Ok(out)
}

/// Coarse-network inputs: center-framed, resized, normalized slices with
/// margin-grown box masks as labels.
fn coarse_pairs(cfg: &RunConfig, framed: &[SlicePair]) -> Result<Vec<SlicePair>> {
    let targets = make_boxmask_targets(framed, cfg.geometry.margin);
    Ok(normalize_all(&resize_all(&targets.pairs, cfg.coarse.model.input_size)?))
}

/// Trains one coarse box network per fold.
pub fn train_coarse(cfg: &RunConfig, run: &Path) -> Result<()> {
    let plan = load_plan(run)?;
    let ds = load_source(cfg)?;
    let dir = run.join("coarse");
    write_json(&dir.join("config.json"), cfg)?;
    for split in splits(cfg, &plan) {
        let train = coarse_pairs(cfg, &center_frame(&ds.slices_of(&split.train)?, cfg.geometry.center_crop)?)?;
        let val = coarse_pairs(cfg, &center_frame(&ds.slices_of(&split.validation)?, cfg.geometry.center_crop)?)?;
        let seed = cfg.coarse.train.seed.wrapping_add(split.fold as u64);
        let tcfg = TrainConfig {
            seed,
            ..cfg.coarse.train.clone()
        };
        eprintln!("train-coarse: fold {} ({} slices)", split.fold, train.len());
        fit_and_save(&cfg.coarse.model, seed, &train, &val, &tcfg, &dir.join(fold_dir(split.fold)))?;
    }
    Ok(())
}

/// Coarse probability maps of `framed` slices, resized back to their frame.
fn coarse_maps(cfg: &RunConfig, run: &Path, fold: usize, framed: &[SlicePair]) -> Result<Vec<crate::Image>> {
    let path = require(
        run.join("coarse").join(fold_dir(fold)).join("model.ckpt"),
        "run `train-coarse` first",
    )?;
    let (meta, store) = checkpoint::load(&path)?;
    let (model, _) = build_model::<f32>(&meta.spec, 0)?;
    let inputs = normalize_all(&resize_all(framed, meta.spec.input_size)?);
    let maps = predict_maps(&model, &store, &inputs, cfg.coarse.train.batch_size)?;
    maps.iter()
        .zip(framed)
        .map(|(m, s)| crate::preprocess::resample_nn(m, s.image.height, s.image.width))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSummary {
    pub mode: CropMode,
    pub fold: usize,
    /// Boxes of training and validation slices.
    pub train: ContainmentReport,
    /// Boxes of test slices; predicted in smart mode.
    pub test: ContainmentReport,
}

/// Crops every slice of every fold for one mode.
///
/// Center mode keeps the whole centered window. Oracle mode uses label
/// boxes grown by the margin. Smart mode uses those label boxes for
/// training and validation slices and coarse-network boxes for test slices.
pub fn smartcrop(cfg: &RunConfig, run: &Path, mode: CropMode) -> Result<()> {
    let plan = load_plan(run)?;
    let ds = load_source(cfg)?;
    let target = cfg.segmenter.input_size;
    let root = run.join("crops").join(mode.name());
    write_json(&root.join("config.json"), cfg)?;
    for split in splits(cfg, &plan) {
        let fit_ids: Vec<String> = split.train.iter().chain(&split.validation).cloned().collect();
        let fit = center_frame(&ds.slices_of(&fit_ids)?, cfg.geometry.center_crop)?;
        let test = center_frame(&ds.slices_of(&split.test)?, cfg.geometry.center_crop)?;
        let oracle = BoxSource::Oracle {
            margin: cfg.geometry.margin,
        };
        let (fit_out, test_out) = match mode {
            CropMode::Center => (run_smartcrop(&fit, BoxSource::Full, target)?, run_smartcrop(&test, BoxSource::Full, target)?),
            CropMode::Oracle => (
                run_smartcrop(&fit, oracle, target)?,
                run_smartcrop(&test, BoxSource::Oracle { margin: cfg.geometry.margin }, target)?,
            ),
            CropMode::Smart => {
                let maps = coarse_maps(cfg, run, split.fold, &test)?;
                let predicted = BoxSource::Predicted {
                    maps: &maps,
                    threshold: cfg.geometry.threshold,
                };
                (run_smartcrop(&fit, oracle, target)?, run_smartcrop(&test, predicted, target)?)
            }
        };
        let dir = root.join(fold_dir(split.fold));
        let mut pairs = fit_out.pairs;
        pairs.extend(test_out.pairs);
        let mut records = fit_out.records;
        records.extend(test_out.records);
        let thickness = ds.patients.first().map(|p| p.slice_thickness.clone()).unwrap_or_default();
        write_dataset(&dir, &Dataset::from_slices(pairs, &thickness))?;
        write_json(&dir.join("records.json"), &records)?;
        let summary = CropSummary {
            mode,
            fold: split.fold,
            train: fit_out.report,
            test: test_out.report,
        };
        eprintln!(
            "smartcrop {mode}: fold {} test containment {:.3} ({} fallbacks)",
            split.fold, summary.test.containment_rate, summary.test.fallbacks
        );
        write_json(&dir.join("containment.json"), &summary)?;
    }
    Ok(())
}

fn load_crops(run: &Path, mode: CropMode, fold: usize) -> Result<Dataset> {
    load_dataset(&require(
        run.join("crops").join(mode.name()).join(fold_dir(fold)).join(MANIFEST_FILE),
        &format!("run `smartcrop` with crop_mode {mode} first"),
    )?)
}

/// Augments (optionally) and normalizes segmenter training slices.
fn segmenter_training_set(cfg: &RunConfig, pairs: &[SlicePair], seed: u64) -> Result<Vec<SlicePair>> {
    if !cfg.augment_enabled {
        return Ok(normalize_all(pairs));
    }
    if cfg.normalize_after_augment {
        Ok(normalize_all(&augment_dataset(pairs, seed, &cfg.augment)?))
    } else {
        augment_dataset(&normalize_all(pairs), seed, &cfg.augment)
    }
}

fn model_seed(cfg: &RunConfig, fold: usize) -> u64 {
    cfg.train.seed.wrapping_add(fold as u64)
}

/// Trains every configured architecture on every fold of one crop mode.
pub fn train_seg(cfg: &RunConfig, run: &Path, mode: CropMode) -> Result<()> {
    let plan = load_plan(run)?;
    let root = run.join("seg").join(mode.name());
    write_json(&root.join("config.json"), cfg)?;
    for split in splits(cfg, &plan) {
        let crops = load_crops(run, mode, split.fold)?;
        let seed = model_seed(cfg, split.fold);
        let train = segmenter_training_set(cfg, &crops.slices_of(&split.train)?, seed)?;
        let val = normalize_all(&crops.slices_of(&split.validation)?);
        for &arch in &cfg.architectures {
            let spec = cfg.segmenter_for(arch);
            let tcfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            eprintln!("train-seg {mode}: {arch} fold {} ({} slices)", split.fold, train.len());
            fit_and_save(&spec, seed, &train, &val, &tcfg, &root.join(arch.name()).join(fold_dir(split.fold)))?;
        }
    }
    Ok(())
}

/// Slice ids of each patient's first, central and last labelled slice.
fn regions(ds: &Dataset, size: usize) -> Result<BTreeMap<(String, usize), Vec<Region>>> {
    let mut out = BTreeMap::new();
    for p in &ds.patients {
        let masks: Vec<Mask> = p.pairs.iter().map(|s| center_crop(&s.mask, size)).collect::<Result<_>>()?;
        let Ok(rs) = regional_slices(&masks) else {
            continue;
        };
        for (pos, s) in p.pairs.iter().enumerate() {
            out.insert((p.id.clone(), s.slice), rs.regions_of(pos));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeEvaluation {
    pub mode: CropMode,
    /// Labels of all test slices as scored.
    pub imbalance: ImbalanceStats,
    pub records: Vec<MetricRecord>,
}

/// Scores every architecture's test-fold predictions for one crop mode.
pub fn evaluate(cfg: &RunConfig, run: &Path, mode: CropMode) -> Result<ModeEvaluation> {
    let plan = load_plan(run)?;
    let ds = load_source(cfg)?;
    let size = cfg.geometry.center_crop;
    let region_map = regions(&ds, size)?;
    let mut records = Vec::new();
    let mut scored_masks: Vec<Mask> = Vec::new();
    for split in splits(cfg, &plan) {
        let crops = load_crops(run, mode, split.fold)?;
        let test = crops.slices_of(&split.test)?;
        let inputs = normalize_all(&test);
        let crop_records: Vec<CropRecord> =
            read_json(&run.join("crops").join(mode.name()).join(fold_dir(split.fold)).join("records.json"))?;
        let by_key: BTreeMap<(&str, usize), &CropRecord> =
            crop_records.iter().map(|r| ((r.patient.as_str(), r.slice), r)).collect();
        let originals = match cfg.eval.frame {
            EvalFrame::Cropped => Vec::new(),
            EvalFrame::Original => center_frame(&ds.slices_of(&split.test)?, size)?,
        };
        scored_masks.extend(match cfg.eval.frame {
            EvalFrame::Cropped => test.iter().map(|s| s.mask.clone()).collect::<Vec<_>>(),
            EvalFrame::Original => originals.iter().map(|s| s.mask.clone()).collect(),
        });
        for &arch in &cfg.architectures {
            let path = require(
                run.join("seg").join(mode.name()).join(arch.name()).join(fold_dir(split.fold)).join("model.ckpt"),
                &format!("run `train-seg` with crop_mode {mode} first"),
            )?;
            let (meta, store) = checkpoint::load(&path)?;
            let (model, _) = build_model::<f32>(&meta.spec, 0)?;
            let maps = predict_maps(&model, &store, &inputs, cfg.train.batch_size)?;
            for (i, (s, m)) in test.iter().zip(&maps).enumerate() {
                let pred = Mask::from_probabilities(m, 0.5);
                let (pred, gt) = match cfg.eval.frame {
                    EvalFrame::Cropped => (pred, s.mask.clone()),
                    EvalFrame::Original => {
                        let rec = by_key.get(&(s.patient.as_str(), s.slice)).ok_or_else(|| {
                            Error::format(&path, format!("no crop record for {} slice {}", s.patient, s.slice))
                        })?;
                        (paste_back(&pred, rec)?, originals[i].mask.clone())
                    }
                };
                let (d, re) = (dice(&pred, &gt)?, rand_error(&pred, &gt)?);
                let extra = region_map.get(&(s.patient.clone(), s.slice)).cloned().unwrap_or_default();
                for region in std::iter::once(Region::All).chain(extra) {
                    records.push(MetricRecord {
                        architecture: arch.name().to_string(),
                        method: mode.name().to_string(),
                        fold: split.fold,
                        patient: s.patient.clone(),
                        slice: s.slice,
                        region,
                        dice: d,
                        rand_error: re,
                    });
                }
            }
        }
    }
    let eval = ModeEvaluation {
        mode,
        imbalance: imbalance_stats(scored_masks.iter())?,
        records,
    };
    let dir = run.join("eval").join(mode.name());
    write_json(&dir.join("config.json"), cfg)?;
    write_text(&dir.join("records.csv"), &records_csv(&eval.records))?;
    write_json(&dir.join("records.json"), &eval.records)?;
    write_json(&dir.join("imbalance.json"), &eval.imbalance)?;
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceComparison {
    pub dataset: DatasetImbalance,
    /// Test labels in each method's cropped frame.
    pub methods: BTreeMap<String, ImbalanceStats>,
}

/// Runs both crop modes over the same folds and tabulates them with paired
/// Wilcoxon tests.
pub fn compare(cfg: &RunConfig, run: &Path) -> Result<AggregateReport> {
    let plan = prepare(cfg, run)?;
    train_coarse(cfg, run)?;
    let mut records = Vec::new();
    let mut methods = BTreeMap::new();
    for mode in COMPARE_METHODS {
        smartcrop(cfg, run, mode)?;
        train_seg(cfg, run, mode)?;
        let e = evaluate(cfg, run, mode)?;
        methods.insert(mode.name().to_string(), e.imbalance);
        records.extend(e.records);
    }
    let archs: Vec<String> = cfg.architectures.iter().map(|a| a.name().to_string()).collect();
    let names: Vec<String> = COMPARE_METHODS.iter().map(|m| m.name().to_string()).collect();
    let report = aggregate_report(&records, &plan, &archs, &names, cfg.eval.pairing)?;
    let dir = run.join("compare");
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("records.json"), &records)?;
    write_text(&dir.join("records.csv"), &records_csv(&records))?;
    write_text(&dir.join("table.csv"), &report.table_csv())?;
    write_json(
        &dir.join("imbalance.json"),
        &ImbalanceComparison {
            dataset: read_json(&run.join("prepare").join("imbalance.json"))?,
            methods,
        },
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGroup {
    pub architecture: String,
    pub method: String,
    pub region: Region,
    pub metric: String,
    pub stats: BoxStats,
}

fn metric_boxes(records: &[MetricRecord], report: &AggregateReport) -> Result<Vec<BoxGroup>> {
    let mut out = Vec::new();
    for region in [Region::All, Region::Apex, Region::Mid, Region::Base] {
        for arch in &report.architectures {
            for method in &report.methods {
                let sel: Vec<&MetricRecord> = records
                    .iter()
                    .filter(|r| &r.architecture == arch && &r.method == method && r.region == region)
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                for (metric, f) in [("dice", (|r: &MetricRecord| r.dice) as fn(&MetricRecord) -> f64), ("rand_error", |r| r.rand_error)] {
                    let values: Vec<f64> = sel.iter().map(|r| f(r)).collect();
                    out.push(BoxGroup {
                        architecture: arch.clone(),
                        method: method.clone(),
                        region,
                        metric: metric.to_string(),
                        stats: box_stats(&values)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn summary_markdown(report: &AggregateReport, imbalance: &ImbalanceComparison) -> String {
    let mut s = String::from("# Comparison\n\n| architecture |");
    for m in &report.methods {
        s.push_str(&format!(" dice {m} |"));
    }
    for m in &report.methods {
        s.push_str(&format!(" rand error {m} |"));
    }
    s.push_str(" dice p | rand error p |\n|---|");
    s.push_str(&"---|".repeat(2 * report.methods.len() + 2));
    s.push('\n');
    for arch in &report.architectures {
        s.push_str(&format!("| {arch} |"));
        for dice in [true, false] {
            for m in &report.methods {
                if let Some(c) = report.cell(arch, m) {
                    let v = if dice { c.dice } else { c.rand_error };
                    s.push_str(&format!(" {:.4} ± {:.4} |", v.mean, v.std));
                }
            }
        }
        for c in report.comparisons.iter().filter(|c| &c.architecture == arch) {
            s.push_str(&format!(" {} | {} |", c.dice_p, c.rand_p));
        }
        s.push('\n');
    }
    s.push_str("\n# Background to foreground ratio\n\n");
    s.push_str(&format!("- original frame: {:.2}\n", imbalance.dataset.original_frame.bg_fg_ratio));
    s.push_str(&format!("- center window: {:.2}\n", imbalance.dataset.center_crop.bg_fg_ratio));
    for (m, st) in &imbalance.methods {
        s.push_str(&format!(
            "- {m} crops (test slices): {:.2}, foreground {:.2}% ± {:.2}%\n",
            st.bg_fg_ratio, st.fg_percent_mean, st.fg_percent_std
        ));
    }
    s
}

/// Renders the comparison as CSV, quartile JSON, box-plot SVGs and a
/// Markdown summary.
pub fn report(cfg: &RunConfig, run: &Path) -> Result<()> {
    let cmp = run.join("compare");
    let report: AggregateReport = read_json(&require(cmp.join("report.json"), "run `compare` first")?)?;
    let records: Vec<MetricRecord> = read_json(&cmp.join("records.json"))?;
    let imbalance: ImbalanceComparison = read_json(&cmp.join("imbalance.json"))?;
    let boxes = metric_boxes(&records, &report)?;
    let dir = run.join("report");
    write_json(&dir.join("config.json"), cfg)?;
    write_text(&dir.join("table.csv"), &report.table_csv())?;
    write_json(&dir.join("boxplots.json"), &boxes)?;
    write_json(&dir.join("imbalance.json"), &imbalance)?;
    write_text(&dir.join("summary.md"), &summary_markdown(&report, &imbalance))?;
    for metric in ["dice", "rand_error"] {
        let overall: Vec<(String, BoxStats)> = boxes
            .iter()
            .filter(|b| b.metric == metric && b.region == Region::All)
            .map(|b| (format!("{} {}", b.architecture, b.method), b.stats.clone()))
            .collect();
        write_text(
            &dir.join(format!("{metric}_boxplot.svg")),
            &svg::boxplot_svg(&format!("{metric} per test slice"), metric, &overall),
        )?;
        let regional: Vec<(String, BoxStats)> = boxes
            .iter()
            .filter(|b| b.metric == metric && b.region != Region::All)
            .map(|b| (format!("{} {} {}", b.architecture, b.method, b.region.name()), b.stats.clone()))
            .collect();
        write_text(
            &dir.join(format!("{metric}_regional_boxplot.svg")),
            &svg::boxplot_svg(&format!("{metric} at apex, mid and base"), metric, &regional),
        )?;
    }
    Ok(())
}
