//! Subcommand handlers.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use super::{log, AblationKind, Command, ModalityArg, RunDir, EXIT_MEASUREMENT_REQUIRED, EXIT_OK};
use crate::cal::{
    decisions_to_csv, infer_cal, infer_unimodal, load_cal, save_cal, train_cal, CalModel, ConformalBand, Decision,
};
use crate::config::ExperimentConfig;
use crate::container::{ArrayData, Checkpoint};
use crate::data::{
    add_positional_encoding, augment_genetic, encode_genetic, export_labels_csv, load_dataset, make_splits,
    save_dataset, synth_generate, Dataset, GeneticAccess, GeneticSequence, Modality, Sample, SplitTag,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, ablation_summary, alp_ablation, cal_ablation, evaluate_alp, evaluate_cal, evaluate_protopnet,
    evaluate_prototree, series_tsv, sweep_alpha, sweep_csv, EvalReport,
};
use crate::proto::{global_analysis, local_analysis, Candidate, PrototypeSet};
use crate::protopnet::{load_protopnet, metrics_csv, save_protopnet, train_protopnet, ProtoPNet};
use crate::tree::alp::paths_to_csv;
use crate::tree::checkpoint::{
    alp_from_checkpoint, load_prototree, prototree_from_checkpoint, save_alp, save_prototree,
};
use crate::tree::{infer_alp, train_alp, train_prototree, AlpModel, AlpPrediction, ProtoTree};

pub(super) fn dispatch(cmd: &Command, cfg: &ExperimentConfig, run: &mut RunDir) -> Result<i32> {
    match cmd {
        Command::Synth => synth(cfg, run),
        Command::Encode {
            sequences,
            sub_rate,
            insertions,
            deletions,
            positional_strength,
            max_width,
        } => encode(cfg, run, sequences, *sub_rate, *insertions, *deletions, *positional_strength, *max_width),
        Command::Split => split(cfg, run),
        Command::TrainProtopnet { modality } => train_protopnet_cmd(cfg, run, pick(*modality, cfg)),
        Command::TrainPrototree { modality } => train_prototree_cmd(cfg, run, pick(*modality, cfg)),
        Command::TrainCal { image, genetic, alpha } => {
            train_cal_cmd(cfg, run, image.as_deref(), genetic.as_deref(), alpha.unwrap_or(cfg.alpha))
        }
        Command::TrainAlp { image_tree, genetic_tree } => {
            train_alp_cmd(cfg, run, image_tree.as_deref(), genetic_tree.as_deref())
        }
        Command::Calibrate { model, alpha } => calibrate_cmd(cfg, run, model, alpha.unwrap_or(cfg.alpha)),
        Command::Infer {
            model,
            band,
            split,
            sample_ids,
            no_genetic,
        } => infer_cmd(cfg, run, model, band.as_deref(), split, sample_ids, *no_genetic),
        Command::Evaluate { model, band, split } => evaluate_cmd(cfg, run, model, band.as_deref(), split),
        Command::SweepAlpha { model, alphas } => {
            sweep_cmd(cfg, run, model, alphas.as_deref().unwrap_or(&cfg.alphas))
        }
        Command::Ablate { which, seeds } => ablate_cmd(cfg, run, *which, seeds.as_deref().unwrap_or(&cfg.seeds)),
        Command::AnalyzeLocal { model, sample_id } => analyze_local(cfg, run, model, *sample_id),
        Command::AnalyzeGlobal {
            model,
            prototype,
            modality,
            top,
            split,
        } => analyze_global(cfg, run, model, *prototype, to_modality(*modality), *top, split),
        Command::Inspect { path } => inspect(path).map(|_| EXIT_OK),
    }
}

fn to_modality(m: ModalityArg) -> Modality {
    match m {
        ModalityArg::Image => Modality::Image,
        ModalityArg::Genetic => Modality::Genetic,
    }
}

fn pick(m: Option<ModalityArg>, cfg: &ExperimentConfig) -> Modality {
    m.map(to_modality).unwrap_or(cfg.modality)
}

/// The configured dataset, or a synthetic one split with the config ratios.
pub(super) fn obtain_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.dataset {
        Some(p) => load_dataset(p),
        None => {
            let ds = synth_generate(&cfg.synth, seed)?;
            let out = make_splits(&ds.labels(), cfg.split_ratios, cfg.min_per_class, seed)?;
            ds.apply_split(&out)
        }
    }
}

fn select<'a>(ds: &'a Dataset, split: &str, ids: &[u64]) -> Result<Vec<&'a Sample>> {
    if !ids.is_empty() {
        return ids
            .iter()
            .map(|id| {
                ds.samples
                    .iter()
                    .find(|s| s.id == *id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no sample with id {id}")))
            })
            .collect();
    }
    let tag: SplitTag = split.parse()?;
    let chosen = if tag == SplitTag::Unassigned {
        ds.samples.iter().collect()
    } else {
        ds.split(tag)
    };
    if chosen.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} is empty")));
    }
    Ok(chosen)
}

fn require_split(ds: &Dataset, tag: SplitTag) -> Result<Vec<&Sample>> {
    let s = ds.split(tag);
    if s.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "the {} split is empty; run `split` or adjust split_ratios",
            tag.as_str()
        )));
    }
    Ok(s)
}

/// Saves a checkpoint; on synthetic data its metadata also records the
/// generating seed so later commands can rebuild the same dataset.
fn save_checkpoint_artifact(
    cfg: &ExperimentConfig,
    run: &mut RunDir,
    name: &str,
    save: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let path = run.artifact(name);
    run.artifact(&format!("{name}.json"));
    save(&path)?;
    if cfg.dataset.is_none() {
        let mut ck = Checkpoint::load(&path)?;
        let mut meta = ck.meta()?;
        meta["synthetic_seed"] = json!(cfg.seed);
        ck.put_meta(&meta);
        ck.save(&path)?;
    }
    Ok(())
}

/// The dataset a checkpoint should be run against: the configured one, or
/// the synthetic dataset the checkpoint was trained on.
fn dataset_for_model(cfg: &ExperimentConfig, model: &Path) -> Result<Dataset> {
    if cfg.dataset.is_some() {
        return obtain_dataset(cfg, cfg.seed);
    }
    let seed = Checkpoint::load(model)?.meta()?["synthetic_seed"].as_u64().unwrap_or(cfg.seed);
    if seed != cfg.seed {
        log("dataset", &[("source", "synthetic".into()), ("seed", seed.to_string())]);
    }
    obtain_dataset(cfg, seed)
}

fn write_json(run: &mut RunDir, name: &str, value: &impl serde::Serialize) -> Result<()> {
    run.write(name, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn stamp(mut report: EvalReport, cfg: &ExperimentConfig) -> EvalReport {
    report.seed = cfg.seed;
    report.config_hash = cfg.hash();
    report
}

fn log_report(report: &EvalReport) {
    log(
        "report",
        &[
            ("model", report.model.clone()),
            ("balanced_accuracy", format!("{:.6}", report.balanced_accuracy)),
            ("success_rate", format!("{:.6}", report.success_rate)),
            ("n", report.n_samples.to_string()),
        ],
    );
}

fn save_dataset_artifacts(run: &mut RunDir, ds: &Dataset) -> Result<()> {
    let manifest = run.artifact("dataset.json");
    run.artifact("dataset.bin");
    save_dataset(ds, &manifest)?;
    let mut csv = Vec::new();
    export_labels_csv(ds, &mut csv).map_err(|e| Error::io(run.root.join("labels.csv"), e))?;
    run.write("labels.csv", &csv)?;
    log(
        "dataset",
        &[
            ("k", ds.k().to_string()),
            ("samples", ds.len().to_string()),
            ("train", ds.manifest.counts.train.to_string()),
            ("validation", ds.manifest.counts.validation.to_string()),
            ("test", ds.manifest.counts.test.to_string()),
        ],
    );
    Ok(())
}

fn synth(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<i32> {
    let ds = synth_generate(&cfg.synth, cfg.seed)?;
    let out = make_splits(&ds.labels(), cfg.split_ratios, cfg.min_per_class, cfg.seed)?;
    save_dataset_artifacts(run, &ds.apply_split(&out)?)?;
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn encode(
    cfg: &ExperimentConfig,
    run: &mut RunDir,
    sequences: &Path,
    sub_rate: f64,
    insertions: usize,
    deletions: usize,
    positional_strength: f64,
    max_width: usize,
) -> Result<i32> {
    let text = std::fs::read_to_string(sequences).map_err(|e| Error::io(sequences, e))?;
    let mut rows: Vec<(u64, crate::data::EmbeddingMap)> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (line_no == 0 && line.starts_with("sample_id")) {
            continue;
        }
        let (id, seq) = line.split_once(',').ok_or_else(|| {
            Error::InvalidArgument(format!("{}:{}: expected sample_id,sequence", sequences.display(), line_no + 1))
        })?;
        let id: u64 = id.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("{}:{}: bad sample id {id:?}", sequences.display(), line_no + 1))
        })?;
        let mut seq = GeneticSequence::parse(seq.trim())?;
        if sub_rate > 0.0 || insertions > 0 || deletions > 0 {
            seq = augment_genetic(&seq, sub_rate, insertions, deletions, cfg.seed ^ id)?;
        }
        let mut e = encode_genetic(&seq, max_width)?.into_embedding();
        if positional_strength != 0.0 {
            e = add_positional_encoding(&e, positional_strength)?;
        }
        rows.push((id, e));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no sequences", sequences.display())));
    }
    match &cfg.dataset {
        Some(path) => {
            let mut ds = load_dataset(path)?;
            let by_id: std::collections::HashMap<u64, crate::data::EmbeddingMap> = rows.into_iter().collect();
            for s in ds.samples.iter_mut() {
                s.genetic = by_id.get(&s.id).cloned();
            }
            let names = ds.manifest.class_names.clone();
            let min = ds.manifest.min_per_class;
            let ds = Dataset::from_samples(names, ds.samples, min)?;
            save_dataset_artifacts(run, &ds)?;
        }
        None => {
            let n = rows.len();
            let dims = rows[0].1.dims();
            let mut data = Vec::with_capacity(n * dims.iter().product::<usize>());
            for (_, e) in &rows {
                data.extend_from_slice(&e.data);
            }
            let mut ck = Checkpoint::new();
            ck.put_u64("sample_id", rows.iter().map(|r| r.0).collect());
            ck.put("genetic", vec![n, dims[0], dims[1], dims[2]], ArrayData::F32(data));
            ck.put_meta(&json!({"kind": "encoded_genetic", "samples": n, "dims": dims}));
            let path = run.artifact("encoded.ckpt");
            run.artifact("encoded.ckpt.json");
            ck.save(&path)?;
            log("encoded", &[("samples", n.to_string()), ("width", dims[2].to_string())]);
        }
    }
    Ok(EXIT_OK)
}

fn split(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<i32> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("split needs --dataset".into()))?;
    let ds = load_dataset(path)?;
    let out = make_splits(&ds.labels(), cfg.split_ratios, cfg.min_per_class, cfg.seed)?;
    save_dataset_artifacts(run, &ds.apply_split(&out)?)?;
    Ok(EXIT_OK)
}

fn fit_protopnet(cfg: &ExperimentConfig, ds: &Dataset, modality: Modality, run: &mut RunDir) -> Result<ProtoPNet> {
    let train = require_split(ds, SplitTag::Train)?;
    let (model, report) = train_protopnet(&train, ds.k(), modality, &cfg.protopnet)?;
    for e in &report.epochs {
        log(
            "epoch",
            &[
                ("model", format!("protopnet_{}", modality.as_str())),
                ("phase", e.phase.clone()),
                ("epoch", e.epoch.to_string()),
                ("loss", format!("{:.6}", e.loss)),
                ("train_accuracy", format!("{:.4}", e.train_accuracy)),
            ],
        );
    }
    let name = modality.as_str();
    run.write(&format!("epochs_protopnet_{name}.csv"), metrics_csv(&report.epochs).as_bytes())?;
    save_checkpoint_artifact(cfg, run, &format!("protopnet_{name}.ckpt"), |p| save_protopnet(&model, p))?;
    Ok(model)
}

fn fit_prototree(cfg: &ExperimentConfig, ds: &Dataset, modality: Modality, run: &mut RunDir) -> Result<ProtoTree> {
    let train = require_split(ds, SplitTag::Train)?;
    let model = train_prototree(&train, ds.k(), modality, &cfg.prototree)?;
    let name = modality.as_str();
    save_checkpoint_artifact(cfg, run, &format!("prototree_{name}.ckpt"), |p| save_prototree(&model, p))?;
    Ok(model)
}

fn train_protopnet_cmd(cfg: &ExperimentConfig, run: &mut RunDir, modality: Modality) -> Result<i32> {
    let ds = obtain_dataset(cfg, cfg.seed)?;
    let model = fit_protopnet(cfg, &ds, modality, run)?;
    if let Ok(test) = require_split(&ds, SplitTag::Test) {
        let (report, _) = evaluate_protopnet(&model, &test, &GeneticAccess::new())?;
        let report = stamp(report, cfg);
        log_report(&report);
        write_json(run, &format!("report_protopnet_{}.json", modality.as_str()), &report)?;
    }
    Ok(EXIT_OK)
}

fn train_prototree_cmd(cfg: &ExperimentConfig, run: &mut RunDir, modality: Modality) -> Result<i32> {
    let ds = obtain_dataset(cfg, cfg.seed)?;
    let model = fit_prototree(cfg, &ds, modality, run)?;
    if let Ok(test) = require_split(&ds, SplitTag::Test) {
        let report = stamp(evaluate_prototree(&model, &test)?, cfg);
        log_report(&report);
        write_json(run, &format!("report_prototree_{}.json", modality.as_str()), &report)?;
    }
    Ok(EXIT_OK)
}

fn train_cal_cmd(
    cfg: &ExperimentConfig,
    run: &mut RunDir,
    image: Option<&Path>,
    genetic: Option<&Path>,
    alpha: f64,
) -> Result<i32> {
    let ds = obtain_dataset(cfg, cfg.seed)?;
    let image = match image {
        Some(p) => load_protopnet(p)?,
        None => fit_protopnet(cfg, &ds, Modality::Image, run)?,
    };
    let genetic = match genetic {
        Some(p) => load_protopnet(p)?,
        None => fit_protopnet(cfg, &ds, Modality::Genetic, run)?,
    };
    let train = require_split(&ds, SplitTag::Train)?;
    let calibration = require_split(&ds, SplitTag::Validation)?;
    let (model, history) = train_cal(&image, &genetic, &train, &calibration, &cfg.cal)?;
    let mut epochs = String::from("epoch,loss,gated_image_fraction,mean_image_weight\n");
    for e in &history {
        let _ = writeln!(epochs, "{},{},{},{}", e.epoch, e.loss, e.gated_image_fraction, e.mean_image_weight);
        log(
            "epoch",
            &[
                ("model", "cal".into()),
                ("epoch", e.epoch.to_string()),
                ("loss", format!("{:.6}", e.loss)),
                ("gated_image_fraction", format!("{:.4}", e.gated_image_fraction)),
                ("mean_image_weight", format!("{:.4}", e.mean_image_weight)),
            ],
        );
    }
    run.write("epochs_cal.csv", epochs.as_bytes())?;
    save_checkpoint_artifact(cfg, run, "cal.ckpt", |p| save_cal(&model, p))?;
    let band = model.calibrate(&model.features(&calibration)?, alpha, cfg.band_mode, cfg.bonferroni)?;
    run.write("band.json", band.to_json().as_bytes())?;
    if let Ok(test) = require_split(&ds, SplitTag::Test) {
        let (report, decisions) = evaluate_cal(&model, &band, &test, &GeneticAccess::new())?;
        let report = stamp(report, cfg);
        log_report(&report);
        run.write("decisions.csv", decisions_to_csv(&decisions).as_bytes())?;
        write_json(run, "report.json", &report)?;
    }
    Ok(EXIT_OK)
}

fn train_alp_cmd(cfg: &ExperimentConfig, run: &mut RunDir, image: Option<&Path>, genetic: Option<&Path>) -> Result<i32> {
    let ds = obtain_dataset(cfg, cfg.seed)?;
    let image = match image {
        Some(p) => load_prototree(p)?,
        None => fit_prototree(cfg, &ds, Modality::Image, run)?,
    };
    let genetic = match genetic {
        Some(p) => load_prototree(p)?,
        None => fit_prototree(cfg, &ds, Modality::Genetic, run)?,
    };
    let train = require_split(&ds, SplitTag::Train)?;
    let (model, report) = train_alp(&image, &genetic, &train, &cfg.alp)?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        log("epoch", &[("model", "alp".into()), ("epoch", epoch.to_string()), ("loss", format!("{loss:.6}"))]);
    }
    log(
        "census",
        &[
            ("initial_image", report.initial_census.0.to_string()),
            ("initial_genetic", report.initial_census.1.to_string()),
            ("image", report.final_census.0.to_string()),
            ("genetic", report.final_census.1.to_string()),
        ],
    );
    let acc = report.image_leaf_stats.accuracy.clone();
    save_checkpoint_artifact(cfg, run, "alp.ckpt", |p| save_alp(&model, Some(&acc), p))?;
    write_json(run, "alp_training.json", &report)?;
    if let Ok(test) = require_split(&ds, SplitTag::Test) {
        let (mut report, preds) = evaluate_alp(&model, &test, &GeneticAccess::new())?;
        report.t = Some(cfg.alp.t);
        report.tau = Some(cfg.alp.tau);
        let report = stamp(report, cfg);
        log_report(&report);
        run.write("paths.csv", paths_to_csv(&preds).as_bytes())?;
        write_json(run, "report.json", &report)?;
    }
    Ok(EXIT_OK)
}

fn band_for(cfg: &ExperimentConfig, ds: &Dataset, model: &CalModel, band: Option<&Path>) -> Result<ConformalBand> {
    match band {
        Some(p) => ConformalBand::load(p),
        None => {
            let calibration = require_split(ds, SplitTag::Validation)?;
            model.calibrate(&model.features(&calibration)?, cfg.alpha, cfg.band_mode, cfg.bonferroni)
        }
    }
}

fn calibrate_cmd(cfg: &ExperimentConfig, run: &mut RunDir, model: &Path, alpha: f64) -> Result<i32> {
    let ds = dataset_for_model(cfg, model)?;
    let model = load_cal(model)?;
    let calibration = require_split(&ds, SplitTag::Validation)?;
    let band = model.calibrate(&model.features(&calibration)?, alpha, cfg.band_mode, cfg.bonferroni)?;
    log(
        "band",
        &[
            ("alpha", alpha.to_string()),
            ("n_cal", band.n_cal.to_string()),
            ("max_delta", band.delta.iter().fold(0.0f64, |a, b| a.max(*b)).to_string()),
        ],
    );
    run.write("band.json", band.to_json().as_bytes())?;
    Ok(EXIT_OK)
}

/// A checkpoint of any model kind.
enum AnyModel {
    ProtoPNet(ProtoPNet),
    ProtoTree(ProtoTree),
    Cal(CalModel),
    Alp(AlpModel),
}

fn load_any(path: &Path) -> Result<AnyModel> {
    let ck = Checkpoint::load(path)?;
    let meta = ck.meta()?;
    match meta["kind"].as_str() {
        Some("protopnet") => Ok(AnyModel::ProtoPNet(load_protopnet(path)?)),
        Some("prototree") => Ok(AnyModel::ProtoTree(prototree_from_checkpoint(&ck)?)),
        Some("cal") => Ok(AnyModel::Cal(crate::cal::cal_from_checkpoint(&ck)?)),
        Some("alp") => Ok(AnyModel::Alp(alp_from_checkpoint(&ck)?)),
        other => Err(Error::InvalidArgument(format!(
            "{} has unsupported model kind {other:?}",
            path.display()
        ))),
    }
}

fn pending_csv(ids: &[(u64, String)]) -> String {
    let mut s = String::from("sample_id,reason\n");
    for (id, why) in ids {
        let _ = writeln!(s, "{id},{why}");
    }
    s
}

fn infer_cmd(
    cfg: &ExperimentConfig,
    run: &mut RunDir,
    model: &Path,
    band: Option<&Path>,
    split: &str,
    ids: &[u64],
    no_genetic: bool,
) -> Result<i32> {
    let ds = dataset_for_model(cfg, model)?;
    let samples = select(&ds, split, ids)?;
    let access = if no_genetic { GeneticAccess::withheld() } else { GeneticAccess::new() };
    let mut pending: Vec<(u64, String)> = Vec::new();
    match load_any(model)? {
        AnyModel::Cal(m) => {
            let band = band_for(cfg, &ds, &m, band)?;
            let results: Vec<Result<Decision>> = samples.par_iter().map(|s| infer_cal(&m, &band, s, &access)).collect();
            let decisions = split_pending(results, &mut pending)?;
            run.write("decisions.csv", decisions_to_csv(&decisions).as_bytes())?;
        }
        AnyModel::ProtoPNet(m) => {
            let results: Vec<Result<Decision>> = samples.par_iter().map(|s| infer_unimodal(&m, s, &access)).collect();
            let decisions = split_pending(results, &mut pending)?;
            run.write("decisions.csv", decisions_to_csv(&decisions).as_bytes())?;
        }
        AnyModel::Alp(m) => {
            let mut preds: Vec<AlpPrediction> = Vec::new();
            for r in samples.par_iter().map(|s| infer_alp(&m, s, &access)).collect::<Vec<_>>() {
                match r {
                    Ok(p) => preds.push(p),
                    Err(Error::GeneticRequired { sample_id, node }) => {
                        pending.push((sample_id, format!("genetic node {node}")))
                    }
                    Err(e) => return Err(e),
                }
            }
            run.write("paths.csv", paths_to_csv(&preds).as_bytes())?;
        }
        AnyModel::ProtoTree(m) => {
            let mut s = String::from("sample_id,leaf,predicted,true_class,path\n");
            for x in &samples {
                if m.modality == Modality::Genetic && access.measure(x).is_none() {
                    pending.push((x.id, "genetic tree".into()));
                    continue;
                }
                let (pred, path) = m.predict(x)?;
                let _ = writeln!(s, "{},{},{},{},{}", x.id, path.leaf, pred, x.label, path.describe());
            }
            run.write("predictions.csv", s.as_bytes())?;
        }
    }
    log(
        "infer",
        &[
            ("samples", samples.len().to_string()),
            ("genetic_measurements", access.measured().to_string()),
            ("measurement_required", pending.len().to_string()),
        ],
    );
    if pending.is_empty() {
        return Ok(EXIT_OK);
    }
    pending.sort();
    run.write("measurement_required.csv", pending_csv(&pending).as_bytes())?;
    for (id, why) in &pending {
        log("measurement_required", &[("sample_id", id.to_string()), ("reason", why.clone())]);
    }
    Ok(EXIT_MEASUREMENT_REQUIRED)
}

fn split_pending(results: Vec<Result<Decision>>, pending: &mut Vec<(u64, String)>) -> Result<Vec<Decision>> {
    let mut done = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(d) => done.push(d),
            Err(Error::MeasurementRequired(d)) => pending.push((d.sample_id, format!("k={}", d.k))),
            Err(e) => return Err(e),
        }
    }
    Ok(done)
}

fn evaluate_cmd(cfg: &ExperimentConfig, run: &mut RunDir, model: &Path, band: Option<&Path>, split: &str) -> Result<i32> {
    let ds = dataset_for_model(cfg, model)?;
    let samples = select(&ds, split, &[])?;
    let report = match load_any(model)? {
        AnyModel::Cal(m) => {
            let band = band_for(cfg, &ds, &m, band)?;
            let (report, decisions) = evaluate_cal(&m, &band, &samples, &GeneticAccess::new())?;
            run.write("decisions.csv", decisions_to_csv(&decisions).as_bytes())?;
            report
        }
        AnyModel::ProtoPNet(m) => evaluate_protopnet(&m, &samples, &GeneticAccess::new())?.0,
        AnyModel::ProtoTree(m) => evaluate_prototree(&m, &samples)?,
        AnyModel::Alp(m) => {
            let (mut report, preds) = evaluate_alp(&m, &samples, &GeneticAccess::new())?;
            run.write("paths.csv", paths_to_csv(&preds).as_bytes())?;
            report.t = Some(cfg.alp.t);
            report.tau = Some(cfg.alp.tau);
            report
        }
    };
    let report = stamp(report, cfg);
    log_report(&report);
    write_json(run, "report.json", &report)?;
    Ok(EXIT_OK)
}

fn sweep_cmd(cfg: &ExperimentConfig, run: &mut RunDir, model: &Path, alphas: &[f64]) -> Result<i32> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::Config(format!("alphas must lie in [0, 1), got {a}")));
    }
    let ds = dataset_for_model(cfg, model)?;
    let model = load_cal(model)?;
    let calibration = require_split(&ds, SplitTag::Validation)?;
    let test = require_split(&ds, SplitTag::Test)?;
    let residuals = model.residuals(&model.features(&calibration)?)?;
    // Test genetics are read as audits so every row can report its error.
    let outputs = model.all_outputs(&model.features(&test)?)?;
    let result = sweep_alpha(&model, &residuals, &outputs, alphas, cfg.band_mode, cfg.bonferroni)?;
    for r in &result.rows {
        log(
            "sweep",
            &[
                ("alpha", r.alpha.to_string()),
                ("success_rate", format!("{:.6}", r.success_rate)),
                ("balanced_accuracy", format!("{:.6}", r.balanced_accuracy)),
                ("abstention_error_rate", format!("{:.6}", r.abstention_error_rate)),
            ],
        );
    }
    log(
        "monotonicity",
        &[
            ("delta", result.delta_monotone.to_string()),
            ("success", result.success_monotone.to_string()),
        ],
    );
    run.write("sweep.csv", sweep_csv(&result.rows).as_bytes())?;
    write_json(run, "sweep.json", &result)?;
    let acc = series_tsv(result.rows.iter().map(|r| (r.success_rate, r.balanced_accuracy)));
    run.write("accuracy_vs_success.tsv", acc.as_bytes())?;
    let err = series_tsv(result.rows.iter().map(|r| (r.alpha, r.abstention_error_rate)));
    run.write("error_vs_alpha.tsv", err.as_bytes())?;
    Ok(EXIT_OK)
}

fn ablate_cmd(cfg: &ExperimentConfig, run: &mut RunDir, which: AblationKind, seeds: &[u64]) -> Result<i32> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let ds = obtain_dataset(cfg, seed)?;
        let train = require_split(&ds, SplitTag::Train)?;
        let test = require_split(&ds, SplitTag::Test)?;
        let cells = match which {
            AblationKind::Cal => {
                let calibration = require_split(&ds, SplitTag::Validation)?;
                let mut pcfg = cfg.protopnet.clone();
                pcfg.schedule.seed = seed;
                let (image, _) = train_protopnet(&train, ds.k(), Modality::Image, &pcfg)?;
                let (genetic, _) = train_protopnet(&train, ds.k(), Modality::Genetic, &pcfg)?;
                let base = crate::cal::CalConfig { seed, ..cfg.cal.clone() };
                cal_ablation(&image, &genetic, &train, &calibration, &test, &base, cfg.alpha)?
            }
            AblationKind::Alp => {
                let tcfg = crate::tree::TreeTrainConfig { seed, ..cfg.prototree.clone() };
                let image = train_prototree(&train, ds.k(), Modality::Image, &tcfg)?;
                let genetic = train_prototree(&train, ds.k(), Modality::Genetic, &tcfg)?;
                let base = crate::tree::AlpConfig { seed, ..cfg.alp.clone() };
                alp_ablation(&image, &genetic, &train, &test, &base)?
            }
        };
        for c in &cells {
            log(
                "ablation",
                &[
                    ("seed", seed.to_string()),
                    ("cell", c.label.clone()),
                    ("balanced_accuracy", format!("{:.6}", c.balanced_accuracy)),
                    ("success_rate", format!("{:.6}", c.success_rate)),
                ],
            );
        }
        rows.extend(cells);
    }
    run.write("ablation.csv", ablation_csv(&rows).as_bytes())?;
    write_json(run, "ablation_summary.json", &ablation_summary(&rows))?;
    Ok(EXIT_OK)
}

fn prototype_sets(model: &AnyModel) -> Vec<(Modality, &PrototypeSet)> {
    match model {
        AnyModel::ProtoPNet(m) => vec![(m.modality, &m.protos)],
        AnyModel::ProtoTree(m) => vec![(m.modality, &m.protos)],
        AnyModel::Cal(m) => vec![(Modality::Image, &m.image.protos), (Modality::Genetic, &m.genetic.protos)],
        AnyModel::Alp(m) => vec![(Modality::Image, &m.image_protos), (Modality::Genetic, &m.genetic_protos)],
    }
}

fn embedding(sample: &Sample, modality: Modality) -> Option<&crate::data::EmbeddingMap> {
    match modality {
        Modality::Image => Some(&sample.image),
        Modality::Genetic => sample.genetic.as_ref(),
    }
}

fn analyze_local(cfg: &ExperimentConfig, run: &mut RunDir, model: &Path, sample_id: u64) -> Result<i32> {
    let ds = dataset_for_model(cfg, model)?;
    let sample = select(&ds, "all", &[sample_id])?[0];
    let model = load_any(model)?;
    let mut out = serde_json::Map::new();
    out.insert("sample_id".into(), json!(sample_id));
    out.insert("label".into(), json!(sample.label));
    for (modality, protos) in prototype_sets(&model) {
        let Some(e) = embedding(sample, modality) else { continue };
        let matches = local_analysis(e, protos)?;
        out.insert(modality.as_str().into(), serde_json::to_value(&matches)?);
    }
    write_json(run, &format!("local_{sample_id}.json"), &out)?;
    Ok(EXIT_OK)
}

fn analyze_global(
    cfg: &ExperimentConfig,
    run: &mut RunDir,
    model: &Path,
    prototype: usize,
    modality: Modality,
    top: usize,
    split: &str,
) -> Result<i32> {
    let ds = dataset_for_model(cfg, model)?;
    let samples = select(&ds, split, &[])?;
    let model = load_any(model)?;
    let protos = prototype_sets(&model)
        .into_iter()
        .find(|(m, _)| *m == modality)
        .map(|(_, p)| p)
        .ok_or_else(|| Error::InvalidArgument(format!("model has no {} prototypes", modality.as_str())))?;
    if prototype >= protos.len() {
        return Err(Error::InvalidArgument(format!(
            "prototype {prototype} out of range for {} prototypes",
            protos.len()
        )));
    }
    let candidates: Vec<Candidate<'_>> = samples
        .iter()
        .filter_map(|s| {
            embedding(s, modality).map(|e| Candidate {
                sample_id: s.id,
                label: s.label,
                embedding: e,
            })
        })
        .collect();
    let matches = global_analysis(prototype, protos, &candidates, top)?;
    let out = json!({
        "prototype": prototype,
        "modality": modality.as_str(),
        "class": protos.class_of(prototype),
        "provenance": protos.provenance[prototype].map(|p| json!({"sample_id": p.sample_id, "h": p.h, "w": p.w})),
        "matches": matches,
    });
    write_json(run, &format!("global_{}_{prototype}.json", modality.as_str()), &out)?;
    Ok(EXIT_OK)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn print_kv(fields: &[(&str, String)]) {
    let line: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    // A closed pipe (`inspect x | head`) is not an error for a summary printer.
    let _ = writeln!(std::io::stdout().lock(), "{}", line.join(" "));
}

pub(super) fn inspect(path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if let Ok(band) = serde_json::from_str::<ConformalBand>(&text) {
            print_kv(&[
                ("kind", "band".into()),
                ("mode", format!("{:?}", band.mode)),
                ("alpha", band.alpha.to_string()),
                ("n_cal", band.n_cal.to_string()),
                ("deltas", band.delta.len().to_string()),
                ("max_delta", band.delta.iter().fold(0.0f64, |a, b| a.max(*b)).to_string()),
            ]);
            return Ok(());
        }
        let ds = load_dataset(path)?;
        let c = ds.manifest.counts;
        print_kv(&[
            ("kind", "dataset".into()),
            ("k", ds.k().to_string()),
            ("samples", ds.len().to_string()),
            ("train", c.train.to_string()),
            ("validation", c.validation.to_string()),
            ("test", c.test.to_string()),
            ("image_dims", format!("{:?}", ds.manifest.image_dims).replace(' ', "")),
            ("genetic_dims", format!("{:?}", ds.manifest.genetic_dims).replace(' ', "")),
        ]);
        return Ok(());
    }
    let ck = Checkpoint::load(path)?;
    let kind = ck.meta()?["kind"].as_str().unwrap_or("unknown").to_string();
    print_kv(&[("kind", kind.clone()), ("arrays", ck.entries.len().to_string())]);
    for (name, a) in &ck.entries {
        print_kv(&[("array", name.clone()), ("shape", format!("{:?}", a.shape).replace(' ', ""))]);
    }
    match load_any(path) {
        Ok(AnyModel::Alp(m)) => {
            let (image, genetic) = m.tree.modality_census();
            print_kv(&[
                ("census_image", image.to_string()),
                ("census_genetic", genetic.to_string()),
                ("depth", m.tree.depth.to_string()),
            ]);
        }
        Ok(AnyModel::Cal(m)) => {
            let mut w = m.image_weights();
            w.sort_by(f64::total_cmp);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            print_kv(&[
                ("image_weight_min", format!("{:.6}", w[0])),
                ("image_weight_q25", format!("{:.6}", quantile(&w, 0.25))),
                ("image_weight_median", format!("{:.6}", quantile(&w, 0.5))),
                ("image_weight_q75", format!("{:.6}", quantile(&w, 0.75))),
                ("image_weight_max", format!("{:.6}", w[w.len() - 1])),
                ("image_weight_mean", format!("{mean:.6}")),
            ]);
            let mut bins = [0usize; 10];
            for v in &w {
                bins[((v * 10.0) as usize).min(9)] += 1;
            }
            let hist: Vec<String> = bins.iter().map(|b| b.to_string()).collect();
            print_kv(&[("image_weight_histogram", hist.join(","))]);
        }
        Ok(AnyModel::ProtoPNet(m)) => print_kv(&[
            ("modality", m.modality.as_str().into()),
            ("k", m.k.to_string()),
            ("prototypes", m.protos.len().to_string()),
        ]),
        Ok(AnyModel::ProtoTree(m)) => print_kv(&[
            ("modality", m.modality.as_str().into()),
            ("depth", m.tree.depth.to_string()),
            ("prototypes", m.protos.len().to_string()),
        ]),
        Err(_) => {}
    }
    Ok(())
}
