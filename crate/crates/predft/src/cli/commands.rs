use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{
    reduce_activations, score_sweep, write_sweep_csv, ActivationTable, EmbeddingProvider,
    ResponseMatrix, RidgeSpec, RoiSet, ScoreSurface,
};
use crate::data::{
    auto_split, load_dataset, make_splits, shuffle_frames, Dataset, Recording, SplitMode,
    SplitSpec, Vocab,
};
use crate::metrics::{
    evaluate_pairs, info_loss_slope, write_errors_csv, write_histogram_csv, write_metrics_json,
    ErrorEvent, EvalPair, ScoreReport,
};
use crate::model::{
    build_samples, configure_for_dataset, encode_sample, generate, generate_beam,
    load_checkpoint, save_checkpoint, ModelConfig, PredFt, Trainer,
};

use super::{
    runtime, snapshot_base, validation, with_out_dir, AnalyzeConfig, Command, DecodeConfig,
    EvaluateConfig, Result, RunConfig, TrainConfig, VerifyConfig,
};

/// One decoded window paired with its truth; rows of `decoded.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodedWindow {
    pub subject: String,
    pub story: String,
    pub window_index: usize,
    pub decoded: Vec<String>,
    pub truth: Vec<String>,
    pub frame_counts: Vec<usize>,
}

/// Everything `emit_report` may write; absent pieces are skipped.
#[derive(Debug, Default)]
pub struct ReportInputs {
    pub report: Option<ScoreReport>,
    pub events: Option<Vec<ErrorEvent>>,
    pub surfaces: Option<Vec<ScoreSurface>>,
}

/// Writes `metrics.json`, CSVs, and SVG plots into `dir`. Every file ends
/// with a trailing newline and JSON keys are sorted. An empty sweep yields a
/// header-only CSV and no SVG.
pub fn emit_report(inputs: &ReportInputs, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(runtime)?;
    if let Some(report) = &inputs.report {
        write_metrics_json(report, &dir.join("metrics.json")).map_err(runtime)?;
        write_histogram_csv(&report.histogram, &dir.join("histogram.csv")).map_err(runtime)?;
    }
    if let Some(events) = &inputs.events {
        write_errors_csv(events, &dir.join("errors.csv")).map_err(runtime)?;
    }
    if let Some(surfaces) = &inputs.surfaces {
        write_sweep_csv(surfaces, &dir.join("scores.csv")).map_err(runtime)?;
        for surface in surfaces {
            if surface.cells.is_empty() {
                continue;
            }
            let name = if surfaces.len() == 1 {
                "surface.svg".to_string()
            } else {
                format!("surface_{}.svg", surface.roi_set)
            };
            fs::write(dir.join(name), crate::align::surface_svg(surface)).map_err(runtime)?;
        }
    }
    Ok(())
}

fn load_dataset_checked(path: &Path) -> Result<Dataset> {
    load_dataset(path)
        .map_err(|e| super::CliError::Validation(format!("dataset {}: {e}", path.display())))
}

fn parse_split_mode(mode: &str, dataset: &Dataset) -> Result<SplitMode> {
    match mode {
        "within" => Ok(SplitMode::WithinSubject),
        "cross" => Ok(SplitMode::CrossSubject),
        "auto" => {
            let mut subjects: Vec<&str> =
                dataset.recordings.iter().map(|r| r.subject.as_str()).collect();
            subjects.sort_unstable();
            subjects.dedup();
            Ok(if subjects.len() > 1 { SplitMode::CrossSubject } else { SplitMode::WithinSubject })
        }
        other => validation(format!("unknown split mode {other}, want within|cross|auto")),
    }
}

fn split_dataset(dataset: &Dataset, mode: SplitMode) -> Result<(SplitSpec, crate::data::Splits)> {
    let spec = auto_split(&dataset.recordings, mode).map_err(runtime)?;
    let (splits, audit) = make_splits(&dataset.recordings, &spec).map_err(runtime)?;
    if !audit.is_empty() {
        let lines: Vec<String> = audit.iter().map(|v| v.to_string()).collect();
        return Err(super::CliError::Runtime(format!(
            "split audit found leakage: {}",
            lines.join("; ")
        )));
    }
    Ok((spec, splits))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub(super) fn run_synth(cmd: Command) -> Result<()> {
    let Command::Synth {
        common,
        vocab,
        subjects,
        stories,
        frames,
        voxels,
        embed_dim,
        noise_sigma,
        bpc_fraction,
        planted_distance,
        planted_length,
        lag_frames,
        min_words,
        max_words,
    } = cmd
    else {
        unreachable!()
    };
    let base = snapshot_base(&common, "synth")?;
    let mut spec = base.synth.unwrap_or_default();
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let assign = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    assign(&mut spec.vocab_size, vocab);
    assign(&mut spec.subjects, subjects);
    assign(&mut spec.stories, stories);
    assign(&mut spec.frames_per_story, frames);
    assign(&mut spec.voxels, voxels);
    assign(&mut spec.embed_dim, embed_dim);
    assign(&mut spec.lag_frames, lag_frames);
    assign(&mut spec.planted.distance, planted_distance);
    assign(&mut spec.planted.length, planted_length);
    assign(&mut spec.words_per_frame.0, min_words);
    assign(&mut spec.words_per_frame.1, max_words);
    if let Some(sigma) = noise_sigma {
        spec.noise_sigma = sigma;
    }
    if let Some(fraction) = bpc_fraction {
        spec.bpc_fraction = fraction;
    }
    spec.validate().map_err(|e| super::CliError::Validation(e.to_string()))?;

    let config = RunConfig { seed: spec.seed, synth: Some(spec.clone()), ..base };
    with_out_dir(&common.out, &config, |tmp| {
        let dataset = crate::data::build_synth_dataset(&spec).map_err(runtime)?;
        crate::data::write_dataset_files(&dataset, tmp).map_err(runtime)?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub(super) fn run_verify(cmd: Command) -> Result<()> {
    let Command::Verify { common, data, roi, d_range, l_range, reduced_dim, folds, subject } = cmd
    else {
        unreachable!()
    };
    let base = snapshot_base(&common, "verify")?;
    let prior = base.verify.clone();
    let cfg = VerifyConfig {
        data: data
            .or(prior.as_ref().map(|p| p.data.clone()))
            .ok_or_else(|| super::CliError::Validation("verify: --data is required".into()))?,
        roi: if roi.is_empty() {
            prior.as_ref().map(|p| p.roi.clone()).unwrap_or_else(|| vec!["Whole".to_string()])
        } else {
            roi
        },
        d_range: d_range.or(prior.as_ref().map(|p| p.d_range)).unwrap_or((0, 8)),
        l_range: l_range.or(prior.as_ref().map(|p| p.l_range)).unwrap_or((1, 2)),
        reduced_dim: reduced_dim.or(prior.as_ref().map(|p| p.reduced_dim)).unwrap_or(20),
        folds: folds.or(prior.as_ref().map(|p| p.folds)).unwrap_or(10),
        subject: subject.or(prior.and_then(|p| p.subject)),
    };
    if cfg.folds == 0 {
        return validation("verify: folds must be >= 1");
    }

    let dataset = load_dataset_checked(&cfg.data)?;
    let Some(embeddings) = &dataset.embeddings else {
        return validation(
            "verify: dataset carries no embedding table (no activation provider available)",
        );
    };
    let provider = EmbeddingProvider::new(embeddings.table.clone(), &embeddings.lexicon)
        .map_err(runtime)?;
    let recordings: Vec<&Recording> = dataset
        .recordings
        .iter()
        .filter(|r| cfg.subject.as_deref().map_or(true, |s| r.subject == s))
        .collect();
    if recordings.is_empty() {
        return validation("verify: no recordings match the subject filter");
    }

    let mut tables = Vec::new();
    let mut responses = Vec::new();
    for rec in &recordings {
        tables.push(
            ActivationTable::from_frame_words(&rec.frame_words, &provider).map_err(runtime)?,
        );
        let normalized = crate::data::voxel_normalize(&rec.fmri).map_err(runtime)?;
        responses.push(ResponseMatrix::from_surface(&normalized.to_surface()).map_err(runtime)?);
    }
    let stacked = ActivationTable::stack(&tables).map_err(runtime)?;
    let responses = ResponseMatrix::stack(&responses).map_err(runtime)?;
    let (reduced, _) = reduce_activations(&stacked, cfg.reduced_dim).map_err(runtime)?;

    let voxels = responses.voxels();
    let roi_sets: Vec<RoiSet> = cfg
        .roi
        .iter()
        .map(|name| {
            dataset
                .atlas
                .resolve(name, voxels)
                .map(|voxels| RoiSet { name: name.clone(), voxels })
                .map_err(|e| super::CliError::Validation(e.to_string()))
        })
        .collect::<Result<_>>()?;

    let d_values: Vec<usize> = (cfg.d_range.0..=cfg.d_range.1).collect();
    let l_values: Vec<usize> = (cfg.l_range.0..=cfg.l_range.1).collect();
    let spec = RidgeSpec { folds: cfg.folds, ..RidgeSpec::default() };

    let config = RunConfig {
        seed: common.seed.unwrap_or(base.seed),
        verify: Some(cfg.clone()),
        ..base
    };
    with_out_dir(&common.out, &config, |tmp| {
        score_sweep(&reduced, &responses, &d_values, &l_values, &roi_sets, &spec, Some(tmp))
            .map_err(runtime)?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub(super) fn run_train(cmd: Command) -> Result<()> {
    let Command::Train {
        common,
        data,
        split_mode,
        roi,
        epochs,
        lambda,
        no_side_net,
        shuffle_fmri,
        pred_distance,
        pred_length,
        frames_per_sample,
        fir_window,
        d_model,
    } = cmd
    else {
        unreachable!()
    };
    let base = snapshot_base(&common, "train")?;
    let prior = base.train.clone();
    let mut model_cfg = prior
        .as_ref()
        .map(|p| p.model.clone())
        .unwrap_or_else(ModelConfig::desk_default);
    if let Some(seed) = common.seed {
        model_cfg.seed = seed;
    }
    if let Some(epochs) = epochs {
        model_cfg.epochs = epochs;
    }
    if let Some(lambda) = lambda {
        model_cfg.lambda = lambda;
    }
    if no_side_net {
        model_cfg.side_network_enabled = false;
    }
    if let Some(d) = pred_distance {
        model_cfg.window.distance = d;
    }
    if let Some(l) = pred_length {
        model_cfg.window.length = l;
    }
    if let Some(f) = frames_per_sample {
        model_cfg.frames_per_sample = f;
    }
    if let Some(w) = fir_window {
        model_cfg.fir_window = w;
    }
    if let Some(d) = d_model {
        model_cfg.d_model = d;
    }
    let cfg = TrainConfig {
        data: data
            .or(prior.as_ref().map(|p| p.data.clone()))
            .ok_or_else(|| super::CliError::Validation("train: --data is required".into()))?,
        split_mode: split_mode
            .or(prior.as_ref().map(|p| p.split_mode.clone()))
            .unwrap_or_else(|| "auto".to_string()),
        roi: roi.or(prior.as_ref().map(|p| p.roi.clone())).unwrap_or_else(|| "BPC".to_string()),
        shuffle_fmri: shuffle_fmri || prior.as_ref().map(|p| p.shuffle_fmri).unwrap_or(false),
        model: model_cfg,
    };
    if cfg.model.lambda < 0.0 {
        return validation("train: lambda must be non-negative");
    }
    if cfg.model.epochs == 0 {
        return validation("train: epochs must be >= 1");
    }

    let dataset = load_dataset_checked(&cfg.data)?;
    let mode = parse_split_mode(&cfg.split_mode, &dataset)?;
    let (_, splits) = split_dataset(&dataset, mode)?;

    let mut cfg = cfg;
    let outcome = train_on_dataset(&dataset, &splits, &mut cfg)?;
    let config = RunConfig {
        seed: common.seed.unwrap_or(cfg.model.seed),
        train: Some(cfg.clone()),
        ..base
    };
    with_out_dir(&common.out, &config, |tmp| {
        save_checkpoint(&tmp.join("checkpoint"), &outcome.trainer, &outcome.vocab)
            .map_err(runtime)?;
        let mut log = String::new();
        for record in &outcome.steps {
            log.push_str(&serde_json::to_string(record).map_err(runtime)?);
            log.push('\n');
        }
        fs::write(tmp.join("train_log.jsonl"), log).map_err(runtime)?;
        let mut epochs_csv = String::from("epoch,train_l_main,train_l_side,val_l_main\n");
        for row in &outcome.epochs {
            epochs_csv.push_str(&format!(
                "{},{},{},{}\n",
                row.epoch, row.train_l_main, row.train_l_side, row.val_l_main
            ));
        }
        fs::write(tmp.join("epochs.csv"), epochs_csv).map_err(runtime)?;
        Ok(())
    })
}

pub struct EpochRow {
    pub epoch: usize,
    pub train_l_main: f64,
    pub train_l_side: f64,
    pub val_l_main: f64,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub vocab: Vocab,
    pub steps: Vec<crate::model::StepRecord>,
    pub epochs: Vec<EpochRow>,
}

/// Shared train pipeline: vocab from the training split, config completed
/// from the data, per-epoch validation loss. `cfg.model` is updated in place
/// with the derived fields so the persisted snapshot replays identically.
pub fn train_on_dataset(
    dataset: &Dataset,
    splits: &crate::data::Splits,
    cfg: &mut TrainConfig,
) -> Result<TrainOutcome> {
    let train_recs: Vec<&Recording> =
        splits.train.iter().map(|&i| &dataset.recordings[i]).collect();
    let valid_recs: Vec<&Recording> =
        splits.valid.iter().map(|&i| &dataset.recordings[i]).collect();

    let words: Vec<String> = train_recs.iter().flat_map(|r| r.all_words()).collect();
    let vocab = Vocab::build(words.iter().map(String::as_str), None);
    cfg.model.vocab_size = vocab.len();
    let roi_group = cfg.model.side_network_enabled.then(|| cfg.roi.clone());
    configure_for_dataset(
        &mut cfg.model,
        &train_recs,
        &dataset.atlas,
        roi_group.as_deref(),
    )
    .map_err(|e| super::CliError::Validation(e.to_string()))?;
    let model = PredFt::new(cfg.model.clone())
        .map_err(|e| super::CliError::Validation(e.to_string()))?;

    // chance-level control: permute the training fMRI frames only
    let shuffled: Vec<Recording>;
    let train_refs: Vec<&Recording> = if cfg.shuffle_fmri {
        shuffled = train_recs
            .iter()
            .enumerate()
            .map(|(i, r)| shuffle_frames(r, cfg.model.seed.wrapping_add(i as u64)))
            .collect();
        shuffled.iter().collect()
    } else {
        train_recs.clone()
    };

    let train_samples = crate::model::build_samples_strided(
        &train_refs,
        &dataset.atlas,
        roi_group.as_deref(),
        &vocab,
        &model,
        cfg.model.window_stride,
    )
    .map_err(runtime)?;
    let valid_samples = if valid_recs.is_empty() {
        Vec::new()
    } else {
        build_samples(&valid_recs, &dataset.atlas, roi_group.as_deref(), &vocab, &model)
            .map_err(runtime)?
    };

    let mut trainer = Trainer::new(model, train_samples.len());
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.model.epochs {
        let records = trainer.run_epoch(&train_samples).map_err(runtime)?;
        let train_l_main =
            records.iter().map(|r| r.l_main).sum::<f64>() / records.len().max(1) as f64;
        let train_l_side =
            records.iter().map(|r| r.l_side).sum::<f64>() / records.len().max(1) as f64;
        steps.extend(records);
        let val_l_main = if valid_samples.is_empty() {
            f64::NAN
        } else {
            trainer.validation_loss(&valid_samples).map_err(runtime)?.l_main
        };
        epochs.push(EpochRow { epoch: epoch + 1, train_l_main, train_l_side, val_l_main });
    }
    Ok(TrainOutcome { trainer, vocab, steps, epochs })
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

pub(super) fn run_decode(cmd: Command) -> Result<()> {
    let Command::Decode { common, data, checkpoint, split_mode, split, beam } = cmd else {
        unreachable!()
    };
    let base = snapshot_base(&common, "decode")?;
    let prior = base.decode.clone();
    let cfg = DecodeConfig {
        data: data
            .or(prior.as_ref().map(|p| p.data.clone()))
            .ok_or_else(|| super::CliError::Validation("decode: --data is required".into()))?,
        checkpoint: checkpoint
            .or(prior.as_ref().map(|p| p.checkpoint.clone()))
            .ok_or_else(|| super::CliError::Validation("decode: --checkpoint is required".into()))?,
        split_mode: split_mode
            .or(prior.as_ref().map(|p| p.split_mode.clone()))
            .unwrap_or_else(|| "auto".to_string()),
        split: split.or(prior.as_ref().map(|p| p.split.clone())).unwrap_or_else(|| "test".into()),
        beam: beam.or(prior.as_ref().map(|p| p.beam)).unwrap_or(1),
    };
    if cfg.beam == 0 {
        return validation("decode: beam width must be >= 1");
    }

    let dataset = load_dataset_checked(&cfg.data)?;
    let (trainer, vocab) = load_checkpoint(&cfg.checkpoint)
        .map_err(|e| super::CliError::Validation(format!("checkpoint: {e}")))?;
    let mode = parse_split_mode(&cfg.split_mode, &dataset)?;
    let (_, splits) = split_dataset(&dataset, mode)?;
    let indices = match cfg.split.as_str() {
        "train" => &splits.train,
        "valid" => &splits.valid,
        "test" => &splits.test,
        other => return validation(format!("decode: unknown split {other}")),
    };
    if indices.is_empty() {
        return validation(format!("decode: split {} is empty", cfg.split));
    }
    let windows = decode_split(&dataset, indices, &trainer.model, &vocab, cfg.beam)?;

    let config = RunConfig {
        seed: common.seed.unwrap_or(base.seed),
        decode: Some(cfg.clone()),
        ..base
    };
    with_out_dir(&common.out, &config, |tmp| {
        let value = serde_json::to_value(&windows).map_err(runtime)?;
        fs::write(
            tmp.join("decoded.json"),
            serde_json::to_string_pretty(&value).map_err(runtime)? + "\n",
        )
        .map_err(runtime)?;
        Ok(())
    })
}

/// Decodes every window of the given recordings with the trained model.
pub fn decode_split(
    dataset: &Dataset,
    indices: &[usize],
    model: &PredFt,
    vocab: &Vocab,
    beam: usize,
) -> Result<Vec<DecodedWindow>> {
    let recs: Vec<&Recording> = indices.iter().map(|&i| &dataset.recordings[i]).collect();
    let roi_group = model.cfg.roi_group.clone();
    let samples = build_samples(&recs, &dataset.atlas, roi_group.as_deref(), vocab, model)
        .map_err(runtime)?;
    let mut windows = Vec::with_capacity(samples.len());
    for sample in &samples {
        let encoded =
            encode_sample(model, &sample.fmri, sample.rois.as_ref()).map_err(runtime)?;
        let ids = if beam <= 1 {
            generate(model, &encoded, model.cfg.max_gen_len).map_err(runtime)?
        } else {
            generate_beam(model, &encoded, model.cfg.max_gen_len, beam).map_err(runtime)?
        };
        let decoded = vocab.detokenize(&ids);
        // truth words normalized the same way the vocabulary was built
        let mut truth = Vec::new();
        let mut frame_counts = Vec::with_capacity(sample.frame_counts.len());
        let mut cursor = 0;
        for &count in &sample.frame_counts {
            let mut kept = 0;
            for word in &sample.truth_words[cursor..cursor + count] {
                if let Some(normalized) = crate::data::normalize_word(word) {
                    truth.push(normalized);
                    kept += 1;
                }
            }
            frame_counts.push(kept);
            cursor += count;
        }
        windows.push(DecodedWindow {
            subject: sample.subject.clone(),
            story: sample.story.clone(),
            window_index: sample.window_index,
            decoded,
            truth,
            frame_counts,
        });
    }
    Ok(windows)
}

// ---------------------------------------------------------------------------
// evaluate / analyze-errors
// ---------------------------------------------------------------------------

fn load_decoded(path: &Path) -> Result<Vec<DecodedWindow>> {
    let file = if path.is_dir() { path.join("decoded.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file)
        .map_err(|e| super::CliError::Validation(format!("cannot read {}: {e}", file.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| super::CliError::Validation(format!("bad decoded file {}: {e}", file.display())))
}

pub fn windows_to_pairs(windows: &[DecodedWindow]) -> Vec<EvalPair> {
    windows
        .iter()
        .filter(|w| !w.truth.is_empty())
        .map(|w| EvalPair {
            decoded: w.decoded.clone(),
            truth: w.truth.clone(),
            frame_counts: w.frame_counts.clone(),
        })
        .collect()
}

pub(super) fn run_evaluate(cmd: Command) -> Result<()> {
    let Command::Evaluate { common, decoded } = cmd else { unreachable!() };
    let base = snapshot_base(&common, "evaluate")?;
    let prior = base.evaluate.clone();
    let cfg = EvaluateConfig {
        decoded: decoded
            .or(prior.map(|p| p.decoded))
            .ok_or_else(|| super::CliError::Validation("evaluate: --decoded is required".into()))?,
    };
    let windows = load_decoded(&cfg.decoded)?;
    let pairs = windows_to_pairs(&windows);
    if pairs.is_empty() {
        return validation("evaluate: no scorable windows");
    }
    let (report, events) = evaluate_pairs(&pairs).map_err(runtime)?;

    let config = RunConfig {
        seed: common.seed.unwrap_or(base.seed),
        evaluate: Some(cfg.clone()),
        ..base
    };
    with_out_dir(&common.out, &config, |tmp| {
        emit_report(
            &ReportInputs { report: Some(report), events: Some(events), surfaces: None },
            tmp,
        )
    })
}

pub(super) fn run_analyze(cmd: Command) -> Result<()> {
    let Command::AnalyzeErrors { common, decoded } = cmd else { unreachable!() };
    let base = snapshot_base(&common, "analyze-errors")?;
    let prior = base.analyze_errors.clone();
    let cfg = AnalyzeConfig {
        decoded: decoded
            .or(prior.map(|p| p.decoded))
            .ok_or_else(|| {
                super::CliError::Validation("analyze-errors: --decoded is required".into())
            })?,
    };
    let windows = load_decoded(&cfg.decoded)?;
    let pairs = windows_to_pairs(&windows);
    if pairs.is_empty() {
        return validation("analyze-errors: no scorable windows");
    }
    let mut events = Vec::new();
    let mut frame_counts = Vec::new();
    for pair in &pairs {
        events.extend(
            crate::metrics::align_errors(&pair.decoded, &pair.truth, &pair.frame_counts)
                .map_err(runtime)?,
        );
        frame_counts.extend(pair.frame_counts.iter().copied());
    }
    let histogram =
        crate::metrics::error_position_distribution(&events, &frame_counts).map_err(runtime)?;
    let phi = info_loss_slope(&histogram);

    let config = RunConfig {
        seed: common.seed.unwrap_or(base.seed),
        analyze_errors: Some(cfg.clone()),
        ..base
    };
    with_out_dir(&common.out, &config, |tmp| {
        write_errors_csv(&events, &tmp.join("errors.csv")).map_err(runtime)?;
        write_histogram_csv(&histogram, &tmp.join("histogram.csv")).map_err(runtime)?;
        let analysis = serde_json::json!({
            "phi": phi,
            "total_events": histogram.total,
            "first_half": histogram.first_half,
            "last_half": histogram.last_half,
            "pairs": pairs.len(),
        });
        fs::write(
            tmp.join("analysis.json"),
            serde_json::to_string_pretty(&analysis).map_err(runtime)? + "\n",
        )
        .map_err(runtime)?;
        Ok(())
    })
}
