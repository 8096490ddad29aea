use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::ckpt;
use crate::data::{load_index_subset, load_manifest, stratified_split, DatasetManifest, NormalizationSpec};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::optim::{apply_freeze, layer_scale, AdamW, EarlyStopState, ScheduleConfig, Sgd, Trainable};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};
use crate::vit::{self, cross_entropy, init_params, interpolate_pos_embed, layer_group, validate_names, ModelConfig};
use crate::Level;

use super::config::{Mode, RunConfig};
use super::dataset::Dataset;

/// Samples per forward pass during evaluation.
pub(crate) const EVAL_BATCH: usize = 64;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global step at which the epoch starts.
    pub step: usize,
    /// Scheduled rate of each layer group at `step`.
    pub lr: Vec<f64>,
    pub trainable_groups: Vec<usize>,
    pub train_loss: f64,
    pub val_wacc: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome<S> {
    /// Weights of the returned model (best epoch for fine-tuning).
    pub params: ParamSet<S>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub val_report: MetricsReport,
    pub test_report: Option<MetricsReport>,
    pub log: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    /// Digest of everything except the head, before and after training.
    pub backbone_digest: (String, String),
}

/// Train, validation and optional test manifests of a run.
pub struct Splits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: Option<DatasetManifest>,
}

pub fn resolve_splits(cfg: &RunConfig) -> Result<Splits> {
    let (train, val) = match (&cfg.train_manifest, &cfg.val_manifest, &cfg.manifest) {
        (Some(t), Some(v), _) => (load_manifest(t)?, load_manifest(v)?),
        (_, _, Some(m)) => {
            let mut all = load_manifest(m)?;
            if let Some(subset) = &cfg.subset {
                all = all.subset(&load_index_subset(subset)?)?;
            }
            stratified_split(&all, cfg.split_ratio, cfg.seed)?
        }
        _ => {
            return Err(Error::Config(
                "set `manifest`, or both `train_manifest` and `val_manifest`".into(),
            ))
        }
    };
    let test = cfg.test_manifest.as_ref().map(load_manifest).transpose()?;
    Ok(Splits { train, val, test })
}

/// Starting weights: a checkpoint (head and position grid adapted) or a
/// seeded random init.
pub fn initial_params<S: Scalar>(cfg: &RunConfig) -> Result<ParamSet<S>> {
    let fresh = init_params::<S>(&cfg.model, cfg.seed)?;
    let Some(path) = &cfg.init else {
        return Ok(fresh);
    };
    let (mut params, _) = ckpt::load::<S>(path)?;
    if let Some(pos) = params.get("pos_embed") {
        let want = cfg.model.num_tokens();
        if pos.shape().len() == 3 && pos.shape()[1] != want {
            let resized = interpolate_pos_embed(pos, cfg.model.grid())?;
            params.insert("pos_embed", resized);
        }
    }
    let report = validate_names(&params, &cfg.model);
    let head_only = report.missing.iter().all(|n| n.starts_with("head."));
    if !report.unexpected.is_empty() || !report.shape_mismatch.is_empty() || !head_only {
        return Err(Error::NameMismatch(report.summary()));
    }
    for name in &report.missing {
        params.insert(name.clone(), fresh.require(name)?.clone());
    }
    Ok(params)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

fn batches(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Confusion matrix of a model over a dataset.
pub fn evaluate<S: Scalar>(
    model: &ModelConfig,
    params: &ParamSet<S>,
    data: &Dataset<S>,
) -> Result<(MetricsReport, Vec<Level>)> {
    let mut cm = ConfusionMatrix::new();
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let trace = vit::forward(model, params, &data.batch::<ChaCha8Rng>(idx, None), false)?;
        let p: Vec<Level> = trace
            .predictions()
            .into_iter()
            .map(Level::from_index)
            .collect::<Result<_>>()?;
        cm.accumulate(&p, &data.labels_of(idx))?;
        preds.extend(p);
    }
    Ok((MetricsReport::from_confusion(&cm)?, preds))
}

fn checkpoint_meta(cfg: &RunConfig, norm: &NormalizationSpec, best_epoch: Option<usize>) -> Value {
    json!({
        "model": cfg.model,
        "normalization": norm,
        "mode": cfg.mode,
        "recipe": cfg.fingerprint(),
        "best_epoch": best_epoch,
    })
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, report.to_json() + "\n").map_err(|e| Error::io(path, e))
}

struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn append(&mut self, entry: &EpochLog) -> Result<()> {
        let line = serde_json::to_string(entry)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn backbone_digest<S: Scalar>(params: &ParamSet<S>) -> String {
    params.digest_filtered(|n| !n.starts_with("head."))
}

fn load_splits<S: Scalar>(
    cfg: &RunConfig,
    norm: &NormalizationSpec,
) -> Result<(Dataset<S>, Dataset<S>, Option<Dataset<S>>)> {
    let splits = resolve_splits(cfg)?;
    let size = cfg.model.img_size;
    let train = Dataset::load(&splits.train, norm, size)?;
    let val = Dataset::load(&splits.val, norm, size)?;
    let test = splits.test.as_ref().map(|m| Dataset::load(m, norm, size)).transpose()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    info!(
        "train {} / val {} / test {} images",
        train.len(),
        val.len(),
        test.as_ref().map_or(0, Dataset::len)
    );
    Ok((train, val, test))
}

/// Head-only linear probe on frozen final-norm class-token features.
pub fn run_probe<S: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<S>> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Probe;
    cfg.validate()?;
    let norm = cfg.normalization_spec()?;
    let (train, val, test) = load_splits::<S>(&cfg, &norm)?;
    let mut params = initial_params::<S>(&cfg)?;
    let before = backbone_digest(&params);
    create_out(&cfg.out)?;
    let mut log_out = LogWriter::create(cfg.out.join("train_log.jsonl"))?;

    // features never change while only the head trains
    let features = |data: &Dataset<S>| -> Result<Vec<S>> {
        let all: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len() * cfg.model.embed_dim);
        for idx in all.chunks(EVAL_BATCH) {
            let tr = vit::forward(&cfg.model, &params, &data.batch::<ChaCha8Rng>(idx, None), false)?;
            out.extend_from_slice(tr.cls_features.data());
        }
        Ok(out)
    };
    let train_feats = features(&train)?;
    let val_feats = features(&val)?;

    let d = cfg.model.embed_dim;
    let k = cfg.model.num_classes;
    let epochs = cfg.epochs();
    let nb = batches(train.len(), cfg.batch_size);
    let schedule = ScheduleConfig::cosine(cfg.sgd.lr0, (epochs * nb).max(1));
    let mut sgd = Sgd::<S>::new(cfg.sgd.clone())?;
    let mut log = Vec::new();
    let head_group = cfg.model.depth + 1;

    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        for (b, idx) in epoch_order(train.len(), cfg.seed, epoch).chunks(cfg.batch_size).enumerate() {
            let step = epoch * nb + b;
            let (loss, grads) = head_loss_and_grads(&params, &train_feats, d, k, idx, &train.labels)?;
            if !loss.as_f64().is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss.as_f64() * idx.len() as f64;
            sgd.step(&mut params, &grads, schedule.lr_at(step)?)?;
        }
        let val_wacc = head_report(&params, &val_feats, d, k, &val.labels)?.wacc();
        let entry = EpochLog {
            epoch,
            step: epoch * nb,
            lr: (0..=head_group)
                .map(|g| if g == head_group { schedule.lr_at(epoch * nb).unwrap_or(0.0) } else { 0.0 })
                .collect(),
            trainable_groups: vec![head_group],
            train_loss: loss_sum / train.len() as f64,
            val_wacc,
            improved: false,
        };
        info!("probe epoch {epoch}: loss {:.4} val wAcc {:.4}", entry.train_loss, val_wacc);
        log_out.append(&entry)?;
        log.push(entry);
    }

    let after = backbone_digest(&params);
    let (val_report, _) = evaluate(&cfg.model, &params, &val)?;
    let test_report = test.as_ref().map(|t| evaluate(&cfg.model, &params, t)).transpose()?.map(|r| r.0);
    let checkpoint = cfg.out.join("probe.ptf");
    ckpt::save(&params, &checkpoint_meta(&cfg, &norm, None), &checkpoint)?;
    write_report(&cfg.out.join("report.json"), &val_report)?;
    if let Some(r) = &test_report {
        write_report(&cfg.out.join("test_report.json"), r)?;
    }
    Ok(RunOutcome {
        params,
        best_epoch: None,
        epochs_run: epochs,
        val_report,
        test_report,
        log,
        checkpoint,
        backbone_digest: (before, after),
    })
}

fn head_logits<S: Scalar>(params: &ParamSet<S>, feats: &[S], d: usize, k: usize) -> Result<Vec<S>> {
    let w = params.require("head.weight")?.data();
    let bias = params.require("head.bias")?.data();
    Ok(feats
        .chunks(d)
        .flat_map(|f| {
            (0..k).map(move |c| {
                let row = &w[c * d..(c + 1) * d];
                bias[c] + row.iter().zip(f).map(|(a, b)| *a * *b).sum::<S>()
            })
        })
        .collect())
}

fn head_report<S: Scalar>(
    params: &ParamSet<S>,
    feats: &[S],
    d: usize,
    k: usize,
    labels: &[Level],
) -> Result<MetricsReport> {
    let logits = head_logits(params, feats, d, k)?;
    let preds: Vec<Level> = logits
        .chunks(k)
        .map(|row| Level::from_index(vit::argmax(row)))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(&preds, labels)?;
    MetricsReport::from_confusion(&cm)
}

fn head_loss_and_grads<S: Scalar>(
    params: &ParamSet<S>,
    all_feats: &[S],
    d: usize,
    k: usize,
    idx: &[usize],
    all_labels: &[Level],
) -> Result<(S, ParamSet<S>)> {
    let feats: Vec<S> = idx.iter().flat_map(|&i| all_feats[i * d..(i + 1) * d].iter().copied()).collect();
    let labels: Vec<Level> = idx.iter().map(|&i| all_labels[i]).collect();
    let logits = head_logits(params, &feats, d, k)?;
    let scale = S::one() / S::of(idx.len() as f64);
    let mut dlogits = vec![S::zero(); logits.len()];
    let loss = cross_entropy(&logits, k, &labels, scale, &mut dlogits) * scale;
    let mut gw = vec![S::zero(); k * d];
    let mut gb = vec![S::zero(); k];
    for (f, dl) in feats.chunks(d).zip(dlogits.chunks(k)) {
        for c in 0..k {
            gb[c] += dl[c];
            for (g, x) in gw[c * d..(c + 1) * d].iter_mut().zip(f) {
                *g += dl[c] * *x;
            }
        }
    }
    let mut grads = ParamSet::new();
    grads.insert("head.weight", Tensor::from_vec(&[k, d], gw)?);
    grads.insert("head.bias", Tensor::from_vec(&[k], gb)?);
    Ok((loss, grads))
}

/// Full fine-tuning: phase-one freezing, AdamW with warmup/cosine rates and
/// layerwise decay, early stopping on validation wAcc.
pub fn run_finetune<S: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<S>> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Finetune;
    cfg.validate()?;
    let norm = cfg.normalization_spec()?;
    let (train, val, test) = load_splits::<S>(&cfg, &norm)?;
    let mut params = initial_params::<S>(&cfg)?;
    finetune_loop(&cfg, &norm, &mut params, &train, &val, test.as_ref(), &mut |_, _| {})
}

/// Fine-tuning on datasets already in memory. `observer` sees every epoch's
/// log entry and the weights at the end of that epoch.
pub fn finetune_loop<S: Scalar>(
    cfg: &RunConfig,
    norm: &NormalizationSpec,
    params: &mut ParamSet<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    test: Option<&Dataset<S>>,
    observer: &mut dyn FnMut(&EpochLog, &ParamSet<S>),
) -> Result<RunOutcome<S>> {
    let before = backbone_digest(params);
    create_out(&cfg.out)?;
    let mut log_out = LogWriter::create(cfg.out.join("train_log.jsonl"))?;
    let checkpoint = cfg.out.join("best.ptf");

    let depth = cfg.model.depth;
    let decay = cfg.adamw.layerwise_decay;
    let epochs = cfg.epochs();
    let nb = batches(train.len(), cfg.batch_size);
    let schedule = ScheduleConfig {
        peak_lr: cfg.adamw.peak_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * nb,
        total_steps: epochs * nb,
    };
    schedule.validate()?;
    let scales: Vec<f64> = (0..=depth + 1)
        .map(|g| layer_scale(g, depth, decay))
        .collect::<Result<_>>()?;
    let group_scale = |name: &str| layer_group(name, depth).map_or(1.0, |g| scales[g]);

    let mut adam = AdamW::<S>::new(cfg.adamw.clone())?;
    let mut stopper = EarlyStopState::new("val_wacc", cfg.patience);
    let mut best: Option<ParamSet<S>> = None;
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..epochs {
        let trainable = apply_freeze(&cfg.freeze, epoch, depth);
        adam.retain(|n| trainable.contains(n));
        let pred = trainable.as_predicate();
        let first = epoch * nb;
        let lr0 = schedule.lr_at(first)?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a0a0);
        aug_rng.set_stream(epoch as u64);

        let mut loss_sum = 0.0;
        for (b, idx) in epoch_order(train.len(), cfg.seed, epoch).chunks(cfg.batch_size).enumerate() {
            let step = first + b;
            let images = train.batch(idx, cfg.augment.then_some(&mut aug_rng));
            let (loss, grads) = vit::loss_and_grads(&cfg.model, params, &images, &train.labels_of(idx), &pred)?;
            if !loss.as_f64().is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss.as_f64() * idx.len() as f64;
            adam.step(params, &grads, schedule.lr_at(step)?, group_scale)?;
        }
        epochs_run = epoch + 1;

        let (report, _) = evaluate(&cfg.model, params, val)?;
        let decision = stopper.update(epoch, report.wacc())?;
        if decision.improved {
            ckpt::save(params, &checkpoint_meta(cfg, norm, Some(epoch)), &checkpoint)?;
            best = Some(params.clone());
        }
        let entry = EpochLog {
            epoch,
            step: first,
            lr: scales.iter().map(|s| lr0 * s).collect(),
            trainable_groups: trainable_groups(&trainable, depth),
            train_loss: loss_sum / train.len() as f64,
            val_wacc: report.wacc(),
            improved: decision.improved,
        };
        info!(
            "epoch {epoch}: loss {:.4} val wAcc {:.4}{}",
            entry.train_loss,
            entry.val_wacc,
            if decision.improved { " *" } else { "" }
        );
        log_out.append(&entry)?;
        observer(&entry, params);
        log.push(entry);
        if decision.stop {
            info!("early stop after epoch {epoch}");
            break;
        }
    }

    if let Some(b) = best {
        *params = b;
    } else {
        ckpt::save(params, &checkpoint_meta(cfg, norm, None), &checkpoint)?;
    }
    let (val_report, _) = evaluate(&cfg.model, params, val)?;
    let test_report = test.map(|t| evaluate(&cfg.model, params, t)).transpose()?.map(|r| r.0);
    write_report(&cfg.out.join("report.json"), &val_report)?;
    if let Some(r) = &test_report {
        write_report(&cfg.out.join("test_report.json"), r)?;
    }
    Ok(RunOutcome {
        params: params.clone(),
        best_epoch: stopper.best_epoch,
        epochs_run,
        val_report,
        test_report,
        log,
        checkpoint,
        backbone_digest: (before, backbone_digest(params)),
    })
}

fn trainable_groups(t: &Trainable, depth: usize) -> Vec<usize> {
    let schema = vit::param_schema(&ModelConfig { depth, ..ModelConfig::default() });
    let mut groups: Vec<usize> = schema
        .iter()
        .filter(|(n, _)| t.contains(n))
        .filter_map(|(n, _)| layer_group(n, depth))
        .collect();
    groups.sort_unstable();
    groups.dedup();
    groups
}
