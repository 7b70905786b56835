//! Warm-fit of the host backbone, adapter training with the backbone
//! frozen, evaluation with gate tracing, and the insertion-density sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::train_val_split;
use crate::error::{GeoError, Result};
use crate::manifold::Geometry;
use crate::moe::GateTrace;
use crate::optim::{AdamW, Schedule};
use crate::trainer::loss::{combined_loss, combined_loss_on_tape};
use crate::trainer::metrics::{f1_score, r2_score, F1Report};
use crate::trainer::model::{BackboneConfig, Dataset, GeoModel, SEQ_LEN, TASKS};

/// Expert kinds of the geometry adapter, in gate order.
pub const GEOMETRY_EXPERTS: [Geometry; 3] = [Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic];
/// Control adapter with the same shape but three Euclidean experts.
pub const EUCLIDEAN_EXPERTS: [Geometry; 3] = [Geometry::Euclidean; 3];

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Set from the run seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub freeze_attention: bool,
    /// Epochs of full-model fitting before the backbone is frozen. Zero
    /// keeps the host at its initialization: a host already fitted to the
    /// downstream task leaves the adapters nothing to learn.
    pub warm_fit_epochs: usize,
    pub warm_fit_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1.0,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 20,
            epochs: 10,
            batch_size: 32,
            val_fraction: 0.2,
            seed: 0,
            freeze_attention: true,
            warm_fit_epochs: 0,
            warm_fit_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GeoError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.lr > 0.0 && self.warm_fit_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn split(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        train_val_split(n, self.val_fraction, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Long-format metric log: one row per `(step, task, metric)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricTrace {
    pub rows: Vec<MetricRow>,
}

impl MetricTrace {
    pub fn push(&mut self, step: usize, task: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            step,
            task: task.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn series(&self, task: &str, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.task == task && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, task: &str, metric: &str) -> Option<f64> {
        self.series(task, metric).last().map(|&(_, v)| v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,task,metric,value")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.step, r.task, r.metric, r.value)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut t = MetricTrace::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err = |offset: usize| GeoError::Parse {
                line: i + 2,
                offset,
                msg: format!("bad field `{}`", &rec[offset]),
            };
            let step = rec[0].parse().map_err(|_| parse_err(0))?;
            let value = rec[3].parse().map_err(|_| parse_err(3))?;
            t.push(step, &rec[1], &rec[2], value);
        }
        Ok(t)
    }
}

/// Metrics and traced gates over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub r2: f64,
    pub f1: F1Report,
    pub numeric: Vec<f64>,
    pub predicted_class: Vec<usize>,
    /// Per sample, gate weights averaged over adapters and over the tokens of
    /// both task sequences. Empty without adapters.
    pub sample_gates: Vec<[f64; 3]>,
    /// One record per token, averaged over adapters.
    pub gates: GateTrace,
}

fn batch_inputs(data: &Dataset, idx: &[usize]) -> [Array2<f64>; 4] {
    std::array::from_fn(|m| data.modalities[m].select(Axis(0), idx))
}

/// Evaluates `model` on `idx` of an already normalized dataset.
pub fn evaluate(model: &GeoModel, data: &Dataset, idx: &[usize], cfg: &TrainConfig) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(GeoError::EmptyInput("no samples to evaluate".into()));
    }
    let c = model.cfg.n_classes;
    let mut logits = Array2::zeros((idx.len(), c));
    let mut numeric = Vec::with_capacity(idx.len());
    let mut sample_gates = Vec::new();
    let mut traces: Vec<GateTrace> = TASKS.iter().map(|t| GateTrace::new(*t)).collect();
    for (chunk_no, chunk) in idx.chunks(EVAL_BATCH).enumerate() {
        let b = chunk.len();
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &batch_inputs(data, chunk))?;
        numeric.extend(tape.value(out.numeric).column(0).iter().copied());
        logits
            .slice_mut(ndarray::s![chunk_no * EVAL_BATCH..chunk_no * EVAL_BATCH + b, ..])
            .assign(tape.value(out.logits));
        if out.gates.is_empty() {
            continue;
        }
        let inv = 1.0 / out.gates.len() as f64;
        let mut per_row = Array2::<f64>::zeros((2 * b * SEQ_LEN, 3));
        for g in &out.gates {
            per_row.scaled_add(inv, tape.value(*g));
        }
        let mut per_sample = vec![[0.0; 3]; b];
        for (r, w) in per_row.rows().into_iter().enumerate() {
            let seq = r / SEQ_LEN;
            let w = [w[0], w[1], w[2]];
            traces[seq / b].push_next(w);
            for e in 0..3 {
                per_sample[seq % b][e] += w[e] / (2 * SEQ_LEN) as f64;
            }
        }
        sample_gates.extend(per_sample);
    }
    let class_targets: Vec<usize> = idx.iter().map(|&i| data.class[i]).collect();
    let num_targets: Vec<f64> = idx.iter().map(|&i| data.regression[i]).collect();
    let predicted_class: Vec<usize> = logits
        .rows()
        .into_iter()
        .map(|r| {
            // first maximum wins ties
            r.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > r[best] { j } else { best })
        })
        .collect();
    let loss = combined_loss(&logits, &class_targets, &numeric, &num_targets, cfg.lambda, cfg.beta);
    let mut gates = GateTrace::default();
    for t in traces {
        gates.records.extend(t.records);
    }
    Ok(Evaluation {
        loss,
        r2: r2_score(&numeric, &num_targets)?,
        f1: f1_score(&predicted_class, &class_targets, c)?,
        numeric,
        predicted_class,
        sample_gates,
        gates,
    })
}

fn log_eval(trace: &mut MetricTrace, step: usize, e: &Evaluation) {
    trace.push(step, "all", "val_loss", e.loss);
    trace.push(step, TASKS[0], "r2", e.r2);
    trace.push(step, TASKS[1], "f1", e.f1.macro_f1);
}

/// Mini-batch training of the currently trainable tensors. Logs the batch
/// loss every step and validation metrics after every epoch.
fn fit(
    model: &mut GeoModel,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    epochs: usize,
    mut opt: AdamW,
    cfg: &TrainConfig,
    trace: &mut MetricTrace,
) -> Result<()> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut step = 0;
    log_eval(trace, step, &evaluate(model, data, val, cfg)?);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &batch_inputs(data, chunk))?;
            let cls = Arc::new(chunk.iter().map(|&i| data.class[i]).collect());
            let num = Arc::new(chunk.iter().map(|&i| data.regression[i]).collect());
            let loss = combined_loss_on_tape(
                &mut tape,
                Some((out.logits, cls)),
                Some((out.numeric, num)),
                cfg.lambda,
                cfg.beta,
            );
            let l = tape.scalar_value(loss);
            if !l.is_finite() {
                return Err(GeoError::Divergence { step, loss: l });
            }
            let mut grads = tape.backward(loss);
            opt.step(&mut model.store, &bound, &mut grads);
            step += 1;
            trace.push(step, "all", "loss", l);
        }
        log_eval(trace, step, &evaluate(model, data, val, cfg)?);
    }
    Ok(())
}

/// Builds the host model and fits every backbone tensor on the training
/// split. The numeric head is standardized to the training targets.
pub fn warm_fit(data: &Dataset, backbone: BackboneConfig, cfg: &TrainConfig) -> Result<(GeoModel, MetricTrace)> {
    cfg.validate()?;
    let data = data.normalized()?;
    if backbone.n_classes != data.n_classes {
        return Err(GeoError::Config(format!(
            "backbone has {} classes, dataset {}",
            backbone.n_classes, data.n_classes
        )));
    }
    let (train, val) = cfg.split(data.len())?;
    let mut model = GeoModel::new(backbone, data.feature_dims(), cfg.seed)?;
    let y: Vec<f64> = train.iter().map(|&i| data.regression[i]).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
    model.set_target_scaling(mean, if var > 0.0 { var.sqrt() } else { 1.0 });
    model.unfreeze_all();
    let mut trace = MetricTrace::default();
    let opt = AdamW::new(
        cfg.warm_fit_lr,
        cfg.weight_decay,
        Schedule::Warmup {
            steps: cfg.warmup_steps,
        },
    );
    fit(
        &mut model,
        &data,
        &train,
        &val,
        cfg.warm_fit_epochs,
        opt,
        cfg,
        &mut trace,
    )?;
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Report {
    pub metrics: MetricTrace,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub attention_digest_before: String,
    pub attention_digest_after: String,
    pub trainable_params: usize,
    pub final_eval: Evaluation,
}

/// Installs adapters into a copy of the warm-fitted `base` and trains only
/// adapters, projections and heads.
pub fn stage2_train(
    base: &GeoModel,
    data: &Dataset,
    kinds: [Geometry; 3],
    cfg: &TrainConfig,
) -> Result<(GeoModel, Stage2Report)> {
    cfg.validate()?;
    let data = data.normalized()?;
    let (train, val) = cfg.split(data.len())?;
    let mut model = base.clone();
    if model.adapter_kinds().is_none() {
        model.install_adapters(kinds, cfg.seed)?;
    }
    model.freeze_for_adapter_training(cfg.freeze_attention);
    let frozen_digest_before = model.frozen_digest();
    let attention_digest_before = model.attention_digest();
    let mut metrics = MetricTrace::default();
    let opt = AdamW::new(
        cfg.lr,
        cfg.weight_decay,
        Schedule::Warmup {
            steps: cfg.warmup_steps,
        },
    );
    fit(&mut model, &data, &train, &val, cfg.epochs, opt, cfg, &mut metrics)?;
    let final_eval = evaluate(&model, &data, &val, cfg)?;
    let report = Stage2Report {
        metrics,
        frozen_digest_before,
        frozen_digest_after: model.frozen_digest(),
        attention_digest_before,
        attention_digest_after: model.attention_digest(),
        trainable_params: model.store.trainable_count(),
        final_eval,
    };
    Ok((model, report))
}

#[derive(Debug)]
pub struct SweepRun {
    pub period: usize,
    pub result: Result<Stage2Report>,
}

/// Adapter training from the same warm-fitted backbone for each period.
/// A failed run is reported in place and the sweep continues.
pub fn insertion_sweep(
    base: &GeoModel,
    data: &Dataset,
    periods: &[usize],
    kinds: [Geometry; 3],
    cfg: &TrainConfig,
) -> Vec<SweepRun> {
    periods
        .iter()
        .map(|&period| {
            let result = (|| {
                let mut m = base.clone();
                if m.adapter_kinds().is_some() {
                    return Err(GeoError::Config("sweep needs a backbone without adapters".into()));
                }
                m.cfg.adapter_period = period;
                m.cfg.validate()?;
                stage2_train(&m, data, kinds, cfg).map(|(_, r)| r)
            })();
            SweepRun { period, result }
        })
        .collect()
}

/// First step whose batch loss, smoothed by an exponential moving average
/// with factor `alpha`, is at or below `threshold`.
pub fn steps_to_threshold(trace: &MetricTrace, threshold: f64, alpha: f64) -> Option<usize> {
    let mut ema: Option<f64> = None;
    for (step, v) in trace.series("all", "loss") {
        let e = ema.map_or(v, |p| alpha * v + (1.0 - alpha) * p);
        ema = Some(e);
        if e <= threshold {
            return Some(step);
        }
    }
    None
}
