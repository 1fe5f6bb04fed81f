//! Weighted multitask training with per-epoch evaluation and logging.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, ParamStore, Session, Tensor, DEFAULT_LEARNING_RATE};
use crate::encoders::ModalityBatch;
use crate::error::{Error, Result};
use crate::heads::HeadKind;

use super::checkpoint::Checkpoint;
use super::config::{MetricKind, ModalityRoleConfig, TaskSpec};
use super::data::{Dataset, ModalityData, Normalization, Split};
use super::log::{metrics_to_csv, LogRow, MetricRow, Payload, PredictionLog};
use super::metrics;
use super::model::{combine_losses, task_loss, MultitaskModel};
use super::split::SplitAssignment;

/// Batch size used when no input is an image.
pub const VECTOR_BATCH: usize = 64;
/// Batch size used when an input is an image.
pub const PATCH_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Overrides the vector/patch default.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Categorical modality whose inverse class frequency weights the
    /// training sampler.
    pub balance_by: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: None,
            seed: 0,
            balance_by: None,
        }
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub main_task: String,
    pub model: MultitaskModel,
    pub store: ParamStore<f32>,
    pub normalization: Normalization,
    pub metrics: Vec<MetricRow>,
    pub log: PredictionLog,
    /// Mean weighted training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Mean unweighted training loss per epoch and task.
    pub task_train_loss: Vec<BTreeMap<String, f64>>,
    pub best_epoch: usize,
    pub best: Checkpoint<f32>,
    pub last: Checkpoint<f32>,
}

impl TrainOutcome {
    /// Metric value of `task` on `split` at `epoch`.
    pub fn metric(
        &self,
        epoch: usize,
        split: Split,
        task: &str,
        metric: MetricKind,
    ) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| {
                r.epoch == epoch && r.split == split && r.task == task && r.metric == metric.name()
            })
            .map(|r| r.value)
    }

    /// Test metrics of the best epoch.
    pub fn best_test_metrics(&self) -> Vec<&MetricRow> {
        self.metrics
            .iter()
            .filter(|r| r.epoch == self.best_epoch && r.split == Split::Test)
            .collect()
    }

    /// Writes metrics, predictions, splits, checkpoints and a summary into `dir`.
    pub fn write(&self, dir: &Path, split: &SplitAssignment) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        put("metrics.csv", metrics_to_csv(&self.metrics))?;
        put("predictions.csv", self.log.to_csv())?;
        put("splits.csv", split.to_csv())?;
        self.best.save(&dir.join("best.ckpt"))?;
        self.last.save(&dir.join("last.ckpt"))?;
        let summary = RunSummary {
            main_task: self.main_task.clone(),
            best_epoch: self.best_epoch,
            inputs: self
                .model
                .input_schema()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            tasks: self.model.tasks.clone(),
            weights: self.model.weights.clone(),
            train_loss: self.train_loss.clone(),
            test: self
                .best_test_metrics()
                .into_iter()
                .map(|r| (format!("{}.{}", r.task, r.metric), r.value))
                .collect(),
        };
        put(
            "summary.json",
            serde_json::to_string_pretty(&summary)? + "\n",
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub main_task: String,
    pub best_epoch: usize,
    pub inputs: Vec<String>,
    pub tasks: Vec<TaskSpec>,
    pub weights: Vec<f64>,
    pub train_loss: Vec<f64>,
    /// `task.metric` -> best-epoch test value.
    pub test: BTreeMap<String, f64>,
}

fn batches_of(model: &MultitaskModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<usize> {
    let images = model
        .input_schema()
        .iter()
        .map(|n| dataset.modality(n))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .any(|d| matches!(d, ModalityData::Images { .. }));
    let b = cfg
        .batch_size
        .unwrap_or(if images { PATCH_BATCH } else { VECTOR_BATCH });
    if b == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(b)
}

fn inputs_for(
    model: &MultitaskModel,
    dataset: &Dataset,
    idx: &[usize],
    norm: &Normalization,
) -> Result<BTreeMap<String, ModalityBatch<f32>>> {
    model
        .input_schema()
        .into_iter()
        .map(|n| Ok((n.to_string(), dataset.input_batch(n, idx, norm)?)))
        .collect()
}

fn nan_guard(err: Error, task: &str, epoch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::NanLoss {
            task: task.to_string(),
            epoch,
        },
        other => other,
    }
}

/// Training order of one epoch: a shuffle, or an inverse-frequency
/// weighted draw with replacement.
fn epoch_order(
    train: &[usize],
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match &cfg.balance_by {
        None => {
            let mut order = train.to_vec();
            order.shuffle(rng);
            Ok(order)
        }
        Some(name) => {
            let labels = dataset.class_labels(name)?;
            let mut freq: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in train {
                *freq.entry(labels[i]).or_default() += 1;
            }
            let w: Vec<f64> = train
                .iter()
                .map(|&i| 1.0 / freq[&labels[i]] as f64)
                .collect();
            let dist = WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok((0..train.len()).map(|_| train[dist.sample(rng)]).collect())
        }
    }
}

/// Prediction and target payloads of one task on one evaluation batch.
fn payloads(
    task: &TaskSpec,
    output: &Tensor<f32>,
    dataset: &Dataset,
    idx: &[usize],
    norm: &Normalization,
) -> Result<Vec<(Payload, Payload)>> {
    let shape = output.shape();
    let data = output.data();
    let b = idx.len();
    let per = data.len() / b.max(1);
    let target = dataset.modality(&task.name)?;
    let mut out = Vec::with_capacity(b);
    for (row, &i) in idx.iter().enumerate() {
        let o = &data[row * per..(row + 1) * per];
        let pair = match (task.kind, target) {
            (HeadKind::Classification, ModalityData::Classes { values, .. }) => {
                let max = o.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let z: f64 = o.iter().map(|&v| ((v - max) as f64).exp()).sum();
                let (class, &best) =
                    o.iter().enumerate().fold(
                        (0, &o[0]),
                        |acc, (c, v)| if *v > *acc.1 { (c, v) } else { acc },
                    );
                let confidence = (((best - max) as f64).exp() / z) as f32;
                (
                    Payload::Class { class, confidence },
                    Payload::Label(values[i] as usize),
                )
            }
            (
                HeadKind::MulticlassSeg,
                ModalityData::ClassMaps {
                    height,
                    width,
                    values,
                    ..
                },
            ) => {
                let (k, n) = (shape[1], height * width);
                let classes = (0..n)
                    .map(|p| {
                        (0..k)
                            .fold((0usize, f32::NEG_INFINITY), |acc, c| {
                                let v = o[c * n + p];
                                if v > acc.1 {
                                    (c, v)
                                } else {
                                    acc
                                }
                            })
                            .0 as u8
                    })
                    .collect();
                let pred = Payload::ClassMap {
                    height: *height,
                    width: *width,
                    classes,
                };
                let tgt = Payload::ClassMap {
                    height: *height,
                    width: *width,
                    classes: values[i * n..(i + 1) * n].to_vec(),
                };
                (pred, tgt)
            }
            (
                HeadKind::DenseSeg,
                ModalityData::Images {
                    height,
                    width,
                    values,
                    ..
                },
            ) => {
                let n = height * width;
                (
                    Payload::ValueMap {
                        height: *height,
                        width: *width,
                        values: o.to_vec(),
                    },
                    Payload::ValueMap {
                        height: *height,
                        width: *width,
                        values: values[i * n..(i + 1) * n].to_vec(),
                    },
                )
            }
            (
                HeadKind::Regression | HeadKind::BoundedRegression,
                ModalityData::Features { dim, values },
            ) => {
                let st = norm.get(&task.name);
                let pred = o
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| st.map_or(v, |st| st.invert(c, v)))
                    .collect();
                (
                    Payload::Values(pred),
                    Payload::Values(values[i * dim..(i + 1) * dim].to_vec()),
                )
            }
            _ => {
                return Err(Error::Config(format!(
                    "task `{}` of kind {:?} does not match its stored modality",
                    task.name, task.kind
                )))
            }
        };
        out.push(pair);
    }
    Ok(out)
}

/// Metric values of one task from its logged payload pairs. Undefined
/// metrics (such as R² of a constant target) are left out.
pub fn task_metrics(
    task: &TaskSpec,
    classes: usize,
    pairs: &[(&Payload, &Payload)],
) -> Result<Vec<(MetricKind, f64)>> {
    let mut out = Vec::new();
    for &m in &task.metrics {
        let v = match m {
            MetricKind::R2 | MetricKind::Mae => {
                let (p, t) = flat_values(pairs);
                if m == MetricKind::Mae {
                    metrics::mae(&p, &t)
                } else {
                    per_column_r2(pairs)
                }
            }
            MetricKind::MicroF1 | MetricKind::Accuracy | MetricKind::Iou => {
                let (p, t) = flat_classes(pairs);
                match m {
                    MetricKind::MicroF1 => metrics::micro_f1(&p, &t, classes),
                    MetricKind::Accuracy => metrics::accuracy(&p, &t),
                    _ => metrics::iou(&p, &t, classes),
                }
            }
        };
        match v {
            Ok(v) => out.push((m, v)),
            Err(Error::UndefinedCorrelation(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn flat_values(pairs: &[(&Payload, &Payload)]) -> (Vec<f64>, Vec<f64>) {
    let vals = |p: &Payload| -> Vec<f64> {
        match p {
            Payload::Values(v) | Payload::ValueMap { values: v, .. } => {
                v.iter().map(|&x| x as f64).collect()
            }
            _ => Vec::new(),
        }
    };
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (a, b) in pairs {
        p.extend(vals(a));
        t.extend(vals(b));
    }
    (p, t)
}

/// R² averaged over output columns; maps count as one column.
fn per_column_r2(pairs: &[(&Payload, &Payload)]) -> Result<f64> {
    let cols = match pairs.first().map(|p| p.1) {
        Some(Payload::Values(v)) => v.len(),
        _ => {
            let (p, t) = flat_values(pairs);
            return metrics::r_squared(&p, &t);
        }
    };
    let mut total = 0.0;
    for c in 0..cols {
        let col = |p: &Payload| match p {
            Payload::Values(v) => v[c] as f64,
            _ => f64::NAN,
        };
        let p: Vec<f64> = pairs.iter().map(|(a, _)| col(a)).collect();
        let t: Vec<f64> = pairs.iter().map(|(_, b)| col(b)).collect();
        total += metrics::r_squared(&p, &t)?;
    }
    Ok(total / cols as f64)
}

fn flat_classes(pairs: &[(&Payload, &Payload)]) -> (Vec<usize>, Vec<usize>) {
    let cls = |p: &Payload| -> Vec<usize> {
        match p {
            Payload::ClassMap { classes, .. } => classes.iter().map(|&c| c as usize).collect(),
            other => other.class().into_iter().collect(),
        }
    };
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (a, b) in pairs {
        p.extend(cls(a));
        t.extend(cls(b));
    }
    (p, t)
}

/// Runs the model in inference mode over `idx` and returns, per sample, one
/// payload pair per task.
pub fn predict(
    model: &MultitaskModel,
    store: &mut ParamStore<f32>,
    dataset: &Dataset,
    idx: &[usize],
    norm: &Normalization,
    batch: usize,
) -> Result<Vec<Vec<(Payload, Payload)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out: Vec<Vec<(Payload, Payload)>> = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let inputs = inputs_for(model, dataset, chunk, norm)?;
        let mut s = Session::new(store, false, &mut rng);
        let outputs = model.forward(&mut s, &inputs)?;
        let mut per_task = Vec::with_capacity(model.tasks.len());
        for (task, &o) in model.tasks.iter().zip(&outputs) {
            per_task.push(payloads(task, s.graph.value(o), dataset, chunk, norm)?);
        }
        for row in 0..chunk.len() {
            out.push(per_task.iter().map(|t| t[row].clone()).collect());
        }
    }
    Ok(out)
}

fn class_count(dataset: &Dataset, task: &str) -> Result<usize> {
    Ok(match dataset.modality(task)? {
        ModalityData::Classes { classes, .. } | ModalityData::ClassMaps { classes, .. } => *classes,
        _ => 0,
    })
}

/// Trains `roles` on `dataset`. After every epoch the validation and test
/// splits are evaluated, logged and scored; the best epoch is chosen by the
/// main task's first metric on validation, earlier epochs winning ties.
pub fn train(
    dataset: &Dataset,
    roles: &ModalityRoleConfig,
    split: &SplitAssignment,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    dataset.validate()?;
    if split.samples.len() != dataset.len() {
        return Err(Error::Config(
            "split assignment does not cover the dataset".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be positive".into()));
    }
    let train_idx = split.indices(Split::Train);
    let val_idx = split.indices(Split::Val);
    let test_idx = split.indices(Split::Test);
    for (s, idx) in [
        (Split::Train, &train_idx),
        (Split::Val, &val_idx),
        (Split::Test, &test_idx),
    ] {
        if idx.is_empty() {
            return Err(Error::EmptySplit(s.name().to_string()));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut store = ParamStore::<f32>::new();
    let model = MultitaskModel::build(&mut store, roles, &dataset.catalog, &mut init_rng)?;
    let batch = batches_of(&model, dataset, cfg)?;

    let mut norm_names: Vec<(&str, Option<HeadKind>)> = model
        .input_schema()
        .into_iter()
        .map(|n| (n, None))
        .collect();
    norm_names.extend(model.tasks.iter().map(|t| (t.name.as_str(), Some(t.kind))));
    let normalization = dataset.fit_normalization(&norm_names, &train_idx)?;

    let main = model
        .tasks
        .iter()
        .position(|t| t.name == roles.main_task)
        .ok_or_else(|| Error::UnknownTask(roles.main_task.clone()))?;
    let main_metric = model.tasks[main].primary_metric();
    let classes: Vec<usize> = model
        .tasks
        .iter()
        .map(|t| class_count(dataset, &t.name))
        .collect::<Result<_>>()?;

    let mut adam = Adam::<f32>::new(cfg.learning_rate)?;
    let mut metrics_rows = Vec::new();
    let mut log = PredictionLog::default();
    let mut train_loss = Vec::new();
    let mut task_train_loss = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(&train_idx, dataset, cfg, &mut order_rng)?;
        let mut sum = 0.0;
        let mut task_sums = vec![0.0; model.tasks.len()];
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let inputs = inputs_for(&model, dataset, chunk, &normalization)?;
            let mut s = Session::new(&mut store, true, &mut drop_rng);
            let outputs = model
                .forward(&mut s, &inputs)
                .map_err(|e| nan_guard(e, &roles.main_task, epoch))?;
            let mut losses = Vec::with_capacity(outputs.len());
            for ((task, &o), ts) in model.tasks.iter().zip(&outputs).zip(task_sums.iter_mut()) {
                let target = dataset.target_batch(&task.name, chunk, &normalization)?;
                let l = task_loss(&mut s.graph, task.loss, o, &target)
                    .map_err(|e| nan_guard(e, &task.name, epoch))?;
                *ts += s.graph.value(l).item()? as f64;
                losses.push(l);
            }
            let total = combine_losses(&mut s.graph, &losses, &model.weights)?;
            let value = s.graph.value(total).item()? as f64;
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    task: roles.main_task.clone(),
                    epoch,
                });
            }
            s.backward(total)
                .map_err(|e| nan_guard(e, &roles.main_task, epoch))?;
            adam.step(&mut store)
                .map_err(|e| nan_guard(e, &roles.main_task, epoch))?;
            sum += value;
            steps += 1;
        }
        let steps_f = steps.max(1) as f64;
        train_loss.push(sum / steps_f);
        task_train_loss.push(
            model
                .tasks
                .iter()
                .zip(&task_sums)
                .map(|(t, s)| (t.name.clone(), s / steps_f))
                .collect(),
        );

        let mut val_main = None;
        for (split_kind, idx) in [(Split::Val, &val_idx), (Split::Test, &test_idx)] {
            let preds = predict(&model, &mut store, dataset, idx, &normalization, batch)
                .map_err(|e| nan_guard(e, &roles.main_task, epoch))?;
            for (&i, per_task) in idx.iter().zip(&preds) {
                let meta = dataset.samples[i];
                for (task, (p, t)) in model.tasks.iter().zip(per_task) {
                    log.rows.push(LogRow {
                        epoch,
                        sample_id: meta.id,
                        group_id: meta.group,
                        task: task.name.clone(),
                        pred: p.clone(),
                        target: t.clone(),
                    });
                }
            }
            for (k, task) in model.tasks.iter().enumerate() {
                let pairs: Vec<(&Payload, &Payload)> =
                    preds.iter().map(|r| (&r[k].0, &r[k].1)).collect();
                for (m, v) in task_metrics(task, classes[k], &pairs)? {
                    if split_kind == Split::Val && k == main && m == main_metric {
                        val_main = Some(v);
                    }
                    metrics_rows.push(MetricRow {
                        epoch,
                        split: split_kind,
                        task: task.name.clone(),
                        metric: m.name().to_string(),
                        value: v,
                    });
                }
            }
        }
        let score = val_main.map(|v| {
            if main_metric.higher_is_better() {
                v
            } else {
                -v
            }
        });
        let improved = match (&best, score) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some((_, b, _)), Some(s)) => s > *b,
        };
        if improved {
            best = Some((
                epoch,
                score.unwrap_or(f64::NEG_INFINITY),
                Checkpoint::capture(&store, epoch, &normalization),
            ));
        }
    }

    let (best_epoch, _, best_ck) = best.expect("at least one epoch");
    let last = Checkpoint::capture(&store, cfg.epochs - 1, &normalization);
    Ok(TrainOutcome {
        main_task: roles.main_task.clone(),
        model,
        store,
        normalization,
        metrics: metrics_rows,
        log,
        train_loss,
        task_train_loss,
        best_epoch,
        best: best_ck,
        last,
    })
}
