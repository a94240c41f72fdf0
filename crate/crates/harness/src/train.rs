//! The training loop: backbone forward, composite (or task-only) loss,
//! backward, optimizer step; windowed logging and held-out evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bgdb_core::block::{CompositeModel, LossBreakdown};
use bgdb_core::nets::{Backbone, Module};
use bgdb_core::rng::{self, StreamRng};
use bgdb_core::tensor::{no_grad, Activation};
use bgdb_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::metrics::{evaluate, EvalMetrics};
use crate::optim::Optimizer;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 12] = [
    "iteration", "l_y", "l_simple", "l_vlb", "l_mu", "l_sigma", "total", "dice", "miou", "accuracy", "auc", "wall_time",
];

const SHUFFLE_STREAM: u64 = 1;
const BLOCK_STREAM: u64 = 2;
const DENOISER_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Loss terms averaged over the iterations since the previous record. The
/// block terms are absent when training without the block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_y: f64,
    pub l_simple: Option<f64>,
    pub l_vlb: Option<f64>,
    pub l_mu: Option<f64>,
    pub l_sigma: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub loss: LossRecord,
    pub eval: EvalMetrics,
    /// Seconds since the start of training, when recording is enabled.
    pub wall_time: Option<f64>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let l = &self.loss;
        let e = &self.eval;
        vec![
            self.iteration.to_string(),
            l.l_y.to_string(),
            cell(l.l_simple),
            cell(l.l_vlb),
            cell(l.l_mu),
            cell(l.l_sigma),
            l.total.to_string(),
            cell(e.dice),
            cell(e.miou),
            cell(e.accuracy),
            cell(e.auc),
            cell(self.wall_time),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityCheck {
    /// Stripped, reloaded checkpoint reproduces the composite backbone path
    /// bit for bit on the test split.
    pub bit_identical: bool,
    pub composite_params: usize,
    pub stripped_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub iterations: usize,
    pub initial: MetricsRecord,
    pub last: MetricsRecord,
    /// Total loss of the last record over that of the first.
    pub loss_ratio: f64,
    pub parity: ParityCheck,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

#[derive(Default)]
struct Window {
    count: usize,
    sums: [f64; 6],
}

impl Window {
    fn push(&mut self, b: &LossBreakdown) {
        let v = [b.l_y, b.l_simple, b.l_vlb, b.l_mu, b.l_sigma, b.total];
        for (s, x) in self.sums.iter_mut().zip(v) {
            *s += x;
        }
        self.count += 1;
    }

    fn take(&mut self, with_block: bool) -> LossRecord {
        let n = self.count as f64;
        let [l_y, simple, vlb, mu, sigma, total] = self.sums.map(|s| s / n);
        let block = |x: f64| with_block.then_some(x);
        *self = Window::default();
        LossRecord {
            l_y,
            l_simple: block(simple),
            l_vlb: block(vlb),
            l_mu: block(mu),
            l_sigma: block(sigma),
            total,
        }
    }
}

/// Model under training: the bare backbone or backbone plus block.
enum Trainee {
    Plain(Backbone),
    Composite(CompositeModel),
}

impl Trainee {
    fn backbone(&self) -> &Backbone {
        match self {
            Trainee::Plain(b) => b,
            Trainee::Composite(m) => &m.backbone,
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Trainee::Plain(b) => b.num_params(),
            Trainee::Composite(m) => m.num_params(),
        }
    }
}

fn activation_for(classes: usize) -> Activation {
    if classes == 1 {
        Activation::Sigmoid
    } else {
        Activation::Softmax
    }
}

/// Backbone logits for `indices`, evaluated in chunks without a graph.
pub fn predict(backbone: &Backbone, data: &Dataset, indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut shape = Vec::new();
    let mut label_shape = Vec::new();
    for chunk in indices.chunks(64) {
        let (x, y) = data.batch(chunk)?;
        let out = no_grad(|| backbone.forward(&x))?;
        shape = out.shape().to_vec();
        label_shape = y.shape().to_vec();
        logits.extend_from_slice(out.data());
        labels.extend_from_slice(y.data());
    }
    shape[0] = indices.len();
    label_shape[0] = indices.len();
    Ok((Tensor::new(logits, &shape)?, Tensor::new(labels, &label_shape)?))
}

fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a `metrics.csv` back into records.
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        bail!("{} has header {header:?}", path.display());
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let opt = |i: usize| -> Result<Option<f64>> {
            let s = &row[i];
            Ok(if s.is_empty() { None } else { Some(s.parse().with_context(|| format!("bad cell {s:?}"))?) })
        };
        let req = |i: usize| -> Result<f64> { opt(i)?.with_context(|| format!("missing {}", CSV_HEADER[i])) };
        out.push(MetricsRecord {
            iteration: row[0].parse()?,
            loss: LossRecord {
                l_y: req(1)?,
                l_simple: opt(2)?,
                l_vlb: opt(3)?,
                l_mu: opt(4)?,
                l_sigma: opt(5)?,
                total: req(6)?,
            },
            eval: EvalMetrics { dice: opt(7)?, miou: opt(8)?, accuracy: opt(9)?, auc: opt(10)? },
            wall_time: opt(11)?,
        });
    }
    Ok(out)
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

pub fn summary_path(dir: &Path) -> PathBuf {
    dir.join("summary.json")
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.bin")
}

/// Runs one experiment and writes `metrics.csv`, `summary.json` and
/// `checkpoint.bin` into its output directory. `on_record` sees every
/// record as it is logged.
pub fn train(config: &ExperimentConfig, on_record: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainReport> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let data = config.dataset.build(config.seed)?;
    let (train_idx, test_idx) = data.split(config.test_fraction, config.cross_validation, config.seed);
    if train_idx.is_empty() || test_idx.is_empty() {
        bail!("split left an empty train or test set");
    }

    let backbone = Backbone::new(&config.model, config.seed)?;
    let classes = backbone.classes();
    if data.label_shape[0] != classes {
        bail!("dataset has {} label channels but the model predicts {classes}", data.label_shape[0]);
    }
    let act = activation_for(classes);
    let task_loss = config.task_loss();
    let mut trainee = match &config.bgdb {
        None => Trainee::Plain(backbone),
        Some(b) => {
            if b.activation != act {
                bail!("bgdb activation {:?} does not match {classes}-class output ({act:?})", b.activation);
            }
            Trainee::Composite(CompositeModel::new(backbone, b.clone(), config.seed ^ DENOISER_SEED_SALT)?)
        }
    };
    let with_block = matches!(trainee, Trainee::Composite(_));
    let mut optimizer = Optimizer::new(config.optimizer)?.with_max_grad_norm(config.grad_clip)?;
    let mut shuffle_rng = rng::stream(config.seed, SHUFFLE_STREAM);
    let mut block_rng: StreamRng = rng::stream(config.seed, BLOCK_STREAM);

    let start = Instant::now();
    let mut order = train_idx.clone();
    let mut cursor = order.len();
    let mut window = Window::default();
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut last_good = trainee.backbone().clone();

    for it in 1..=config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let take = (config.batch_size - batch.len()).min(order.len() - cursor);
            batch.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (x, y) = data.batch(&batch)?;

        let step: Result<LossBreakdown> = (|| match &mut trainee {
            Trainee::Plain(b) => {
                let loss = task_loss.apply(&b.forward(&x)?, &y, act)?;
                let v = loss.item();
                if !v.is_finite() {
                    return Err(bgdb_core::Error::NonFinite("l_y".into()).into());
                }
                loss.backward()?;
                optimizer.step(&mut [b.params_mut()])?;
                Ok(LossBreakdown { l_y: v, l_simple: 0.0, l_vlb: 0.0, l_mu: 0.0, l_sigma: 0.0, total: v })
            }
            Trainee::Composite(m) => {
                let loss = m.loss(&x, &y, task_loss, &mut block_rng)?;
                loss.total.backward()?;
                let CompositeModel { backbone, denoiser, .. } = m;
                optimizer.step(&mut [backbone.params_mut(), denoiser.params_mut()])?;
                Ok(loss.breakdown)
            }
        })();
        let breakdown = match step {
            Ok(b) => b,
            Err(e) if matches!(e.downcast_ref(), Some(bgdb_core::Error::NonFinite(_))) => {
                last_good.save(&checkpoint_path(dir))?;
                write_csv(&metrics_path(dir), &records)?;
                return Err(e.context(format!(
                    "training diverged at iteration {it}; last good checkpoint saved to {}",
                    checkpoint_path(dir).display()
                )));
            }
            Err(e) => return Err(e),
        };
        last_good = trainee.backbone().clone();
        window.push(&breakdown);

        if it == 1 || it % config.log_every == 0 || it == config.iterations {
            let (logits, labels) = predict(trainee.backbone(), &data, &test_idx)?;
            let record = MetricsRecord {
                iteration: it,
                loss: window.take(with_block),
                eval: evaluate(&logits, &labels, config.task)?,
                wall_time: config.record_wall_time.then(|| start.elapsed().as_secs_f64()),
            };
            on_record(&record);
            records.push(record);
        }
    }
    write_csv(&metrics_path(dir), &records)?;

    let composite_params = trainee.num_params();
    let (composite_logits, _) = predict(trainee.backbone(), &data, &test_idx)?;
    let stripped = match trainee {
        Trainee::Plain(b) => b,
        Trainee::Composite(m) => m.strip_for_inference(),
    };
    stripped.save(&checkpoint_path(dir))?;
    let reloaded = Backbone::load(&checkpoint_path(dir))?;
    let (reloaded_logits, _) = predict(&reloaded, &data, &test_idx)?;
    let parity = ParityCheck {
        bit_identical: composite_logits.data().iter().zip(reloaded_logits.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        composite_params,
        stripped_params: reloaded.num_params(),
    };

    let initial = records[0];
    let last = *records.last().expect("at least one record");
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        iterations: config.iterations,
        initial,
        last,
        loss_ratio: last.loss.total / initial.loss.total,
        parity,
        config: config.clone(),
    };
    fs::write(summary_path(dir), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(TrainReport { records, summary })
}
