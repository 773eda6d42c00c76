//! Deterministic training: configuration, SGD with momentum and a step
//! schedule, evaluation, metrics CSV and checkpoints.

pub mod checkpoint;
pub mod data;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::arch::{build_network, to_after_activation, Activation, ArchGraph, BuildOptions, Family, Network, Style};
use crate::erase::{apply_erase, ErasePlan, Location};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::{shuffle, CounterRng};
use crate::tensor::{Tape, Tensor};

pub use checkpoint::{Checkpoint, StoredTensor};
pub use data::{load_dataset, load_splits, Dataset, DatasetName, Split};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ernv";
const EVAL_BATCH: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EraseConfig {
    pub proportion: f64,
    #[serde(default = "default_location")]
    pub location: Location,
}

fn default_location() -> Location {
    Location::Last
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Epochs from which the learning rate is multiplied by `gamma` once more.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub path: PathBuf,
    #[serde(default = "default_fraction")]
    pub subset_fraction: f64,
}

fn default_fraction() -> f64 {
    1.0
}

/// A complete experiment description, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Fill `wall_seconds`; off by default so that metrics are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Also write `checkpoint-epoch<E>.ernv` every this many epochs (0: never).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erase: Option<EraseConfig>,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
}

impl TrainConfig {
    /// The MNIST MLP recipe: 5 epochs, lr 0.1, momentum 0.9, weight decay
    /// 1e-4, batch 128, one ×0.1 step at epoch 4.
    pub fn mnist_mlp(seed: u64, data: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            family: "mlp12".into(),
            depth: None,
            activation: Activation::Relu,
            epochs: 5,
            batch_size: 128,
            seed,
            output_dir: output_dir.into(),
            record_wall_time: false,
            checkpoint_every: 0,
            resume_from: None,
            erase: None,
            optimizer: OptimizerConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            schedule: ScheduleConfig {
                milestones: vec![4],
                gamma: 0.1,
            },
            dataset: DatasetConfig {
                name: DatasetName::Mnist,
                path: data.into(),
                subset_fraction: 1.0,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("optimizer.momentum must be in [0, 1), got {}", o.momentum));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad(format!("optimizer.weight_decay must be >= 0, got {}", o.weight_decay));
        }
        let s = &self.schedule;
        if s.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("schedule.milestones must be strictly increasing, got {:?}", s.milestones));
        }
        if let Some(&m) = s.milestones.iter().find(|&&m| m >= self.epochs) {
            return bad(format!("schedule milestone {m} is not below epochs = {}", self.epochs));
        }
        if !(s.gamma > 0.0 && s.gamma.is_finite()) {
            return bad(format!("schedule.gamma must be positive, got {}", s.gamma));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let f = self.dataset.subset_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("dataset.subset_fraction must be in (0, 1], got {f}"));
        }
        if let Some(e) = &self.erase {
            if !(0.0..=1.0).contains(&e.proportion) {
                return bad(format!("erase.proportion must be in [0, 1], got {}", e.proportion));
            }
        }
        Family::parse(&self.family, self.depth)?;
        Ok(())
    }

    /// `lr₀ · gamma^(number of milestones ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.schedule.milestones.iter().filter(|&&m| m <= epoch).count();
        self.optimizer.lr * self.schedule.gamma.powi(k as i32)
    }

    /// The network to train: built, converted to after-activation style if
    /// it must be erased, then erased.
    pub fn build_graph(&self) -> Result<(ArchGraph, Option<ErasePlan>)> {
        let family = Family::parse(&self.family, self.depth)?;
        let g = build_network(
            family,
            BuildOptions {
                num_classes: 10,
                activation: self.activation,
            },
        )?;
        match &self.erase {
            None => Ok((g, None)),
            Some(e) => {
                let g = if g.style == Style::PreActivation { to_after_activation(&g)?.0 } else { g };
                let (g, plan) = apply_erase(&g, e.proportion, e.location)?;
                Ok((g, Some(plan)))
            }
        }
    }
}

/// One line of training telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Percent correct.
    pub top1: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// `v ← momentum·v + grad + weight_decay·θ; θ ← θ − lr·v`.
pub fn sgd_update(theta: &mut [f32], velocity: &mut [f32], grad: &[f32], lr: f32, momentum: f32, weight_decay: f32) {
    for ((t, v), &g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *t;
        *t -= lr * *v;
    }
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == label
        })
        .count()
}

fn batch_tensor(ds: &Dataset, x: Vec<f32>, n: usize) -> Result<Tensor<f32>> {
    let mut shape = vec![n];
    shape.extend(&ds.sample_shape);
    Tensor::from_vec(&shape, x)
}

/// Mean cross-entropy and top-1 accuracy of `net` in eval mode. Running
/// statistics and parameters are left untouched.
pub fn evaluate(net: &mut Network<f32>, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut unused = CounterRng::new(0);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(EVAL_BATCH) {
        let (x, labels) = ds.gather(chunk);
        let mut tape = Tape::new();
        let xv = tape.leaf(batch_tensor(ds, x, chunk.len())?);
        let pass = net.forward(&mut tape, xv, Mode::Eval, &mut unused, false)?;
        let loss = tape.softmax_cross_entropy(pass.output, &labels)?;
        loss_sum += f64::from(tape.value(loss).item()) * chunk.len() as f64;
        correct += count_correct(tape.value(pass.output), &labels);
    }
    Ok((loss_sum / ds.len() as f64, 100.0 * correct as f64 / ds.len() as f64))
}

/// Network, optimizer state and random streams of a run in progress.
pub struct Trainer {
    config: TrainConfig,
    net: Network<f32>,
    velocity: Vec<Vec<f32>>,
    decay: Vec<bool>,
    shuffle: CounterRng,
    dropout: CounterRng,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (graph, plan) = config.build_graph()?;
        if let Some(p) = &plan {
            info!(
                "erased {} ReLUs from modules {:?} (plan {})",
                p.erasures.len(),
                p.selected_modules,
                p.digest
            );
        }
        let net = Network::new(graph, &CounterRng::substream(config.seed, "weights"))?;
        let params = net.params();
        let velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let decay = params.iter().map(|p| p.decay).collect();
        Ok(Self {
            shuffle: CounterRng::substream(config.seed, "shuffle"),
            dropout: CounterRng::substream(config.seed, "dropout"),
            config,
            net,
            velocity,
            decay,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, StoredTensor)> = self
            .net
            .named_state()
            .into_iter()
            .map(|(n, t)| (format!("net.{n}"), StoredTensor::F32(t)))
            .collect();
        for (p, v) in self.net.params().iter().zip(&self.velocity) {
            let t = Tensor::from_vec(p.tensor.shape(), v.clone()).expect("velocity matches its parameter");
            tensors.push((format!("momentum.{}", p.name), StoredTensor::F32(t)));
        }
        let (sk, sc) = self.shuffle.state();
        let (dk, dc) = self.dropout.state();
        Checkpoint {
            tensors,
            epoch: self.epoch as u64,
            rng_state: [sk, sc, dk, dc],
        }
    }

    /// Restore parameters, running statistics, momentum buffers, epoch and
    /// random streams. Any missing, extra or mis-shaped tensor is reported.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let known = |n: &str| n.starts_with("net.") || n.starts_with("momentum.");
        let stray: Vec<String> = ckpt.tensors.iter().map(|(n, _)| n.clone()).filter(|n| !known(n)).collect();
        if !stray.is_empty() {
            return Err(Error::Checkpoint {
                detail: "unexpected tensors".into(),
                tensors: stray,
            });
        }
        self.net.load_named_state(&ckpt.typed::<f32>("net.")?)?;
        let momentum = ckpt.typed::<f32>("momentum.")?;
        let mut bad = Vec::new();
        let names: Vec<(String, Vec<usize>)> =
            self.net.params().iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect();
        for (name, shape) in &names {
            if !momentum.iter().any(|(n, t)| n == name && t.shape() == shape.as_slice()) {
                bad.push(format!("momentum.{name}"));
            }
        }
        bad.extend(
            momentum
                .iter()
                .filter(|(n, _)| !names.iter().any(|(m, _)| m == n))
                .map(|(n, _)| format!("momentum.{n}")),
        );
        if !bad.is_empty() {
            return Err(Error::Checkpoint {
                detail: "momentum buffers do not match the network".into(),
                tensors: bad,
            });
        }
        for ((name, _), v) in names.iter().zip(&mut self.velocity) {
            let t = &momentum.iter().find(|(n, _)| n == name).expect("checked above").1;
            v.copy_from_slice(t.data());
        }
        let epoch = usize::try_from(ckpt.epoch).unwrap_or(usize::MAX);
        if epoch > self.config.epochs {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {epoch}, beyond the configured {} epochs",
                self.config.epochs
            )));
        }
        let [sk, sc, dk, dc] = ckpt.rng_state;
        self.shuffle = CounterRng::from_state(sk, sc);
        self.dropout = CounterRng::from_state(dk, dc);
        self.epoch = epoch;
        Ok(())
    }

    /// One SGD step on a batch; returns the batch loss and the number of
    /// correct predictions.
    fn step(&mut self, ds: &Dataset, indices: &[usize], lr: f32, step: usize) -> Result<(f64, usize)> {
        let (x, labels) = ds.gather(indices);
        let mut tape = Tape::new();
        let xv = tape.leaf(batch_tensor(ds, x, indices.len())?);
        let pass = self.net.forward(&mut tape, xv, Mode::Train, &mut self.dropout, true)?;
        let loss_var = tape.softmax_cross_entropy(pass.output, &labels)?;
        let loss = f64::from(tape.value(loss_var).item());
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                step,
                loss,
            });
        }
        let correct = count_correct(tape.value(pass.output), &labels);
        tape.backward(loss_var)?;
        let grads: Vec<Option<Vec<f32>>> = pass.params.iter().map(|&p| tape.take_grad(p)).collect();
        // Release the tape's references so parameter buffers update in place.
        drop(tape);
        let momentum = self.config.optimizer.momentum as f32;
        let wd = self.config.optimizer.weight_decay as f32;
        for (((theta, v), g), &decay) in self.net.params_mut().into_iter().zip(&mut self.velocity).zip(grads).zip(&self.decay) {
            let g = g.unwrap_or_else(|| vec![0.0; v.len()]);
            sgd_update(theta.data_mut(), v, &g, lr, momentum, if decay { wd } else { 0.0 });
        }
        Ok((loss, correct))
    }

    /// Train one epoch over a fresh shuffle of `ds`; returns the
    /// sample-weighted mean loss and the train-mode accuracy.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<(f64, f64)> {
        if ds.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let lr = self.config.lr_at(self.epoch + 1) as f32;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        shuffle(&mut order, &mut self.shuffle);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, batch) in order.chunks(self.config.batch_size).enumerate() {
            let (loss, c) = self.step(ds, batch, lr, step + 1)?;
            loss_sum += loss * batch.len() as f64;
            correct += c;
        }
        self.epoch += 1;
        Ok((loss_sum / ds.len() as f64, 100.0 * correct as f64 / ds.len() as f64))
    }
}

/// Metrics rows streamed to a staging file and renamed into place when the
/// run finishes.
struct MetricsSink {
    final_path: PathBuf,
    staging: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl MetricsSink {
    fn create(final_path: PathBuf) -> Result<Self> {
        let staging = crate::io::staging_path(&final_path, "partial");
        let file = fs::File::create(&staging).map_err(|e| Error::io(&staging, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer
            .write_record(["epoch", "split", "loss", "top1", "lr", "wall_seconds"])
            .map_err(|e| csv_err(&staging, e))?;
        Ok(Self {
            final_path,
            staging,
            writer,
        })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_err(&self.staging, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.staging, e))
    }

    fn finish(self) -> Result<()> {
        let file = self.writer.into_inner().map_err(|e| Error::io(&self.staging, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.staging, e))?;
        fs::rename(&self.staging, &self.final_path).map_err(|e| Error::io(&self.final_path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Read a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Files produced by a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl TrainOutcome {
    pub fn final_test_top1(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.split == Split::Test).map(|r| r.top1)
    }
}

/// Load the configured dataset and train.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let d = &config.dataset;
    let (train_set, test_set) = load_splits(d.name, &d.path, d.subset_fraction)?;
    train_on(config, &train_set, &test_set)
}

/// Train on already loaded splits. Emits epoch-0 evaluations of both
/// splits, then one train row (running averages) and one test row per
/// epoch; writes `metrics.csv` and `checkpoint.ernv` into `output_dir`.
pub fn train_on(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let input = &trainer.net.graph().input_shape;
    if input != &train_set.sample_shape || input != &test_set.sample_shape {
        return Err(Error::Config(format!(
            "{} expects inputs of shape {input:?}, dataset provides {:?}",
            config.family, train_set.sample_shape
        )));
    }
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);

    let mut rows = Vec::new();
    if let Some(from) = &config.resume_from {
        trainer.restore(&Checkpoint::load(from)?)?;
        if metrics_path.exists() {
            rows = read_metrics(&metrics_path)?
                .into_iter()
                .filter(|r| r.epoch <= trainer.epoch())
                .collect();
        }
        info!("resumed from {} at epoch {}", from.display(), trainer.epoch());
    }
    let mut sink = MetricsSink::create(metrics_path.clone())?;
    for r in &rows {
        sink.push(r)?;
    }

    let start = Instant::now();
    let wall = || if config.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let mut emit = |row: MetricsRow, rows: &mut Vec<MetricsRow>| -> Result<()> {
        info!(
            "epoch {} {}: loss {:.4} top1 {:.2}% lr {}",
            row.epoch, row.split, row.loss, row.top1, row.lr
        );
        sink.push(&row)?;
        rows.push(row);
        Ok(())
    };

    if trainer.epoch() == 0 {
        let lr = config.lr_at(0);
        for (split, ds) in [(Split::Train, train_set), (Split::Test, test_set)] {
            let (loss, top1) = evaluate(&mut trainer.net, ds)?;
            emit(
                MetricsRow {
                    epoch: 0,
                    split,
                    loss,
                    top1,
                    lr,
                    wall_seconds: wall(),
                },
                &mut rows,
            )?;
        }
    }
    while trainer.epoch() < config.epochs {
        let epoch = trainer.epoch() + 1;
        let lr = config.lr_at(epoch);
        let (loss, top1) = trainer.train_epoch(train_set)?;
        emit(
            MetricsRow {
                epoch,
                split: Split::Train,
                loss,
                top1,
                lr,
                wall_seconds: wall(),
            },
            &mut rows,
        )?;
        let (loss, top1) = evaluate(&mut trainer.net, test_set)?;
        emit(
            MetricsRow {
                epoch,
                split: Split::Test,
                loss,
                top1,
                lr,
                wall_seconds: wall(),
            },
            &mut rows,
        )?;
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch < config.epochs {
            trainer.checkpoint().save(&out.join(format!("checkpoint-epoch{epoch}.ernv")))?;
        }
    }
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint_path)?;
    sink.finish()?;
    Ok(TrainOutcome {
        rows,
        metrics_path,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(dir: &Path) -> TrainConfig {
        let mut c = TrainConfig::mnist_mlp(3, "unused", dir);
        c.family = "res31".into();
        c.epochs = 2;
        c.batch_size = 4;
        c.schedule.milestones = vec![1];
        c
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::mnist_mlp(1, "data/mnist", "runs/a");
        let text = c.to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        let typo = text.replace("batch_size", "batchsize");
        assert!(matches!(TrainConfig::from_toml(&typo), Err(Error::Config(_))));
        let bad_dataset = text.replace("\"mnist\"", "\"svhn\"");
        assert!(matches!(TrainConfig::from_toml(&bad_dataset), Err(Error::Config(_))));
    }

    #[test]
    fn config_invariants() {
        let base = TrainConfig::mnist_mlp(1, "d", "o");
        let mut c = base.clone();
        c.optimizer.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.schedule.milestones = vec![2, 2];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.schedule.milestones = vec![5];
        assert!(c.validate().is_err());
        let mut c = base;
        c.dataset.subset_fraction = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lr_schedule_counts_milestones_up_to_epoch() {
        let mut c = TrainConfig::mnist_mlp(1, "d", "o");
        c.epochs = 10;
        c.schedule.milestones = vec![2, 5];
        let lrs: Vec<f64> = (0..7).map(|e| c.lr_at(e)).collect();
        assert_eq!(lrs[0], 0.1);
        assert_eq!(lrs[1], 0.1);
        assert_eq!(lrs[2], 0.1 * 0.1);
        assert_eq!(lrs[4], 0.1 * 0.1);
        assert_eq!(lrs[5], 0.1 * 0.1f64.powi(2));
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut theta = [1.0f32, -2.0];
        let mut v = [0.5f32, 0.0];
        sgd_update(&mut theta, &mut v, &[0.1, 0.2], 0.1, 0.9, 0.01);
        // v = 0.9·0.5 + 0.1 + 0.01·1 = 0.56; θ = 1 − 0.056
        assert!((v[0] - 0.56).abs() < 1e-7);
        assert!((theta[0] - 0.944).abs() < 1e-7);
        assert!((v[1] - 0.18).abs() < 1e-7);
    }

    #[test]
    fn correct_count_uses_first_maximum() {
        let logits = Tensor::from_vec(&[3, 3], vec![0.0, 1.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(count_correct(&logits, &[1, 0, 1]), 2);
    }

    fn synthetic(n: usize, shape: &[usize], seed: u64) -> Dataset {
        let mut rng = CounterRng::new(seed);
        let s: usize = shape.iter().product();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let images = labels
            .iter()
            .flat_map(|&l| {
                let noise: Vec<f32> = (0..s).map(|_| rng.next_f64() as f32 * 0.5).collect();
                noise.into_iter().enumerate().map(move |(j, v)| v + if j % 10 == l { 1.0 } else { 0.0 })
            })
            .collect();
        Dataset {
            sample_shape: shape.to_vec(),
            images,
            labels,
            num_classes: 10,
        }
    }

    #[test]
    fn shape_mismatch_between_family_and_data() {
        let dir = tempfile::tempdir().unwrap();
        let c = toy_config(dir.path());
        let ds = synthetic(8, &[1, 28, 28], 0);
        assert!(matches!(train_on(&c, &ds, &ds), Err(Error::Config(_))));
    }

    #[test]
    fn small_residual_run_is_deterministic_and_resumable() {
        let ds = synthetic(12, &[3, 32, 32], 1);
        let test = synthetic(6, &[3, 32, 32], 2);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut ca = toy_config(a.path());
        ca.family = "resnet_basic".into();
        ca.depth = Some(8);
        ca.checkpoint_every = 1;
        let ra = train_on(&ca, &ds, &test).unwrap();
        assert_eq!(ra.rows.len(), 6);
        assert_eq!(ra.rows[5].lr, 0.1 * 0.1);

        let mut cb = ca.clone();
        cb.output_dir = b.path().to_path_buf();
        cb.resume_from = Some(a.path().join("checkpoint-epoch1.ernv"));
        let rb = train_on(&cb, &ds, &test).unwrap();
        assert_eq!(rb.rows, ra.rows[4..]);
        let full = fs::read_to_string(&ra.metrics_path).unwrap();
        let tail = fs::read_to_string(&rb.metrics_path).unwrap();
        let tail_rows = &tail[tail.find('\n').unwrap() + 1..];
        assert!(full.ends_with(tail_rows));
        assert_eq!(fs::read(&ra.checkpoint_path).unwrap(), fs::read(&rb.checkpoint_path).unwrap());
    }

    #[test]
    fn restore_rejects_another_family() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = toy_config(dir.path());
        c.family = "resnet_basic".into();
        c.depth = Some(8);
        let t = Trainer::new(c.clone()).unwrap();
        c.depth = Some(14);
        let mut other = Trainer::new(c).unwrap();
        match other.restore(&t.checkpoint()) {
            Err(Error::Checkpoint { tensors, .. }) => assert!(!tensors.is_empty()),
            Err(e) => panic!("{e}"),
            Ok(()) => panic!("restored a mismatched checkpoint"),
        }
    }
}
