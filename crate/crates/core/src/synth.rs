//! Synthetic checkpoint-reliability pipeline.
//!
//! Ordinal Gaussian clusters stand in for graded images. A linear encoder is
//! pretrained with an SSL objective on two augmented views per sample, and
//! its weights are checkpointed periodically. Each checkpoint then gets a
//! softmax head fitted on frozen embeddings under one fixed protocol, and its
//! logits go through calibration and selective evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::LogitsSet;
use crate::error::{Error, Result};
use crate::ingest::{self, fmt_f64, fmt_opt, CalibrationRecord, Manifest, ManifestEntry};
use crate::losses::{extended, loss_gradient, LossId, LossSpec, SicovaWeights, TripletParams};
use crate::numeric::{argmax, column_mean_std, matmul_t, Matrix, Rng};
use crate::parallel;
use crate::protocol::{evaluate_checkpoint, rank_evaluations, CheckpointEvaluation, EvaluationProtocol};
use crate::report::{risk_coverage_svg, summary_table, PlotSpec, Series};
use crate::selective::{Ranking, DEFAULT_GRID_STEP, DEFAULT_TARGET_COVERAGE};

// stream ids under the data seed
const STREAM_CENTERS: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_SPLIT: u64 = 3;
// stream ids under the run seed
const STREAM_INIT: u64 = 10;
const STREAM_PRETRAIN: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Distance between consecutive class centers along the severity line.
    pub class_center_spacing: f64,
    pub cluster_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            samples_per_class: 200,
            input_dim: 32,
            class_center_spacing: 1.0,
            cluster_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Validation(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.samples_per_class < 5 {
            return Err(Error::InsufficientSamples {
                op: "generate_dataset",
                needed: 5,
                got: self.samples_per_class,
            });
        }
        if self.input_dim == 0 {
            return Err(Error::Validation("input_dim must be positive".into()));
        }
        for (name, v) in [
            ("class_center_spacing", self.class_center_spacing),
            ("cluster_std", self.cluster_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Row indices of the three fixed splits, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub evaluation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub splits: Splits,
}

impl Dataset {
    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Class centers `(k − (K−1)/2)·spacing·u` on a seeded unit direction `u`.
pub fn class_centers(spec: &SynthSpec) -> Matrix {
    let mut rng = Rng::stream(spec.seed, STREAM_CENTERS);
    let mut u: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);
    let mid = (spec.n_classes - 1) as f64 / 2.0;
    let mut centers = Matrix::zeros(spec.n_classes, spec.input_dim);
    for k in 0..spec.n_classes {
        let t = (k as f64 - mid) * spec.class_center_spacing;
        for (c, uj) in centers.row_mut(k).iter_mut().zip(&u) {
            *c = t * uj;
        }
    }
    centers
}

/// Samples every class around its center and splits each class 60/20/20.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let centers = class_centers(spec);
    let (k, per, d) = (spec.n_classes, spec.samples_per_class, spec.input_dim);
    let mut rng = Rng::stream(spec.seed, STREAM_SAMPLES);
    let mut features = Matrix::zeros(k * per, d);
    let mut labels = Vec::with_capacity(k * per);
    for class in 0..k {
        for s in 0..per {
            let row = features.row_mut(class * per + s);
            for (x, c) in row.iter_mut().zip(centers.row(class)) {
                *x = c + spec.cluster_std * rng.normal();
            }
            labels.push(class);
        }
    }

    let mut rng = Rng::stream(spec.seed, STREAM_SPLIT);
    let (n_train, n_cal) = (per * 3 / 5, per / 5);
    let mut splits = Splits {
        train: Vec::new(),
        calibration: Vec::new(),
        evaluation: Vec::new(),
    };
    for class in 0..k {
        let mut idx: Vec<usize> = (class * per..(class + 1) * per).collect();
        rng.shuffle(&mut idx);
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.calibration.extend_from_slice(&idx[n_train..n_train + n_cal]);
        splits.evaluation.extend_from_slice(&idx[n_train + n_cal..]);
    }
    splits.train.sort_unstable();
    splits.calibration.sort_unstable();
    splits.evaluation.sort_unstable();
    Ok(Dataset {
        features,
        labels,
        n_classes: k,
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub noise_std: f64,
    pub mask_prob: f64,
    /// Number of contiguous coordinate blocks to permute; 1 disables shuffling.
    pub shuffle_blocks: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.3,
            mask_prob: 0.1,
            shuffle_blocks: 1,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Validation(format!(
                "noise_std must be ≥ 0, got {}",
                self.noise_std
            )));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Validation(format!(
                "mask_prob must lie in [0, 1), got {}",
                self.mask_prob
            )));
        }
        if self.shuffle_blocks == 0 {
            return Err(Error::Validation("shuffle_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

/// One stochastic view: block shuffle, then coordinate masking, then noise.
pub fn augment(x: &[f64], aug: &AugmentSpec, rng: &mut Rng) -> Vec<f64> {
    let d = x.len();
    let blocks = aug.shuffle_blocks.min(d).max(1);
    let mut v = if blocks > 1 {
        let bounds: Vec<usize> = (0..=blocks).map(|b| b * d / blocks).collect();
        let mut order: Vec<usize> = (0..blocks).collect();
        rng.shuffle(&mut order);
        order
            .iter()
            .flat_map(|&b| x[bounds[b]..bounds[b + 1]].iter().copied())
            .collect()
    } else {
        x.to_vec()
    };
    if aug.mask_prob > 0.0 {
        for c in &mut v {
            if rng.bernoulli(aug.mask_prob) {
                *c = 0.0;
            }
        }
    }
    if aug.noise_std > 0.0 {
        for c in &mut v {
            *c += aug.noise_std * rng.normal();
        }
    }
    v
}

pub fn make_views(x: &[f64], aug: &AugmentSpec, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let v1 = augment(x, aug, rng);
    let v2 = augment(x, aug, rng);
    (v1, v2)
}

/// Two views of every row of `x`.
pub fn make_view_batch(x: &Matrix, aug: &AugmentSpec, rng: &mut Rng) -> (Matrix, Matrix) {
    let mut v1 = Matrix::zeros(x.rows(), x.cols());
    let mut v2 = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (a, b) = make_views(x.row(i), aug, rng);
        v1.row_mut(i).copy_from_slice(&a);
        v2.row_mut(i).copy_from_slice(&b);
    }
    (v1, v2)
}

/// Loss of `Z = V1·W`, `Z' = V2·W` and its gradient `dW = V1ᵀ·dZ + V2ᵀ·dZ'`.
pub fn encoder_gradient(spec: &LossSpec, v1: &Matrix, v2: &Matrix, w: &Matrix) -> Result<(f64, Matrix)> {
    let z = matmul_t(v1, w, false)?;
    let zp = matmul_t(v2, w, false)?;
    let value = spec.value(&z, &zp)?;
    let g = loss_gradient(spec, &z, &zp)?;
    let dw = matmul_t(v1, &g.d_z, true)?.add_scaled(&matmul_t(v2, &g.d_zp, true)?, 1.0)?;
    Ok((value, dw))
}

/// Maximum relative error of [`encoder_gradient`] against central differences
/// over the entries of `W`, with the loss evaluated in double-double precision.
pub fn encoder_finite_diff_check(spec: &LossSpec, v1: &Matrix, v2: &Matrix, w: &Matrix, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (_, dw) = encoder_gradient(spec, v1, v2, w)?;
    let mut worst: f64 = 0.0;
    for (idx, &exact) in dw.as_slice().iter().enumerate() {
        let plus = extended::encoder_value(spec, v1, v2, w, idx, h);
        let minus = extended::encoder_value(spec, v1, v2, w, idx, -h);
        let numeric = f64::from((plus - minus) / (2.0 * h));
        let denom = exact.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((exact - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub head_epochs: usize,
    pub head_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 200,
            checkpoint_every: 20,
            lr: 0.002,
            batch_size: 64,
            embed_dim: 8,
            head_epochs: 300,
            head_lr: 0.5,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 || self.epochs < self.checkpoint_every {
            return Err(Error::Validation(format!(
                "need epochs ≥ checkpoint_every ≥ 1, got epochs={} checkpoint_every={}",
                self.epochs, self.checkpoint_every
            )));
        }
        for (name, v) in [("lr", self.lr), ("head_lr", self.head_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be at least 2".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Validation("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Epochs at which checkpoints are saved.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (1..=self.epochs / self.checkpoint_every)
            .map(|i| i * self.checkpoint_every)
            .collect();
        if out.last() != Some(&self.epochs) {
            out.push(self.epochs);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub pretrain_epoch: usize,
    /// `input_dim × embed_dim`.
    pub weights: Matrix,
    /// Mean mini-batch loss over the checkpoint's epoch.
    pub pretrain_loss: f64,
}

impl Checkpoint {
    pub fn id(&self) -> String {
        format!("ep-{}", self.pretrain_epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRun {
    pub checkpoints: Vec<Checkpoint>,
    /// Mean mini-batch loss of every epoch, starting with epoch 1.
    pub history: Vec<f64>,
}

fn diverged(stage: &'static str, epoch: usize) -> Error {
    Error::Divergence { stage, epoch }
}

/// Mini-batch gradient descent on the encoder weights.
pub fn pretrain(
    features: &Matrix,
    loss: &LossSpec,
    aug: &AugmentSpec,
    schedule: &Schedule,
    seed: u64,
) -> Result<PretrainRun> {
    loss.validate()?;
    aug.validate()?;
    schedule.validate()?;
    let n = features.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            op: "pretrain",
            needed: 2,
            got: n,
        });
    }
    let d = features.cols();
    let mut init = Rng::stream(seed, STREAM_INIT);
    let mut w = Matrix::random_normal(d, schedule.embed_dim, 1.0 / (d as f64).sqrt(), &mut init);
    let mut rng = Rng::stream(seed, STREAM_PRETRAIN);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut checkpoints = Vec::new();
    let save_at = schedule.checkpoint_epochs();

    for epoch in 1..=schedule.epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(schedule.batch_size).filter(|b| b.len() >= 2) {
            let x = features.select_rows(batch);
            let (v1, v2) = make_view_batch(&x, aug, &mut rng);
            let (value, dw) = match encoder_gradient(loss, &v1, &v2, &w) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(diverged("pretrain", epoch)),
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                return Err(diverged("pretrain", epoch));
            }
            w = w.add_scaled(&dw, -schedule.lr)?;
            if !w.is_finite() {
                return Err(diverged("pretrain", epoch));
            }
            sum += value;
            count += 1;
        }
        let mean = sum / count as f64;
        history.push(mean);
        if save_at.contains(&epoch) {
            checkpoints.push(Checkpoint {
                pretrain_epoch: epoch,
                weights: w.clone(),
                pretrain_loss: mean,
            });
        }
    }
    Ok(PretrainRun { checkpoints, history })
}

/// Softmax regression head on standardized frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `embed_dim × K`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    fn standardize(&self, emb: &Matrix) -> Matrix {
        let mut out = emb.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn logits(&self, emb: &Matrix) -> Result<Matrix> {
        let mut out = matmul_t(&self.standardize(emb), &self.weights, false)?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

pub fn embed(features: &Matrix, weights: &Matrix) -> Result<Matrix> {
    matmul_t(features, weights, false)
}

/// Full-batch gradient descent on mean cross-entropy from a zero start.
///
/// Standardization statistics come from `train_emb`; columns with zero
/// spread keep unit scale.
pub fn fit_head(train_emb: &Matrix, labels: &[usize], n_classes: usize, epochs: usize, lr: f64) -> Result<Head> {
    let (mean, std) = column_mean_std(train_emb)?;
    let scale = std.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    let mut head = Head {
        mean,
        scale,
        weights: Matrix::zeros(train_emb.cols(), n_classes),
        bias: vec![0.0; n_classes],
    };
    let x = head.standardize(train_emb);
    let n = x.rows() as f64;
    for epoch in 1..=epochs {
        let mut g = head.logits(train_emb)?;
        for (i, &y) in labels.iter().enumerate() {
            let row = g.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total * n;
            }
            row[y] -= 1.0 / n;
        }
        let dw = matmul_t(&x, &g, true)?;
        head.weights = head.weights.add_scaled(&dw, -lr)?;
        for (k, b) in head.bias.iter_mut().enumerate() {
            *b -= lr * (0..g.rows()).map(|i| g[(i, k)]).sum::<f64>();
        }
        if !head.weights.is_finite() || head.bias.iter().any(|b| !b.is_finite()) {
            return Err(diverged("finetune", epoch));
        }
    }
    Ok(head)
}

/// Logits of every split for one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub checkpoint_id: String,
    pub pretrain_epoch: usize,
    pub train: LogitsSet,
    pub calibration: LogitsSet,
    pub evaluation: LogitsSet,
}

/// Fits a head on the frozen checkpoint and emits logits for all three splits.
pub fn finetune_head(ckpt: &Checkpoint, data: &Dataset, head_epochs: usize, lr: f64) -> Result<CheckpointRecord> {
    let emb = embed(&data.features, &ckpt.weights)?;
    let s = &data.splits;
    let train_emb = emb.select_rows(&s.train);
    let head = fit_head(&train_emb, &data.labels_of(&s.train), data.n_classes, head_epochs, lr)?;
    let set = |idx: &[usize]| -> Result<LogitsSet> {
        LogitsSet::new(head.logits(&emb.select_rows(idx))?, data.labels_of(idx))
    };
    Ok(CheckpointRecord {
        checkpoint_id: ckpt.id(),
        pretrain_epoch: ckpt.pretrain_epoch,
        train: set(&s.train)?,
        calibration: set(&s.calibration)?,
        evaluation: set(&s.evaluation)?,
    })
}

/// Training-split accuracy of a record's logits.
pub fn train_accuracy(record: &CheckpointRecord) -> f64 {
    let ls = &record.train;
    let correct = ls
        .logits()
        .row_iter()
        .zip(ls.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / ls.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossId,
    pub margin: f64,
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        let t = TripletParams::default();
        Self {
            kind: LossId::Sicova,
            margin: t.margin,
            symmetric: t.symmetric,
        }
    }
}

/// Declarative description of a full run, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for encoder initialisation, batching and augmentation.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub target_coverage: f64,
    pub grid_step: f64,
    pub data: SynthSpec,
    pub augment: AugmentSpec,
    pub loss: LossConfig,
    pub weights: SicovaWeights,
    pub schedule: Schedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            target_coverage: DEFAULT_TARGET_COVERAGE,
            grid_step: DEFAULT_GRID_STEP,
            data: SynthSpec::default(),
            augment: AugmentSpec::default(),
            loss: LossConfig::default(),
            weights: SicovaWeights::default(),
            schedule: Schedule::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Validation(format!("{source}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Sets both the run seed and the data seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss.kind {
            LossId::Sicova => LossSpec::Sicova(self.weights),
            LossId::Triplet => LossSpec::Triplet(TripletParams {
                margin: self.loss.margin,
                symmetric: self.loss.symmetric,
            }),
        }
    }

    pub fn protocol(&self) -> EvaluationProtocol {
        EvaluationProtocol {
            grid_step: self.grid_step,
            target_coverage: self.target_coverage,
            ..EvaluationProtocol::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        self.loss_spec().validate()?;
        self.schedule.validate()?;
        self.protocol().validate()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub pretrain: PretrainRun,
    pub records: Vec<CheckpointRecord>,
    pub evaluations: Vec<CheckpointEvaluation>,
    pub ranking: Ranking,
}

fn evaluate_one(
    ckpt: &Checkpoint,
    data: &Dataset,
    schedule: &Schedule,
    protocol: &EvaluationProtocol,
) -> Result<(CheckpointRecord, CheckpointEvaluation)> {
    let record = finetune_head(ckpt, data, schedule.head_epochs, schedule.head_lr)?;
    let eval = evaluate_checkpoint(
        &record.checkpoint_id,
        record.pretrain_epoch as u64,
        &record.calibration,
        &record.evaluation,
        protocol,
    )?;
    Ok((record, eval))
}

/// Generates data, pretrains, then fine-tunes and evaluates every checkpoint.
///
/// Checkpoint work runs on up to `jobs` threads (all cores when `None`);
/// results do not depend on the thread count.
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentResult> {
    config.validate()?;
    let dataset = generate_dataset(&config.data)?;
    let train = dataset.features.select_rows(&dataset.splits.train);
    let pretrain = pretrain(
        &train,
        &config.loss_spec(),
        &config.augment,
        &config.schedule,
        config.seed,
    )?;
    let protocol = config.protocol();
    let (records, evaluations): (Vec<_>, Vec<_>) = parallel::try_map(&pretrain.checkpoints, jobs, |c| {
        evaluate_one(c, &dataset, &config.schedule, &protocol)
    })?
    .into_iter()
    .unzip();
    let ranking = rank_evaluations(&evaluations);
    Ok(ExperimentResult {
        config: config.clone(),
        dataset,
        pretrain,
        records,
        evaluations,
        ranking,
    })
}

const CHECKPOINT_TABLE_HEADER: &str = "checkpoint_id,pretrain_epoch,pretrain_loss,temperature,clamped,\
cal_nll,ece_before,ece_after,accuracy,macro_f1,qwk,threshold,coverage,sel_accuracy,sel_macro_f1,sel_qwk";

fn checkpoint_table(result: &ExperimentResult) -> String {
    let mut out = format!("{CHECKPOINT_TABLE_HEADER}\n");
    for (ckpt, e) in result.pretrain.checkpoints.iter().zip(&result.evaluations) {
        let p = &e.operating_point.point;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.checkpoint_id,
            e.pretrain_epoch,
            fmt_f64(ckpt.pretrain_loss),
            fmt_f64(e.calibration.temperature),
            e.calibration.clamped,
            fmt_f64(e.calibration.nll_at_t),
            fmt_f64(e.ece_before),
            fmt_f64(e.ece_after),
            fmt_opt(e.accuracy),
            fmt_opt(e.macro_f1),
            fmt_opt(e.qwk),
            fmt_f64(p.threshold),
            fmt_f64(p.coverage),
            fmt_opt(p.sel_accuracy),
            fmt_opt(p.sel_macro_f1),
            fmt_opt(p.sel_qwk),
        );
    }
    out
}

fn history_table(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, fmt_f64(*v));
    }
    out
}

/// Writes checkpoints, per-checkpoint records and result tables under `dir`.
///
/// `results/manifest.json` lists the calibration and evaluation files, so the
/// run can be re-ranked with the manifest-based commands.
pub fn write_experiment(result: &ExperimentResult, dir: &Path) -> Result<()> {
    let method = result.config.loss.kind.to_string();
    for ckpt in &result.pretrain.checkpoints {
        ingest::write_checkpoint(
            &dir.join("checkpoints").join(format!("{}.ckpt", ckpt.id())),
            &ckpt.weights,
        )?;
    }
    let mut entries = Vec::new();
    for (record, eval) in result.records.iter().zip(&result.evaluations) {
        let rdir = dir.join("records").join(&record.checkpoint_id);
        for (split, set) in [
            ("train", &record.train),
            ("cal", &record.calibration),
            ("eval", &record.evaluation),
        ] {
            ingest::write_logits(&rdir.join(format!("{split}-logits.csv")), set.logits())?;
            ingest::write_labels(&rdir.join(format!("{split}-labels.csv")), set.labels())?;
        }
        ingest::write_curve(&rdir.join("curve.csv"), &eval.curve)?;
        ingest::write_calibration_record(
            &rdir.join("calibration.json"),
            &CalibrationRecord::new(&eval.calibration, eval.n_calibration),
        )?;
        let rel = |file: &str| PathBuf::from(format!("../records/{}/{file}", record.checkpoint_id));
        entries.push(ManifestEntry {
            id: record.checkpoint_id.clone(),
            pretrain_epoch: record.pretrain_epoch as u64,
            cal_logits: rel("cal-logits.csv"),
            cal_labels: rel("cal-labels.csv"),
            eval_logits: rel("eval-logits.csv"),
            eval_labels: rel("eval-labels.csv"),
        });
    }

    let results = dir.join("results");
    ingest::write_text(&results.join("summary.csv"), &summary_table(&method, &result.ranking))?;
    ingest::write_rank(&results.join("rank.csv"), &result.ranking)?;
    ingest::write_text(&results.join("checkpoints.csv"), &checkpoint_table(result))?;
    ingest::write_text(
        &results.join("pretrain_loss.csv"),
        &history_table(&result.pretrain.history),
    )?;
    let series: Vec<Series> = result
        .evaluations
        .iter()
        .map(|e| Series {
            label: e.checkpoint_id.clone(),
            curve: e.curve.clone(),
            operating_point: e.operating_point.point.clone(),
        })
        .collect();
    let spec = PlotSpec {
        title: format!("Risk-coverage, {method} checkpoints"),
        ..PlotSpec::default()
    };
    ingest::write_text(&results.join("risk_coverage.svg"), &risk_coverage_svg(&series, &spec)?)?;
    let manifest = Manifest {
        run_id: format!("synth-{method}-seed{}", result.config.seed),
        n_classes: result.dataset.n_classes,
        target_coverage: result.config.target_coverage,
        checkpoints: entries,
    };
    let mut json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Validation(format!("serializing manifest: {e}")))?;
    json.push('\n');
    ingest::write_text(&results.join("manifest.json"), &json)
}
