//! Teacher-student training of a single adapted layer.
//!
//! The teacher is `Y = (W0 + ΔW)·X + noise` with a known `ΔW`, so recovery
//! of the update can be measured directly. Loss per batch is
//! `½‖Y − Y_teacher‖²_F / T`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdaptedLayer, AdapterSpec};
use crate::error::{Error, Result};
use crate::gradients::{backward, forward, BatchInput};
use crate::matrix::Matrix;
use crate::outlier::{make_outlier_input, OutlierSpec};
use crate::rng::{derive_seed, derived_rng, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStructure {
    LowRank,
    BlockHeterogeneous,
    OutlierAligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub structure: TaskStructure,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Rank of `ΔW` (low rank), of each block (block heterogeneous) or of
    /// the column patch (outlier aligned). Zero gives `ΔW = 0`.
    pub target_rank: usize,
    /// Teacher grid size for the block-heterogeneous structure.
    #[serde(default = "one")]
    pub blocks: usize,
    /// Per-block scales are drawn log-uniformly from this range.
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    #[serde(default)]
    pub noise_std: f64,
    /// Input outliers; also the columns `ΔW` concentrates on for the
    /// outlier-aligned structure.
    #[serde(default = "OutlierSpec::none")]
    pub outlier: OutlierSpec,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_scale_range() -> (f64, f64) {
    (0.25, 4.0)
}

impl TaskSpec {
    pub fn new(structure: TaskStructure, m: usize, n: usize, target_rank: usize, seed: u64) -> Self {
        Self {
            structure,
            m,
            n,
            target_rank,
            blocks: 1,
            scale_range: default_scale_range(),
            noise_std: 0.0,
            outlier: OutlierSpec::none(),
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherTask {
    pub w0: Matrix,
    pub delta: Matrix,
    pub data_seed: u64,
    pub noise_std: f64,
    pub structure: TaskStructure,
    pub input_outlier: OutlierSpec,
}

/// A batch of inputs with teacher outputs.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x: BatchInput,
    pub y: Matrix,
}

fn low_rank_product<R: Rng>(rows: usize, cols: usize, rank: usize, rng: &mut R) -> Matrix {
    let u = Matrix::gaussian(rows, rank, 1.0, rng);
    let v = Matrix::gaussian(cols, rank, 1.0, rng);
    u.matmul_t(&v)
        .expect("shapes agree")
        .scale(1.0 / ((cols * rank) as f64).sqrt())
}

pub fn make_task(spec: &TaskSpec) -> Result<TeacherTask> {
    let (m, n) = (spec.m, spec.n);
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("task shape must be positive, got {m}x{n}")));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {}", spec.noise_std)));
    }
    spec.outlier.validate(n)?;
    let w0 = Matrix::gaussian(
        m,
        n,
        1.0 / (n as f64).sqrt(),
        &mut derived_rng(spec.seed, &[stream::BASE_WEIGHT]),
    );
    let mut rng = derived_rng(spec.seed, &[stream::TASK]);
    let r = spec.target_rank;
    let delta = if r == 0 {
        Matrix::zeros(m, n)
    } else {
        match spec.structure {
            TaskStructure::LowRank => {
                if r > m.min(n) {
                    return Err(Error::Config(format!("target rank {r} exceeds min(M, N)")));
                }
                low_rank_product(m, n, r, &mut rng)
            }
            TaskStructure::BlockHeterogeneous => {
                let k = spec.blocks;
                for (what, value) in [("M", m), ("N", n)] {
                    if k == 0 || value % k != 0 {
                        return Err(Error::Divisibility { what, value, k });
                    }
                }
                let (bm, bn) = (m / k, n / k);
                if r > bm.min(bn) {
                    return Err(Error::Config(format!("block rank {r} exceeds block size")));
                }
                let (lo, hi) = spec.scale_range;
                if !(lo > 0.0 && hi >= lo) {
                    return Err(Error::Config(format!("invalid scale range ({lo}, {hi})")));
                }
                let mut delta = Matrix::zeros(m, n);
                for i in 0..k {
                    for j in 0..k {
                        let scale = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
                        let blk = low_rank_product(bm, bn, r, &mut rng).scale(scale);
                        delta.set_submatrix(i * bm, j * bn, &blk);
                    }
                }
                delta
            }
            TaskStructure::OutlierAligned => {
                let cols = &spec.outlier.channels;
                if cols.is_empty() {
                    return Err(Error::Config("outlier_aligned task needs outlier channels".into()));
                }
                let u = Matrix::gaussian(m, r, 1.0, &mut rng);
                let v = Matrix::gaussian(cols.len(), r, 1.0, &mut rng);
                let patch = u.matmul_t(&v)?.scale(1.0 / (r as f64).sqrt());
                let mut delta = Matrix::zeros(m, n);
                for (p, &c) in cols.iter().enumerate() {
                    for row in 0..m {
                        delta[(row, c)] = patch[(row, p)];
                    }
                }
                delta
            }
        }
    };
    Ok(TeacherTask {
        w0,
        delta,
        data_seed: derive_seed(spec.seed, &[stream::TRAIN_DATA]),
        noise_std: spec.noise_std,
        structure: spec.structure,
        input_outlier: spec.outlier.clone(),
    })
}

impl TeacherTask {
    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    /// Expected per-batch loss of a perfect student: `½·M·σ²`.
    pub fn noise_floor(&self) -> f64 {
        0.5 * self.out_dim() as f64 * self.noise_std * self.noise_std
    }

    /// Batch `index` of a stream (`stream::TRAIN_DATA` or `stream::EVAL_DATA`).
    pub fn batch(&self, label: u64, index: u64, tokens: usize) -> Result<TrainBatch> {
        let seed = derive_seed(self.data_seed, &[label, index]);
        let x = make_outlier_input(self.in_dim(), tokens, &self.input_outlier, seed)?;
        let mut y = self.w0.add(&self.delta)?.matmul(x.x())?;
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).expect("finite std");
            let mut rng = derived_rng(seed, &[stream::TARGET]);
            for v in y.as_mut_slice() {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(TrainBatch { x, y })
    }

    /// `‖fused − ΔW‖_F / ‖ΔW‖_F`; `None` when `ΔW = 0`.
    pub fn recovery_error(&self, layer: &AdaptedLayer) -> Option<f64> {
        let norm = self.delta.frobenius_norm();
        (norm > 0.0).then(|| {
            let gap = layer.adapter.fused_update().sub(&self.delta).expect("task and layer shapes agree");
            gap.frobenius_norm() / norm
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    LionDecoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::LionDecoupled,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.beta1, self.beta2, self.weight_decay]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lr < 0.0 {
            return Err(Error::Config("optimizer hyperparameters must be finite, lr >= 0".into()));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `θ ← θ − lr·g`.
pub fn sgd_update(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
}

/// Lion with decoupled weight decay, elementwise.
pub fn lion_update(theta: &mut [f64], momentum: &mut [f64], grad: &[f64], spec: &OptimizerSpec) {
    for ((t, m), &g) in theta.iter_mut().zip(momentum.iter_mut()).zip(grad) {
        let c = spec.beta1 * *m + (1.0 - spec.beta1) * g;
        *t -= spec.lr * (sign(c) + spec.weight_decay * *t);
        *m = spec.beta2 * *m + (1.0 - spec.beta2) * g;
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    momentum: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, layer: &AdaptedLayer) -> Result<Self> {
        spec.validate()?;
        let momentum = match spec.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::LionDecoupled => layer
                .adapter
                .factors()
                .into_iter()
                .map(|f| Matrix::zeros(f.rows(), f.cols()))
                .collect(),
        };
        Ok(Self { spec, momentum })
    }

    pub fn momentum(&self) -> &[Matrix] {
        &self.momentum
    }

    fn apply(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>) {
        debug_assert_eq!(params.len(), grads.len());
        match self.spec.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    sgd_update(p.as_mut_slice(), g.as_slice(), self.spec.lr);
                }
            }
            OptimizerKind::LionDecoupled => {
                for ((p, m), g) in params.into_iter().zip(&mut self.momentum).zip(grads) {
                    lion_update(p.as_mut_slice(), m.as_mut_slice(), g.as_slice(), &self.spec);
                }
            }
        }
    }
}

/// `½‖Y − target‖²_F / T`.
pub fn batch_loss(layer: &AdaptedLayer, batch: &TrainBatch) -> Result<f64> {
    let r = forward(layer, &batch.x)?.sub(&batch.y)?;
    Ok(0.5 * r.frobenius_dot(&r)? / batch.x.tokens() as f64)
}

/// One optimizer step; returns the loss before the update.
pub fn step(layer: &mut AdaptedLayer, batch: &TrainBatch, state: &mut OptimizerState) -> Result<f64> {
    let t = batch.x.tokens() as f64;
    let residual = forward(layer, &batch.x)?.sub(&batch.y)?;
    let loss = 0.5 * residual.frobenius_dot(&residual)? / t;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {loss} (max |residual| {:.3e})",
            residual.max_abs()
        )));
    }
    let grads = backward(layer, &batch.x, &residual.scale(1.0 / t))?;
    state.apply(layer.adapter.factors_mut(), grads.factors.flatten());
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub eval_batches: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 32,
            eval_batches: 8,
            optimizer: OptimizerSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub adapter: AdapterSpec,
    pub structure: TaskStructure,
    pub data_seed: u64,
    pub config: TrainConfig,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub recovery_error: Option<f64>,
    pub noise_floor: f64,
    pub diverged: bool,
    pub steps_run: usize,
}

pub fn evaluate(layer: &AdaptedLayer, task: &TeacherTask, batches: usize, tokens: usize) -> Result<f64> {
    let mut total = 0.0;
    for b in 0..batches {
        total += batch_loss(layer, &task.batch(stream::EVAL_DATA, b as u64, tokens)?)?;
    }
    Ok(total / batches as f64)
}

pub fn train(layer: &mut AdaptedLayer, task: &TeacherTask, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.epochs == 0 || cfg.steps_per_epoch == 0 || cfg.batch_size == 0 || cfg.eval_batches == 0 {
        return Err(Error::Config("epochs, steps, batch size and eval batches must be >= 1".into()));
    }
    if layer.w0() != &task.w0 {
        return Err(Error::Precondition("layer base weight differs from the task's".into()));
    }
    let mut state = OptimizerState::new(cfg.optimizer, layer)?;
    let initial_eval_loss = evaluate(layer, task, cfg.eval_batches, cfg.batch_size)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut first_loss = None;
    let mut diverged = false;
    let mut steps_run = 0;
    'epochs: for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = task.batch(stream::TRAIN_DATA, steps_run as u64, cfg.batch_size)?;
            let loss = step(layer, &batch, &mut state)?;
            steps_run += 1;
            let reference = *first_loss.get_or_insert(loss);
            if loss > 1e6 * reference.max(f64::MIN_POSITIVE) {
                diverged = true;
                break 'epochs;
            }
            sum += loss;
        }
        epoch_losses.push(sum / cfg.steps_per_epoch as f64);
    }
    let final_eval_loss = evaluate(layer, task, cfg.eval_batches, cfg.batch_size)?;
    Ok(TrainReport {
        adapter: layer.adapter.spec(),
        structure: task.structure,
        data_seed: task.data_seed,
        config: cfg.clone(),
        epoch_losses,
        initial_eval_loss,
        final_eval_loss,
        recovery_error: task.recovery_error(layer),
        noise_floor: task.noise_floor(),
        diverged,
        steps_run,
    })
}

/// Builds a fresh layer over the task's base weight and trains it.
pub fn run_training(
    task: &TeacherTask,
    spec: &AdapterSpec,
    adapter_seed: u64,
    cfg: &TrainConfig,
) -> Result<(AdaptedLayer, TrainReport)> {
    let mut layer = AdaptedLayer::new(task.w0.clone(), init_adapter(spec, adapter_seed)?)?;
    let report = train(&mut layer, task, cfg)?;
    Ok((layer, report))
}

/// Loss curve CSV: `epoch,loss`.
pub fn write_loss_curve<W: std::io::Write>(report: &TrainReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "loss"])?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        out.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
