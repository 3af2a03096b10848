//! End-to-end training of a small residual classifier under one strategy.
//!
//! Network: 3x3 stem conv (1 -> 8 channels), three pre-activation bottleneck
//! blocks (8 -> 4 -> 4 -> 8 with an identity skip), a final BN+Act unit,
//! global average pooling and a linear layer into a softmax cross-entropy.
//! Optimizer: SGD with momentum and weight decay on conv and linear weights.

use std::path::PathBuf;

use inplace_abn::batchnorm::{self, MinibatchStats, RunningStats, DEFAULT_MOMENTUM};
use inplace_abn::strategies::{
    block_backward, block_forward, residual_stack_backward, residual_stack_forward, BlockParams,
    BlockPlan, LayerGrads, LayerSpec, Strategy, Trace,
};
use inplace_abn::{init, ActivationFn, ConvParams, DType, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{self, Dataset};
use crate::error::{CliError, Result};

/// In-place strategies divide by gamma, so every update keeps |gamma| at
/// least this large. Applied under every strategy to keep trajectories
/// comparable.
pub const GAMMA_CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        train: usize,
        test: usize,
    },
    /// Binary file; the last fifth becomes the test split.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub data: DataSource,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DataSource::Synthetic {
                train: 1024,
                test: 512,
            },
            epochs: 5,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            strategy: Strategy::InPlaceAbnI,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CliError::Usage("batch size must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Usage(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CliError::Usage(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(CliError::Usage("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic { train, test } => Ok((
                data::two_gaussians(*train, self.seed),
                data::two_gaussians(*test, self.seed.wrapping_add(0x7e57)),
            )),
            DataSource::File(path) => Ok(data::load_binary(path)?.split(0.2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainResult {
    pub strategy: String,
    pub epochs: Vec<EpochRow>,
    /// Minibatch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainResult {
    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |r| r.test_accuracy)
    }
}

const WIDTH: usize = 8;
const MID: usize = 4;
const BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Weight,
    Bias,
    Gamma { fixed: bool },
    Beta,
}

struct Network<T> {
    stem: ConvParams<T>,
    plans: Vec<BlockPlan>,
    blocks: Vec<BlockParams<T>>,
    head_plan: BlockPlan,
    head: BlockParams<T>,
    fc_w: Vec<T>,
    fc_b: Vec<T>,
    classes: usize,
    /// One per BN layer, in forward order.
    running: Vec<RunningStats<T>>,
}

struct Batch<T> {
    loss: f64,
    correct: usize,
    grads: Vec<Vec<T>>,
    trace: Trace,
}

fn layer_kinds(spec: &LayerSpec, out: &mut Vec<Kind>) {
    out.push(Kind::Gamma {
        fixed: spec.fixed_gamma,
    });
    out.push(Kind::Beta);
    if spec.conv.is_some() {
        out.push(Kind::Weight);
        out.push(Kind::Bias);
    }
}

fn push_layer_grads<T>(g: LayerGrads<T>, out: &mut Vec<Vec<T>>) {
    out.push(g.dgamma);
    out.push(g.dbeta);
    if let Some(c) = g.conv {
        out.push(c.dweights);
        out.push(c.dbias);
    }
}

/// Numerically stable softmax cross-entropy for one row of logits.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = -(probs[label].max(f64::MIN_POSITIVE)).ln();
    (loss, probs)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

impl<T: Scalar> Network<T> {
    fn new(strategy: Strategy, classes: usize, seed: u64) -> Result<Self> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(1);
        let act = ActivationFn::default();
        let stem = init::he_conv(&mut r, &ConvParams::zeros(WIDTH, 1, 3), 1.0, 0.0);
        let plans: Vec<BlockPlan> = (0..BLOCKS)
            .map(|_| BlockPlan::bottleneck(WIDTH, MID, act, strategy))
            .collect();
        let blocks = plans
            .iter()
            .map(|p| {
                let mut b = BlockParams::<T>::zeros_for(p);
                for l in &mut b.layers {
                    if let Some(c) = &l.conv {
                        l.conv = Some(init::he_conv(&mut r, c, 1.0, 0.0));
                    }
                }
                b
            })
            .collect();
        let head_plan = BlockPlan {
            layers: vec![LayerSpec::bn_act(WIDTH, act)],
            strategy,
            residual: false,
        };
        let head = BlockParams::zeros_for(&head_plan);
        let bound = 1.0 / (WIDTH as f64).sqrt();
        let fc_w = (0..classes * WIDTH)
            .map(|_| T::of(r.random_range(-bound..bound)))
            .collect();
        let layers = BLOCKS * 3 + 1;
        let running = (0..layers)
            .map(|i| {
                let c = if i == layers - 1 || i % 3 == 0 {
                    WIDTH
                } else {
                    MID
                };
                RunningStats::new(c, T::of(DEFAULT_MOMENTUM))
            })
            .collect::<inplace_abn::Result<_>>()?;
        Ok(Network {
            stem,
            plans,
            blocks,
            head_plan,
            head,
            fc_w,
            fc_b: vec![T::zero(); classes],
            classes,
            running,
        })
    }

    fn kinds(&self) -> Vec<Kind> {
        let mut k = vec![Kind::Weight, Kind::Bias];
        for p in self.plans.iter().chain([&self.head_plan]) {
            p.layers.iter().for_each(|l| layer_kinds(l, &mut k));
        }
        k.push(Kind::Weight);
        k.push(Kind::Bias);
        k
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = vec![&mut self.stem.weights, &mut self.stem.bias];
        for b in self.blocks.iter_mut().chain([&mut self.head]) {
            for l in &mut b.layers {
                v.push(&mut l.bn.gamma);
                v.push(&mut l.bn.beta);
                if let Some(c) = &mut l.conv {
                    v.push(&mut c.weights);
                    v.push(&mut c.bias);
                }
            }
        }
        v.push(&mut self.fc_w);
        v.push(&mut self.fc_b);
        v
    }

    fn images(set: &Dataset, idx: &[usize]) -> Result<Tensor<T>> {
        let data = idx
            .iter()
            .flat_map(|&i| set.image(i).iter().map(|&v| T::of(v)))
            .collect();
        Ok(Tensor::from_vec((idx.len(), 1, set.h, set.w), data)?)
    }

    /// Linear layer on pooled features; returns pooled features and logits.
    fn classify(&self, a: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
        let s = a.shape();
        let plane = s.plane() as f64;
        let mut pooled = vec![0.0; s.n * s.c];
        for (i, p) in a.data().chunks(s.plane()).enumerate() {
            pooled[i] = p.iter().map(|v| v.as_f64()).sum::<f64>() / plane;
        }
        let mut logits = vec![0.0; s.n * self.classes];
        for b in 0..s.n {
            for k in 0..self.classes {
                logits[b * self.classes + k] = self.fc_b[k].as_f64()
                    + (0..s.c)
                        .map(|c| self.fc_w[k * s.c + c].as_f64() * pooled[b * s.c + c])
                        .sum::<f64>();
            }
        }
        (pooled, logits)
    }

    /// Training-mode forward and backward on one minibatch.
    fn step(&self, set: &Dataset, idx: &[usize]) -> Result<Batch<T>> {
        let x = Self::images(set, idx)?;
        let mut trace = Trace::new();
        let h0 = self.stem.forward(&x)?;
        let (h, saved) = residual_stack_forward(&self.plans, &self.blocks, h0, &mut trace)?;
        let (a, head_saved) = block_forward(&self.head_plan, &self.head, h, &mut trace)?;
        let (pooled, logits) = self.classify(&a);

        let (n, k, c) = (idx.len(), self.classes, WIDTH);
        let mut loss = 0.0;
        let mut correct = 0;
        let mut dlogits = vec![0.0; n * k];
        for (b, &i) in idx.iter().enumerate() {
            let row = &logits[b * k..(b + 1) * k];
            let (l, probs) = softmax_xent(row, set.labels[i]);
            loss += l / n as f64;
            correct += usize::from(argmax(row) == set.labels[i]);
            for j in 0..k {
                let target = if j == set.labels[i] { 1.0 } else { 0.0 };
                dlogits[b * k + j] = (probs[j] - target) / n as f64;
            }
        }
        let mut dfc_w = vec![0.0; k * c];
        let mut dfc_b = vec![0.0; k];
        let mut dpooled = vec![0.0; n * c];
        for b in 0..n {
            for j in 0..k {
                let d = dlogits[b * k + j];
                dfc_b[j] += d;
                for ch in 0..c {
                    dfc_w[j * c + ch] += d * pooled[b * c + ch];
                    dpooled[b * c + ch] += d * self.fc_w[j * c + ch].as_f64();
                }
            }
        }
        let s = a.shape();
        let plane = s.plane() as f64;
        let da = Tensor::from_fn(s, |b, ch, _, _| T::of(dpooled[b * c + ch] / plane));
        let (dh, head_grads) =
            block_backward(&self.head_plan, &self.head, head_saved, da, &mut trace)?;
        let (dh0, block_grads) =
            residual_stack_backward(&self.plans, &self.blocks, saved, dh, &mut trace)?;
        let (_, stem_grads) = self.stem.backward(&x, &dh0)?;

        let mut grads = vec![stem_grads.dweights, stem_grads.dbias];
        for g in block_grads.into_iter().flatten().chain(head_grads) {
            push_layer_grads(g, &mut grads);
        }
        grads.push(dfc_w.into_iter().map(T::of).collect());
        grads.push(dfc_b.into_iter().map(T::of).collect());
        Ok(Batch {
            loss,
            correct,
            grads,
            trace,
        })
    }

    fn update_running(&mut self, trace: &Trace, m: usize) -> Result<()> {
        let mut records = trace.batch_stats.clone();
        records.sort_by_key(|r| r.layer);
        for (run, rec) in self.running.iter_mut().zip(&records) {
            let batch = MinibatchStats {
                mu: rec.mu.iter().map(|&v| T::of(v)).collect(),
                var: rec.var.iter().map(|&v| T::of(v)).collect(),
                m,
            };
            *run = run.update(&batch)?;
        }
        Ok(())
    }

    fn sgd(&mut self, grads: &[Vec<T>], velocity: &mut [Vec<T>], cfg: &TrainConfig) {
        let kinds = self.kinds();
        let (lr, mu, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
        let floor = T::of(GAMMA_CLAMP);
        for (((p, g), v), kind) in self
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(velocity.iter_mut())
            .zip(kinds)
        {
            if kind == (Kind::Gamma { fixed: true }) {
                continue;
            }
            for ((w, &dw), vel) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = if kind == Kind::Weight {
                    dw + wd * *w
                } else {
                    dw
                };
                *vel = mu * *vel + d;
                *w -= lr * *vel;
                if matches!(kind, Kind::Gamma { .. }) && w.abs() < floor {
                    *w = if *w < T::zero() { -floor } else { floor };
                }
            }
        }
    }

    /// Inference-mode logits using the running statistics.
    fn infer(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let mut h = self.stem.forward(x)?;
        let mut li = 0;
        for (plan, params) in self
            .plans
            .iter()
            .chain([&self.head_plan])
            .zip(self.blocks.iter().chain([&self.head]))
        {
            let skip = plan.residual.then(|| h.clone());
            for (spec, lp) in plan.layers.iter().zip(&params.layers) {
                let y = batchnorm::inference_forward(&h, &self.running[li], &lp.bn)?;
                li += 1;
                let z = spec.activation.forward(&y);
                h = match &lp.conv {
                    Some(c) => c.forward(&z)?,
                    None => z,
                };
            }
            if let Some(s) = skip {
                h.add_assign(&s)?;
            }
        }
        Ok(self.classify(&h).1)
    }

    fn accuracy(&self, set: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut correct = 0;
        for chunk in idx.chunks(256) {
            let logits = self.infer(&Self::images(set, chunk)?)?;
            for (b, &i) in chunk.iter().enumerate() {
                correct += usize::from(
                    argmax(&logits[b * self.classes..(b + 1) * self.classes]) == set.labels[i],
                );
            }
        }
        Ok(correct as f64 / set.len().max(1) as f64)
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(move |c| c.len() == size)
}

fn check_data(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if train.len() < cfg.batch_size {
        return Err(CliError::Usage(format!(
            "training split has {} samples, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    if test.is_empty() {
        return Err(CliError::Usage("test split is empty".into()));
    }
    Ok(())
}

pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainResult> {
    cfg.validate()?;
    check_data(train_set, test_set, cfg)?;
    let classes = train_set.classes().max(test_set.classes()).max(2);
    let mut net = Network::<T>::new(cfg.strategy, classes, cfg.seed)?;
    let mut velocity: Vec<Vec<T>> = net
        .params_mut()
        .iter()
        .map(|p| vec![T::zero(); p.len()])
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(2);

    let mut rows = Vec::with_capacity(cfg.epochs + 1);
    let (mut loss0, mut correct0, mut seen0) = (0.0, 0, 0);
    let count0 = batches(&order, cfg.batch_size).count();
    for idx in batches(&order, cfg.batch_size) {
        let b = net.step(train_set, idx)?;
        loss0 += b.loss / count0 as f64;
        correct0 += b.correct;
        seen0 += idx.len();
    }
    rows.push(EpochRow {
        epoch: 0,
        mean_loss: loss0,
        train_accuracy: correct0 as f64 / seen0 as f64,
        test_accuracy: net.accuracy(test_set)?,
    });

    let mut step_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut sum, mut correct, mut seen, mut steps) = (0.0, 0, 0, 0);
        for idx in batches(&order, cfg.batch_size) {
            let b = net.step(train_set, idx)?;
            if !b.loss.is_finite() {
                return Err(CliError::Diverged {
                    epoch,
                    step: steps,
                    loss: b.loss,
                });
            }
            let m = idx.len() * train_set.pixels();
            net.update_running(&b.trace, m)?;
            net.sgd(&b.grads, &mut velocity, cfg);
            step_losses.push(b.loss);
            sum += b.loss;
            correct += b.correct;
            seen += idx.len();
            steps += 1;
        }
        rows.push(EpochRow {
            epoch,
            mean_loss: sum / steps as f64,
            train_accuracy: correct as f64 / seen as f64,
            test_accuracy: net.accuracy(test_set)?,
        });
    }
    Ok(TrainResult {
        strategy: cfg.strategy.name().to_string(),
        epochs: rows,
        step_losses,
    })
}

pub fn cmd_train(cfg: &TrainConfig, dtype: DType) -> Result<TrainResult> {
    let (train_set, test_set) = cfg.load()?;
    match dtype {
        DType::Double => train::<f64>(cfg, &train_set, &test_set),
        DType::Single => train::<f32>(cfg, &train_set, &test_set),
    }
}
