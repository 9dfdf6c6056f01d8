//! The training loop.

use std::fmt;
use std::time::{Duration, Instant};

use super::optim::{Optimizer, OptimizerKind};
use super::task::{gen_task, Dataset, Task, TaskSpec};
use crate::adapters::{AdapterKind, FlopCount, InitStreams, Method};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ToyNet, Unfreeze};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub method: AdapterKind,
    pub unfreeze: Unfreeze,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Mini-batch size; 0 means the full training set.
    pub batch: usize,
    pub steps: usize,
    /// Seed of the adapter initialization.
    pub seed: u64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Measure wall time; when off, `wall_ms` is reported as 0.
    pub timing: bool,
}

impl TrainConfig {
    pub fn new(task: TaskSpec, method: impl Into<AdapterKind>) -> Self {
        let seed = task.seed;
        Self {
            task,
            method: method.into(),
            unfreeze: Unfreeze::NONE,
            optimizer: OptimizerKind::AdamW,
            lr: 1e-2,
            weight_decay: 0.0,
            batch: 0,
            steps: 1000,
            seed,
            eval_every: 0,
            timing: false,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.method.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("lr must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::arg("weight decay must be >= 0"));
        }
        if self.steps == 0 {
            return Err(Error::arg("steps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Diverged,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub task: String,
    pub seed: u64,
    pub params: usize,
    pub flops: FlopCount,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub wall_ms: f64,
    pub status: RunStatus,
    pub history: Vec<LogEntry>,
}

/// A finished run together with the trained network and its data.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub result: RunResult,
    pub net: ToyNet,
    pub task: Task,
}

/// Per-dataset cache of the first layer's frozen product `W₀x`.
struct Prepared<'a> {
    data: &'a Dataset,
    w0x: Matrix,
}

impl<'a> Prepared<'a> {
    fn new(net: &ToyNet, data: &'a Dataset) -> Result<Self> {
        let w0 = net.layers()[0].base.w0();
        Ok(Self {
            data,
            w0x: data.x.matmul(&w0.transpose())?,
        })
    }
}

fn classification(data: &Dataset) -> bool {
    data.labels.is_some()
}

/// Loss of one sample and, optionally, its gradient scaled by `weight`.
fn sample_loss(pred: &[f64], target: &[f64], class: Option<usize>, weight: f64, grad: Option<&mut Vec<f64>>) -> f64 {
    match class {
        None => {
            let d = pred.len() as f64;
            let mut loss = 0.0;
            for (p, t) in pred.iter().zip(target) {
                loss += (p - t) * (p - t);
            }
            if let Some(g) = grad {
                g.clear();
                g.extend(pred.iter().zip(target).map(|(p, t)| weight * 2.0 * (p - t) / d));
            }
            loss / d
        }
        Some(c) => {
            let max = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = pred.iter().map(|p| (p - max).exp()).sum();
            let log_z = max + z.ln();
            if let Some(g) = grad {
                g.clear();
                g.extend(pred.iter().enumerate().map(|(j, p)| {
                    let prob = (p - log_z).exp();
                    weight * (prob - if j == c { 1.0 } else { 0.0 })
                }));
            }
            log_z - pred[c]
        }
    }
}

/// Mean loss (MSE over outputs for regression, cross-entropy otherwise).
pub fn evaluate(net: &ToyNet, data: &Dataset) -> Result<f64> {
    let prep = Prepared::new(net, data)?;
    Ok(eval_prepared(net, &prep))
}

fn eval_prepared(net: &ToyNet, prep: &Prepared<'_>) -> f64 {
    let n = prep.data.len();
    let mut total = 0.0;
    for i in 0..n {
        let (y, _) = net.forward_cached(prep.data.x.row(i), prep.w0x.row(i));
        let class = prep.data.labels.as_ref().map(|l| l[i]);
        total += sample_loss(&y, prep.data.y.row(i), class, 1.0, None);
    }
    total / n as f64
}

pub fn train_run(cfg: &TrainConfig) -> Result<RunResult> {
    Ok(train(cfg)?.result)
}

/// Runs `cfg` and returns the trained network alongside the result.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = gen_task(&cfg.task)?;
    let mut streams = InitStreams::new(cfg.seed);
    let mut net = task.base.clone().attach(Some(cfg.method), cfg.unfreeze, &mut streams)?;
    let result = fit(&mut net, &task, cfg)?;
    Ok(TrainOutcome { result, net, task })
}

fn fit(net: &mut ToyNet, task: &Task, cfg: &TrainConfig) -> Result<RunResult> {
    let train = Prepared::new(net, &task.train)?;
    let val = Prepared::new(net, &task.val)?;
    let n = task.train.len();
    let batch = if cfg.batch == 0 || cfg.batch >= n { n } else { cfg.batch };
    let eval_every = if cfg.eval_every == 0 { cfg.steps } else { cfg.eval_every };
    let cls = classification(&task.train);

    let mut grads = net.zero_grads();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, net.trainable_count());
    let mut g_buf = Vec::with_capacity(net.output_width());
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut status = RunStatus::Ok;
    let mut elapsed = Duration::ZERO;
    let mut cursor = 0;

    for step in 0..cfg.steps {
        let started = cfg.timing.then(Instant::now);
        grads.zero();
        let weight = 1.0 / batch as f64;
        let mut batch_loss = 0.0;
        for _ in 0..batch {
            let i = cursor;
            cursor = (cursor + 1) % n;
            let (y, tape) = net.forward_cached(train.data.x.row(i), train.w0x.row(i));
            let class = if cls {
                task.train.labels.as_ref().map(|l| l[i])
            } else {
                None
            };
            batch_loss += sample_loss(&y, train.data.y.row(i), class, weight, Some(&mut g_buf));
            net.backward_into(&tape, &g_buf, &mut grads)?;
        }
        if !batch_loss.is_finite() {
            status = RunStatus::Diverged;
            break;
        }
        opt.step(&mut net.params_mut(), &grads)?;
        if let Some(t) = started {
            elapsed += t.elapsed();
        }

        if (step + 1) % eval_every == 0 || step + 1 == cfg.steps {
            let train_loss = eval_prepared(net, &train);
            let val_loss = eval_prepared(net, &val);
            if !train_loss.is_finite() || !val_loss.is_finite() {
                status = RunStatus::Diverged;
                break;
            }
            best_val = best_val.min(val_loss);
            history.push(LogEntry {
                step: step + 1,
                train_loss,
                val_loss,
            });
        }
    }

    let (final_train_loss, final_val_loss) = match (status, history.last()) {
        (RunStatus::Ok, Some(last)) => (last.train_loss, last.val_loss),
        _ => (f64::NAN, f64::NAN),
    };
    if status == RunStatus::Diverged {
        best_val = f64::NAN;
    }
    Ok(RunResult {
        method: cfg.method.method,
        task: task.spec.kind.name().to_string(),
        seed: cfg.seed,
        params: net.trainable_count(),
        flops: net.flops(),
        final_train_loss,
        final_val_loss,
        best_val_loss: best_val,
        wall_ms: if cfg.timing { elapsed.as_secs_f64() * 1e3 } else { 0.0 },
        status,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{InputDist, TaskKind};

    fn cfg(method: Method, kind: TaskKind) -> TrainConfig {
        TrainConfig::new(TaskSpec::new(kind, 8, 4).with_seed(1).with_samples(32, 16), method).with_steps(300)
    }

    #[test]
    fn runs_are_bit_identical() {
        let c = cfg(Method::Lora, TaskKind::FullRank);
        let a = train_run(&c).unwrap();
        let b = train_run(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.final_train_loss.to_bits(), b.final_train_loss.to_bits());
    }

    #[test]
    fn params_match_model_count() {
        for m in Method::ALL {
            let r = train_run(&cfg(m, TaskKind::Rank1Sum).with_steps(2)).unwrap();
            assert_eq!(r.params, crate::adapters::param_count(&m.into(), 8, 4), "{m}");
            assert_eq!(r.status, RunStatus::Ok);
        }
    }

    #[test]
    fn training_reduces_loss() {
        for m in Method::TABLE {
            let c = cfg(m, TaskKind::Rank1Sum);
            let outcome = train(&c).unwrap();
            let start = evaluate(&outcome.task.base, &outcome.task.train).unwrap();
            assert!(outcome.result.final_train_loss < start, "{m}");
        }
    }

    #[test]
    fn classification_trains() {
        let mut c = cfg(Method::All, TaskKind::Blobs).with_steps(200);
        c.task.d = 3;
        let outcome = train(&c).unwrap();
        let start = evaluate(&outcome.task.base, &outcome.task.train).unwrap();
        assert!(outcome.result.final_train_loss < 0.5 * start);
    }

    #[test]
    fn huge_lr_is_reported_not_raised() {
        let mut c = cfg(Method::All, TaskKind::FullRank).with_lr(1e200);
        c.optimizer = OptimizerKind::Sgd;
        c.task.input_dist = InputDist::ReluGaussian;
        let r = train_run(&c).unwrap();
        assert_eq!(r.status, RunStatus::Diverged);
        assert!(r.final_train_loss.is_nan());
    }

    #[test]
    fn minibatches_cycle() {
        let mut c = cfg(Method::OneLora, TaskKind::Rank1Sum);
        c.batch = 5;
        let r = train_run(&c).unwrap();
        assert_eq!(r.status, RunStatus::Ok);
        assert!(r.final_train_loss.is_finite());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(train_run(&cfg(Method::Lora, TaskKind::Rank1Sum).with_steps(0)).is_err());
        assert!(train_run(&cfg(Method::Lora, TaskKind::Rank1Sum).with_lr(0.0)).is_err());
    }

    #[test]
    fn timing_off_reports_zero() {
        let r = train_run(&cfg(Method::OneLora, TaskKind::Rank1Sum).with_steps(5)).unwrap();
        assert_eq!(r.wall_ms, 0.0);
        let mut c = cfg(Method::OneLora, TaskKind::Rank1Sum).with_steps(5);
        c.timing = true;
        assert!(train_run(&c).unwrap().wall_ms > 0.0);
    }
}
