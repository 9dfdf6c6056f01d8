//! First-order optimizers over flat parameter buffers.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{NetGrads, NetParamMut};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW step with decoupled weight decay:
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("adamw_step", params.len(), grads.len()));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adamw_step state", params.len(), state.m.len()));
    }
    state.t += 1;
    let (c1, c2) = bias_corrections(hp, state.t);
    adamw_update(params, grads, &mut state.m, &mut state.v, hp, c1, c2);
    Ok(())
}

fn bias_corrections(hp: &AdamParams, t: u64) -> (f64, f64) {
    let t = t.min(i32::MAX as u64) as i32;
    (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t))
}

fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], hp: &AdamParams, c1: f64, c2: f64) {
    for i in 0..p.len() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let step = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
        p[i] -= hp.lr * (hp.weight_decay * p[i] + step);
    }
}

/// Plain gradient descent with decoupled decay.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("sgd_step", params.len(), grads.len()));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (weight_decay * *p + g);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" | "adam" => Ok(OptimizerKind::AdamW),
            other => Err(Error::arg(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Optimizer bound to a network's trainables (in `params_mut` order).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    hp: AdamParams,
    state: AdamState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            kind,
            hp: AdamParams::new(lr, weight_decay),
            state: match kind {
                OptimizerKind::AdamW => AdamState::new(n_params),
                OptimizerKind::Sgd => AdamState::default(),
            },
        }
    }

    pub fn step(&mut self, params: &mut [NetParamMut<'_>], grads: &NetGrads) -> Result<()> {
        if params.len() != grads.entries.len() {
            return Err(Error::shape("Optimizer::step", params.len(), grads.entries.len()));
        }
        self.state.t += 1;
        let (c1, c2) = bias_corrections(&self.hp, self.state.t);
        let mut off = 0;
        for (p, g) in params.iter_mut().zip(&grads.entries) {
            let n = p.data.len();
            if g.data.len() != n {
                return Err(Error::shape("Optimizer::step", n, g.data.len()));
            }
            match self.kind {
                OptimizerKind::Sgd => sgd_step(p.data, &g.data, self.hp.lr, self.hp.weight_decay)?,
                OptimizerKind::AdamW => {
                    let end = off + n;
                    if end > self.state.m.len() {
                        return Err(Error::shape("Optimizer::step state", end, self.state.m.len()));
                    }
                    adamw_update(
                        p.data,
                        &g.data,
                        &mut self.state.m[off..end],
                        &mut self.state.v[off..end],
                        &self.hp,
                        c1,
                        c2,
                    );
                }
            }
            off += n;
        }
        Ok(())
    }
}
