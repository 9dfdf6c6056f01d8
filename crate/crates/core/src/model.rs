//! Frozen base networks that adapters attach to.
//!
//! A [`ToyNet`] is a stack of frozen linear layers with an activation (and an
//! optional LayerNorm) between consecutive layers. Beyond the adapters
//! themselves, three groups of frozen parameters can be unfrozen: per-layer
//! bias offsets, per-layer output scales `γ`, and the LayerNorm parameters.
//! A layer computes `γ ⊙ (adapted(x) + Δβ)`.

use std::fmt;
use std::str::FromStr;

use crate::adapters::{make_adapter, param_count, AdapterKind, AdapterState, Grad, InitStreams};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng, Vector};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A pretrained layer `o = W₀x + β₀`; never modified in place.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear {
    w0: Matrix,
    beta0: Vector,
}

impl FrozenLinear {
    pub fn new(w0: Matrix, beta0: Vector) -> Result<Self> {
        if w0.rows() != beta0.len() {
            return Err(Error::shape(
                "FrozenLinear",
                format!("bias length {}", w0.rows()),
                beta0.len(),
            ));
        }
        if w0.rows() == 0 || w0.cols() == 0 {
            return Err(Error::arg("FrozenLinear needs at least one input and one output"));
        }
        Ok(Self { w0, beta0 })
    }

    pub fn without_bias(w0: Matrix) -> Result<Self> {
        let d = w0.rows();
        Self::new(w0, Vector::zeros(d))
    }

    /// `W₀ ~ N(0, 1/k)`, `β₀ ~ N(0, bias_std²)`.
    pub fn random(d: usize, k: usize, bias_std: f64, rng: &mut Rng) -> Result<Self> {
        let w0 = rng.normal_matrix(d, k, 1.0 / (k.max(1) as f64).sqrt());
        let beta0 = Vector::new((0..d).map(|_| bias_std * rng.normal()).collect());
        Self::new(w0, beta0)
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn beta0(&self) -> &Vector {
        &self.beta0
    }

    pub fn k(&self) -> usize {
        self.w0.cols()
    }

    pub fn d(&self) -> usize {
        self.w0.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        self.w0.matvec(x)?.axpy(1.0, &self.beta0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Gelu => 0.5 * z * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => z.max(0.0),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + z * pdf
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "identity" | "" => Ok(Activation::Identity),
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::arg(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Vector,
    pub shift: Vector,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            scale: Vector::ones(width),
            shift: Vector::zeros(width),
        }
    }

    fn forward(&self, z: &[f64]) -> (Vec<f64>, NormCache) {
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = z.iter().map(|v| (v - mean) * inv_std).collect();
        let y = xhat
            .iter()
            .zip(self.scale.iter().zip(self.shift.iter()))
            .map(|(h, (s, b))| s * h + b)
            .collect();
        (y, NormCache { xhat, inv_std })
    }

    /// Returns the input gradient; adds parameter gradients when asked.
    fn backward(&self, cache: &NormCache, g: &[f64], param_grads: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
        let n = g.len() as f64;
        let gh: Vec<f64> = g.iter().zip(self.scale.iter()).map(|(a, s)| a * s).collect();
        let mean_gh = gh.iter().sum::<f64>() / n;
        let mean_ghx = gh.iter().zip(&cache.xhat).map(|(a, h)| a * h).sum::<f64>() / n;
        if let Some((gs, gb)) = param_grads {
            for i in 0..g.len() {
                gs[i] += g[i] * cache.xhat[i];
                gb[i] += g[i];
            }
        }
        gh.iter()
            .zip(&cache.xhat)
            .map(|(a, h)| cache.inv_std * (a - mean_gh - h * mean_ghx))
            .collect()
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

/// Components unfrozen next to (or instead of) an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Unfreeze {
    pub biases: bool,
    pub gamma: bool,
    pub norms: bool,
}

impl Unfreeze {
    pub const NONE: Unfreeze = Unfreeze {
        biases: false,
        gamma: false,
        norms: false,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }
}

impl FromStr for Unfreeze {
    type Err = Error;

    /// Comma-separated subset of `biases`, `gamma`, `norms` (or `none`).
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Unfreeze::NONE;
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag.to_ascii_lowercase().as_str() {
                "biases" | "bias" => out.biases = true,
                "gamma" | "scale" => out.gamma = true,
                "norms" | "norm" => out.norms = true,
                "none" => {}
                other => return Err(Error::arg(format!("unknown unfreeze flag `{other}`"))),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Unfreeze {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.biases {
            parts.push("biases");
        }
        if self.gamma {
            parts.push("gamma");
        }
        if self.norms {
            parts.push("norms");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub base: FrozenLinear,
    pub adapter: Option<AdapterState>,
    pub bias_delta: Option<Vector>,
    pub gamma: Option<Vector>,
    /// Classification heads never receive an adapter.
    pub head: bool,
}

impl Layer {
    fn new(base: FrozenLinear) -> Self {
        Self {
            base,
            adapter: None,
            bias_delta: None,
            gamma: None,
            head: false,
        }
    }

    fn forward(&self, x: &[f64], w0x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let base = &self.base;
        let mut pre = match &self.adapter {
            Some(a) => a.forward_with_base(base.w0(), base.beta0(), x, w0x).into_inner(),
            None => w0x.iter().zip(base.beta0().iter()).map(|(a, b)| a + b).collect(),
        };
        if let Some(db) = &self.bias_delta {
            pre.iter_mut().zip(db.iter()).for_each(|(p, b)| *p += b);
        }
        let out = match &self.gamma {
            Some(g) => pre.iter().zip(g.iter()).map(|(p, s)| p * s).collect(),
            None => pre.clone(),
        };
        (out, pre)
    }
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    inputs: Vec<Vec<f64>>,
    w0x: Vec<Vec<f64>>,
    pre_gamma: Vec<Vec<f64>>,
    /// Per junction: layer output before norm/activation.
    junction_in: Vec<Vec<f64>>,
    norm_caches: Vec<Option<NormCache>>,
    /// Per junction: activation input (after the norm).
    act_in: Vec<Vec<f64>>,
}

/// Named gradient of one trainable tensor of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub name: String,
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub entries: Vec<NetGrad>,
}

impl NetGrads {
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.data.iter().copied()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&NetGrad> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn scale(&mut self, a: f64) {
        for e in &mut self.entries {
            e.data.iter_mut().for_each(|v| *v *= a);
        }
    }

    pub fn zero(&mut self) {
        for e in &mut self.entries {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Mutable view of one trainable tensor of a network.
#[derive(Debug)]
pub struct NetParamMut<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    layers: Vec<Layer>,
    activation: Activation,
    norms: Vec<LayerNorm>,
    use_norm: bool,
    unfreeze: Unfreeze,
    version: u64,
}

impl ToyNet {
    pub fn single(base: FrozenLinear) -> Self {
        Self {
            layers: vec![Layer::new(base)],
            activation: Activation::Identity,
            norms: Vec::new(),
            use_norm: false,
            unfreeze: Unfreeze::NONE,
            version: 0,
        }
    }

    /// `layer2(act(norm(layer1(x))))`.
    pub fn mlp(layer1: FrozenLinear, layer2: FrozenLinear, activation: Activation, layer_norm: bool) -> Result<Self> {
        if layer1.d() != layer2.k() {
            return Err(Error::shape(
                "ToyNet::mlp",
                format!("layer2 input {}", layer1.d()),
                layer2.k(),
            ));
        }
        let hidden = layer1.d();
        Ok(Self {
            layers: vec![Layer::new(layer1), Layer::new(layer2)],
            activation,
            norms: if layer_norm {
                vec![LayerNorm::new(hidden)]
            } else {
                Vec::new()
            },
            use_norm: layer_norm,
            unfreeze: Unfreeze::NONE,
            version: 0,
        })
    }

    pub fn random_mlp(
        k: usize,
        hidden: usize,
        out: usize,
        activation: Activation,
        layer_norm: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let l1 = FrozenLinear::random(hidden, k, 0.1, rng)?;
        let l2 = FrozenLinear::random(out, hidden, 0.1, rng)?;
        Self::mlp(l1, l2, activation, layer_norm)
    }

    /// Marks the last layer as a classification head (excluded from adapters).
    pub fn with_head(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            last.head = true;
        }
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn unfreeze(&self) -> Unfreeze {
        self.unfreeze
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].base.k()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.base.d())
    }

    pub fn layer_norms(&self) -> &[LayerNorm] {
        &self.norms
    }

    /// Attaches `kind` to every non-head layer and unfreezes the requested
    /// components. Replaces any previous adapters.
    pub fn attach(mut self, kind: Option<AdapterKind>, unfreeze: Unfreeze, streams: &mut InitStreams) -> Result<Self> {
        for layer in &mut self.layers {
            layer.adapter = match kind {
                Some(kind) if !layer.head => Some(make_adapter(kind, layer.base.w0(), streams)?),
                _ => None,
            };
            let d = layer.base.d();
            layer.bias_delta = unfreeze.biases.then(|| Vector::zeros(d));
            layer.gamma = unfreeze.gamma.then(|| Vector::ones(d));
        }
        if unfreeze.norms && !self.use_norm {
            return Err(Error::arg("`norms` unfrozen on a network without LayerNorm"));
        }
        for n in &mut self.norms {
            *n = LayerNorm::new(n.scale.len());
        }
        self.unfreeze = unfreeze;
        self.version += 1;
        Ok(self)
    }

    /// Exact trainable count implied by the configuration (adapter formulas
    /// plus unfrozen components).
    pub fn expected_trainable_count(&self) -> usize {
        let mut total = 0;
        for l in &self.layers {
            if let Some(a) = &l.adapter {
                total += param_count(a.kind(), l.base.k(), l.base.d());
            }
            if self.unfreeze.biases {
                total += l.base.d();
            }
            if self.unfreeze.gamma {
                total += l.base.d();
            }
        }
        if self.unfreeze.norms {
            total += self.norms.iter().map(|n| 2 * n.scale.len()).sum::<usize>();
        }
        total
    }

    pub fn trainable_count(&self) -> usize {
        self.zero_grads().entries.iter().map(|e| e.data.len()).sum()
    }

    /// Extra adapter FLOPs summed over layers.
    pub fn flops(&self) -> crate::adapters::FlopCount {
        let mut total = crate::adapters::FlopCount::default();
        for l in &self.layers {
            if let Some(a) = &l.adapter {
                let f = crate::adapters::flop_count(a.kind(), l.base.k(), l.base.d());
                total.mults += f.mults;
                total.adds += f.adds;
            }
        }
        total
    }

    /// Mutable trainables in a fixed order; any call invalidates existing tapes.
    pub fn params_mut(&mut self) -> Vec<NetParamMut<'_>> {
        self.version += 1;
        let mut out = Vec::new();
        for (li, l) in self.layers.iter_mut().enumerate() {
            if let Some(a) = &mut l.adapter {
                for p in a.trainables_mut() {
                    out.push(NetParamMut {
                        name: format!("layer{li}.{}", p.name),
                        shape: p.shape,
                        data: p.data,
                    });
                }
            }
            if let Some(b) = &mut l.bias_delta {
                let n = b.len();
                out.push(NetParamMut {
                    name: format!("layer{li}.beta"),
                    shape: (n, 1),
                    data: b.as_mut_slice(),
                });
            }
            if let Some(g) = &mut l.gamma {
                let n = g.len();
                out.push(NetParamMut {
                    name: format!("layer{li}.gamma"),
                    shape: (n, 1),
                    data: g.as_mut_slice(),
                });
            }
        }
        if self.unfreeze.norms {
            for (ni, n) in self.norms.iter_mut().enumerate() {
                let w = n.scale.len();
                out.push(NetParamMut {
                    name: format!("norm{ni}.scale"),
                    shape: (w, 1),
                    data: n.scale.as_mut_slice(),
                });
                out.push(NetParamMut {
                    name: format!("norm{ni}.shift"),
                    shape: (w, 1),
                    data: n.shift.as_mut_slice(),
                });
            }
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.clone()
            .params_mut()
            .into_iter()
            .flat_map(|p| p.data.to_vec())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.trainable_count();
        if flat.len() != n {
            return Err(Error::shape("ToyNet::set_flat_params", n, flat.len()));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let len = p.data.len();
            p.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn perturb(&mut self, rng: &mut Rng, std: f64) {
        for p in self.params_mut() {
            p.data.iter_mut().for_each(|v| *v += std * rng.normal());
        }
    }

    /// Zero gradient buffers in [`Self::params_mut`] order.
    pub fn zero_grads(&self) -> NetGrads {
        let mut entries = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            if let Some(a) = &l.adapter {
                for g in a.zero_grads() {
                    entries.push(NetGrad {
                        name: format!("layer{li}.{}", g.name),
                        shape: g.shape,
                        data: g.data,
                    });
                }
            }
            let d = l.base.d();
            if l.bias_delta.is_some() {
                entries.push(NetGrad {
                    name: format!("layer{li}.beta"),
                    shape: (d, 1),
                    data: vec![0.0; d],
                });
            }
            if l.gamma.is_some() {
                entries.push(NetGrad {
                    name: format!("layer{li}.gamma"),
                    shape: (d, 1),
                    data: vec![0.0; d],
                });
            }
        }
        if self.unfreeze.norms {
            for (ni, n) in self.norms.iter().enumerate() {
                let w = n.scale.len();
                entries.push(NetGrad {
                    name: format!("norm{ni}.scale"),
                    shape: (w, 1),
                    data: vec![0.0; w],
                });
                entries.push(NetGrad {
                    name: format!("norm{ni}.shift"),
                    shape: (w, 1),
                    data: vec![0.0; w],
                });
            }
        }
        NetGrads { entries }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, Tape)> {
        if x.len() != self.input_width() {
            return Err(Error::shape(
                "ToyNet::forward",
                format!("input length {}", self.input_width()),
                x.len(),
            ));
        }
        let w0x = self.layers[0].base.w0().matvec(x)?;
        Ok(self.forward_cached(x, &w0x))
    }

    /// Forward with the first layer's `W₀x` supplied by the caller (it is
    /// constant for a fixed input, so training loops precompute it).
    pub fn forward_cached(&self, x: &[f64], first_w0x: &[f64]) -> (Vector, Tape) {
        let n = self.layers.len();
        let mut tape = Tape {
            version: self.version,
            inputs: Vec::with_capacity(n),
            w0x: Vec::with_capacity(n),
            pre_gamma: Vec::with_capacity(n),
            junction_in: Vec::new(),
            norm_caches: Vec::new(),
            act_in: Vec::new(),
        };
        let mut h = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let w0x = if li == 0 {
                first_w0x.to_vec()
            } else {
                layer
                    .base
                    .w0()
                    .matvec(&h)
                    .expect("widths checked at construction")
                    .into_inner()
            };
            let (out, pre) = layer.forward(&h, &w0x);
            tape.inputs.push(std::mem::take(&mut h));
            tape.w0x.push(w0x);
            tape.pre_gamma.push(pre);
            if li + 1 < n {
                let (z, cache) = match self.norms.get(li).filter(|_| self.use_norm) {
                    Some(norm) => {
                        let (z, c) = norm.forward(&out);
                        (z, Some(c))
                    }
                    None => (out.clone(), None),
                };
                h = z.iter().map(|v| self.activation.apply(*v)).collect();
                tape.junction_in.push(out);
                tape.norm_caches.push(cache);
                tape.act_in.push(z);
            } else {
                h = out;
            }
        }
        (Vector::new(h), tape)
    }

    pub fn backward(&self, tape: &Tape, g_y: &[f64]) -> Result<NetGrads> {
        let mut grads = self.zero_grads();
        self.backward_into(tape, g_y, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradients of `g_yᵀ y` into `grads` (from [`Self::zero_grads`]).
    pub fn backward_into(&self, tape: &Tape, g_y: &[f64], grads: &mut NetGrads) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::State("tape was recorded before the network changed".into()));
        }
        if g_y.len() != self.output_width() {
            return Err(Error::shape(
                "ToyNet::backward",
                format!("gradient length {}", self.output_width()),
                g_y.len(),
            ));
        }
        // Offsets of each layer's entries in `grads`.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut idx = 0;
        for l in &self.layers {
            offsets.push(idx);
            idx += l.adapter.as_ref().map_or(0, |a| a.trainables().len());
            idx += usize::from(l.bias_delta.is_some()) + usize::from(l.gamma.is_some());
        }
        let norm_offset = idx;

        let mut g = g_y.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = &tape.inputs[li];
            let mut slot = offsets[li];
            let n_adapter = layer.adapter.as_ref().map_or(0, |a| a.trainables().len());
            let beta_slot = slot + n_adapter;
            let gamma_slot = beta_slot + usize::from(layer.bias_delta.is_some());

            let g_pre: Vec<f64> = match &layer.gamma {
                Some(gamma) => {
                    let gg = &mut grads.entries[gamma_slot].data;
                    for i in 0..g.len() {
                        gg[i] += g[i] * tape.pre_gamma[li][i];
                    }
                    g.iter().zip(gamma.iter()).map(|(a, s)| a * s).collect()
                }
                None => g.clone(),
            };
            if layer.bias_delta.is_some() {
                let gb = &mut grads.entries[beta_slot].data;
                gb.iter_mut().zip(&g_pre).for_each(|(o, v)| *o += v);
            }
            if let Some(a) = &layer.adapter {
                let mut tmp: Vec<Grad> = grads.entries[slot..slot + n_adapter]
                    .iter_mut()
                    .zip(a.trainables())
                    .map(|(e, p)| Grad {
                        name: p.name,
                        shape: p.shape,
                        data: std::mem::take(&mut e.data),
                    })
                    .collect();
                a.accumulate_grads(layer.base.w0(), layer.base.beta0(), x, &tape.w0x[li], &g_pre, &mut tmp);
                for z in tmp {
                    grads.entries[slot].data = z.data;
                    slot += 1;
                }
            }
            if li == 0 {
                break;
            }
            let g_in = match &layer.adapter {
                Some(a) => a.input_grad(layer.base.w0(), x, &g_pre).into_inner(),
                None => layer.base.w0().matvec_t(&g_pre)?.into_inner(),
            };
            // Back through activation and norm of junction li - 1.
            let j = li - 1;
            let g_act: Vec<f64> = g_in
                .iter()
                .zip(&tape.act_in[j])
                .map(|(gv, z)| gv * self.activation.derivative(*z))
                .collect();
            g = match (&tape.norm_caches[j], self.norms.get(j)) {
                (Some(cache), Some(norm)) => {
                    if self.unfreeze.norms {
                        let (a, b) = grads.entries.split_at_mut(norm_offset + 2 * j + 1);
                        let gs = &mut a[norm_offset + 2 * j].data;
                        let gb = &mut b[0].data;
                        norm.backward(cache, &g_act, Some((gs, gb)))
                    } else {
                        norm.backward(cache, &g_act, None)
                    }
                }
                _ => g_act,
            };
        }
        Ok(())
    }
}

/// Free-function forms.
pub fn attach(net: ToyNet, kind: Option<AdapterKind>, unfreeze: Unfreeze, streams: &mut InitStreams) -> Result<ToyNet> {
    net.attach(kind, unfreeze, streams)
}

pub fn net_forward(net: &ToyNet, x: &Vector) -> Result<(Vector, Tape)> {
    net.forward(x)
}

pub fn net_backward(net: &ToyNet, tape: &Tape, g_y: &Vector) -> Result<NetGrads> {
    net.backward(tape, g_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Method;
    use crate::linalg::{dot, Stream};

    fn mlp(norm: bool, act: Activation, seed: u64) -> ToyNet {
        ToyNet::random_mlp(8, 16, 4, act, norm, &mut Rng::new(seed, Stream::WeightInit)).unwrap()
    }

    #[test]
    fn attach_counts() {
        let s = &mut InitStreams::new(0);
        let net = mlp(false, Activation::Gelu, 0)
            .attach(Some(Method::OneLora.into()), Unfreeze::NONE, s)
            .unwrap();
        assert_eq!(net.trainable_count(), 20);
        let net = mlp(true, Activation::Gelu, 0)
            .attach(Some(Method::OneLora.into()), "norms".parse().unwrap(), s)
            .unwrap();
        assert_eq!(net.trainable_count(), 20 + 32);
        let net = mlp(false, Activation::Gelu, 0)
            .attach(Some(Method::BitFit.into()), Unfreeze::NONE, s)
            .unwrap();
        assert_eq!(net.trainable_count(), 20);
    }

    #[test]
    fn count_is_additive() {
        for m in Method::ALL {
            for flags in ["", "biases", "gamma", "norms", "biases,gamma,norms"] {
                let net = mlp(true, Activation::Gelu, 1)
                    .attach(Some(m.into()), flags.parse().unwrap(), &mut InitStreams::new(1))
                    .unwrap();
                assert_eq!(net.trainable_count(), net.expected_trainable_count(), "{m} {flags}");
            }
        }
    }

    #[test]
    fn unknown_flag_rejected() {
        assert!(matches!("biases,heads".parse::<Unfreeze>(), Err(Error::Argument(_))));
        let net = ToyNet::single(FrozenLinear::without_bias(Matrix::identity(2)).unwrap());
        assert!(net
            .attach(None, "norms".parse().unwrap(), &mut InitStreams::new(0))
            .is_err());
    }

    #[test]
    fn identity_pipeline() {
        let l1 = FrozenLinear::without_bias(Matrix::identity(3)).unwrap();
        let l2 = FrozenLinear::without_bias(Matrix::identity(3)).unwrap();
        let net = ToyNet::mlp(l1, l2, Activation::Identity, false)
            .unwrap()
            .attach(Some(Method::OneLora.into()), Unfreeze::NONE, &mut InitStreams::new(0))
            .unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y.as_slice(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn gelu_pushes_large_inputs_positive() {
        let z: Vec<f64> = (0..100).map(|i| 5.0 + i as f64 * 0.1).collect();
        let mean = z.iter().map(|v| Activation::Gelu.apply(*v)).sum::<f64>() / z.len() as f64;
        assert!(mean > 0.0);
        assert!((Activation::Gelu.apply(8.0) - 8.0).abs() < 1e-12);
        assert!(Activation::Gelu.apply(-8.0).abs() < 1e-12);
    }

    #[test]
    fn single_layer_matches_adapter() {
        let mut rng = Rng::new(3, Stream::Data);
        let base = FrozenLinear::random(5, 7, 1.0, &mut rng).unwrap();
        let mut net = ToyNet::single(base.clone())
            .attach(Some(Method::OneLora.into()), Unfreeze::NONE, &mut InitStreams::new(0))
            .unwrap();
        net.perturb(&mut rng, 1.0);
        let x = rng.normal_vec(7);
        let (y, tape) = net.forward(&x).unwrap();
        let a = net.layers()[0].adapter.as_ref().unwrap();
        assert_eq!(y, a.forward(base.w0(), base.beta0(), &x).unwrap());
        let g = rng.normal_vec(5);
        let ng = net.backward(&tape, &g).unwrap();
        let ag = a.backward(base.w0(), base.beta0(), &x, &g).unwrap();
        assert_eq!(ng.entries[0].data, ag.grads[0].data);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = mlp(true, Activation::Gelu, 2)
            .attach(
                Some(Method::Lora.into()),
                "biases,gamma,norms".parse().unwrap(),
                &mut InitStreams::new(2),
            )
            .unwrap();
        let (_, tape) = net.forward(&[0.5; 8]).unwrap();
        let g = net.backward(&tape, &[0.0; 4]).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_tape_rejected() {
        let mut net = mlp(false, Activation::Gelu, 2)
            .attach(Some(Method::OneLora.into()), Unfreeze::NONE, &mut InitStreams::new(2))
            .unwrap();
        let (_, tape) = net.forward(&[0.5; 8]).unwrap();
        net.perturb(&mut Rng::new(0, Stream::Perturb), 0.1);
        assert!(matches!(net.backward(&tape, &[1.0; 4]), Err(Error::State(_))));
    }

    #[test]
    fn biases_alone_is_bitfit() {
        let mut rng = Rng::new(4, Stream::Data);
        let base = FrozenLinear::random(3, 4, 1.0, &mut rng).unwrap();
        let mut net = ToyNet::single(base.clone())
            .attach(None, "biases".parse().unwrap(), &mut InitStreams::new(0))
            .unwrap();
        let mut bitfit =
            crate::adapters::make_adapter(Method::BitFit.into(), base.w0(), &mut InitStreams::new(0)).unwrap();
        let beta = rng.normal_vec(3);
        net.set_flat_params(&beta).unwrap();
        bitfit.set_flat(&beta).unwrap();
        let x = rng.normal_vec(4);
        assert_eq!(
            net.forward(&x).unwrap().0,
            bitfit.forward(base.w0(), base.beta0(), &x).unwrap()
        );
    }

    #[test]
    fn gamma_and_biases_is_difffit() {
        let mut rng = Rng::new(5, Stream::Data);
        let base = FrozenLinear::random(3, 4, 1.0, &mut rng).unwrap();
        let mut net = ToyNet::single(base.clone())
            .attach(None, "gamma,biases".parse().unwrap(), &mut InitStreams::new(0))
            .unwrap();
        let mut diff =
            crate::adapters::make_adapter(Method::DiffFit.into(), base.w0(), &mut InitStreams::new(0)).unwrap();
        let beta = rng.normal_vec(3);
        let gamma = rng.normal_vec(3);
        // net order: beta then gamma; adapter order: gamma then beta
        net.set_flat_params(&[beta.clone(), gamma.clone()].concat()).unwrap();
        diff.set_flat(&[gamma, beta].concat()).unwrap();
        let x = rng.normal_vec(4);
        let a = net.forward(&x).unwrap().0;
        let b = diff.forward(base.w0(), base.beta0(), &x).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn head_is_excluded() {
        let net = mlp(false, Activation::Gelu, 0)
            .with_head()
            .attach(Some(Method::OneLora.into()), Unfreeze::NONE, &mut InitStreams::new(0))
            .unwrap();
        assert!(net.layers()[1].adapter.is_none());
        assert_eq!(net.trainable_count(), 16);
    }

    #[test]
    fn layer_norm_gradient() {
        let norm = LayerNorm {
            scale: Vector::new(vec![1.0, 2.0, 0.5, -1.0]),
            shift: Vector::new(vec![0.0, 1.0, 0.0, 0.5]),
        };
        let z = [0.3, -1.2, 2.0, 0.7];
        let g = [1.0, -0.5, 0.25, 2.0];
        let (_, cache) = norm.forward(&z);
        let analytic = norm.backward(&cache, &g, None);
        let h = 1e-6;
        for i in 0..4 {
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            let num = (dot(&norm.forward(&zp).0, &g) - dot(&norm.forward(&zm).0, &g)) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-8);
        }
    }
}
