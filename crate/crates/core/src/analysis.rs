//! Verification oracles and the PCA alignment study.

use std::io::Write;

use crate::adapters::{AdapterKind, AdapterState, InitStreams, Method};
use crate::error::{Error, Result};
use crate::linalg::{dot, svd, Matrix, Rng, Stream, Vector};
use crate::model::{Activation, FrozenLinear, ToyNet, Unfreeze};
use crate::train::{train, TaskSpec, TrainConfig};

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Scheme used by the gradient-check suite: plain central differences at
/// `DEFAULT_FD_STEP` lose several digits on coordinates whose gradient is
/// tiny next to the output, extrapolated ones do not.
pub const GRADCHECK_SCHEME: FdScheme = FdScheme::Ridders { h: 1e-2 };

/// Relative error used by [`fd_gradcheck`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Anything with trainables whose scalar objective `g_outᵀ f(x)` can be
/// differentiated both analytically and numerically.
pub trait Differentiable {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<()>;
    fn output(&self, x: &[f64]) -> Result<Vector>;
    /// Output up to a parameter-independent offset; differenced for the
    /// parameter checks. Defaults to [`Self::output`].
    fn param_output(&self, x: &[f64]) -> Result<Vector> {
        self.output(x)
    }
    /// `(∂/∂θ, ∂/∂x)` of `g_outᵀ f(x)`; the input gradient may be omitted.
    fn gradients(&self, x: &[f64], g_out: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)>;
}

/// An adapter evaluated on its frozen layer.
#[derive(Debug, Clone)]
pub struct AdaptedLayer {
    pub base: FrozenLinear,
    pub adapter: AdapterState,
}

impl Differentiable for AdaptedLayer {
    fn params(&self) -> Vec<f64> {
        self.adapter.flat()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.adapter.set_flat(flat)
    }

    fn output(&self, x: &[f64]) -> Result<Vector> {
        self.adapter.forward(self.base.w0(), self.base.beta0(), x)
    }

    fn param_output(&self, x: &[f64]) -> Result<Vector> {
        self.adapter.delta(self.base.w0(), self.base.beta0(), x)
    }

    fn gradients(&self, x: &[f64], g_out: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let b = self.adapter.backward(self.base.w0(), self.base.beta0(), x, g_out)?;
        let flat = b.grads.into_iter().flat_map(|g| g.data).collect();
        Ok((flat, Some(b.g_in.into_inner())))
    }
}

impl Differentiable for ToyNet {
    fn params(&self) -> Vec<f64> {
        self.flat_params()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.set_flat_params(flat)
    }

    fn output(&self, x: &[f64]) -> Result<Vector> {
        Ok(self.forward(x)?.0)
    }

    fn gradients(&self, x: &[f64], g_out: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let (_, tape) = self.forward(x)?;
        Ok((self.backward(&tape, g_out)?.flat(), None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinates compared (parameters plus input entries).
    pub checked: usize,
}

/// How the numeric derivative is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdScheme {
    /// `(f(θ+h) − f(θ−h)) / 2h`.
    Central { h: f64 },
    /// Richardson extrapolation of two central differences,
    /// `(4·D(h/2) − D(h)) / 3`; error `O(h⁴)`, so a larger `h` can be used
    /// and roundoff stays small for nearly-zero gradients.
    Richardson { h: f64 },
    /// Ridders' polynomial extrapolation: central differences at steps
    /// shrinking from `h` by 1.4, tabulated to higher orders; returns the
    /// entry with the smallest estimated error. Stops once the error grows.
    Ridders { h: f64 },
}

impl FdScheme {
    fn step(self) -> f64 {
        match self {
            FdScheme::Central { h } | FdScheme::Richardson { h } | FdScheme::Ridders { h } => h,
        }
    }

    fn derivative(self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let mut central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
        match self {
            FdScheme::Central { h } => central(h),
            FdScheme::Richardson { h } => {
                let coarse = central(h)?;
                let fine = central(0.5 * h)?;
                Ok((4.0 * fine - coarse) / 3.0)
            }
            FdScheme::Ridders { h } => ridders(&mut central, h),
        }
    }
}

fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const DEPTH: usize = 10;
    const SAFE: f64 = 2.0;
    let mut step = h;
    let mut prev = vec![central(step)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    for _ in 1..DEPTH {
        step /= SHRINK;
        let mut row = vec![central(step)?];
        let mut fac = SHRINK2;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        let diverging = (row[row.len() - 1] - prev[prev.len() - 1]).abs() >= SAFE * err;
        prev = row;
        if diverging {
            break;
        }
    }
    Ok(best)
}

/// Central-difference check of every trainable and (when available) every
/// input coordinate.
pub fn fd_gradcheck<T: Differentiable + ?Sized>(target: &mut T, x: &[f64], g_out: &[f64], h: f64) -> Result<GradCheck> {
    fd_gradcheck_with(target, x, g_out, FdScheme::Central { h })
}

pub fn fd_gradcheck_with<T: Differentiable + ?Sized>(
    target: &mut T,
    x: &[f64],
    g_out: &[f64],
    scheme: FdScheme,
) -> Result<GradCheck> {
    let h = scheme.step();
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::arg("finite-difference step must be > 0"));
    }
    let (analytic, g_in) = target.gradients(x, g_out)?;
    let theta = target.params();
    if analytic.len() != theta.len() {
        return Err(Error::shape("fd_gradcheck", theta.len(), analytic.len()));
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let numeric = scheme.derivative(|t| {
            probe[i] = theta[i] + t;
            target.set_params(&probe)?;
            Ok(dot(&target.param_output(x)?, g_out))
        })?;
        probe[i] = theta[i];
        worst = worst.max(relative_error(analytic[i], numeric));
        checked += 1;
    }
    target.set_params(&theta)?;
    if let Some(g_in) = g_in {
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let numeric = scheme.derivative(|t| {
                xp[i] = x[i] + t;
                Ok(dot(&target.output(&xp)?, g_out))
            })?;
            xp[i] = x[i];
            worst = worst.max(relative_error(g_in[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Cosines between candidate compression vectors and the right singular
/// vectors (input-side principal components) of one weight update.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub layer: usize,
    pub singular_values: Vector,
    /// Unit-normalized candidates by name: `ones`, `random`, optionally `learned`.
    pub candidates: Vec<(String, Vector)>,
    /// `cosines[c][i] = |vᵢ · candidate_c|`.
    pub cosines: Vec<Vec<f64>>,
}

impl AlignmentReport {
    pub fn cosine(&self, candidate: &str, pc: usize) -> Option<f64> {
        let c = self.candidates.iter().position(|(n, _)| n == candidate)?;
        self.cosines[c].get(pc).copied()
    }

    /// Rows `layer,pc_index,singular_value,candidate,abs_cosine`.
    pub fn write_csv<W: Write>(reports: &[AlignmentReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io {
            path: "<alignment csv>".into(),
            source: e.into(),
        };
        w.write_record(["layer", "pc_index", "singular_value", "candidate", "abs_cosine"])
            .map_err(io)?;
        for r in reports {
            for (c, (name, _)) in r.candidates.iter().enumerate() {
                for (i, cos) in r.cosines[c].iter().enumerate() {
                    w.write_record([
                        r.layer.to_string(),
                        i.to_string(),
                        r.singular_values[i].to_string(),
                        name.clone(),
                        cos.to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "<alignment csv>".into(),
            source: e,
        })
    }
}

/// PCA of `dw` (`d × k`) against `ones = 1/√k`, a unit vector from `rng`
/// and, when given, the normalized learned compression vector.
pub fn pca_alignment(dw: &Matrix, learned_a: Option<&Vector>, rng: &mut Rng) -> Result<AlignmentReport> {
    let k = dw.cols();
    let mut candidates = vec![
        ("ones".to_string(), Vector::filled(k, 1.0 / (k as f64).sqrt())),
        ("random".to_string(), rng.unit_vector(k)),
    ];
    if let Some(a) = learned_a {
        if a.len() != k {
            return Err(Error::shape(
                "pca_alignment",
                format!("learned vector length {k}"),
                a.len(),
            ));
        }
        let unit = a.normalized().unwrap_or_else(|| Vector::zeros(k));
        candidates.push(("learned".to_string(), unit));
    }
    let sv = svd(dw)?;
    let zero = sv.s.iter().all(|s| *s == 0.0);
    let pcs = sv.s.len();
    let cosines = candidates
        .iter()
        .map(|(_, c)| {
            (0..pcs)
                .map(|i| {
                    if zero {
                        0.0
                    } else {
                        dot(&sv.v.column(i), c).abs().min(1.0)
                    }
                })
                .collect()
        })
        .collect();
    Ok(AlignmentReport {
        layer: 0,
        singular_values: sv.s,
        candidates,
        cosines,
    })
}

fn residual(x: &Matrix, y: &Matrix, w0: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::arg("oracle needs at least one sample"));
    }
    if y.rows() != x.rows() {
        return Err(Error::shape("oracle", format!("{} target rows", x.rows()), y.rows()));
    }
    if w0.shape() != (y.cols(), x.cols()) {
        return Err(Error::shape(
            "oracle",
            format!("W0 {}x{}", y.cols(), x.cols()),
            format!("{}x{}", w0.rows(), w0.cols()),
        ));
    }
    y.sub(&x.matmul(&w0.transpose())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFit {
    pub vector: Vector,
    pub mse: f64,
}

/// Best bias-only fit: `β̂ = mean(Y − XW₀ᵀ)` over samples.
pub fn bitfit_floor_oracle(x: &Matrix, y: &Matrix, w0: &Matrix) -> Result<OracleFit> {
    let r = residual(x, y, w0)?;
    let (n, d) = r.shape();
    let mut beta = vec![0.0; d];
    for i in 0..n {
        beta.iter_mut().zip(r.row(i)).for_each(|(b, v)| *b += v);
    }
    beta.iter_mut().for_each(|b| *b /= n as f64);
    let mut sse = 0.0;
    for i in 0..n {
        sse += r.row(i).iter().zip(&beta).map(|(v, b)| (v - b).powi(2)).sum::<f64>();
    }
    Ok(OracleFit {
        vector: Vector::new(beta),
        mse: sse / (n * d) as f64,
    })
}

/// Best `ΔW = b 1ᵀ` fit: `b̂ = Rᵀs / (sᵀs)` with per-sample sums `s`.
pub fn ones_ls_oracle(x: &Matrix, y: &Matrix, w0: &Matrix) -> Result<OracleFit> {
    let r = residual(x, y, w0)?;
    let (n, d) = r.shape();
    let s: Vec<f64> = (0..n).map(|i| x.row(i).iter().sum()).collect();
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::Degenerate("every sample has zero feature sum".into()));
    }
    let b = r.matvec_t(&s)?.scaled(1.0 / ss);
    let mut sse = 0.0;
    for i in 0..n {
        sse += r
            .row(i)
            .iter()
            .zip(b.iter())
            .map(|(v, bj)| (v - s[i] * bj).powi(2))
            .sum::<f64>();
    }
    Ok(OracleFit {
        vector: b,
        mse: sse / (n * d) as f64,
    })
}

/// Weight update `W' − W₀` of a trained single-layer adapter.
pub fn weight_update(net: &ToyNet, layer: usize) -> Result<Matrix> {
    let l = net
        .layers()
        .get(layer)
        .ok_or_else(|| Error::arg(format!("no layer {layer}")))?;
    let a = l
        .adapter
        .as_ref()
        .ok_or_else(|| Error::State(format!("layer {layer} has no adapter")))?;
    let (merged, _) = a.merge(l.base.w0(), l.base.beta0())?;
    merged.sub(l.base.w0())
}

/// Trains full fine-tuning on `task` and reports the alignment of every
/// layer's update. A rank-1 LoRA run on the same task supplies the
/// `learned` candidate.
pub fn alignment_study(task: &TaskSpec, steps: usize, lr: f64) -> Result<Vec<AlignmentReport>> {
    let full = train(
        &TrainConfig::new(task.clone(), Method::All)
            .with_steps(steps)
            .with_lr(lr),
    )?;
    let lora = train(
        &TrainConfig::new(task.clone(), AdapterKind::new(Method::Lora))
            .with_steps(steps)
            .with_lr(lr),
    )?;
    let mut rng = Rng::new(task.seed, Stream::Alignment);
    let mut reports = Vec::new();
    for layer in 0..full.net.layers().len() {
        let dw = weight_update(&full.net, layer)?;
        let learned = lora.net.layers()[layer]
            .adapter
            .as_ref()
            .and_then(|a| a.trainables().into_iter().find(|p| p.name == "A"))
            .map(|p| Vector::new(p.data[..dw.cols()].to_vec()));
        let mut report = pca_alignment(&dw, learned.as_ref(), &mut rng)?;
        report.layer = layer;
        reports.push(report);
    }
    Ok(reports)
}

/// One line of [`gradcheck_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    /// Method name, or `net:<method>` for the full network.
    pub target: String,
    pub k: usize,
    pub d: usize,
    pub max_rel_error: f64,
}

/// Dimensions exercised by [`gradcheck_suite`].
pub const GRADCHECK_DIMS: [(usize, usize); 5] = [(2, 3), (4, 4), (7, 5), (9, 16), (16, 12)];

/// Checks every method on a single layer at [`GRADCHECK_DIMS`] and inside a
/// two-layer GELU network with LayerNorm and every unfreeze flag, each at
/// `states` random states. Rows report the worst error per target and size.
pub fn gradcheck_suite(states: usize, seed: u64, scheme: FdScheme) -> Result<Vec<GradCheckRow>> {
    let mut rng = Rng::new(seed, Stream::Perturb);
    let mut rows = Vec::new();
    for method in Method::ALL {
        for (k, d) in GRADCHECK_DIMS {
            let kind = AdapterKind::new(method).with_rank(if method.uses_rank() { 2 } else { 1 });
            let mut worst: f64 = 0.0;
            for s in 0..states {
                let base = FrozenLinear::random(d, k, 1.0, &mut rng)?;
                let adapter = crate::adapters::make_adapter(kind, base.w0(), &mut InitStreams::new(seed + s as u64))?;
                let mut layer = AdaptedLayer { base, adapter };
                layer.adapter.perturb(&mut rng, 0.5);
                let x = rng.normal_vec(k);
                let g = rng.normal_vec(d);
                worst = worst.max(fd_gradcheck_with(&mut layer, &x, &g, scheme)?.max_rel_error);
            }
            rows.push(GradCheckRow {
                target: method.name().to_string(),
                k,
                d,
                max_rel_error: worst,
            });
        }
        let (k, hid, d) = (6, 8, 4);
        let mut worst: f64 = 0.0;
        for s in 0..states {
            let mut net = ToyNet::random_mlp(k, hid, d, Activation::Gelu, true, &mut rng)?.attach(
                Some(method.into()),
                Unfreeze {
                    biases: true,
                    gamma: true,
                    norms: true,
                },
                &mut InitStreams::new(seed + s as u64),
            )?;
            net.perturb(&mut rng, 0.3);
            let x = rng.normal_vec(k);
            let g = rng.normal_vec(d);
            worst = worst.max(fd_gradcheck_with(&mut net, &x, &g, scheme)?.max_rel_error);
        }
        rows.push(GradCheckRow {
            target: format!("net:{}", method.name()),
            k,
            d,
            max_rel_error: worst,
        });
    }
    Ok(rows)
}
