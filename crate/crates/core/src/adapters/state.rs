use super::kind::{AdapterKind, Method, NormGradient};
use super::mora::{GroupLayout, RopeLayout};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Rng, Stream, Vector};

/// Initial value of VeRA's trainable `r`-vector (the "d-vector").
pub const VERA_DVEC_INIT: f64 = 0.1;

/// Row norms below this are treated as zero by DoRA.
const DORA_NORM_FLOOR: f64 = 1e-300;

/// Random streams consumed while building adapters.
#[derive(Debug, Clone)]
pub struct InitStreams {
    pub weight_init: Rng,
    pub vera_frozen: Rng,
    pub compression: Rng,
}

impl InitStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            weight_init: Rng::new(seed, Stream::WeightInit),
            vera_frozen: Rng::new(seed, Stream::VeraFrozen),
            compression: Rng::new(seed, Stream::Compression),
        }
    }
}

/// Read-only view of one trainable tensor.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a> {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub data: &'a mut [f64],
}

/// Gradient of one trainable tensor, same name and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub grads: Vec<Grad>,
    /// Gradient with respect to the layer input.
    pub g_in: Vector,
}

impl GradBundle {
    pub fn get(&self, name: &str) -> Option<&Grad> {
        self.grads.iter().find(|g| g.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    OneLora {
        b: Vector,
    },
    RandomCompression {
        b: Vector,
        a: Vector,
    },
    Lora {
        a: Matrix,
        b: Matrix,
    },
    Dora {
        a: Matrix,
        b: Matrix,
        m: Vector,
    },
    Vera {
        dvec: Vector,
        b: Vector,
        frozen_a: Matrix,
        frozen_b: Matrix,
    },
    Mora1 {
        m: Matrix,
        layout: GroupLayout,
    },
    Mora6 {
        m: Matrix,
        layout: RopeLayout,
    },
    BitFit {
        beta: Vector,
    },
    DiffFit {
        gamma: Vector,
        beta: Vector,
    },
    All {
        dw: Matrix,
        dbeta: Vector,
    },
}

/// Trainable (and frozen auxiliary) state of one adapter on a `d × k` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    kind: AdapterKind,
    k: usize,
    d: usize,
    params: Params,
}

/// Builds a zero-shift adapter for the frozen weight `w0` (`d × k`).
///
/// DoRA's magnitude starts at the row norms of `w0`; LoRA/DoRA draw `A` from
/// the weight-init stream, VeRA its frozen pair from the VeRA stream, and
/// the random-compression ablation its vector from the compression stream.
pub fn make_adapter(kind: AdapterKind, w0: &Matrix, streams: &mut InitStreams) -> Result<AdapterState> {
    kind.validate()?;
    let (d, k) = w0.shape();
    if k == 0 || d == 0 {
        return Err(Error::arg(format!("adapter needs k >= 1 and d >= 1, got k={k}, d={d}")));
    }
    let r = kind.rank;
    let a_bound = 1.0 / (k as f64).sqrt();
    let params = match kind.method {
        Method::OneLora => Params::OneLora { b: Vector::zeros(d) },
        Method::RandomCompression => Params::RandomCompression {
            b: Vector::zeros(d),
            a: Vector::new(streams.compression.normal_vec(k)),
        },
        Method::Lora => Params::Lora {
            a: streams.weight_init.uniform_matrix(r, k, -a_bound, a_bound),
            b: Matrix::zeros(d, r),
        },
        Method::Dora => Params::Dora {
            a: streams.weight_init.uniform_matrix(r, k, -a_bound, a_bound),
            b: Matrix::zeros(d, r),
            m: w0.row_norms(),
        },
        Method::Vera => {
            let b_bound = 1.0 / (r as f64).sqrt();
            Params::Vera {
                dvec: Vector::filled(r, VERA_DVEC_INIT),
                b: Vector::zeros(d),
                frozen_a: streams.vera_frozen.uniform_matrix(r, k, -a_bound, a_bound),
                frozen_b: streams.vera_frozen.uniform_matrix(d, r, -b_bound, b_bound),
            }
        }
        Method::Mora1 => {
            let layout = GroupLayout::new(k, d);
            Params::Mora1 {
                m: Matrix::zeros(layout.rank, layout.rank),
                layout,
            }
        }
        Method::Mora6 => {
            let layout = RopeLayout::new(k, d);
            Params::Mora6 {
                m: Matrix::zeros(layout.rank, layout.rank),
                layout,
            }
        }
        Method::BitFit => Params::BitFit { beta: Vector::zeros(d) },
        Method::DiffFit => Params::DiffFit {
            gamma: Vector::ones(d),
            beta: Vector::zeros(d),
        },
        Method::All => Params::All {
            dw: Matrix::zeros(d, k),
            dbeta: Vector::zeros(d),
        },
    };
    Ok(AdapterState { kind, k, d, params })
}

impl AdapterState {
    pub fn kind(&self) -> &AdapterKind {
        &self.kind
    }

    pub fn method(&self) -> Method {
        self.kind.method
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn trainables(&self) -> Vec<ParamRef<'_>> {
        fn v<'a>(name: &'static str, x: &'a Vector) -> ParamRef<'a> {
            ParamRef {
                name,
                shape: (x.len(), 1),
                data: x.as_slice(),
            }
        }
        fn m<'a>(name: &'static str, x: &'a Matrix) -> ParamRef<'a> {
            ParamRef {
                name,
                shape: x.shape(),
                data: x.as_slice(),
            }
        }
        match &self.params {
            Params::OneLora { b } | Params::RandomCompression { b, .. } => vec![v("b", b)],
            Params::Lora { a, b } => vec![m("A", a), m("B", b)],
            Params::Dora { a, b, m: mag } => vec![m("A", a), m("B", b), v("m", mag)],
            Params::Vera { dvec, b, .. } => vec![v("dvec", dvec), v("b", b)],
            Params::Mora1 { m: mm, .. } | Params::Mora6 { m: mm, .. } => vec![m("M", mm)],
            Params::BitFit { beta } => vec![v("beta", beta)],
            Params::DiffFit { gamma, beta } => vec![v("gamma", gamma), v("beta", beta)],
            Params::All { dw, dbeta } => vec![m("dW", dw), v("dbeta", dbeta)],
        }
    }

    pub fn trainables_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn v<'a>(name: &'static str, x: &'a mut Vector) -> ParamMut<'a> {
            ParamMut {
                name,
                shape: (x.len(), 1),
                data: x.as_mut_slice(),
            }
        }
        fn m<'a>(name: &'static str, x: &'a mut Matrix) -> ParamMut<'a> {
            let shape = x.shape();
            ParamMut {
                name,
                shape,
                data: x.as_mut_slice(),
            }
        }
        match &mut self.params {
            Params::OneLora { b } | Params::RandomCompression { b, .. } => vec![v("b", b)],
            Params::Lora { a, b } => vec![m("A", a), m("B", b)],
            Params::Dora { a, b, m: mag } => vec![m("A", a), m("B", b), v("m", mag)],
            Params::Vera { dvec, b, .. } => vec![v("dvec", dvec), v("b", b)],
            Params::Mora1 { m: mm, .. } | Params::Mora6 { m: mm, .. } => vec![m("M", mm)],
            Params::BitFit { beta } => vec![v("beta", beta)],
            Params::DiffFit { gamma, beta } => vec![v("gamma", gamma), v("beta", beta)],
            Params::All { dw, dbeta } => vec![m("dW", dw), v("dbeta", dbeta)],
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.trainables().iter().map(|p| p.data.len()).sum()
    }

    /// Named frozen tensors (VeRA's random pair, the ablation's random vector).
    pub fn frozen_constants(&self) -> Vec<ParamRef<'_>> {
        match &self.params {
            Params::RandomCompression { a, .. } => vec![ParamRef {
                name: "a",
                shape: (a.len(), 1),
                data: a.as_slice(),
            }],
            Params::Vera { frozen_a, frozen_b, .. } => vec![
                ParamRef {
                    name: "A",
                    shape: frozen_a.shape(),
                    data: frozen_a.as_slice(),
                },
                ParamRef {
                    name: "B",
                    shape: frozen_b.shape(),
                    data: frozen_b.as_slice(),
                },
            ],
            _ => Vec::new(),
        }
    }

    /// Adds `N(0, std²)` noise to every trainable entry.
    pub fn perturb(&mut self, rng: &mut Rng, std: f64) {
        for p in self.trainables_mut() {
            for x in p.data.iter_mut() {
                *x += std * rng.normal();
            }
        }
    }

    /// Copies a flat parameter vector (in [`Self::trainables`] order) into the state.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.trainable_count();
        if flat.len() != n {
            return Err(Error::shape("AdapterState::set_flat", n, flat.len()));
        }
        let mut off = 0;
        for p in self.trainables_mut() {
            let len = p.data.len();
            p.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.trainables().iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Zero-filled gradient buffers matching [`Self::trainables`].
    pub fn zero_grads(&self) -> Vec<Grad> {
        self.trainables()
            .iter()
            .map(|p| Grad {
                name: p.name,
                shape: p.shape,
                data: vec![0.0; p.data.len()],
            })
            .collect()
    }

    fn check(&self, w0: &Matrix, beta0: Option<&[f64]>, x: &[f64]) -> Result<()> {
        if w0.shape() != (self.d, self.k) {
            return Err(Error::shape(
                "adapter",
                format!("W0 {}x{}", self.d, self.k),
                format!("{}x{}", w0.rows(), w0.cols()),
            ));
        }
        if let Some(b) = beta0 {
            if b.len() != self.d {
                return Err(Error::shape("adapter", format!("beta0 length {}", self.d), b.len()));
            }
        }
        if x.len() != self.k {
            return Err(Error::shape("adapter", format!("input length {}", self.k), x.len()));
        }
        Ok(())
    }

    /// Adapted layer output.
    pub fn forward(&self, w0: &Matrix, beta0: &[f64], x: &[f64]) -> Result<Vector> {
        self.check(w0, Some(beta0), x)?;
        let w0x = w0.matvec(x)?;
        Ok(self.forward_with_base(w0, beta0, x, &w0x))
    }

    /// As [`Self::forward`] with `w0x = W₀x` already computed. Shapes are
    /// assumed checked.
    pub fn forward_with_base(&self, w0: &Matrix, beta0: &[f64], x: &[f64], w0x: &[f64]) -> Vector {
        let mut out: Vec<f64> = w0x.iter().zip(beta0).map(|(a, b)| a + b).collect();
        match &self.params {
            Params::OneLora { b } => {
                let s: f64 = x.iter().sum();
                add_scaled(&mut out, s, b);
            }
            Params::RandomCompression { b, a } => {
                add_scaled(&mut out, dot(a, x), b);
            }
            Params::Lora { a, b } => {
                let u = a.matvec(x).expect("checked");
                let bu = b.matvec(&u).expect("checked");
                add_scaled(&mut out, self.kind.scale, &bu);
            }
            Params::Dora { a, b, m } => {
                let dora = DoraRows::new(w0, a, b, self.kind.scale);
                let u = a.matvec(x).expect("checked");
                for i in 0..self.d {
                    let z = w0x[i] + self.kind.scale * dot(b.row(i), &u);
                    let n = dora.norms[i];
                    out[i] = beta0[i] + if n > DORA_NORM_FLOOR { z * (m[i] / n) } else { 0.0 };
                }
            }
            Params::Vera {
                dvec,
                b,
                frozen_a,
                frozen_b,
            } => {
                let v = frozen_a.matvec(x).expect("checked").hadamard(dvec).expect("rank");
                let w = frozen_b.matvec(&v).expect("rank");
                for i in 0..self.d {
                    out[i] += b[i] * w[i];
                }
            }
            Params::Mora1 { m, layout } => {
                let h = m.matvec(&layout.compress(x)).expect("rank");
                layout.decompress_into(&h, &mut out);
            }
            Params::Mora6 { m, layout } => {
                let flat = mora6_flat(m, layout, x);
                layout.decompress_into(&flat, &mut out);
            }
            Params::BitFit { beta } => add_scaled(&mut out, 1.0, beta),
            Params::DiffFit { gamma, beta } => {
                for i in 0..self.d {
                    out[i] = gamma[i] * (out[i] + beta[i]);
                }
            }
            Params::All { dw, dbeta } => {
                let dx = dw.matvec(x).expect("checked");
                for i in 0..self.d {
                    out[i] += dx[i] + dbeta[i];
                }
            }
        }
        Vector::new(out)
    }

    /// `forward(x) − (W₀x + β₀)`, computed without first forming the frozen
    /// output so that small shifts keep their relative precision.
    pub fn delta(&self, w0: &Matrix, beta0: &[f64], x: &[f64]) -> Result<Vector> {
        self.check(w0, Some(beta0), x)?;
        let d = self.d;
        let mut out = vec![0.0; d];
        match &self.params {
            Params::Dora { a, b, m } => {
                let w0x = w0.matvec(x)?;
                let dora = DoraRows::new(w0, a, b, self.kind.scale);
                let u = a.matvec(x)?;
                for i in 0..d {
                    let n = dora.norms[i];
                    out[i] = if n > DORA_NORM_FLOOR {
                        w0x[i] * (m[i] / n - 1.0) + self.kind.scale * dot(b.row(i), &u) * (m[i] / n)
                    } else {
                        -w0x[i]
                    };
                }
            }
            Params::DiffFit { gamma, beta } => {
                let w0x = w0.matvec(x)?;
                for i in 0..d {
                    out[i] = (gamma[i] - 1.0) * (w0x[i] + beta0[i]) + gamma[i] * beta[i];
                }
            }
            _ => {
                let zeros = vec![0.0; d];
                return Ok(self.forward_with_base(w0, &zeros, x, &zeros));
            }
        }
        Ok(Vector::new(out))
    }

    /// Exact gradients of `g_outᵀ · forward(x)` with respect to every trainable
    /// and to `x`.
    pub fn backward(&self, w0: &Matrix, beta0: &[f64], x: &[f64], g_out: &[f64]) -> Result<GradBundle> {
        self.check(w0, Some(beta0), x)?;
        if g_out.len() != self.d {
            return Err(Error::shape(
                "adapter backward",
                format!("g_out length {}", self.d),
                g_out.len(),
            ));
        }
        let w0x = w0.matvec(x)?;
        let mut grads = self.zero_grads();
        self.accumulate_grads(w0, beta0, x, &w0x, g_out, &mut grads);
        let g_in = self.input_grad(w0, x, g_out);
        Ok(GradBundle { grads, g_in })
    }

    /// Adds the trainable gradients for one sample into `grads` (as returned by
    /// [`Self::zero_grads`]). Shapes are assumed checked.
    pub fn accumulate_grads(&self, w0: &Matrix, beta0: &[f64], x: &[f64], w0x: &[f64], g: &[f64], grads: &mut [Grad]) {
        let sc = self.kind.scale;
        match &self.params {
            Params::OneLora { .. } => {
                let s: f64 = x.iter().sum();
                add_scaled(&mut grads[0].data, s, g);
            }
            Params::RandomCompression { a, .. } => {
                add_scaled(&mut grads[0].data, dot(a, x), g);
            }
            Params::Lora { a, b } => {
                let r = a.rows();
                let u = a.matvec(x).expect("checked");
                let btg = b.matvec_t(g).expect("checked");
                let (ga, gb) = grads.split_at_mut(1);
                for l in 0..r {
                    add_scaled(&mut ga[0].data[l * self.k..(l + 1) * self.k], sc * btg[l], x);
                }
                for i in 0..self.d {
                    if g[i] != 0.0 {
                        add_scaled(&mut gb[0].data[i * r..(i + 1) * r], sc * g[i], &u);
                    }
                }
            }
            Params::Dora { a, b, m } => {
                let r = a.rows();
                let k = self.k;
                let dora = DoraRows::new(w0, a, b, sc);
                let u = a.matvec(x).expect("checked");
                let (ga, rest) = grads.split_at_mut(1);
                let (gb, gm) = rest.split_at_mut(1);
                // Row-gradient of W' for output i: c1 x - c2 w_i.
                let mut bc1 = vec![0.0; r];
                let mut bc2w = vec![0.0; r * k];
                for i in 0..self.d {
                    let n = dora.norms[i];
                    if n <= DORA_NORM_FLOOR {
                        continue;
                    }
                    let w = dora.row(i);
                    let z = w0x[i] + sc * dot(b.row(i), &u);
                    gm[0].data[i] += g[i] * z / n;
                    let c1 = g[i] * m[i] / n;
                    let c2 = match self.kind.dora_norm {
                        NormGradient::Full => g[i] * m[i] * z / (n * n * n),
                        NormGradient::Detached => 0.0,
                    };
                    for l in 0..r {
                        let wa = if c2 != 0.0 { dot(w, a.row(l)) } else { 0.0 };
                        gb[0].data[i * r + l] += sc * (c1 * u[l] - c2 * wa);
                        let bil = b[(i, l)];
                        bc1[l] += bil * c1;
                        if c2 != 0.0 && bil != 0.0 {
                            add_scaled(&mut bc2w[l * k..(l + 1) * k], bil * c2, w);
                        }
                    }
                }
                for l in 0..r {
                    let row = &mut ga[0].data[l * k..(l + 1) * k];
                    for j in 0..k {
                        row[j] += sc * (bc1[l] * x[j] - bc2w[l * k + j]);
                    }
                }
            }
            Params::Vera {
                dvec,
                b,
                frozen_a,
                frozen_b,
            } => {
                let u = frozen_a.matvec(x).expect("checked");
                let w = frozen_b.matvec(&u.hadamard(dvec).expect("rank")).expect("rank");
                let gb_vec: Vec<f64> = g.iter().zip(b.iter()).map(|(gi, bi)| gi * bi).collect();
                let q = frozen_b.matvec_t(&gb_vec).expect("rank");
                let (gd, gbv) = grads.split_at_mut(1);
                for l in 0..dvec.len() {
                    gd[0].data[l] += u[l] * q[l];
                }
                for i in 0..self.d {
                    gbv[0].data[i] += g[i] * w[i];
                }
            }
            Params::Mora1 { layout, .. } => {
                let c = layout.compress(x);
                let gh = layout.decompress_adjoint(g);
                add_outer(&mut grads[0].data, &gh, &c);
            }
            Params::Mora6 { layout, .. } => {
                let gf = layout.decompress_adjoint(g);
                for j in 0..layout.chunks {
                    let y = layout.chunk(x, j);
                    let go = &gf[j * layout.rank..(j + 1) * layout.rank];
                    add_outer(&mut grads[0].data, go, &y);
                }
            }
            Params::BitFit { .. } => add_scaled(&mut grads[0].data, 1.0, g),
            Params::DiffFit { gamma, beta } => {
                let (gg, gbeta) = grads.split_at_mut(1);
                for i in 0..self.d {
                    let pre = w0x[i] + beta0[i] + beta[i];
                    gg[0].data[i] += g[i] * pre;
                    gbeta[0].data[i] += g[i] * gamma[i];
                }
            }
            Params::All { .. } => {
                let (gw, gbeta) = grads.split_at_mut(1);
                add_outer(&mut gw[0].data, g, x);
                add_scaled(&mut gbeta[0].data, 1.0, g);
            }
        }
    }

    /// Gradient with respect to the layer input. Shapes are assumed checked.
    pub fn input_grad(&self, w0: &Matrix, x: &[f64], g: &[f64]) -> Vector {
        let sc = self.kind.scale;
        match &self.params {
            Params::OneLora { b } => {
                let mut gi = w0.matvec_t(g).expect("checked");
                let bg = dot(b, g);
                gi.iter_mut().for_each(|v| *v += bg);
                gi
            }
            Params::RandomCompression { b, a } => {
                let gi = w0.matvec_t(g).expect("checked");
                gi.axpy(dot(b, g), a).expect("checked")
            }
            Params::Lora { a, b } => {
                let gi = w0.matvec_t(g).expect("checked");
                let q = a.matvec_t(&b.matvec_t(g).expect("checked")).expect("checked");
                gi.axpy(sc, &q).expect("checked")
            }
            Params::Dora { a, b, m } => {
                let dora = DoraRows::new(w0, a, b, sc);
                let mut gi = vec![0.0; self.k];
                for i in 0..self.d {
                    let n = dora.norms[i];
                    if n > DORA_NORM_FLOOR {
                        add_scaled(&mut gi, g[i] * m[i] / n, dora.row(i));
                    }
                }
                let _ = x;
                Vector::new(gi)
            }
            Params::Vera {
                dvec,
                b,
                frozen_a,
                frozen_b,
            } => {
                let gi = w0.matvec_t(g).expect("checked");
                let gb: Vec<f64> = g.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
                let q = frozen_b.matvec_t(&gb).expect("rank").hadamard(dvec).expect("rank");
                let extra = frozen_a.matvec_t(&q).expect("rank");
                gi.axpy(1.0, &extra).expect("checked")
            }
            Params::Mora1 { m, layout } => {
                let mut gi = w0.matvec_t(g).expect("checked");
                let gc = m.matvec_t(&layout.decompress_adjoint(g)).expect("rank");
                layout.compress_adjoint(&gc, &mut gi);
                gi
            }
            Params::Mora6 { m, layout } => {
                let mut gi = w0.matvec_t(g).expect("checked");
                let gf = layout.decompress_adjoint(g);
                for j in 0..layout.chunks {
                    let gy = m.matvec_t(&gf[j * layout.rank..(j + 1) * layout.rank]).expect("rank");
                    layout.chunk_adjoint(j, &gy, &mut gi);
                }
                gi
            }
            Params::BitFit { .. } => w0.matvec_t(g).expect("checked"),
            Params::DiffFit { gamma, .. } => w0
                .matvec_t(&Vector::new(g.to_vec()).hadamard(gamma).expect("checked"))
                .expect("checked"),
            Params::All { dw, .. } => {
                let gi = w0.matvec_t(g).expect("checked");
                gi.axpy(1.0, &dw.matvec_t(g).expect("checked")).expect("checked")
            }
        }
    }

    /// Folds the adapter into a plain linear layer `(W_ft, β_ft)` with
    /// `W_ft x + β_ft = forward(x)` for every `x`.
    pub fn merge(&self, w0: &Matrix, beta0: &[f64]) -> Result<(Matrix, Vector)> {
        self.check(w0, Some(beta0), &vec![0.0; self.k])?;
        let beta0v = Vector::new(beta0.to_vec());
        let sc = self.kind.scale;
        let merged = match &self.params {
            Params::OneLora { b } => (w0.add(&Matrix::outer(b, &vec![1.0; self.k]))?, beta0v),
            Params::RandomCompression { b, a } => (w0.add(&Matrix::outer(b, a))?, beta0v),
            Params::Lora { a, b } => {
                let mut w = w0.clone();
                w.add_scaled_assign(sc, &b.matmul(a)?)?;
                (w, beta0v)
            }
            Params::Dora { a, b, m } => {
                let dora = DoraRows::new(w0, a, b, sc);
                let mut w = Matrix::zeros(self.d, self.k);
                for i in 0..self.d {
                    let n = dora.norms[i];
                    if n > DORA_NORM_FLOOR {
                        let f = m[i] / n;
                        for (o, v) in w.row_mut(i).iter_mut().zip(dora.row(i)) {
                            *o = f * v;
                        }
                    }
                }
                (w, beta0v)
            }
            Params::Vera {
                dvec,
                b,
                frozen_a,
                frozen_b,
            } => {
                let mut bd = frozen_b.clone();
                for i in 0..self.d {
                    for l in 0..dvec.len() {
                        bd[(i, l)] *= b[i] * dvec[l];
                    }
                }
                (w0.add(&bd.matmul(frozen_a)?)?, beta0v)
            }
            Params::Mora1 { .. } | Params::Mora6 { .. } => (w0.add(&self.materialize_shift())?, beta0v),
            Params::BitFit { beta } => (w0.clone(), beta0v.axpy(1.0, beta)?),
            Params::DiffFit { gamma, beta } => {
                let mut w = w0.clone();
                for i in 0..self.d {
                    w.row_mut(i).iter_mut().for_each(|v| *v *= gamma[i]);
                }
                (w, beta0v.axpy(1.0, beta)?.hadamard(gamma)?)
            }
            Params::All { dw, dbeta } => (w0.add(dw)?, beta0v.axpy(1.0, dbeta)?),
        };
        Ok(merged)
    }

    /// Explicit `d × k` matrix of a MoRA shift, built column by column from
    /// basis inputs.
    fn materialize_shift(&self) -> Matrix {
        let mut out = Matrix::zeros(self.d, self.k);
        let mut e = vec![0.0; self.k];
        for j in 0..self.k {
            e[j] = 1.0;
            let mut col = vec![0.0; self.d];
            match &self.params {
                Params::Mora1 { m, layout } => {
                    let h = m.matvec(&layout.compress(&e)).expect("rank");
                    layout.decompress_into(&h, &mut col);
                }
                Params::Mora6 { m, layout } => {
                    layout.decompress_into(&mora6_flat(m, layout, &e), &mut col);
                }
                _ => unreachable!("only MoRA shifts are materialized"),
            }
            for i in 0..self.d {
                out[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        out
    }
}

fn mora6_flat(m: &Matrix, layout: &RopeLayout, x: &[f64]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(layout.flat_len());
    for j in 0..layout.chunks {
        let y = layout.chunk(x, j);
        flat.extend(m.matvec(&y).expect("rank").into_inner());
    }
    flat
}

/// `W' = W₀ + s·BA`, materialized with its row norms.
struct DoraRows {
    k: usize,
    w: Vec<f64>,
    norms: Vec<f64>,
}

impl DoraRows {
    fn new(w0: &Matrix, a: &Matrix, b: &Matrix, scale: f64) -> Self {
        let (d, k) = w0.shape();
        let mut w = w0.as_slice().to_vec();
        for i in 0..d {
            let row = &mut w[i * k..(i + 1) * k];
            for l in 0..a.rows() {
                let bil = scale * b[(i, l)];
                if bil != 0.0 {
                    add_scaled(row, bil, a.row(l));
                }
            }
        }
        let norms = (0..d)
            .map(|i| dot(&w[i * k..(i + 1) * k], &w[i * k..(i + 1) * k]).sqrt())
            .collect();
        Self { k, w, norms }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.k..(i + 1) * self.k]
    }
}

fn add_scaled(out: &mut [f64], a: f64, v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += a * x;
    }
}

/// `out += u vᵀ` for a row-major `out`.
fn add_outer(out: &mut [f64], u: &[f64], v: &[f64]) {
    let n = v.len();
    for (i, ui) in u.iter().enumerate() {
        if *ui != 0.0 {
            add_scaled(&mut out[i * n..(i + 1) * n], *ui, v);
        }
    }
}
