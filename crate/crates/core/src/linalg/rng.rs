//! Seeded, stream-separated random numbers.
//!
//! Backed by ChaCha8, a counter-based generator whose output depends only
//! on `(seed, stream)`. Normal draws use Box-Muller with the pure-Rust `libm`
//! transcendental functions so the sequence is identical on every platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::matrix::{Matrix, Vector};
use crate::error::{Error, Result};

/// Independent random streams. Each purpose draws from its own stream so that
/// adding draws for one purpose never shifts another's sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    WeightInit = 0,
    Data = 1,
    VeraFrozen = 2,
    Teacher = 3,
    Alignment = 4,
    Compression = 5,
    Perturb = 6,
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            seed,
            stream,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform01(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`; callers guarantee `lo < hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        loop {
            let x = lo + (hi - lo) * self.uniform01();
            if x < hi {
                return x;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        let r = (-2.0 * libm::log(u1)).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }

    /// Uniformly random unit vector in `R^n` (`n ≥ 1`).
    pub fn unit_vector(&mut self, n: usize) -> Vector {
        loop {
            let v = Vector::new(self.normal_vec(n));
            if let Some(u) = v.normalized() {
                return u;
            }
        }
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            p.swap(i, j);
        }
        p
    }
}

/// `n` uniform draws on `[lo, hi)`.
pub fn seeded_uniform(rng: &mut Rng, lo: f64, hi: f64, n: usize) -> Result<Vector> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::arg(format!("seeded_uniform requires lo < hi, got [{lo}, {hi})")));
    }
    Ok(Vector::new((0..n).map(|_| rng.uniform(lo, hi)).collect()))
}
