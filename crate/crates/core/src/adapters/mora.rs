//! Fixed compression / decompression maps around MoRA's square matrix.

use super::kind::mora_rank;

const ROPE_BASE: f64 = 10_000.0;

/// Type 1: `k` inputs are cut into `r̂` contiguous groups of `⌈k/r̂⌉`
/// features (the last group may be short or empty) and summed; the `r̂`
/// outputs are tiled cyclically, output `i` reading slot `i mod r̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    pub k: usize,
    pub d: usize,
    pub rank: usize,
    pub group: usize,
}

impl GroupLayout {
    pub fn new(k: usize, d: usize) -> Self {
        let rank = mora_rank(k, d, 1, true);
        Self {
            k,
            d,
            rank,
            group: k.div_ceil(rank),
        }
    }

    pub fn compress(&self, x: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.rank];
        for (i, xi) in x.iter().enumerate() {
            c[i / self.group] += xi;
        }
        c
    }

    /// Adjoint of [`Self::compress`]: each input gets its group's gradient.
    pub fn compress_adjoint(&self, gc: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += gc[i / self.group];
        }
    }

    pub fn decompress_into(&self, h: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += h[i % self.rank];
        }
    }

    pub fn decompress_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let mut gh = vec![0.0; self.rank];
        for (i, gi) in g.iter().enumerate() {
            gh[i % self.rank] += gi;
        }
        gh
    }
}

/// Type 6: `x` is zero-padded to `c·r̂` entries (`c = ⌈k/r̂⌉`) and cut into `c`
/// chunks of length `r̂`. Chunk `j` is rotated pairwise by angles
/// `j·10000^(-2p/r̂)` (an odd trailing entry is left alone), multiplied by
/// `M`, and the chunks are concatenated; output `i` reads flat slot
/// `i mod c·r̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeLayout {
    pub k: usize,
    pub d: usize,
    pub rank: usize,
    pub chunks: usize,
    /// `(cos, sin)` per chunk and pair, row-major `chunks × rank/2`.
    rotations: Vec<(f64, f64)>,
}

impl RopeLayout {
    pub fn new(k: usize, d: usize) -> Self {
        let rank = mora_rank(k, d, 1, true);
        let chunks = k.div_ceil(rank);
        let pairs = rank / 2;
        let mut rotations = Vec::with_capacity(chunks * pairs);
        for j in 0..chunks {
            for p in 0..pairs {
                let freq = libm::pow(ROPE_BASE, -2.0 * p as f64 / rank as f64);
                let angle = j as f64 * freq;
                rotations.push((libm::cos(angle), libm::sin(angle)));
            }
        }
        Self {
            k,
            d,
            rank,
            chunks,
            rotations,
        }
    }

    pub fn flat_len(&self) -> usize {
        self.rank * self.chunks
    }

    /// Rotated chunk `j` of `x`.
    pub fn chunk(&self, x: &[f64], j: usize) -> Vec<f64> {
        let start = j * self.rank;
        let mut v: Vec<f64> = (0..self.rank)
            .map(|t| x.get(start + t).copied().unwrap_or(0.0))
            .collect();
        self.rotate(j, &mut v, 1.0);
        v
    }

    /// Adds the adjoint of [`Self::chunk`] applied to `gy` into `out`.
    pub fn chunk_adjoint(&self, j: usize, gy: &[f64], out: &mut [f64]) {
        let mut v = gy.to_vec();
        self.rotate(j, &mut v, -1.0);
        let start = j * self.rank;
        for (t, g) in v.iter().enumerate() {
            if let Some(o) = out.get_mut(start + t) {
                *o += g;
            }
        }
    }

    fn rotate(&self, j: usize, v: &mut [f64], direction: f64) {
        let pairs = self.rank / 2;
        for p in 0..pairs {
            let (c, s) = self.rotations[j * pairs + p];
            let s = direction * s;
            let a = v[2 * p];
            let b = v[2 * p + 1];
            v[2 * p] = c * a - s * b;
            v[2 * p + 1] = s * a + c * b;
        }
    }

    pub fn decompress_into(&self, flat: &[f64], out: &mut [f64]) {
        let len = self.flat_len();
        for (i, o) in out.iter_mut().enumerate() {
            *o += flat[i % len];
        }
    }

    pub fn decompress_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let len = self.flat_len();
        let mut gf = vec![0.0; len];
        for (i, gi) in g.iter().enumerate() {
            gf[i % len] += gi;
        }
        gf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    #[test]
    fn group_layout_sums_contiguous_blocks() {
        // k = 7, d = 4 → r̂ = 2, groups of 4: {0..4}, {4..7}
        let l = GroupLayout::new(7, 4);
        assert_eq!((l.rank, l.group), (2, 4));
        let c = l.compress(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(c, vec![10.0, 18.0]);
        let mut out = vec![0.0; 4];
        l.decompress_into(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn rope_chunk_zero_is_identity() {
        let l = RopeLayout::new(5, 9);
        assert_eq!(l.rank, 3);
        assert_eq!(l.chunks, 2);
        assert_eq!(l.chunk(&[1.0, 2.0, 3.0, 4.0, 5.0], 0), vec![1.0, 2.0, 3.0]);
        // second chunk is padded with a zero
        let c1 = l.chunk(&[1.0, 2.0, 3.0, 4.0, 5.0], 1);
        assert_eq!(c1[2], 0.0);
        let norm_in = 4.0f64.hypot(5.0);
        assert!((c1[0].hypot(c1[1]) - norm_in).abs() < 1e-12);
    }

    #[test]
    fn rope_adjoint_matches_inner_product() {
        let l = RopeLayout::new(10, 16);
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let gy: Vec<f64> = (0..l.rank).map(|i| (i as f64 * 1.3).cos()).collect();
        for j in 0..l.chunks {
            let y = l.chunk(&x, j);
            let mut gx = vec![0.0; 10];
            l.chunk_adjoint(j, &gy, &mut gx);
            assert!((dot(&y, &gy) - dot(&x, &gx)).abs() < 1e-12);
        }
    }
}
