//! Matrix multiplication kernels: naive triple loop, cache-tiled, and a
//! row-band parallel variant of the tiled kernel.
//!
//! All three accumulate every output element in ascending `k` order, so the
//! tiled and parallel kernels reproduce the naive result bit for bit and the
//! parallel result never depends on the worker count.

use std::num::NonZeroUsize;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TILE: usize = 32;
pub const THREADS_ENV: &str = "CNF_THREADS";

/// `A` is `m × n`, `B` is `n × w`, `C` is `m × w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixDims {
    pub m: usize,
    pub n: usize,
    pub w: usize,
}

impl MatrixDims {
    pub fn of(a: &Tensor, b: &Tensor) -> Result<Self> {
        let [m, n] = a.dims2()?;
        let [n2, w] = b.dims2()?;
        if n != n2 {
            return Err(Error::DimensionMismatch(format!(
                "A is {m}x{n} but B is {n2}x{w}; columns of A must equal rows of B"
            )));
        }
        Ok(MatrixDims { m, n, w })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile: usize,
    pub threads: usize,
}

pub fn detected_cores() -> usize {
    thread::available_parallelism()
        .map(NonZeroUsize::get)
        .unwrap_or(1)
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig {
            tile: DEFAULT_TILE,
            threads: detected_cores(),
        }
    }
}

impl TileConfig {
    pub fn new(tile: usize, threads: usize) -> Result<Self> {
        let cfg = TileConfig { tile, threads };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default tile with the worker count taken from `CNF_THREADS` when set,
    /// otherwise one worker per detected core.
    pub fn from_env() -> Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer"))
            })?,
            Err(_) => detected_cores(),
        };
        TileConfig::new(DEFAULT_TILE, threads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 {
            return Err(Error::InvalidConfig("tile edge must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidConfig("thread count must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = MatrixDims::of(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let MatrixDims { m, n, w } = dims;
    let mut c = vec![0.0; m * w];
    for i in 0..m {
        for j in 0..w {
            let mut sum = 0.0;
            for k in 0..n {
                sum += ad[i * n + k] * bd[k * w + j];
            }
            c[i * w + j] = sum;
        }
    }
    Tensor::new(vec![m, w], c)
}

pub fn matmul_tiled(a: &Tensor, b: &Tensor, cfg: TileConfig) -> Result<Tensor> {
    cfg.validate()?;
    let dims = MatrixDims::of(a, b)?;
    let mut c = vec![0.0; dims.m * dims.w];
    tiled_band(a.data(), b.data(), &mut c, 0, dims, cfg.tile);
    Tensor::new(vec![dims.m, dims.w], c)
}

pub fn matmul_parallel(a: &Tensor, b: &Tensor, cfg: TileConfig) -> Result<Tensor> {
    cfg.validate()?;
    let dims = MatrixDims::of(a, b)?;
    let c = gemm(a.data(), b.data(), dims, cfg);
    Tensor::new(vec![dims.m, dims.w], c)
}

/// Slice-level entry point used by the layers. Inputs must already agree
/// with `dims`.
pub(crate) fn gemm(a: &[f64], b: &[f64], dims: MatrixDims, cfg: TileConfig) -> Vec<f64> {
    debug_assert_eq!(a.len(), dims.m * dims.n);
    debug_assert_eq!(b.len(), dims.n * dims.w);
    let mut c = vec![0.0; dims.m * dims.w];
    let row_tiles = dims.m.div_ceil(cfg.tile);
    let workers = cfg.threads.min(row_tiles).max(1);
    if workers == 1 {
        tiled_band(a, b, &mut c, 0, dims, cfg.tile);
        return c;
    }
    // Contiguous runs of whole row tiles per worker.
    let tiles_per_worker = row_tiles.div_ceil(workers);
    let band_rows = tiles_per_worker * cfg.tile;
    thread::scope(|scope| {
        for (band, out) in c.chunks_mut(band_rows * dims.w).enumerate() {
            scope.spawn(move || tiled_band(a, b, out, band * band_rows, dims, cfg.tile));
        }
    });
    c
}

/// `A·Bᵀ` for `A: m×n` and `B: w×n`, both row-major. Each output element
/// sums over `n` in ascending order.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, w: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), w * n);
    let mut c = vec![0.0; m * w];
    for (i, a_row) in a.chunks_exact(n.max(1)).take(m).enumerate() {
        let mut j = 0;
        while j + 4 <= w {
            let b0 = &b[j * n..(j + 1) * n];
            let b1 = &b[(j + 1) * n..(j + 2) * n];
            let b2 = &b[(j + 2) * n..(j + 3) * n];
            let b3 = &b[(j + 3) * n..(j + 4) * n];
            let mut acc = [0.0; 4];
            for k in 0..n {
                let av = a_row[k];
                acc[0] += av * b0[k];
                acc[1] += av * b1[k];
                acc[2] += av * b2[k];
                acc[3] += av * b3[k];
            }
            c[i * w + j..i * w + j + 4].copy_from_slice(&acc);
            j += 4;
        }
        for jr in j..w {
            let b_row = &b[jr * n..(jr + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * w + jr] = acc;
        }
    }
    c
}

/// Computes rows `row0 .. row0 + out.len() / w` of `C` into `out`.
fn tiled_band(a: &[f64], b: &[f64], out: &mut [f64], row0: usize, dims: MatrixDims, tile: usize) {
    let MatrixDims { n, w, .. } = dims;
    let rows = out.len() / w;
    for ii in (0..rows).step_by(tile) {
        let i_end = (ii + tile).min(rows);
        for kk in (0..n).step_by(tile) {
            let k_end = (kk + tile).min(n);
            for jj in (0..w).step_by(tile) {
                let j_end = (jj + tile).min(w);
                for i in ii..i_end {
                    let a_row = &a[(row0 + i) * n..(row0 + i + 1) * n];
                    let c_row = &mut out[i * w + jj..i * w + j_end];
                    for (k, &aik) in a_row.iter().enumerate().take(k_end).skip(kk) {
                        let b_row = &b[k * w + jj..k * w + j_end];
                        for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                            *cv += aik * bv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = b[0].len();
        a.iter()
            .map(|row| {
                (0..w)
                    .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), rows[0].len()], flat).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[r, c], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn max_rel_diff(x: &Tensor, y: &Tensor) -> f64 {
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_left_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 3, 4);
        let c = matmul_naive(&Tensor::identity(3).unwrap(), &b).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn zeros_annihilate() {
        let z = Tensor::zeros(&[3, 5]).unwrap();
        let z2 = Tensor::zeros(&[5, 2]).unwrap();
        assert!(matmul_naive(&z, &z2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_integer_case_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| rng.gen_range(-4..=4) as f64).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| rng.gen_range(-4..=4) as f64).collect())
            .collect();
        let expected = to_tensor(&triple_loop(&a, &b));
        assert_eq!(matmul_naive(&to_tensor(&a), &to_tensor(&b)).unwrap(), expected);
    }

    #[test]
    fn mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[4, 2]).unwrap();
        assert!(matches!(matmul_naive(&a, &b), Err(Error::DimensionMismatch(_))));
        let cfg = TileConfig::new(8, 2).unwrap();
        assert!(matmul_tiled(&a, &b, cfg).is_err());
        assert!(matmul_parallel(&a, &b, cfg).is_err());
    }

    #[test]
    fn zero_tile_or_threads_rejected() {
        assert!(TileConfig::new(0, 1).is_err());
        assert!(TileConfig::new(4, 0).is_err());
    }

    #[test]
    fn single_tile_is_bitwise_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 17, 9);
        let b = random(&mut rng, 9, 13);
        let cfg = TileConfig::new(64, 1).unwrap();
        assert_eq!(matmul_tiled(&a, &b, cfg).unwrap(), matmul_naive(&a, &b).unwrap());
    }

    #[test]
    fn sequential_4x4_with_tile_2() {
        let a = Tensor::from_fn(&[4, 4], |i| i as f64 + 1.0).unwrap();
        let b = Tensor::from_fn(&[4, 4], |i| 16.0 - i as f64).unwrap();
        let cfg = TileConfig::new(2, 1).unwrap();
        let naive = matmul_naive(&a, &b).unwrap();
        assert_eq!(matmul_tiled(&a, &b, cfg).unwrap(), naive);
        // Row 0 of A is 1..4, column 0 of B is 16,12,8,4.
        assert_eq!(naive.get(&[0, 0]), Some(16.0 + 24.0 + 24.0 + 16.0));
    }

    #[test]
    fn ragged_tiles_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 257, 123);
        let b = random(&mut rng, 123, 311);
        let cfg = TileConfig::new(32, 1).unwrap();
        let naive = matmul_naive(&a, &b).unwrap();
        assert!(max_rel_diff(&matmul_tiled(&a, &b, cfg).unwrap(), &naive) <= 1e-12);
    }

    #[test]
    fn single_worker_equals_tiled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 70, 40);
        let b = random(&mut rng, 40, 33);
        let cfg = TileConfig::new(16, 1).unwrap();
        assert_eq!(
            matmul_parallel(&a, &b, cfg).unwrap(),
            matmul_tiled(&a, &b, cfg).unwrap()
        );
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&mut rng, 512, 512);
        let b = random(&mut rng, 512, 512);
        let base = matmul_parallel(&a, &b, TileConfig::new(32, 2).unwrap()).unwrap();
        for threads in [4, 8] {
            let c = matmul_parallel(&a, &b, TileConfig::new(32, threads).unwrap()).unwrap();
            assert_eq!(c, base);
        }
    }

    #[test]
    fn default_threads_match_cores() {
        assert_eq!(TileConfig::default().threads, detected_cores());
        assert_eq!(TileConfig::default().tile, DEFAULT_TILE);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn tiled_and_parallel_track_naive(
            m in 1usize..40, n in 1usize..40, w in 1usize..40,
            tile in 1usize..20, threads in 1usize..6, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, n);
            let b = random(&mut rng, n, w);
            let cfg = TileConfig::new(tile, threads).unwrap();
            let naive = matmul_naive(&a, &b).unwrap();
            prop_assert!(max_rel_diff(&matmul_tiled(&a, &b, cfg).unwrap(), &naive) <= 1e-12);
            let single = matmul_parallel(&a, &b, TileConfig::new(tile, 1).unwrap()).unwrap();
            prop_assert_eq!(matmul_parallel(&a, &b, cfg).unwrap(), single);
        }

        #[test]
        fn transposed_product_matches_naive(
            m in 1usize..12, n in 1usize..60, w in 1usize..12, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, n);
            let bt = random(&mut rng, w, n);
            let naive = matmul_naive(&a, &bt.transpose().unwrap()).unwrap();
            prop_assert_eq!(gemm_nt(a.data(), bt.data(), m, n, w), naive.data().to_vec());
        }

        #[test]
        fn identity_is_neutral(m in 1usize..20, n in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, n);
            let cfg = TileConfig::new(7, 3).unwrap();
            prop_assert_eq!(&matmul_parallel(&a, &Tensor::identity(n).unwrap(), cfg).unwrap(), &a);
            prop_assert_eq!(&matmul_parallel(&Tensor::identity(m).unwrap(), &a, cfg).unwrap(), &a);
        }

        #[test]
        fn integer_blocks_sum_exactly(m in 1usize..24, n in 1usize..24, w in 1usize..24,
                                      tile in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(&[m, n], |_| rng.gen_range(-9..=9) as f64).unwrap();
            let b = Tensor::from_fn(&[n, w], |_| rng.gen_range(-9..=9) as f64).unwrap();
            let cfg = TileConfig::new(tile, 1).unwrap();
            prop_assert_eq!(matmul_tiled(&a, &b, cfg).unwrap(), matmul_naive(&a, &b).unwrap());
        }
    }
}
