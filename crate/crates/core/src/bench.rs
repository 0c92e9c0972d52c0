//! Naive vs tiled vs parallel GEMM timing harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gemm::{matmul_naive, matmul_parallel, matmul_tiled, TileConfig};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "size,method,seconds,reps";
const GATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub method: String,
    /// Median wall time of one multiplication.
    pub seconds: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.9},{}", r.size, r.method, r.seconds, r.reps);
        }
        out
    }

    pub fn seconds(&self, size: usize, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.size == size && r.method == method)
            .map(|r| r.seconds)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

fn time_median(reps: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<f64> {
    f()?; // warm-up
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(median(times))
}

fn check_against(reference: &Tensor, candidate: &Tensor, label: &str) -> Result<()> {
    let worst = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    if worst > GATE_TOLERANCE {
        return Err(Error::InvalidConfig(format!(
            "{label} result deviates from naive by relative {worst:e}"
        )));
    }
    Ok(())
}

/// One row per (size, method) for the three kernels at `cfg.threads` workers.
pub fn bench_gemm(sizes: &[usize], reps: usize, cfg: TileConfig) -> Result<BenchReport> {
    bench_gemm_sweep(sizes, reps, cfg.tile, &[cfg.threads])
}

/// Like [`bench_gemm`], but times the parallel kernel once per entry in
/// `threads`. With more than one entry the parallel rows are labelled
/// `parallel-t<N>`.
pub fn bench_gemm_sweep(
    sizes: &[usize],
    reps: usize,
    tile: usize,
    threads: &[usize],
) -> Result<BenchReport> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("benchmark needs at least one size".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidConfig("matrix order must be positive".into()));
    }
    if reps < 3 {
        return Err(Error::InvalidConfig(format!("reps must be at least 3, got {reps}")));
    }
    if threads.is_empty() {
        return Err(Error::InvalidConfig("need at least one thread count".into()));
    }
    let tiled_cfg = TileConfig::new(tile, 1)?;
    let parallel_cfgs = threads
        .iter()
        .map(|&t| TileConfig::new(tile, t))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut report = BenchReport::default();
    for &size in sizes {
        let a = Tensor::from_fn(&[size, size], |_| rng.gen_range(-1.0..1.0))?;
        let b = Tensor::from_fn(&[size, size], |_| rng.gen_range(-1.0..1.0))?;

        let reference = matmul_naive(&a, &b)?;
        check_against(&reference, &matmul_tiled(&a, &b, tiled_cfg)?, "tiled")?;
        for cfg in &parallel_cfgs {
            check_against(&reference, &matmul_parallel(&a, &b, *cfg)?, "parallel")?;
        }
        drop(reference);

        let mut push = |method: String, seconds: f64| {
            report.rows.push(BenchRow {
                size,
                method,
                seconds,
                reps,
            })
        };
        push("naive".into(), time_median(reps, || matmul_naive(&a, &b))?);
        push(
            "tiled".into(),
            time_median(reps, || matmul_tiled(&a, &b, tiled_cfg))?,
        );
        for cfg in &parallel_cfgs {
            let label = if parallel_cfgs.len() == 1 {
                "parallel".to_string()
            } else {
                format!("parallel-t{}", cfg.threads)
            };
            push(label, time_median(reps, || matmul_parallel(&a, &b, *cfg))?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn three_rows_per_size() {
        let report = bench_gemm(&[8, 16], 3, TileConfig::new(4, 2).unwrap()).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.iter().all(|r| r.seconds > 0.0 && r.reps == 3));
        assert!(report.seconds(16, "parallel").is_some());
    }

    #[test]
    fn sweep_labels_each_thread_count() {
        let report = bench_gemm_sweep(&[8], 3, 4, &[1, 4]).unwrap();
        let methods: Vec<_> = report.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["naive", "tiled", "parallel-t1", "parallel-t4"]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = TileConfig::new(4, 1).unwrap();
        assert!(bench_gemm(&[], 3, cfg).is_err());
        assert!(bench_gemm(&[8], 2, cfg).is_err());
    }

    #[test]
    fn csv_layout() {
        let report = BenchReport {
            rows: vec![BenchRow {
                size: 4,
                method: "naive".into(),
                seconds: 0.5,
                reps: 3,
            }],
        };
        assert_eq!(report.to_csv(), "size,method,seconds,reps\n4,naive,0.500000000,3\n");
    }
}
