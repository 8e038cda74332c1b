//! Wall-clock and MAC-count scaling harness.
//!
//! Timing protocol: fixed random inputs per size, at least 3 discarded
//! warm-up runs, at least 10 measured repetitions, median reported.
//! Complexity claims are checked as least-squares slopes of log(time)
//! against log(T), which keeps the acceptance bars machine-independent.

use std::time::Instant;

use crate::attention::{self, AttnStats};
use crate::kernels::KernelPair;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Minimum measured repetitions per point.
pub const MIN_REPS: usize = 10;

/// Discarded warm-up runs per point.
pub const WARMUP_RUNS: usize = 3;

/// Which op a sweep times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchVariant {
    Msa,
    Mla,
    Hydra,
}

impl BenchVariant {
    pub fn name(&self) -> &'static str {
        match self {
            BenchVariant::Msa => "msa",
            BenchVariant::Mla => "mla",
            BenchVariant::Hydra => "hydra",
        }
    }
}

impl std::str::FromStr for BenchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msa" => Ok(BenchVariant::Msa),
            "mla" => Ok(BenchVariant::Mla),
            "hydra" => Ok(BenchVariant::Hydra),
            other => Err(Error::Spec(format!(
                "unknown bench variant '{other}' (expected msa, mla, hydra)"
            ))),
        }
    }
}

/// One measured point.
#[derive(Debug, Clone)]
pub struct BenchSample {
    pub op: &'static str,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub reps: usize,
    pub median_s: f64,
    pub macs: u64,
}

fn run_once<T: Scalar>(
    variant: BenchVariant,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttnStats)> {
    match variant {
        BenchVariant::Msa => attention::msa_instrumented(q, k, v, heads),
        BenchVariant::Mla => attention::mla_instrumented(q, k, v, heads, &KernelPair::cosine()),
        BenchVariant::Hydra => attention::hydra_instrumented(q, k, v, &KernelPair::cosine()),
    }
}

/// Time one variant across a token sweep. `t_values` must be strictly
/// increasing, with at least 4 points spanning at least an 8x range.
pub fn time_op<T: Scalar>(
    variant: BenchVariant,
    t_values: &[usize],
    dim: usize,
    heads: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchSample>> {
    if reps == 0 {
        return Err(Error::Spec("reps must be positive".into()));
    }
    if reps < MIN_REPS {
        return Err(Error::Spec(format!(
            "reps must be at least {MIN_REPS} for a stable median, got {reps}"
        )));
    }
    if t_values.len() < 4 {
        return Err(Error::Spec("need at least 4 sweep points".into()));
    }
    if t_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Spec("sweep points must be strictly increasing".into()));
    }
    let span = t_values[t_values.len() - 1] as f64 / t_values[0] as f64;
    if span < 8.0 {
        return Err(Error::Spec(format!(
            "sweep must span at least 8x in T, got {span:.1}x"
        )));
    }

    let mut samples = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let mut rng = SeededRng::new(seed ^ (t as u64));
        let q: Tensor<T> = rng.uniform_matrix(t, dim, -1.0, 1.0);
        let k: Tensor<T> = rng.uniform_matrix(t, dim, -1.0, 1.0);
        let v: Tensor<T> = rng.uniform_matrix(t, dim, -1.0, 1.0);

        for _ in 0..WARMUP_RUNS {
            let _ = run_once(variant, &q, &k, &v, heads)?;
        }
        let mut times = Vec::with_capacity(reps);
        let mut macs = 0u64;
        for _ in 0..reps {
            let start = Instant::now();
            let (out, stats) = run_once(variant, &q, &k, &v, heads)?;
            times.push(start.elapsed().as_secs_f64());
            macs = stats.attention_macs;
            std::hint::black_box(&out);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_s = times[times.len() / 2];
        samples.push(BenchSample {
            op: variant.name(),
            tokens: t,
            dim,
            heads,
            reps,
            median_s,
            macs,
        });
    }
    Ok(samples)
}

/// Least-squares slope of log(y) against log(x).
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Data("slope fit needs at least 2 points".into()));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::Data(
            "slope fit needs positive coordinates (nonpositive time measured?)".into(),
        ));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in logs {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    if den == 0.0 {
        return Err(Error::Data("slope fit needs varying x".into()));
    }
    Ok(num / den)
}

/// Slope of log(median time) against log(T) for a measured sweep.
pub fn time_slope(samples: &[BenchSample]) -> Result<f64> {
    fit_loglog_slope(
        &samples
            .iter()
            .map(|s| (s.tokens as f64, s.median_s))
            .collect::<Vec<_>>(),
    )
}

/// Slope of log(MACs) against log(T) — noise-free, so exact.
pub fn mac_slope(samples: &[BenchSample]) -> Result<f64> {
    fit_loglog_slope(
        &samples
            .iter()
            .map(|s| (s.tokens as f64, s.macs as f64))
            .collect::<Vec<_>>(),
    )
}

pub fn write_csv(samples: &[BenchSample], seed: u64, mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "# seed={seed}")?;
    writeln!(w, "variant,T,D,H,median_s,macs")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{:.9},{}",
            s.op, s.tokens, s.dim, s.heads, s.median_s, s.macs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_quadratic_slope() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0]
            .iter()
            .map(|&t| (t, 3.5e-9 * t * t))
            .collect();
        let slope = fit_loglog_slope(&pts).unwrap();
        assert!((slope - 2.0).abs() < 1e-9);
    }

    #[test]
    fn synthetic_linear_slope() {
        let pts: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0]
            .iter()
            .map(|&t| (t, 1.2e-6 * t))
            .collect();
        let slope = fit_loglog_slope(&pts).unwrap();
        assert!((slope - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_time_rejected() {
        assert!(fit_loglog_slope(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn sweep_preconditions() {
        let e = time_op::<f64>(BenchVariant::Hydra, &[8, 16, 32, 64], 8, 8, 0, 0);
        assert!(e.is_err(), "zero reps must be rejected");
        let e = time_op::<f64>(BenchVariant::Hydra, &[8, 16, 32], 8, 8, 10, 0);
        assert!(e.is_err(), "too few points must be rejected");
        let e = time_op::<f64>(BenchVariant::Hydra, &[8, 16, 32, 48], 8, 8, 10, 0);
        assert!(e.is_err(), "narrow span must be rejected");
        let e = time_op::<f64>(BenchVariant::Hydra, &[8, 8, 32, 64], 8, 8, 10, 0);
        assert!(e.is_err(), "non-increasing points must be rejected");
    }

    #[test]
    fn small_measured_sweep_has_positive_times() {
        let samples = time_op::<f64>(BenchVariant::Hydra, &[8, 16, 32, 64], 16, 16, 10, 7).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert!(s.median_s > 0.0);
            assert_eq!(s.macs, 2 * (s.tokens * s.dim) as u64);
        }
    }

    #[test]
    fn mac_slopes_are_exact() {
        // hydra: slope 1 in T
        let hydra: Vec<(f64, f64)> = [16usize, 32, 64, 128]
            .iter()
            .map(|&t| (t as f64, (2 * t * 64) as f64))
            .collect();
        assert!((fit_loglog_slope(&hydra).unwrap() - 1.0).abs() < 1e-9);

        // mla: slope -1 in H at fixed T, D
        let t = 32usize;
        let d = 64usize;
        let mla: Vec<(f64, f64)> = [1usize, 2, 4, 8, 16]
            .iter()
            .map(|&h| (h as f64, (2 * t * (d / h) * (d / h) * h) as f64))
            .collect();
        assert!((fit_loglog_slope(&mla).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn f32_path_works() {
        let samples = time_op::<f32>(BenchVariant::Msa, &[4, 8, 16, 32], 8, 2, 10, 3).unwrap();
        assert_eq!(samples.len(), 4);
        for s in &samples {
            assert_eq!(s.macs, 2 * (s.tokens * s.tokens * s.dim) as u64);
        }
    }
}
