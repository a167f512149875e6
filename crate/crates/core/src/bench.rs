//! Runtime scaling of attention blocks: median wall time per token count and
//! the least-squares slope of `ln(time)` against `ln(n)`.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{e2a_tokens, mhsa_forward, E2ABlock, MhsaParams, QueryKeyProduct};
use crate::autograd::Tape;
use crate::error::{cfg_err, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Relative spread `(max - min) / median` above which a sample is flagged.
pub const SPREAD_FLAG: f64 = 0.5;

/// Shortest wall time of one timed sample; short blocks are repeated inside it.
pub const MIN_SAMPLE_SECONDS: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchBlock {
    E2a,
    Mhsa,
    /// Fixed work independent of `n`; calibrates the fit.
    Constant,
}

impl std::str::FromStr for BenchBlock {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2a" => Ok(BenchBlock::E2a),
            "mhsa" => Ok(BenchBlock::Mhsa),
            "constant" => Ok(BenchBlock::Constant),
            other => Err(cfg_err!("unknown attention block {other:?} (e2a|mhsa|constant)")),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingSample {
    pub n: usize,
    pub median_seconds: f64,
    pub seconds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub samples: Vec<ScalingSample>,
    pub exponent: f64,
    /// Set when any token count showed a timing spread above [`SPREAD_FLAG`].
    pub flagged: bool,
}

impl ScalingReport {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "n,median_seconds,fitted_exponent")?;
        for s in &self.samples {
            writeln!(out, "{},{:.9e},{:.6}", s.n, s.median_seconds, self.exponent)?;
        }
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Time `block` at each token count (single thread, f32) and fit the exponent.
///
/// Each sample is the mean per-call time over enough calls to last [`MIN_SAMPLE_SECONDS`].
pub fn bench_scaling(block: BenchBlock, token_counts: &[usize], d: usize, repeats: usize, seed: u64) -> Result<ScalingReport> {
    if token_counts.len() < 4 {
        return Err(cfg_err!("need at least 4 token counts, got {}", token_counts.len()));
    }
    if token_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(cfg_err!("token counts must be strictly ascending"));
    }
    if token_counts[token_counts.len() - 1] < 16 * token_counts[0] {
        return Err(cfg_err!("token counts must span at least a 16x range"));
    }
    if repeats == 0 || d == 0 {
        return Err(cfg_err!("repeats and d must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let e2a = E2ABlock::new(&mut store, "bench", d, QueryKeyProduct::GlobalQuery, &mut rng)?;
    let mhsa = MhsaParams::<f32>::random(d, &mut rng);
    let fixed = Tensor::<f32>::from_fn(&[128, 128], |i| (i % 13) as f32 * 0.01);

    let run = |tokens: &Tensor<f32>| -> Result<f32> {
        match block {
            BenchBlock::E2a => {
                let mut tape = Tape::new();
                let p = e2a.vars(&mut tape, &store);
                let x = tape.constant(tokens.clone());
                let y = e2a_tokens(&mut tape, x, &p)?;
                Ok(tape.value(y).data()[0])
            }
            BenchBlock::Mhsa => {
                let n = tokens.shape()[1];
                let flat = tokens.reshape(&[n, d])?;
                Ok(mhsa_forward(&flat, 1, &mhsa)?.data()[0])
            }
            BenchBlock::Constant => {
                let mut out = vec![0.0f32; 128 * 128];
                gemm(false, false, 128, 128, 128, fixed.data(), fixed.data(), &mut out, false);
                Ok(out[0])
            }
        }
    };

    let mut samples = Vec::new();
    let mut flagged = false;
    for &n in token_counts {
        let tokens = Tensor::<f32>::from_fn(&[1, n, d], |i| ((i * 7919) % 1000) as f32 * 1e-3 - 0.5);
        let start = Instant::now();
        std::hint::black_box(run(&tokens)?);
        let once = start.elapsed().as_secs_f64().max(1e-9);
        let calls = (MIN_SAMPLE_SECONDS / once).ceil().max(1.0) as usize;
        let mut seconds = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            for _ in 0..calls {
                std::hint::black_box(run(&tokens)?);
            }
            seconds.push(start.elapsed().as_secs_f64() / calls as f64);
        }
        let mut sorted = seconds.clone();
        let med = median(&mut sorted);
        let spread = (sorted[sorted.len() - 1] - sorted[0]) / med;
        if spread > SPREAD_FLAG {
            log::warn!("timing spread {spread:.2} at n={n} exceeds {SPREAD_FLAG}");
            flagged = true;
        }
        samples.push(ScalingSample {
            n,
            median_seconds: med,
            seconds,
        });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.n as f64).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.median_seconds).collect();
    Ok(ScalingReport {
        exponent: loglog_slope(&xs, &ys),
        samples,
        flagged,
    })
}
