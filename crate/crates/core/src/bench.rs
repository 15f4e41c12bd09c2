//! Timing harness: dense spatial `L X W` against the frequency path
//! `IDFT(DFT(X) S)` on circulant graphs, where the two must agree.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{kernel_spectrum, operator_from_spectrum, spectral_convolution, Band};

/// Largest allowed `|spatial - frequency|` before any timing is recorded.
pub const EQUIVALENCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub residual: f64,
    /// Fastest of the repeats, in seconds.
    pub spatial_secs: f64,
    pub frequency_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub spatial_slope: f64,
    pub frequency_slope: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,d,residual,spatial_secs,frequency_secs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.3e},{:.6e},{:.6e}\n",
                r.n, r.d, r.residual, r.spatial_secs, r.frequency_secs
            ));
        }
        out
    }
}

/// Symmetric kernel (`c[s] = c[n - s]`), so the circulant it generates is a
/// valid undirected filter. Scaled by `1/sqrt(n)` to keep outputs O(1).
pub fn symmetric_kernel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array1<f64> {
    let scale = 1.0 / (n as f64).sqrt();
    let mut c = Array1::zeros(n);
    for s in 0..=n / 2 {
        let v = rng.random_range(-1.0..1.0) * scale;
        c[s] = v;
        c[(n - s) % n] = v;
    }
    c
}

/// `L X W` with `L[i, j] = c[(i - j) mod n]`, generating rows on the fly.
/// Same `O(n^2 d)` work as a stored dense product without the `n^2` memory.
pub fn dense_circulant_product(c: ArrayView1<f64>, x: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cs = c.to_vec();
    let mut lx = Array2::<f64>::zeros((n, d));
    let mut acc = vec![0.0; d];
    for i in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..n {
            let cij = cs[if i >= j { i - j } else { i + n - j }];
            let row = &xs[j * d..(j + 1) * d];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += cij * v;
            }
        }
        lx.row_mut(i).assign(&ArrayView1::from(&acc[..]));
    }
    lx.dot(&w)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

fn fastest<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, f64) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        let v = f();
        best = best.min(t0.elapsed().as_secs_f64());
        out = Some(v);
    }
    (out.expect("at least one repeat"), best)
}

/// One graph size: check equivalence, then time both paths.
pub fn bench_size(n: usize, d: usize, repeats: usize, seed: u64) -> Result<BenchRow> {
    if n == 0 || d == 0 || repeats == 0 {
        return Err(Error::invalid_input("bench needs n, d and repeats all positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32) ^ d as u64);
    let c = symmetric_kernel(n, &mut rng);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let w = Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0) / (d as f64).sqrt());
    // The operator stands in for trained parameters, so building it is not timed.
    let op = operator_from_spectrum(kernel_spectrum(c.view()).view(), w.view(), Band::Low);

    let spatial = dense_circulant_product(c.view(), x.view(), w.view());
    let frequency = spectral_convolution(x.view(), &op)?;
    let residual = spatial
        .iter()
        .zip(frequency.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if !(residual <= EQUIVALENCE_TOL) {
        return Err(Error::Numerical(format!(
            "n={n}: spatial and frequency paths differ by {residual:.3e}; refusing to time"
        )));
    }

    let (_, spatial_secs) = fastest(repeats, || dense_circulant_product(c.view(), x.view(), w.view()));
    let (res, frequency_secs) = fastest(repeats, || spectral_convolution(x.view(), &op));
    res?;
    Ok(BenchRow {
        n,
        d,
        residual,
        spatial_secs,
        frequency_secs,
    })
}

pub fn run_bench(sizes: &[usize], d: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    let rows = sizes
        .iter()
        .map(|&n| {
            let row = bench_size(n, d, repeats, seed)?;
            log::info!(
                "n={n} residual={:.2e} spatial={:.3e}s frequency={:.3e}s",
                row.residual,
                row.spatial_secs,
                row.frequency_secs
            );
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let (spatial_slope, frequency_slope) = if rows.len() >= 2 {
        let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let ts: Vec<f64> = rows.iter().map(|r| r.spatial_secs.max(1e-9)).collect();
        let tf: Vec<f64> = rows.iter().map(|r| r.frequency_secs.max(1e-9)).collect();
        (loglog_slope(&ns, &ts), loglog_slope(&ns, &tf))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(BenchReport {
        rows,
        spatial_slope,
        frequency_slope,
    })
}
