//! Frequency-domain utilities: brick-wall band-pass, f-K spectra, amplitude
//! normalization and comparison metrics.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetics::Gather;

/// Below this max-abs amplitude a gather is treated as all-zero.
pub const DEGENERATE_SCALE: f32 = 1e-12;
pub const FK_FLOOR_DB: f64 = -120.0;

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Time samples down the rows, traces across the columns.
    pub fn from_gather(g: &Gather) -> Self {
        let mut data = Vec::with_capacity(g.n_t() * g.n_x());
        for t in 0..g.n_t() {
            data.extend((0..g.n_x()).map(|x| g.at(t, x) as f64));
        }
        Self {
            rows: g.n_t(),
            cols: g.n_x(),
            data,
        }
    }
}

fn check_band(n: usize, dt: f64, lo: f64, hi: f64) -> Result<()> {
    let nyquist = 0.5 / dt;
    if !(dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    if !(lo >= 0.0) {
        return Err(Error::config(
            "lo",
            format!("must be non-negative, got {lo}"),
        ));
    }
    if !(lo < hi) {
        return Err(Error::config(
            "lo",
            format!("must be below hi ({lo} >= {hi})"),
        ));
    }
    if hi > nyquist * (1.0 + 1e-12) {
        return Err(Error::config(
            "hi",
            format!("{hi} Hz exceeds Nyquist {nyquist} Hz"),
        ));
    }
    if n == 0 {
        return Err(Error::config("trace", "must not be empty"));
    }
    Ok(())
}

/// Planned brick-wall band-pass for traces of one length.
pub struct BandPass {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    keep: Vec<bool>,
}

impl BandPass {
    /// Bins whose absolute frequency lies in `[lo, hi]` pass with unit gain;
    /// boundary bins are kept.
    pub fn new(n: usize, dt: f64, lo: f64, hi: f64) -> Result<Self> {
        check_band(n, dt, lo, hi)?;
        let mut planner = FftPlanner::new();
        let df = 1.0 / (n as f64 * dt);
        let tol = 1e-9 * df;
        let keep = (0..n)
            .map(|k| {
                let f = k.min(n - k) as f64 * df;
                f >= lo - tol && f <= hi + tol
            })
            .collect();
        Ok(Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            keep,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kept(&self, bin: usize) -> bool {
        self.keep[bin]
    }

    pub fn spectrum(&self, trace: impl IntoIterator<Item = f64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = trace.into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        assert_eq!(buf.len(), self.n, "trace length does not match the plan");
        self.forward.process(&mut buf);
        buf
    }

    pub fn apply(&self, trace: &[f64]) -> Vec<f64> {
        let mut buf = self.spectrum(trace.iter().copied());
        for (c, &k) in buf.iter_mut().zip(&self.keep) {
            if !k {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// (in-band, out-of-band) energy, each scaled by 1/n so that their sum
    /// equals the time-domain energy.
    pub fn band_energy(&self, trace: impl IntoIterator<Item = f64>) -> (f64, f64) {
        let spec = self.spectrum(trace);
        let (mut inside, mut outside) = (0.0, 0.0);
        for (c, &k) in spec.iter().zip(&self.keep) {
            if k {
                inside += c.norm_sqr();
            } else {
                outside += c.norm_sqr();
            }
        }
        let n = self.n as f64;
        (inside / n, outside / n)
    }
}

/// Ideal (brick-wall) band-pass of one trace.
pub fn bandpass_ideal(trace: &[f64], dt: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    Ok(BandPass::new(trace.len(), dt, lo, hi)?.apply(trace))
}

/// Applies [`bandpass_ideal`] to every trace of a gather.
pub fn bandpass_gather(g: &Gather, lo: f64, hi: f64) -> Result<Gather> {
    let bp = BandPass::new(g.n_t(), g.dt, lo, hi)?;
    let mut data = vec![0.0f32; g.data().len()];
    data.par_chunks_mut(g.n_t())
        .zip(g.data().par_chunks(g.n_t()))
        .for_each(|(dst, src)| {
            let x: Vec<f64> = src.iter().map(|&v| v as f64).collect();
            for (d, v) in dst.iter_mut().zip(bp.apply(&x)) {
                *d = v as f32;
            }
        });
    g.with_data(data)
}

/// Normalized f-K amplitude spectrum in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct FkSpectrum {
    /// Rows: frequency bins `0..=n_t/2`; columns: wavenumber bins, centered
    /// so column `n_x/2` is k = 0.
    pub magnitude_db: Grid,
    /// Hz per frequency row.
    pub df: f64,
    /// Cycles per meter per wavenumber column.
    pub dk: f64,
}

impl FkSpectrum {
    pub fn frequency(&self, row: usize) -> f64 {
        row as f64 * self.df
    }

    pub fn wavenumber(&self, col: usize) -> f64 {
        (col as f64 - (self.magnitude_db.cols / 2) as f64) * self.dk
    }
}

/// 2-D transform over (time, offset). A dipping event with apparent velocity
/// `v > 0` (arrival time growing with trace index) maps onto `f = v k`.
pub fn fk_spectrum(g: &Gather) -> Result<FkSpectrum> {
    let (n_t, n_x) = (g.n_t(), g.n_x());
    if n_t < 2 || n_x < 2 {
        return Err(Error::config(
            "gather",
            format!("f-K needs at least 2x2 samples, got {n_t}x{n_x}"),
        ));
    }
    if g.max_abs() == 0.0 {
        return Err(Error::EmptySpectrum);
    }
    let mut planner = FftPlanner::<f64>::new();
    let ft = planner.plan_fft_forward(n_t);
    // +i sign along offset gives the f = v k orientation
    let fx = planner.plan_fft_inverse(n_x);
    let n_f = n_t / 2 + 1;

    // spec[f][x] after the time transform
    let mut fk = vec![Complex64::new(0.0, 0.0); n_f * n_x];
    for (j, tr) in g.traces().enumerate() {
        let mut buf: Vec<Complex64> = tr.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        ft.process(&mut buf);
        for f in 0..n_f {
            fk[f * n_x + j] = buf[f];
        }
    }
    let mut mag = vec![0.0f64; n_f * n_x];
    let shift = n_x / 2;
    for f in 0..n_f {
        let row = &mut fk[f * n_x..(f + 1) * n_x];
        fx.process(row);
        for (m, c) in row.iter().enumerate() {
            // bin m holds k = m (m < n_x - m) or k = m - n_x
            let col = (m + shift) % n_x;
            mag[f * n_x + col] = c.norm();
        }
    }
    let peak = mag.iter().cloned().fold(0.0f64, f64::max);
    if !(peak > 0.0) {
        return Err(Error::EmptySpectrum);
    }
    let data = mag
        .iter()
        .map(|&m| {
            if m <= 0.0 {
                FK_FLOOR_DB
            } else {
                (20.0 * (m / peak).log10()).max(FK_FLOOR_DB)
            }
        })
        .collect();
    Ok(FkSpectrum {
        magnitude_db: Grid {
            rows: n_f,
            cols: n_x,
            data,
        },
        df: 1.0 / (n_t as f64 * g.dt),
        dk: 1.0 / (n_x as f64 * g.dx),
    })
}

/// Divides by the max absolute amplitude. Returns scale 0 and the input
/// unchanged when the gather is (numerically) all-zero.
pub fn normalize_gather(g: &Gather) -> (Gather, f32) {
    let scale = g.max_abs();
    if scale < DEGENERATE_SCALE {
        return (g.clone(), 0.0);
    }
    let out = g.map(|v| v / scale).expect("scaling keeps values finite");
    (out, scale)
}

/// Inverse of [`normalize_gather`]; scale 0 is the identity.
pub fn denormalize_gather(g: &Gather, scale: f32) -> Gather {
    if scale == 0.0 {
        return g.clone();
    }
    g.map(|v| v * scale).expect("scaling keeps values finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nrmse: f64,
    pub corr: f64,
    pub outband_energy_ratio: f64,
}

pub fn metrics(candidate: &Gather, reference: &Gather, lo: f64, hi: f64) -> Result<Metrics> {
    if !candidate.same_geometry(reference) {
        return Err(Error::shape(
            "metrics",
            format!(
                "{}x{} dt={}",
                candidate.n_t(),
                candidate.n_x(),
                candidate.dt
            ),
            format!(
                "{}x{} dt={}",
                reference.n_t(),
                reference.n_x(),
                reference.dt
            ),
        ));
    }
    let ref_norm2: f64 = reference.data().iter().map(|&v| (v as f64).powi(2)).sum();
    if ref_norm2 == 0.0 {
        return Err(Error::ZeroReference);
    }
    let diff2: f64 = candidate
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let nrmse = (diff2 / ref_norm2).sqrt();
    let corr = pearson(candidate.data(), reference.data());

    let bp = BandPass::new(reference.n_t(), reference.dt, lo, hi)?;
    let outband = |g: &Gather| -> f64 {
        g.traces()
            .map(|tr| bp.band_energy(tr.iter().map(|&v| v as f64)).1)
            .sum()
    };
    let ref_out = outband(reference);
    if ref_out == 0.0 {
        return Err(Error::Numerical(
            "reference has no energy outside the pass band".into(),
        ));
    }
    Ok(Metrics {
        nrmse,
        corr,
        outband_energy_ratio: outband(candidate) / ref_out,
    })
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}
