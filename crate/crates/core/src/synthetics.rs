//! Synthetic shot gathers built from linear-moveout Ricker events, and their
//! band-limited ("ringing") counterparts.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp;
use crate::error::{Error, Result};
use crate::tensor_core::{Dims, Tensor4};

/// A 2-D seismic record. Samples are stored trace-major: trace `j` occupies
/// `data[j * n_t .. (j + 1) * n_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gather {
    n_t: usize,
    n_x: usize,
    /// Sample interval in seconds.
    pub dt: f64,
    /// Trace spacing in meters.
    pub dx: f64,
    data: Vec<f32>,
}

impl Gather {
    pub fn zeros(n_t: usize, n_x: usize, dt: f64, dx: f64) -> Result<Self> {
        Self::from_traces(n_t, n_x, dt, dx, vec![0.0; n_t * n_x])
    }

    pub fn from_traces(n_t: usize, n_x: usize, dt: f64, dx: f64, data: Vec<f32>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("dt", format!("must be positive, got {dt}")));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::config("dx", format!("must be positive, got {dx}")));
        }
        if data.len() != n_t * n_x {
            return Err(Error::shape(
                "Gather",
                format!("{n_t}x{n_x}"),
                format!("{} samples", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!(
                    "gather sample {} of trace {}",
                    i % n_t.max(1),
                    i / n_t.max(1)
                ),
            });
        }
        Ok(Self {
            n_t,
            n_x,
            dt,
            dx,
            data,
        })
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn trace(&self, j: usize) -> &[f32] {
        &self.data[j * self.n_t..(j + 1) * self.n_t]
    }

    pub fn trace_mut(&mut self, j: usize) -> &mut [f32] {
        &mut self.data[j * self.n_t..(j + 1) * self.n_t]
    }

    pub fn traces(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.n_t.max(1))
    }

    #[inline]
    pub fn at(&self, t: usize, x: usize) -> f32 {
        self.data[x * self.n_t + t]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Same geometry, new samples.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::from_traces(self.n_t, self.n_x, self.dt, self.dx, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn same_geometry(&self, other: &Gather) -> bool {
        self.n_t == other.n_t && self.n_x == other.n_x && self.dt == other.dt && self.dx == other.dx
    }

    /// Sample-by-sample difference `self - other`.
    pub fn difference(&self, other: &Gather) -> Result<Self> {
        if !self.same_geometry(other) {
            return Err(Error::shape(
                "Gather::difference",
                format!("{}x{} dt={}", self.n_t, self.n_x, self.dt),
                format!("{}x{} dt={}", other.n_t, other.n_x, other.dt),
            ));
        }
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// View as a (1, 1, n_t, n_x) tensor: height is time, width is trace.
    pub fn to_tensor(&self) -> Tensor4 {
        let mut data = vec![0.0f32; self.data.len()];
        for (j, tr) in self.traces().enumerate() {
            for (i, &v) in tr.iter().enumerate() {
                data[i * self.n_x + j] = v;
            }
        }
        Tensor4::from_vec(Dims::new(1, 1, self.n_t, self.n_x), data)
            .expect("length matches by construction")
    }

    /// Inverse of [`Gather::to_tensor`] for a single-sample, single-channel tensor.
    pub fn from_tensor(t: &Tensor4, dt: f64, dx: f64) -> Result<Self> {
        let d = t.dims();
        if d.n != 1 || d.c != 1 {
            return Err(Error::shape("Gather::from_tensor", d, "(1, 1, n_t, n_x)"));
        }
        let (n_t, n_x) = (d.h, d.w);
        let mut data = vec![0.0f32; n_t * n_x];
        for i in 0..n_t {
            for j in 0..n_x {
                data[j * n_t + i] = t.data()[i * n_x + j];
            }
        }
        Self::from_traces(n_t, n_x, dt, dx, data)
    }
}

/// `(1 - 2 pi^2 f0^2 t^2) exp(-pi^2 f0^2 t^2)`
pub fn ricker(f0: f64, t: f64) -> f64 {
    let a = (PI * f0 * t).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_t: usize,
    pub n_x: usize,
    pub dt: f64,
    pub dx: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub f0: f64,
    pub num_events: usize,
    /// Per-event amplitudes; when shorter than `num_events` the remaining
    /// events alternate +1 / -1 starting from the event index.
    pub amplitudes: Vec<f64>,
    /// Standard deviation of additive Gaussian noise (0 disables).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_t: 1000,
            n_x: 1200,
            dt: 0.002,
            dx: 3.125,
            v_min: 1300.0,
            v_max: 2300.0,
            f0: 60.0,
            num_events: 12,
            amplitudes: Vec::new(),
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 {
            return Err(Error::config("n_t", "must be at least 1"));
        }
        if self.n_x == 0 {
            return Err(Error::config("n_x", "must be at least 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::config("dx", "must be positive"));
        }
        if !(self.v_min > 0.0) {
            return Err(Error::config("v_min", "must be positive"));
        }
        if !(self.v_max >= self.v_min && self.v_max.is_finite()) {
            return Err(Error::config("v_max", "must be finite and at least v_min"));
        }
        let nyquist = 0.5 / self.dt;
        if !(self.f0 > 0.0 && self.f0 < nyquist) {
            return Err(Error::config(
                "f0",
                format!("must lie in (0, {nyquist}) Hz"),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(
                "noise_std",
                "must be finite and non-negative",
            ));
        }
        if self.amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("amplitudes", "must be finite"));
        }
        Ok(())
    }

    fn amplitude(&self, e: usize) -> f64 {
        self.amplitudes
            .get(e)
            .copied()
            .unwrap_or(if e.is_multiple_of(2) { 1.0 } else { -1.0 })
    }
}

/// One linear-moveout event: arrival time at trace `j` is `t0 + j * dx / velocity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t0: f64,
    pub velocity: f64,
    pub amplitude: f64,
}

impl Event {
    pub fn arrival(&self, trace: usize, dx: f64) -> f64 {
        self.t0 + trace as f64 * dx / self.velocity
    }
}

/// Draws event parameters: velocities uniform in `[v_min, v_max]`, intercepts
/// uniform in `[0.1 T, 0.8 T]` where `T` is the record length.
pub fn draw_events(config: &SynthConfig) -> Result<Vec<Event>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let record = config.n_t as f64 * config.dt;
    Ok((0..config.num_events)
        .map(|e| {
            let velocity = if config.v_max > config.v_min {
                rng.random_range(config.v_min..=config.v_max)
            } else {
                config.v_min
            };
            let t0 = rng.random_range(0.1 * record..=0.8 * record);
            Event {
                t0,
                velocity,
                amplitude: config.amplitude(e),
            }
        })
        .collect())
}

/// Sums the given events on the configured grid (noise is not added here).
pub fn render_events(config: &SynthConfig, events: &[Event]) -> Result<Gather> {
    config.validate()?;
    let mut g = Gather::zeros(config.n_t, config.n_x, config.dt, config.dx)?;
    for j in 0..config.n_x {
        let tr = g.trace_mut(j);
        for ev in events {
            let arrival = ev.arrival(j, config.dx);
            for (i, s) in tr.iter_mut().enumerate() {
                let t = i as f64 * config.dt - arrival;
                *s = (*s as f64 + ev.amplitude * ricker(config.f0, t)) as f32;
            }
        }
    }
    Ok(g)
}

pub fn synth_gather(config: &SynthConfig) -> Result<Gather> {
    Ok(synth_gather_with_events(config)?.0)
}

/// Like [`synth_gather`] but also returns the drawn events.
pub fn synth_gather_with_events(config: &SynthConfig) -> Result<(Gather, Vec<Event>)> {
    let events = draw_events(config)?;
    let mut g = render_events(config, &events)?;
    if config.noise_std > 0.0 {
        // separate stream so toggling noise leaves the event layout unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x006e_6f69_7365);
        let data: Vec<f32> = g
            .data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (v as f64 + config.noise_std * z) as f32
            })
            .collect();
        g = g.with_data(data)?;
    }
    Ok((g, events))
}

/// Earliest in-window arrival per trace, in samples (rounded), if any.
pub fn first_arrivals(
    events: &[Event],
    n_t: usize,
    n_x: usize,
    dt: f64,
    dx: f64,
) -> Vec<Option<usize>> {
    (0..n_x)
        .map(|j| {
            events
                .iter()
                .map(|e| e.arrival(j, dx))
                .filter(|&t| t >= 0.0)
                .map(|t| (t / dt).round())
                .filter(|&s| s < n_t as f64)
                .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.min(s))))
                .map(|s| s as usize)
        })
        .collect()
}

/// Ideal band-pass copy of `clean`, trace by trace.
pub fn make_ringing(clean: &Gather, lo: f64, hi: f64) -> Result<Gather> {
    dsp::bandpass_gather(clean, lo, hi)
}
