//! Patch datasets of (ringing, clean) pairs and the minibatch Adam loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::DEGENERATE_SCALE;
use crate::error::{Error, Result};
use crate::io;
use crate::model::Network;
use crate::synthetics::{make_ringing, Gather};
use crate::tensor_core::{adam_step, mse_loss, AdamConfig, AdamState, Dims, Tensor4};

pub const DEFAULT_LO_HZ: f64 = 6.0;
pub const DEFAULT_HI_HZ: f64 = 72.0;

/// One aligned window of a ringing gather and its clean label. Patches are
/// row-major with time down the rows and traces across the columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub input: Vec<f32>,
    pub label: Vec<f32>,
    pub patch: usize,
    pub gather_id: usize,
    /// Top-left corner (time sample, trace).
    pub origin: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub stride: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint after every this many epochs; `None` disables.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            patch: 64,
            stride: 32,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.patch < 1 {
            return Err(Error::config("patch", "must be at least 1"));
        }
        if self.stride < 1 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLoss {
    /// Zero-based global step index.
    pub step: usize,
    /// One-based epoch number.
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LossLog {
    pub steps: Vec<StepLoss>,
    /// Per-epoch loss averaged over samples (batches weighted by size).
    pub epoch_means: Vec<f64>,
}

/// `floor((n - patch) / stride) + 1` windows per axis.
pub fn patch_count(n_t: usize, n_x: usize, patch: usize, stride: usize) -> usize {
    if n_t < patch || n_x < patch || stride == 0 {
        return 0;
    }
    ((n_t - patch) / stride + 1) * ((n_x - patch) / stride + 1)
}

/// Windows fully inside the gathers with origins on multiples of `stride`,
/// time-major order. Both gathers must already share one normalization.
pub fn extract_patches(
    ringing: &Gather,
    clean: &Gather,
    patch: usize,
    stride: usize,
    gather_id: usize,
) -> Result<Vec<TrainPair>> {
    if !ringing.same_geometry(clean) {
        return Err(Error::shape(
            "extract_patches",
            format!("{}x{}", ringing.n_t(), ringing.n_x()),
            format!("{}x{}", clean.n_t(), clean.n_x()),
        ));
    }
    if patch < 1 || stride < 1 {
        return Err(Error::config(
            "patch",
            "patch and stride must be at least 1",
        ));
    }
    let (n_t, n_x) = (clean.n_t(), clean.n_x());
    if n_t < patch || n_x < patch {
        return Err(Error::GatherTooSmall {
            n_t,
            n_x,
            need_t: patch,
            need_x: patch,
        });
    }
    let crop = |g: &Gather, t0: usize, x0: usize| {
        let mut out = Vec::with_capacity(patch * patch);
        for t in t0..t0 + patch {
            out.extend((x0..x0 + patch).map(|x| g.at(t, x)));
        }
        out
    };
    let mut pairs = Vec::with_capacity(patch_count(n_t, n_x, patch, stride));
    for t0 in (0..=n_t - patch).step_by(stride) {
        for x0 in (0..=n_x - patch).step_by(stride) {
            pairs.push(TrainPair {
                input: crop(ringing, t0, x0),
                label: crop(clean, t0, x0),
                patch,
                gather_id,
                origin: (t0, x0),
            });
        }
    }
    Ok(pairs)
}

/// Band-passes each clean gather to make its ringing input, scales both by
/// the clean gather's max-abs and cuts them into patches.
pub fn build_dataset(
    clean: &[Gather],
    lo: f64,
    hi: f64,
    patch: usize,
    stride: usize,
) -> Result<Vec<TrainPair>> {
    let mut pairs = Vec::new();
    for (id, g) in clean.iter().enumerate() {
        let ringing = make_ringing(g, lo, hi)?;
        let scale = g.max_abs();
        let inv = if scale < DEGENERATE_SCALE {
            1.0
        } else {
            1.0 / scale
        };
        let r = ringing.map(|v| v * inv)?;
        let c = g.map(|v| v * inv)?;
        pairs.extend(extract_patches(&r, &c, patch, stride, id)?);
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(pairs)
}

fn stack(pairs: &[&TrainPair], label: bool) -> Result<Tensor4> {
    let p = pairs[0].patch;
    let mut data = Vec::with_capacity(pairs.len() * p * p);
    for pair in pairs {
        data.extend_from_slice(if label { &pair.label } else { &pair.input });
    }
    Tensor4::from_vec(Dims::new(pairs.len(), 1, p, p), data)
}

pub fn train(net: &mut Network, dataset: &[TrainPair], config: &TrainConfig) -> Result<LossLog> {
    train_with_progress(net, dataset, config, |_, _| {})
}

/// Runs the loop, calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_with_progress(
    net: &mut Network,
    dataset: &[TrainPair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<LossLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let patch = dataset[0].patch;
    if let Some(bad) = dataset.iter().find(|p| p.patch != patch) {
        return Err(Error::shape("train", patch, bad.patch));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.adam)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = LossLog::default();
    net.params.zero_grad();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let x = stack(&batch, false)?;
            let y = stack(&batch, true)?;
            let (out, cache) = net.forward_train(&x)?;
            let (loss, grad) = mse_loss(&out, &y)?;
            let step = log.steps.len();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("loss at step {step} (epoch {epoch})"),
                });
            }
            net.backward(cache, &grad)?;
            adam_step(&mut net.params.params_mut(), &mut adam)?;
            net.params.zero_grad();
            if !net.params.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("parameters after step {step} (epoch {epoch})"),
                });
            }
            log.steps.push(StepLoss { step, epoch, loss });
            weighted += loss * batch.len() as f64;
        }
        let mean = weighted / dataset.len() as f64;
        log.epoch_means.push(mean);
        on_epoch(epoch, mean);
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if epoch % every == 0 {
                io::write_weights(
                    &net.params,
                    dir.join(format!("checkpoint_epoch{epoch:03}.vswt")),
                )?;
            }
        }
    }
    Ok(log)
}

/// Mean of every run of `window` consecutive values (`len - window + 1`
/// entries).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::bandpass_gather;
    use crate::model::build_model;
    use crate::synthetics::{synth_gather, SynthConfig};

    fn synth(n_t: usize, n_x: usize, seed: u64) -> Gather {
        synth_gather(&SynthConfig {
            n_t,
            n_x,
            num_events: 4,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn count_formula() {
        assert_eq!(patch_count(64, 64, 64, 32), 1);
        assert_eq!(patch_count(1000, 1200, 64, 32), 30 * 36);
        assert_eq!(patch_count(256, 320, 64, 32), 7 * 9);
        assert_eq!(patch_count(63, 64, 64, 32), 0);
    }

    #[test]
    fn single_window_gather() {
        let g = synth(64, 64, 1);
        let pairs = extract_patches(&g, &g, 64, 32, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].origin, (0, 0));
    }

    #[test]
    fn full_size_count_and_origins() {
        let g = Gather::zeros(1000, 1200, 0.002, 3.125).unwrap();
        let pairs = extract_patches(&g, &g, 64, 32, 3).unwrap();
        assert_eq!(pairs.len(), 1080);
        assert!(pairs
            .iter()
            .all(|p| p.origin.0 % 32 == 0 && p.origin.1 % 32 == 0));
        assert!(pairs
            .iter()
            .all(|p| p.origin.0 + 64 <= 1000 && p.origin.1 + 64 <= 1200));
        assert!(pairs.iter().all(|p| p.gather_id == 3));
    }

    #[test]
    fn too_small_and_misaligned() {
        let g = synth(50, 80, 1);
        assert!(matches!(
            extract_patches(&g, &g, 64, 32, 0),
            Err(Error::GatherTooSmall { .. })
        ));
        let h = synth(80, 80, 1);
        assert!(extract_patches(&g, &h, 32, 16, 0).is_err());
    }

    #[test]
    fn patch_values_follow_window() {
        let g = synth(100, 90, 2);
        let pairs = extract_patches(&g, &g, 16, 20, 0).unwrap();
        let p = &pairs[7];
        let (t0, x0) = p.origin;
        for t in 0..16 {
            for x in 0..16 {
                assert_eq!(p.label[t * 16 + x], g.at(t0 + t, x0 + x));
            }
        }
    }

    #[test]
    fn inputs_are_band_passed_labels() {
        // band-passing is not local, so the oracle filters the parent gather
        let clean = synth(256, 96, 3);
        let pairs = build_dataset(std::slice::from_ref(&clean), 6.0, 72.0, 64, 32).unwrap();
        let scale = clean.max_abs();
        let ringing = bandpass_gather(&clean, 6.0, 72.0).unwrap();
        for p in pairs.iter().step_by(3) {
            let (t0, x0) = p.origin;
            for t in 0..64 {
                for x in 0..64 {
                    let want = ringing.at(t0 + t, x0 + x) / scale;
                    assert!((p.input[t * 64 + x] - want).abs() <= 1e-6);
                    assert!(p.label[t * 64 + x].abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn single_pair_overfits() {
        let clean = synth(64, 64, 4);
        let pairs = build_dataset(&[clean], 6.0, 72.0, 64, 32).unwrap();
        let one = vec![pairs[0].clone()];
        let mut net = build_model(1).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let log = train(&mut net, &one, &cfg).unwrap();
        assert_eq!(log.steps.len(), 200);
        let first = log.steps[0].loss;
        let last = log.steps[199].loss;
        assert!(last < 1e-2 * first, "{first} -> {last}");
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let clean = synth(96, 96, 5);
        let pairs = build_dataset(&[clean], 6.0, 72.0, 32, 32).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = build_model(2).unwrap();
            let log = train(&mut net, &pairs, &cfg).unwrap();
            (log, io::encode_weights(&net.params))
        };
        let (a, wa) = run();
        let (b, wb) = run();
        assert_eq!(a.steps.len(), 2 * 3);
        assert!(a
            .steps
            .iter()
            .zip(&b.steps)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()));
        assert_eq!(wa, wb);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let clean = synth(64, 64, 6);
        let pairs = build_dataset(&[clean], 6.0, 72.0, 32, 32).unwrap();
        let mut net = build_model(3).unwrap();
        let before = net.params.clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let log = train(&mut net, &pairs, &cfg).unwrap();
        for (a, b) in net.params.params().iter().zip(before.params()) {
            assert_eq!(a.value, b.value);
        }
        // one full batch per epoch sees the same data; only the shuffled
        // summation order differs between epochs
        let l0 = log.steps[0].loss;
        assert!(log.steps.iter().all(|s| (s.loss - l0).abs() <= 1e-6 * l0));
    }

    #[test]
    fn epoch_means_and_checkpoints() {
        let clean = synth(64, 96, 7);
        let pairs = build_dataset(&[clean], 6.0, 72.0, 32, 32).unwrap();
        assert_eq!(pairs.len(), 2 * 3);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            checkpoint_every: Some(2),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let mut net = build_model(4).unwrap();
        let log = train(&mut net, &pairs, &cfg).unwrap();
        // last partial batch is kept: batches of 4 and 2
        assert_eq!(log.steps.len(), 4 * 2);
        let e1 = &log.steps[..2];
        let want = (e1[0].loss * 4.0 + e1[1].loss * 2.0) / 6.0;
        assert!((log.epoch_means[0] - want).abs() < 1e-12);
        assert!(dir.path().join("checkpoint_epoch002.vswt").exists());
        assert!(dir.path().join("checkpoint_epoch004.vswt").exists());
        assert!(!dir.path().join("checkpoint_epoch001.vswt").exists());
        let csv = io::loss_csv(&log);
        assert!(csv.starts_with("step,epoch,loss\n0,1,"));
        assert_eq!(csv.lines().count(), 1 + 8);
    }

    #[test]
    fn rejects_bad_config_and_empty_data() {
        let mut net = build_model(1).unwrap();
        assert!(matches!(
            train(&mut net, &[], &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidConfig {
                field: "epochs",
                ..
            })
        ));
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[3.0, 6.0, 9.0, 0.0], 3), vec![6.0, 5.0]);
        assert!(moving_average(&[1.0], 3).is_empty());
    }
}
