//! Sequence training: discounted L1 supervision, backprop through time via
//! the warm-start connection, augmentation, curricula, and the phase runner.

pub mod adam;
pub mod augment;
pub mod loss;
pub mod schedule;
pub mod step;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SequenceData};
use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::flow::FlowField;
use crate::model::FlowNet;

pub use adam::Adam;
pub use augment::augment;
pub use loss::{sequence_loss, sequence_loss_on_tape};
pub use schedule::{schedule, Phase, SchedulePreset};
pub use step::{cross_timestep_gradient, last_timestep_loss, train_sequence_step, StepOutput};

/// Training hyperparameters; this struct is the on-disk config file schema
/// (flat key-value document, unknown keys rejected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Iteration discount of the sequence loss.
    pub gamma: f64,
    /// Sequence length N_i (timesteps per sample).
    pub seq_len: usize,
    /// Refinement iterations N_k per timestep.
    pub iters: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Crop (height, width); absent trains at full resolution.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
    pub hflip_prob: f64,
    pub warmstart_in_training: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.seq_len == 0 || self.iters == 0 || self.epochs == 0 {
            return Err(Error::config(
                "seq_len, iters and epochs must all be >= 1",
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config(format!(
                "hflip_prob must be in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        Ok(())
    }

    pub fn load_toml(path: &std::path::Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_toml(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::data(format!("serialize train config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// One training window: N_i + 1 abutting voxel grids and N_i ground-truth
/// fields.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub grids: Vec<VoxelGrid>,
    pub gts: Vec<FlowField>,
    pub t_refs: Vec<i64>,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        if self.grids.len() != self.gts.len() + 1 {
            return Err(Error::shape(format!(
                "{} grids for {} ground-truth fields (need gts + 1)",
                self.grids.len(),
                self.gts.len()
            )));
        }
        for (i, pair) in self.grids.windows(2).enumerate() {
            if pair[0].window.1 != pair[1].window.0 {
                return Err(Error::config(format!(
                    "grid windows {i} and {} do not abut: {:?} vs {:?}",
                    i + 1,
                    pair[0].window,
                    pair[1].window
                )));
            }
        }
        let sensor = self.grids[0].sensor();
        for g in &self.grids {
            if g.sensor() != sensor {
                return Err(Error::shape("grids differ in sensor size"));
            }
        }
        for gt in &self.gts {
            if gt.dims() != sensor {
                return Err(Error::shape(format!(
                    "GT {:?} does not match sensor {:?}",
                    gt.dims(),
                    sensor
                )));
            }
        }
        Ok(())
    }

    pub fn sensor(&self) -> (usize, usize) {
        self.grids[0].sensor()
    }
}

impl SequenceData {
    /// Extracts the training window starting at sample `start`.
    pub fn train_sample(&self, start: usize, seq_len: usize) -> Result<TrainSample> {
        if start + seq_len > self.len() {
            return Err(Error::config(format!(
                "window {start}+{seq_len} exceeds sequence of {} samples",
                self.len()
            )));
        }
        let gts = (start..start + seq_len)
            .map(|k| {
                self.gts[k].clone().ok_or_else(|| {
                    Error::data(format!("{}: sample {k} has no ground truth", self.name))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainSample {
            grids: self.grids[start..start + seq_len + 1].to_vec(),
            gts,
            t_refs: self.t_refs[start..start + seq_len].to_vec(),
        })
    }
}

/// Options shared by all phases of a run.
#[derive(Debug, Clone)]
pub struct TrainerOptions {
    pub gamma: f64,
    pub iters: usize,
    pub hflip_prob: f64,
    pub seed: u64,
}

/// One metrics-log row.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    pub lr: f64,
    pub seq_len: usize,
    pub wallclock: f64,
}

/// Runs the phase plan. Samples are visited in a seed-determined shuffled
/// order per epoch; each sample is one optimizer step. `resume_at` skips
/// (phase, epochs-within-phase) already completed. Returns the final global
/// step count.
#[allow(clippy::too_many_arguments)]
pub fn train_phases(
    model: &mut FlowNet,
    opt: &mut Adam,
    dataset: &Dataset,
    phases: &[Phase],
    opts: &TrainerOptions,
    mut step_counter: u64,
    resume_at: Option<(usize, usize)>,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
    mut on_epoch_end: impl FnMut(&FlowNet, &Adam, u64, usize, usize) -> Result<()>,
) -> Result<u64> {
    let start = Instant::now();
    let (skip_phase, skip_epochs) = resume_at.unwrap_or((0, 0));
    for (pi, phase) in phases.iter().enumerate() {
        if pi < skip_phase {
            continue;
        }
        let windows = dataset.windows(phase.seq_len);
        if windows.is_empty() {
            return Err(Error::data(format!(
                "phase {}: no training windows of length {}",
                phase.name, phase.seq_len
            )));
        }
        opt.lr = phase.lr;
        let cfg = TrainConfig {
            gamma: opts.gamma,
            seq_len: phase.seq_len,
            iters: opts.iters,
            lr: phase.lr,
            epochs: phase.epochs,
            crop: phase.crop,
            hflip_prob: opts.hflip_prob,
            warmstart_in_training: phase.warmstart,
        };
        let first_epoch = if pi == skip_phase { skip_epochs } else { 0 };
        for epoch in first_epoch..phase.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((pi as u64) << 32)
                    .wrapping_add(epoch as u64),
            );
            let mut order = windows.clone();
            order.shuffle(&mut rng);
            for (si, start_idx) in order {
                let sample = dataset.sequences[si].train_sample(start_idx, phase.seq_len)?;
                let sample = augment(&sample, phase.crop, opts.hflip_prob, &mut rng)?;
                let out = train_sequence_step(model, &sample, &cfg)?;
                opt.step(model.params_mut(), &out.grads)?;
                step_counter += 1;
                on_step(&StepLog {
                    step: step_counter,
                    phase: phase.name.clone(),
                    loss: out.loss,
                    lr: phase.lr,
                    seq_len: phase.seq_len,
                    wallclock: start.elapsed().as_secs_f64(),
                })?;
            }
            on_epoch_end(model, opt, step_counter, pi, epoch + 1)?;
        }
    }
    Ok(step_counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;
    use crate::model::ModelConfig;
    use crate::synthetic;
    use crate::tensor::Tensor;

    fn toy_sample(seed: u64, n_i: usize, flow: (f64, f64)) -> TrainSample {
        synthetic::constant_flow_sample(seed, (16, 16), flow, n_i, 2, false).unwrap()
    }

    #[test]
    fn step_produces_finite_grads_for_all_params() {
        let model = FlowNet::new(ModelConfig::tiny(), 3).unwrap();
        let sample = toy_sample(1, 2, (1.0, 0.5));
        let cfg = TrainConfig {
            gamma: 0.8,
            seq_len: 2,
            iters: 2,
            lr: 1e-4,
            epochs: 1,
            crop: None,
            hflip_prob: 0.0,
            warmstart_in_training: true,
        };
        let out = train_sequence_step(&model, &sample, &cfg).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert_eq!(out.grads.len(), model.params().len());
        assert_eq!(out.empty_gt_timesteps, 0);
    }

    #[test]
    fn warmstart_adds_no_parameters_to_the_step() {
        // the gradient name set is the full parameter set in both modes:
        // enabling warm start introduces no new trainables
        let model = FlowNet::new(ModelConfig::tiny(), 4).unwrap();
        let sample = toy_sample(2, 2, (0.8, -0.4));
        let mut cfg = TrainConfig {
            gamma: 0.8,
            seq_len: 2,
            iters: 2,
            lr: 1e-4,
            epochs: 1,
            crop: None,
            hflip_prob: 0.0,
            warmstart_in_training: false,
        };
        let names = |out: &StepOutput| {
            let mut v: Vec<String> = out.grads.iter().map(|(n, _)| n.clone()).collect();
            v.sort();
            v
        };
        let cold = names(&train_sequence_step(&model, &sample, &cfg).unwrap());
        cfg.warmstart_in_training = true;
        let warm = names(&train_sequence_step(&model, &sample, &cfg).unwrap());
        assert_eq!(cold, warm);
        let mut model_names: Vec<String> =
            model.params().iter().map(|p| p.name.clone()).collect();
        model_names.sort();
        assert_eq!(cold, model_names);
    }

    #[test]
    fn bptt_probe_is_severed_without_warmstart_and_live_with_it() {
        let model = FlowNet::new(ModelConfig::tiny(), 5).unwrap();
        let sample = toy_sample(3, 2, (1.2, 0.0));
        let mut cfg = TrainConfig {
            gamma: 0.8,
            seq_len: 2,
            iters: 2,
            lr: 1e-4,
            epochs: 1,
            crop: None,
            hflip_prob: 0.0,
            warmstart_in_training: false,
        };
        let g_off = cross_timestep_gradient(&model, &sample, &cfg).unwrap();
        assert!(g_off.data().iter().all(|v| *v == 0.0), "graph not severed");

        cfg.warmstart_in_training = true;
        let g_on = cross_timestep_gradient(&model, &sample, &cfg).unwrap();
        let norm: f64 = g_on.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "cross-timestep gradient vanished: {norm}");

        // finite-difference spot check on the strongest component
        let (imax, gmax) = g_on
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, v)| (i, *v))
            .unwrap();
        let eps = 1e-4;
        let mut plus = sample.clone();
        plus.grids[0].data.data_mut()[imax] += eps;
        let mut minus = sample.clone();
        minus.grids[0].data.data_mut()[imax] -= eps;
        let fp = last_timestep_loss(&model, &plus, &cfg).unwrap();
        let fm = last_timestep_loss(&model, &minus, &cfg).unwrap();
        let numeric = (fp - fm) / (2.0 * eps);
        assert!(
            (numeric - gmax).abs() < 1e-3 * gmax.abs().max(1.0),
            "FD {numeric} vs analytic {gmax}"
        );
    }

    #[test]
    fn empty_gt_timestep_is_counted_not_fatal() {
        let model = FlowNet::new(ModelConfig::tiny(), 6).unwrap();
        let mut sample = toy_sample(4, 2, (1.0, 0.0));
        for y in 0..16 {
            for x in 0..16 {
                sample.gts[0].set_valid(y, x, false);
            }
        }
        let cfg = TrainConfig {
            gamma: 0.8,
            seq_len: 2,
            iters: 1,
            lr: 1e-4,
            epochs: 1,
            crop: None,
            hflip_prob: 0.0,
            warmstart_in_training: false,
        };
        let out = train_sequence_step(&model, &sample, &cfg).unwrap();
        assert_eq!(out.empty_gt_timesteps, 1);
    }

    #[test]
    fn mismatched_sample_shapes_are_rejected() {
        let sample = toy_sample(5, 2, (1.0, 0.0));
        let mut bad = sample.clone();
        bad.gts.pop();
        assert!(bad.validate().is_err());

        let mut bad2 = sample.clone();
        bad2.gts[0] = FlowField::zeros(8, 8, Resolution::Full);
        assert!(bad2.validate().is_err());

        let mut bad3 = sample;
        bad3.grids[1].window = (bad3.grids[1].window.0 + 1, bad3.grids[1].window.1);
        assert!(bad3.validate().is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        std::fs::write(
            &path,
            "gamma = 0.8\nseq_len = 2\niters = 4\nlr = 1e-4\nepochs = 3\nhflip_prob = 0.5\nwarmstart_in_training = true\nbogus_key = 1\n",
        )
        .unwrap();
        let err = TrainConfig::load_toml(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("bogus_key"), "{err}");

        std::fs::write(
            &path,
            "gamma = 0.8\nseq_len = 2\niters = 4\nlr = 1e-4\nepochs = 3\ncrop = [8, 12]\nhflip_prob = 0.5\nwarmstart_in_training = true\n",
        )
        .unwrap();
        let cfg = TrainConfig::load_toml(&path).unwrap();
        assert_eq!(cfg.crop, Some((8, 12)));
    }

    #[test]
    fn non_finite_input_grid_aborts_with_diagnostics() {
        let model = FlowNet::new(ModelConfig::tiny(), 7).unwrap();
        let mut sample = toy_sample(6, 2, (1.0, 0.0));
        sample.grids[1].data = Tensor::full(&[2, 16, 16], f64::NAN);
        let cfg = TrainConfig {
            gamma: 0.8,
            seq_len: 2,
            iters: 1,
            lr: 1e-4,
            epochs: 1,
            crop: None,
            hflip_prob: 0.0,
            warmstart_in_training: false,
        };
        let err = train_sequence_step(&model, &sample, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("timestep 0"), "{err}");
    }
}
