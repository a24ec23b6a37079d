//! Declarative training phase plans mirroring the published curricula, with
//! proportional desk-scale shrinking.

use serde::{Deserialize, Serialize};

use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePreset {
    /// Single phase taken directly from the config.
    Single,
    /// Cold 40 epochs, then warm-start fine-tuning at sequence length 3 for
    /// 6 epochs, then lr/10 at full resolution.
    Dsec,
    /// Warm-start from scratch at sequence length 2, switching to 5 after 10
    /// epochs.
    Mvsec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub lr: f64,
    pub seq_len: usize,
    pub warmstart: bool,
    pub epochs: usize,
    /// Crop (H, W); None trains at full resolution.
    pub crop: Option<(usize, usize)>,
}

fn scaled(epochs: usize, scale: f64) -> usize {
    ((epochs as f64 * scale).round() as usize).max(1)
}

/// Expands a preset into phase records. `scale` shrinks epoch counts
/// proportionally (desk-scale presets), never below one epoch.
pub fn schedule(preset: SchedulePreset, base: &TrainConfig, scale: f64) -> Vec<Phase> {
    match preset {
        SchedulePreset::Single => vec![Phase {
            name: "single".into(),
            lr: base.lr,
            seq_len: base.seq_len,
            warmstart: base.warmstart_in_training,
            epochs: scaled(base.epochs, scale),
            crop: base.crop,
        }],
        SchedulePreset::Dsec => vec![
            Phase {
                name: "cold".into(),
                lr: base.lr,
                seq_len: 1,
                warmstart: false,
                epochs: scaled(40, scale),
                crop: base.crop,
            },
            Phase {
                name: "warm-seq3".into(),
                lr: base.lr,
                seq_len: 3,
                warmstart: true,
                epochs: scaled(6, scale),
                crop: base.crop,
            },
            Phase {
                name: "full-res".into(),
                lr: base.lr / 10.0,
                seq_len: 3,
                warmstart: true,
                epochs: scaled(2, scale),
                crop: None,
            },
        ],
        SchedulePreset::Mvsec => vec![
            Phase {
                name: "warm-seq2".into(),
                lr: base.lr,
                seq_len: 2,
                warmstart: true,
                epochs: scaled(10, scale),
                crop: base.crop,
            },
            Phase {
                name: "warm-seq5".into(),
                lr: base.lr,
                seq_len: 5,
                warmstart: true,
                epochs: scaled(10, scale),
                crop: base.crop,
            },
        ],
    }
}
