//! On-disk dataset layout and the in-memory form consumed by training and
//! evaluation.
//!
//! A dataset root holds one directory per sequence:
//!
//! ```text
//! root/
//!   <sequence>/
//!     events.bin       binary event stream
//!     samples.json     sensor size, GT interval, reference timestamps
//!     flow/
//!       fw_000000.png  16-bit ground-truth flow (+ optional .raw lossless)
//! ```
//!
//! Sample `k` predicts flow over `[t_ref[k], t_ref[k] + dt]` from the event
//! windows `[t_ref[k] - dt, t_ref[k]]` and `[t_ref[k], t_ref[k] + dt]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    build_voxel_grid, read_events_binary, slice_window, Event, EventSequence, VoxelGrid,
};
use crate::flow::{read_flow_png, read_flow_raw, write_flow_png, write_flow_raw, FlowField};

/// Per-sequence index file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceIndex {
    /// Sensor size (H, W).
    pub sensor: (usize, usize),
    /// Ground-truth interval in microseconds.
    pub dt_us: i64,
    /// Start of each GT interval; events must cover `[t_refs[0] - dt, last + dt]`.
    pub t_refs: Vec<i64>,
    /// Declared event coverage window.
    pub coverage_us: (i64, i64),
}

/// A fully materialized sequence: abutting voxel-grid windows plus one
/// ground-truth field per interval.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub name: String,
    pub sensor: (usize, usize),
    pub dt: i64,
    /// `len() == gts.len() + 1`; window k covers `[t_refs[k] - dt, t_refs[k]]`.
    pub grids: Vec<VoxelGrid>,
    pub gts: Vec<Option<FlowField>>,
    pub t_refs: Vec<i64>,
    /// Events per GT interval `[t_refs[k], t_refs[k] + dt]` for sparse masking.
    pub interval_events: Vec<EventSequence>,
}

impl SequenceData {
    pub fn len(&self) -> usize {
        self.gts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub sequences: Vec<SequenceData>,
}

impl Dataset {
    /// All (sequence, start) windows admitting `seq_len` consecutive samples
    /// with ground truth present.
    pub fn windows(&self, seq_len: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (si, seq) in self.sequences.iter().enumerate() {
            if seq.len() < seq_len {
                continue;
            }
            for start in 0..=seq.len() - seq_len {
                if (start..start + seq_len).all(|k| seq.gts[k].is_some()) {
                    out.push((si, start));
                }
            }
        }
        out
    }
}

/// Builds a sequence in memory from a raw event stream.
pub fn materialize_sequence(
    name: &str,
    events: &EventSequence,
    dt: i64,
    t_refs: &[i64],
    gts: Vec<Option<FlowField>>,
    bins: usize,
    split_polarity: bool,
) -> Result<SequenceData> {
    if t_refs.len() != gts.len() {
        return Err(Error::config(format!(
            "{name}: {} reference times but {} ground-truth fields",
            t_refs.len(),
            gts.len()
        )));
    }
    if t_refs.is_empty() {
        return Err(Error::config(format!("{name}: empty sequence")));
    }
    for pair in t_refs.windows(2) {
        if pair[1] - pair[0] != dt {
            return Err(Error::config(format!(
                "{name}: reference times must step by dt={dt}, got {} -> {}",
                pair[0], pair[1]
            )));
        }
    }
    let mut slices = Vec::with_capacity(t_refs.len());
    for &t_ref in t_refs {
        slices.push(slice_window(events, t_ref, dt)?);
    }
    // interval k's canonical window is half-open [t_ref, t_ref + dt) except
    // the last, which keeps its right edge; boundary events belong to the
    // later interval, so no event lands in two windows
    let mut grids = Vec::with_capacity(t_refs.len() + 1);
    grids.push(build_voxel_grid(&slices[0].0, bins, split_polarity)?);
    let mut interval_events = Vec::with_capacity(t_refs.len());
    for k in 0..t_refs.len() {
        let window = if k + 1 < t_refs.len() {
            slices[k + 1].0.clone()
        } else {
            slices[k].1.clone()
        };
        grids.push(build_voxel_grid(&window, bins, split_polarity)?);
        interval_events.push(window);
    }
    Ok(SequenceData {
        name: name.to_string(),
        sensor: events.sensor,
        dt,
        grids,
        gts,
        t_refs: t_refs.to_vec(),
        interval_events,
    })
}

/// Writes one sequence directory (events, index, GT flow files).
pub fn write_sequence_dir(
    dir: &Path,
    events: &[Event],
    sensor: (usize, usize),
    coverage: (i64, i64),
    dt: i64,
    t_refs: &[i64],
    gts: &[FlowField],
    write_raw: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("flow"))?;
    crate::events::write_events_binary(&dir.join("events.bin"), events, sensor)?;
    let index = SequenceIndex {
        sensor,
        dt_us: dt,
        t_refs: t_refs.to_vec(),
        coverage_us: coverage,
    };
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::data(format!("serialize samples.json: {e}")))?;
    std::fs::write(dir.join("samples.json"), json)?;
    for (k, gt) in gts.iter().enumerate() {
        write_flow_png(&dir.join(format!("flow/fw_{k:06}.png")), gt)?;
        if write_raw {
            write_flow_raw(&dir.join(format!("flow/fw_{k:06}.raw")), gt)?;
        }
    }
    Ok(())
}

/// Loads every sequence directory under `root`; a root that itself holds a
/// `samples.json` is treated as a single sequence. Samples with missing GT
/// files are kept with `None` ground truth (evaluation skips and logs them).
pub fn load_dataset(root: &Path, bins: usize, split_polarity: bool) -> Result<Dataset> {
    let mut seq_dirs: Vec<PathBuf> = if root.join("samples.json").exists() {
        vec![root.to_path_buf()]
    } else {
        std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.join("samples.json").exists())
            .collect()
    };
    seq_dirs.sort();
    if seq_dirs.is_empty() {
        return Err(Error::data(format!(
            "{}: no sequence directories with samples.json found",
            root.display()
        )));
    }
    let mut sequences = Vec::new();
    for dir in seq_dirs {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let index: SequenceIndex =
            serde_json::from_str(&std::fs::read_to_string(dir.join("samples.json"))?)
                .map_err(|e| Error::data(format!("{}/samples.json: {e}", dir.display())))?;
        let (events, sensor) = read_events_binary(&dir.join("events.bin"))?;
        if sensor != index.sensor {
            return Err(Error::data(format!(
                "{name}: samples.json sensor {:?} != events.bin sensor {sensor:?}",
                index.sensor
            )));
        }
        let stream = EventSequence::new(events, index.coverage_us.0, index.coverage_us.1, sensor)?;
        let mut gts = Vec::with_capacity(index.t_refs.len());
        for k in 0..index.t_refs.len() {
            let raw = dir.join(format!("flow/fw_{k:06}.raw"));
            let png = dir.join(format!("flow/fw_{k:06}.png"));
            let gt = if raw.exists() {
                Some(read_flow_raw(&raw)?)
            } else if png.exists() {
                Some(read_flow_png(&png)?)
            } else {
                None
            };
            gts.push(gt);
        }
        sequences.push(materialize_sequence(
            &name,
            &stream,
            index.dt_us,
            &index.t_refs,
            gts,
            bins,
            split_polarity,
        )?);
    }
    Ok(Dataset { sequences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;

    #[test]
    fn sequence_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let seq_dir = root.join("seq_a");
        let sensor = (8, 8);
        let dt = 100;
        let t_refs = vec![100, 200, 300];
        let events: Vec<Event> = (0..40)
            .map(|i| Event {
                x: (i % 8) as u16,
                y: (i / 8 % 8) as u16,
                t: i * 10,
                p: if i % 2 == 0 { 1 } else { -1 },
            })
            .collect();
        let gts: Vec<FlowField> = (0..3)
            .map(|k| FlowField::constant(8, 8, k as f64, -1.0, Resolution::Full))
            .collect();
        write_sequence_dir(&seq_dir, &events, sensor, (0, 400), dt, &t_refs, &gts, true)
            .unwrap();

        let ds = load_dataset(root, 3, false).unwrap();
        assert_eq!(ds.sequences.len(), 1);
        let seq = &ds.sequences[0];
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.grids.len(), 4);
        // grids abut exactly
        for pair in seq.grids.windows(2) {
            assert_eq!(pair[0].window.1, pair[1].window.0);
        }
        // raw GT round trip is lossless
        for (k, gt) in seq.gts.iter().enumerate() {
            assert_eq!(gt.as_ref().unwrap(), &gts[k]);
        }
        // event mass is conserved across the grid windows
        let total: f64 = seq.grids.iter().map(|g| g.data.sum()).sum();
        let expected: f64 = events
            .iter()
            .filter(|e| e.t <= 400)
            .map(|e| e.p as f64)
            .sum();
        assert!((total - expected).abs() < 1e-9);
        // windows produce seq_len-sized training windows
        assert_eq!(ds.windows(2), vec![(0, 0), (0, 1)]);
        assert_eq!(ds.windows(4), Vec::<(usize, usize)>::new());
    }

    #[test]
    fn missing_gt_samples_are_kept_as_holes() {
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("seq_b");
        let gts: Vec<FlowField> =
            (0..2).map(|_| FlowField::zeros(4, 4, Resolution::Full)).collect();
        write_sequence_dir(&seq_dir, &[], (4, 4), (0, 300), 100, &[100, 200], &gts, false)
            .unwrap();
        std::fs::remove_file(seq_dir.join("flow/fw_000001.png")).unwrap();
        let ds = load_dataset(dir.path(), 2, false).unwrap();
        assert!(ds.sequences[0].gts[0].is_some());
        assert!(ds.sequences[0].gts[1].is_none());
        assert_eq!(ds.windows(1), vec![(0, 0)]);
    }
}
