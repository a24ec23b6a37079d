//! Event data model: timestamped polarity spikes, window slicing, and the
//! voxel-grid tensor representation consumed by the network.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic bytes of the binary event file format.
pub const EVENT_FILE_MAGIC: &[u8; 4] = b"EVT1";

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Pixel column, 0 <= x < W.
    pub x: u16,
    /// Pixel row, 0 <= y < H.
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: i64,
    /// Polarity, exactly +1 or -1.
    pub p: i8,
}

/// Time-ordered events over a declared window on a fixed sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<Event>,
    pub t_start: i64,
    pub t_end: i64,
    /// Sensor size (H, W).
    pub sensor: (usize, usize),
}

impl EventSequence {
    /// Validates ordering, window membership, sensor bounds and polarity.
    pub fn new(
        events: Vec<Event>,
        t_start: i64,
        t_end: i64,
        sensor: (usize, usize),
    ) -> Result<Self> {
        if t_end < t_start {
            return Err(Error::config(format!(
                "event window end {t_end} precedes start {t_start}"
            )));
        }
        let (h, w) = sensor;
        let mut prev = i64::MIN;
        for (i, e) in events.iter().enumerate() {
            if e.t < prev {
                return Err(Error::data(format!(
                    "event {i} out of order: t={} after t={prev}",
                    e.t
                )));
            }
            prev = e.t;
            if e.t < t_start || e.t > t_end {
                return Err(Error::data(format!(
                    "event {i} at t={} outside window [{t_start}, {t_end}]",
                    e.t
                )));
            }
            if (e.x as usize) >= w || (e.y as usize) >= h {
                return Err(Error::data(format!(
                    "event {i} at ({}, {}) outside {h}x{w} sensor",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::data(format!("event {i} has polarity {}", e.p)));
            }
        }
        Ok(EventSequence {
            events,
            t_start,
            t_end,
            sensor,
        })
    }

    pub fn empty(t_start: i64, t_end: i64, sensor: (usize, usize)) -> Self {
        EventSequence {
            events: vec![],
            t_start,
            t_end,
            sensor,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> f64 {
        self.events.iter().map(|e| e.p as f64).sum()
    }
}

/// Splits a stream at `t_i` into the two abutting subsequences
/// `E_i` over `[t_i - dt, t_i]` and `E_{i+1}` over `[t_i, t_i + dt]`.
/// An event at exactly `t_i` belongs to the second subsequence only.
pub fn slice_window(
    stream: &EventSequence,
    t_i: i64,
    dt: i64,
) -> Result<(EventSequence, EventSequence)> {
    let (lo, hi) = (t_i - dt, t_i + dt);
    if lo < stream.t_start || hi > stream.t_end {
        return Err(Error::coverage(format!(
            "window [{lo}, {hi}] exceeds stream coverage [{}, {}]; missing [{}, {}]",
            stream.t_start,
            stream.t_end,
            lo.min(stream.t_start).max(lo),
            if hi > stream.t_end { hi } else { lo }
        )));
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for e in &stream.events {
        if e.t < lo || e.t > hi {
            continue;
        }
        if e.t < t_i {
            first.push(*e);
        } else {
            second.push(*e);
        }
    }
    Ok((
        EventSequence {
            events: first,
            t_start: lo,
            t_end: t_i,
            sensor: stream.sensor,
        },
        EventSequence {
            events: second,
            t_start: t_i,
            t_end: hi,
            sensor: stream.sensor,
        },
    ))
}

/// Dense B x H x W accumulation of event polarity with bilinear interpolation
/// along the time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub data: Tensor,
    /// Number of temporal bins (channel count is 2B when polarity-split).
    pub bins: usize,
    pub window: (i64, i64),
    pub split_polarity: bool,
}

impl VoxelGrid {
    pub fn sensor(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dims3();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.dims3().0
    }
}

/// Builds the voxel-grid representation of a subsequence.
///
/// Normalized time tau = (t - t_start) / (t_end - t_start) * (B - 1); each
/// event adds p * (1 - |tau - b|) to its two nearest integer bins. Spatial
/// placement is exact. A degenerate window (t_start == t_end) maps everything
/// to bin 0. With `split_polarity`, positive events accumulate into channels
/// [0, B) and negative events into [B, 2B), both with weight |p|.
pub fn build_voxel_grid(seq: &EventSequence, bins: usize, split_polarity: bool) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::config("voxel grid needs at least one bin"));
    }
    let (h, w) = seq.sensor;
    let channels = if split_polarity { 2 * bins } else { bins };
    let mut data = vec![0.0; channels * h * w];
    let span = (seq.t_end - seq.t_start) as f64;
    for (i, e) in seq.events.iter().enumerate() {
        if e.t < seq.t_start || e.t > seq.t_end {
            return Err(Error::data(format!(
                "event {i} at t={} outside voxel window [{}, {}]",
                e.t, seq.t_start, seq.t_end
            )));
        }
        let tau = if span > 0.0 && bins > 1 {
            (e.t - seq.t_start) as f64 / span * (bins - 1) as f64
        } else {
            0.0
        };
        let b0 = tau.floor() as usize;
        let frac = tau - b0 as f64;
        let chan_off = if split_polarity && e.p < 0 { bins } else { 0 };
        let val = if split_polarity { 1.0 } else { e.p as f64 };
        let idx = |b: usize| ((chan_off + b) * h + e.y as usize) * w + e.x as usize;
        data[idx(b0)] += val * (1.0 - frac);
        if frac > 0.0 && b0 + 1 < bins {
            data[idx(b0 + 1)] += val * frac;
        }
    }
    Ok(VoxelGrid {
        data: Tensor::new(vec![channels, h, w], data),
        bins,
        window: (seq.t_start, seq.t_end),
        split_polarity,
    })
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

/// Writes the binary event file: 16-byte header (magic "EVT1", u16 H, u16 W,
/// u64 record count) followed by little-endian records
/// (x: u16, y: u16, t: i64, p: i8).
pub fn write_events_binary(path: &Path, events: &[Event], sensor: (usize, usize)) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(EVENT_FILE_MAGIC)?;
    f.write_u16::<LittleEndian>(sensor.0 as u16)?;
    f.write_u16::<LittleEndian>(sensor.1 as u16)?;
    f.write_u64::<LittleEndian>(events.len() as u64)?;
    for e in events {
        f.write_u16::<LittleEndian>(e.x)?;
        f.write_u16::<LittleEndian>(e.y)?;
        f.write_i64::<LittleEndian>(e.t)?;
        f.write_i8(e.p)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads the binary event file; returns the events and the sensor size.
pub fn read_events_binary(path: &Path) -> Result<(Vec<Event>, (usize, usize))> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != EVENT_FILE_MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic {magic:?}, expected {EVENT_FILE_MAGIC:?}",
            path.display()
        )));
    }
    let h = f.read_u16::<LittleEndian>()? as usize;
    let w = f.read_u16::<LittleEndian>()? as usize;
    let count = f.read_u64::<LittleEndian>()? as usize;
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let x = f.read_u16::<LittleEndian>()?;
        let y = f.read_u16::<LittleEndian>()?;
        let t = f.read_i64::<LittleEndian>()?;
        let p = f.read_i8()?;
        if p != 1 && p != -1 {
            return Err(Error::data(format!(
                "{}: record {i} has polarity {p}",
                path.display()
            )));
        }
        events.push(Event { x, y, t, p });
    }
    Ok((events, (h, w)))
}

/// Writes the whitespace text format: one "t x y p" line per event.
pub fn write_events_text(path: &Path, events: &[Event]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for e in events {
        writeln!(f, "{} {} {} {}", e.t, e.x, e.y, e.p)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads the "t x y p" text format. Blank lines and '#' comments are skipped.
pub fn read_events_text(path: &Path) -> Result<Vec<Event>> {
    let f = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (ln, line) in f.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, what: &str| -> Result<i64> {
            tok.ok_or_else(|| Error::data(format!("{}: line {}: missing {what}", path.display(), ln + 1)))?
                .parse::<i64>()
                .map_err(|e| Error::data(format!("{}: line {}: bad {what}: {e}", path.display(), ln + 1)))
        };
        let t = parse(it.next(), "t")?;
        let x = parse(it.next(), "x")?;
        let y = parse(it.next(), "y")?;
        let p = parse(it.next(), "p")?;
        if p != 1 && p != -1 {
            return Err(Error::data(format!(
                "{}: line {}: polarity must be +1 or -1, got {p}",
                path.display(),
                ln + 1
            )));
        }
        events.push(Event {
            x: x as u16,
            y: y as u16,
            t,
            p: p as i8,
        });
    }
    Ok(events)
}
