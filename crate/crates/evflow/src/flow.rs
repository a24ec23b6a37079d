//! Dense flow fields with validity masks, plus the 16-bit image codec and the
//! lossless raw container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic bytes of the raw float flow container.
pub const RAW_FLOW_MAGIC: &[u8; 4] = b"EVFR";

/// Scale of the internal flow state relative to sensor resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Resolution {
    Full,
    Eighth,
}

/// Per-pixel displacement map with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    /// `[2, H, W]`: channel 0 is u (columns), channel 1 is v (rows).
    data: Tensor,
    valid: Vec<bool>,
    pub resolution: Resolution,
}

impl FlowField {
    pub fn new(data: Tensor, valid: Vec<bool>, resolution: Resolution) -> Result<Self> {
        let (two, h, w) = data.dims3();
        if two != 2 {
            return Err(Error::shape(format!(
                "flow field needs 2 channels, got {two}"
            )));
        }
        if valid.len() != h * w {
            return Err(Error::shape(format!(
                "validity mask size {} does not match {h}x{w}",
                valid.len()
            )));
        }
        for (i, ok) in valid.iter().enumerate() {
            if *ok {
                let (u, v) = (data.data()[i], data.data()[h * w + i]);
                if !u.is_finite() || !v.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite flow ({u}, {v}) at valid pixel ({}, {})",
                        i / w,
                        i % w
                    )));
                }
            }
        }
        Ok(FlowField {
            data,
            valid,
            resolution,
        })
    }

    /// All-valid field from a `[2, H, W]` tensor.
    pub fn dense(data: Tensor, resolution: Resolution) -> Result<Self> {
        let (_, h, w) = data.dims3();
        FlowField::new(data, vec![true; h * w], resolution)
    }

    pub fn zeros(h: usize, w: usize, resolution: Resolution) -> Self {
        FlowField {
            data: Tensor::zeros(&[2, h, w]),
            valid: vec![true; h * w],
            resolution,
        }
    }

    /// Uniform constant flow, every pixel valid.
    pub fn constant(h: usize, w: usize, u: f64, v: f64, resolution: Resolution) -> Self {
        let mut data = vec![u; h * w];
        data.extend(std::iter::repeat(v).take(h * w));
        FlowField {
            data: Tensor::new(vec![2, h, w], data),
            valid: vec![true; h * w],
            resolution,
        }
    }

    /// Sensor dimensions (H, W).
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dims3();
        (h, w)
    }

    #[inline]
    pub fn u(&self, y: usize, x: usize) -> f64 {
        self.data.at3(0, y, x)
    }

    #[inline]
    pub fn v(&self, y: usize, x: usize) -> f64 {
        self.data.at3(1, y, x)
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        let (_, w) = self.dims();
        self.valid[y * w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, u: f64, v: f64) {
        self.data.set3(0, y, x, u);
        self.data.set3(1, y, x, v);
    }

    pub fn set_valid(&mut self, y: usize, x: usize, ok: bool) {
        let (_, w) = self.dims();
        self.valid[y * w + x] = ok;
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Magnitudes over valid pixels.
    pub fn valid_magnitudes(&self) -> Vec<f64> {
        let (h, w) = self.dims();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.valid[y * w + x] {
                    out.push(self.u(y, x).hypot(self.v(y, x)));
                }
            }
        }
        out
    }

    /// Mirrors the field about the vertical axis, negating the u channel.
    pub fn hflip(&self) -> FlowField {
        let (h, w) = self.dims();
        let mut out = FlowField::zeros(h, w, self.resolution);
        for y in 0..h {
            for x in 0..w {
                let xs = w - 1 - x;
                out.set(y, x, -self.u(y, xs), self.v(y, xs));
                out.valid[y * w + x] = self.valid[y * w + xs];
            }
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<FlowField> {
        let (h, w) = self.dims();
        if y0 + hh > h || x0 + ww > w {
            return Err(Error::config(format!(
                "crop {hh}x{ww}+{y0}+{x0} exceeds {h}x{w} field"
            )));
        }
        let mut out = FlowField::zeros(hh, ww, self.resolution);
        for y in 0..hh {
            for x in 0..ww {
                out.set(y, x, self.u(y0 + y, x0 + x), self.v(y0 + y, x0 + x));
                out.valid[y * ww + x] = self.valid[(y0 + y) * w + x0 + x];
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// 16-bit image codec (u_raw = u * 128 + 2^15, third channel = validity)
// ---------------------------------------------------------------------------

const FLOW_SCALE: f64 = 128.0;
const FLOW_OFFSET: f64 = 32768.0;

/// Largest encodable magnitude per component.
pub fn flow_codec_range() -> f64 {
    (65535.0 - FLOW_OFFSET) / FLOW_SCALE
}

/// Writes a 16-bit three-channel PNG with channels (u, v, valid).
pub fn write_flow_png(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = flow.dims();
    let mut img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let enc = |v: f64| (v * FLOW_SCALE + FLOW_OFFSET).round().clamp(0.0, 65535.0) as u16;
            let ok = flow.is_valid(y, x);
            let (u, v) = if ok {
                (flow.u(y, x), flow.v(y, x))
            } else {
                (0.0, 0.0)
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([enc(u), enc(v), ok as u16]));
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Reads the 16-bit three-channel flow PNG.
pub fn read_flow_png(path: &Path) -> Result<FlowField> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .into_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut flow = FlowField::zeros(h, w, Resolution::Full);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            let dec = |raw: u16| (raw as f64 - FLOW_OFFSET) / FLOW_SCALE;
            let ok = px[2] > 0;
            flow.set(y, x, if ok { dec(px[0]) } else { 0.0 }, if ok { dec(px[1]) } else { 0.0 });
            flow.set_valid(y, x, ok);
        }
    }
    Ok(flow)
}

// ---------------------------------------------------------------------------
// lossless raw container
// ---------------------------------------------------------------------------

/// Writes the raw float container (magic, version, resolution tag, dims,
/// f64 u plane, f64 v plane, u8 validity plane).
pub fn write_flow_raw(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = flow.dims();
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(RAW_FLOW_MAGIC)?;
    f.write_u32::<LittleEndian>(1)?;
    f.write_u8(match flow.resolution {
        Resolution::Full => 0,
        Resolution::Eighth => 1,
    })?;
    f.write_u32::<LittleEndian>(h as u32)?;
    f.write_u32::<LittleEndian>(w as u32)?;
    for v in flow.tensor().data() {
        f.write_f64::<LittleEndian>(*v)?;
    }
    for ok in flow.valid_mask() {
        f.write_u8(*ok as u8)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_flow_raw(path: &Path) -> Result<FlowField> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != RAW_FLOW_MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != 1 {
        return Err(Error::data(format!(
            "{}: unsupported raw flow version {version}",
            path.display()
        )));
    }
    let res = match f.read_u8()? {
        0 => Resolution::Full,
        1 => Resolution::Eighth,
        other => {
            return Err(Error::data(format!(
                "{}: unknown resolution tag {other}",
                path.display()
            )))
        }
    };
    let h = f.read_u32::<LittleEndian>()? as usize;
    let w = f.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; 2 * h * w];
    for v in &mut data {
        *v = f.read_f64::<LittleEndian>()?;
    }
    let mut valid = vec![false; h * w];
    for ok in &mut valid {
        *ok = f.read_u8()? != 0;
    }
    FlowField::new(Tensor::new(vec![2, h, w], data), valid, res)
}

/// Reads a flow file by extension: `.png` for the 16-bit codec, anything else
/// as the raw container.
pub fn read_flow_any(path: &Path) -> Result<FlowField> {
    if path.extension().is_some_and(|e| e == "png") {
        read_flow_png(path)
    } else {
        read_flow_raw(path)
    }
}
