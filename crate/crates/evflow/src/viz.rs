//! Flow-field color-wheel rendering: hue encodes direction, saturation
//! encodes magnitude, invalid pixels are black.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;

/// Renders a flow field to RGB. `fixed_scale` pins the magnitude that maps to
/// full saturation; otherwise the per-image maximum is used.
pub fn flow_to_color(flow: &FlowField, fixed_scale: Option<f64>) -> image::RgbImage {
    let (h, w) = flow.dims();
    let scale = fixed_scale.unwrap_or_else(|| {
        flow.valid_magnitudes()
            .into_iter()
            .fold(0.0f64, f64::max)
            .max(1e-9)
    });
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if flow.is_valid(y, x) {
                let (u, v) = (flow.u(y, x), flow.v(y, x));
                let hue = v.atan2(u).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU;
                let sat = (u.hypot(v) / scale).clamp(0.0, 1.0);
                hsv_to_rgb(hue, sat, 1.0)
            } else {
                [0, 0, 0]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

pub fn write_flow_color_png(path: &Path, flow: &FlowField, fixed_scale: Option<f64>) -> Result<()> {
    flow_to_color(flow, fixed_scale)
        .save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;

    #[test]
    fn zero_flow_renders_neutral_with_black_invalid() {
        let mut f = FlowField::zeros(4, 4, Resolution::Full);
        f.set_valid(2, 2, false);
        let img = flow_to_color(&f, None);
        // zero magnitude -> zero saturation -> white
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(2, 2).0, [0, 0, 0]);
    }

    #[test]
    fn uniform_flow_renders_single_hue() {
        let f = FlowField::constant(4, 6, 3.0, 0.0, Resolution::Full);
        let img = flow_to_color(&f, None);
        let first = img.get_pixel(0, 0).0;
        assert!(img.pixels().all(|p| p.0 == first));
        // rightward flow at full saturation is red-ish
        assert!(first[0] > 200 && first[1] < 60 && first[2] < 60);
    }

    #[test]
    fn codec_round_trip_changes_viz_within_quantization() {
        use crate::flow::{read_flow_png, write_flow_png};
        let dir = tempfile::tempdir().unwrap();
        let mut f = FlowField::zeros(6, 6, Resolution::Full);
        for y in 0..6 {
            for x in 0..6 {
                f.set(y, x, x as f64 * 0.37 - 1.0, y as f64 * 0.21 - 0.5);
            }
        }
        let p = dir.path().join("f.png");
        write_flow_png(&p, &f).unwrap();
        let back = read_flow_png(&p).unwrap();
        // decoded flow within codec quantization
        for y in 0..6 {
            for x in 0..6 {
                assert!((back.u(y, x) - f.u(y, x)).abs() <= 1.0 / 128.0);
                assert!((back.v(y, x) - f.v(y, x)).abs() <= 1.0 / 128.0);
            }
        }
        // with a fixed scale the rendered images are nearly identical
        let a = flow_to_color(&f, Some(2.0));
        let b = flow_to_color(&back, Some(2.0));
        for (pa, pb) in a.pixels().zip(b.pixels()) {
            for c in 0..3 {
                assert!((pa.0[c] as i32 - pb.0[c] as i32).abs() <= 2);
            }
        }
    }
}
