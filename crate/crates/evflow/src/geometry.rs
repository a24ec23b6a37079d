//! Ground-truth optical flow from disparity maps, camera calibration, and
//! odometry under the static-scene assumption: back-project each valid pixel
//! to 3D, move it by the relative camera motion, and re-project.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowField, Resolution};

/// Depth below which a reprojected point is treated as degenerate (meters).
pub const Z_MIN: f64 = 0.1;

/// Pinhole camera with a stereo baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::config(format!(
                "focal lengths must be positive: fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if self.baseline <= 0.0 {
            return Err(Error::config(format!(
                "baseline must be positive: {}",
                self.baseline
            )));
        }
        Ok(())
    }

    /// Back-projects pixel (x, y) at depth z into the camera frame.
    pub fn back_project(&self, x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::new((x - self.cx) * z / self.fx, (y - self.cy) * z / self.fy, z)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    pub fn load_toml(path: &Path) -> Result<CameraModel> {
        let text = std::fs::read_to_string(path)?;
        let cam: CameraModel = toml::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        cam.validate()?;
        Ok(cam)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::data(format!("serialize calibration: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Converts disparity (pixels) to depth (meters): z = fx * baseline / d.
pub fn disparity_to_depth(d: f64, cam: &CameraModel) -> Option<f64> {
    if d > 0.0 {
        Some(cam.fx * cam.baseline / d)
    } else {
        None
    }
}

/// Disparity map with a validity mask (0 or missing disparity is invalid).
#[derive(Debug, Clone)]
pub struct DisparityMap {
    pub d: Vec<f64>,
    pub valid: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl DisparityMap {
    pub fn new(d: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if d.len() != height * width {
            return Err(Error::shape(format!(
                "disparity data length {} != {height}x{width}",
                d.len()
            )));
        }
        let valid = d.iter().map(|&v| v > 0.0).collect();
        Ok(DisparityMap {
            d,
            valid,
            height,
            width,
        })
    }

    /// Reads the 16-bit single-channel convention: value / 256 = disparity in
    /// pixels, 0 = invalid.
    pub fn read_png(path: &Path) -> Result<DisparityMap> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let d = img.pixels().map(|p| p[0] as f64 / 256.0).collect();
        DisparityMap::new(d, h, w)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut img =
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let raw = if self.valid[y * self.width + x] {
                    (self.d[y * self.width + x] * 256.0).round().clamp(0.0, 65535.0) as u16
                } else {
                    0
                };
                img.put_pixel(x as u32, y as u32, image::Luma([raw]));
            }
        }
        img.save(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Timestamped world-from-camera rigid transforms with interpolation.
#[derive(Debug, Clone)]
pub struct PoseTrajectory {
    /// (timestamp microseconds, world <- camera pose), strictly increasing t.
    samples: Vec<(i64, Isometry3<f64>)>,
}

impl PoseTrajectory {
    pub fn new(samples: Vec<(i64, Isometry3<f64>)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("trajectory has no poses"));
        }
        for win in samples.windows(2) {
            if win[1].0 <= win[0].0 {
                return Err(Error::data(format!(
                    "trajectory timestamps not strictly increasing at t={}",
                    win[1].0
                )));
            }
        }
        Ok(PoseTrajectory { samples })
    }

    pub fn time_range(&self) -> (i64, i64) {
        (self.samples[0].0, self.samples[self.samples.len() - 1].0)
    }

    /// Pose at time t: geodesic (slerp) rotation, linear translation between
    /// bracketing samples. Exact timestamps return the stored pose.
    pub fn pose_at(&self, t: i64) -> Result<Isometry3<f64>> {
        let (lo, hi) = self.time_range();
        if t < lo || t > hi {
            return Err(Error::coverage(format!(
                "trajectory covers [{lo}, {hi}] but pose requested at {t}"
            )));
        }
        let idx = self.samples.partition_point(|(ts, _)| *ts <= t);
        if idx == 0 {
            return Ok(self.samples[0].1);
        }
        let (t0, p0) = &self.samples[idx - 1];
        if *t0 == t || idx == self.samples.len() {
            return Ok(*p0);
        }
        let (t1, p1) = &self.samples[idx];
        let alpha = (t - t0) as f64 / (t1 - t0) as f64;
        let rot = p0.rotation.slerp(&p1.rotation, alpha);
        let trans = p0.translation.vector.lerp(&p1.translation.vector, alpha);
        Ok(Isometry3::from_parts(Translation3::from(trans), rot))
    }

    /// Relative transform mapping camera-frame points at `t_i` into the
    /// camera frame at `t_j`. Coincident timestamps give the exact identity.
    pub fn relative(&self, t_i: i64, t_j: i64) -> Result<Isometry3<f64>> {
        if t_i == t_j {
            self.pose_at(t_i)?;
            return Ok(Isometry3::identity());
        }
        let pose_i = self.pose_at(t_i)?;
        let pose_j = self.pose_at(t_j)?;
        Ok(pose_j.inverse() * pose_i)
    }

    /// Reads "t_us tx ty tz qx qy qz qw" lines (translation in meters).
    pub fn load_text(path: &Path) -> Result<PoseTrajectory> {
        let f = BufReader::new(File::open(path)?);
        let mut samples = Vec::new();
        for (ln, line) in f.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 8 {
                return Err(Error::data(format!(
                    "{}: line {}: expected 8 fields, got {}",
                    path.display(),
                    ln + 1,
                    parts.len()
                )));
            }
            let nums: Vec<f64> = parts
                .iter()
                .map(|p| {
                    p.parse::<f64>().map_err(|e| {
                        Error::data(format!("{}: line {}: {e}", path.display(), ln + 1))
                    })
                })
                .collect::<Result<_>>()?;
            let t = nums[0] as i64;
            let trans = Translation3::new(nums[1], nums[2], nums[3]);
            let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                nums[7], nums[4], nums[5], nums[6],
            ));
            samples.push((t, Isometry3::from_parts(trans, quat)));
        }
        PoseTrajectory::new(samples)
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        for (t, pose) in &self.samples {
            let tr = pose.translation.vector;
            let q = pose.rotation.quaternion();
            writeln!(
                f,
                "{t} {} {} {} {} {} {} {}",
                tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Per-pixel reprojection flow for a relative motion `T_rel` (points i -> j).
///
/// Pixels are invalidated when the input disparity is invalid, the moved
/// point falls behind the near plane, or the reprojection leaves the frame.
pub fn flow_from_geometry(
    disp: &DisparityMap,
    cam: &CameraModel,
    t_rel: &Isometry3<f64>,
) -> Result<FlowField> {
    cam.validate()?;
    let (h, w) = (disp.height, disp.width);
    if (cam.height, cam.width) != (h, w) {
        return Err(Error::shape(format!(
            "camera is {}x{} but disparity is {h}x{w}",
            cam.height, cam.width
        )));
    }
    let identity = *t_rel == Isometry3::identity();
    let mut flow = FlowField::zeros(h, w, Resolution::Full);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !disp.valid[i] {
                flow.set_valid(y, x, false);
                continue;
            }
            let Some(z) = disparity_to_depth(disp.d[i], cam) else {
                flow.set_valid(y, x, false);
                continue;
            };
            if z < Z_MIN {
                flow.set_valid(y, x, false);
                continue;
            }
            if identity {
                // static camera, static scene: exactly zero, no round trip
                continue;
            }
            let p = cam.back_project(x as f64, y as f64, z);
            let q = t_rel * p;
            if q.z < Z_MIN {
                flow.set_valid(y, x, false);
                continue;
            }
            let (px, py) = cam.project(&q);
            if px < 0.0 || px > (w - 1) as f64 || py < 0.0 || py > (h - 1) as f64 {
                flow.set_valid(y, x, false);
                continue;
            }
            flow.set(y, x, px - x as f64, py - y as f64);
        }
    }
    Ok(flow)
}

/// Forward and backward flow at a fixed rate: relative poses are interpolated
/// from the trajectory at the exact endpoint timestamps; both fields share
/// the disparity's validity basis.
pub fn flow_pair_at_rate(
    disp_i: &DisparityMap,
    cam: &CameraModel,
    traj: &PoseTrajectory,
    t_i: i64,
    dt: i64,
) -> Result<(FlowField, FlowField)> {
    let fwd = flow_from_geometry(disp_i, cam, &traj.relative(t_i, t_i + dt)?)?;
    let bwd = flow_from_geometry(disp_i, cam, &traj.relative(t_i, t_i - dt)?)?;
    Ok((fwd, bwd))
}

/// Invalidates pixels whose forward-backward round trip error exceeds the
/// threshold. `backward_next` maps the *next* frame back to the current one;
/// pixels whose round trip cannot be checked (flow leaves the frame or lands
/// on invalid pixels) keep their validity.
pub fn consistency_filter(
    forward: &FlowField,
    backward_next: &FlowField,
    threshold_px: f64,
) -> Result<FlowField> {
    let (h, w) = forward.dims();
    if backward_next.dims() != (h, w) {
        return Err(Error::shape(format!(
            "forward field is {h}x{w} but backward is {:?}",
            backward_next.dims()
        )));
    }
    let mut out = forward.clone();
    for y in 0..h {
        for x in 0..w {
            if !forward.is_valid(y, x) {
                continue;
            }
            let tx = x as f64 + forward.u(y, x);
            let ty = y as f64 + forward.v(y, x);
            let Some((bu, bv)) = sample_valid_bilinear(backward_next, ty, tx) else {
                continue;
            };
            let err = (forward.u(y, x) + bu).hypot(forward.v(y, x) + bv);
            if err > threshold_px {
                out.set_valid(y, x, false);
            }
        }
    }
    Ok(out)
}

/// Bilinear sample restricted to valid pixels; None if the support is mostly
/// invalid or out of frame.
fn sample_valid_bilinear(f: &FlowField, py: f64, px: f64) -> Option<(f64, f64)> {
    let (h, w) = f.dims();
    if px < 0.0 || py < 0.0 || px > (w - 1) as f64 || py > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (tx, ty) = (px - x0 as f64, py - y0 as f64);
    let mut acc_u = 0.0;
    let mut acc_v = 0.0;
    let mut acc_w = 0.0;
    for (yy, wy) in [(y0, 1.0 - ty), ((y0 + 1).min(h - 1), ty)] {
        for (xx, wx) in [(x0, 1.0 - tx), ((x0 + 1).min(w - 1), tx)] {
            let wgt = wy * wx;
            if wgt > 0.0 && f.is_valid(yy, xx) {
                acc_u += wgt * f.u(yy, xx);
                acc_v += wgt * f.v(yy, xx);
                acc_w += wgt;
            }
        }
    }
    if acc_w < 0.5 {
        return None;
    }
    Some((acc_u / acc_w, acc_v / acc_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cam(h: usize, w: usize) -> CameraModel {
        CameraModel {
            fx: 100.0,
            fy: 110.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            baseline: 0.2,
            height: h,
            width: w,
        }
    }

    fn constant_disparity(h: usize, w: usize, d: f64) -> DisparityMap {
        DisparityMap::new(vec![d; h * w], h, w).unwrap()
    }

    #[test]
    fn depth_formula() {
        let cam = CameraModel {
            fx: 500.0,
            fy: 500.0,
            cx: 0.0,
            cy: 0.0,
            baseline: 0.5,
            height: 4,
            width: 4,
        };
        assert_eq!(disparity_to_depth(25.0, &cam), Some(10.0));
        // doubling disparity halves depth
        assert_eq!(disparity_to_depth(50.0, &cam), Some(5.0));
        assert_eq!(disparity_to_depth(0.0, &cam), None);
        assert_eq!(disparity_to_depth(-1.0, &cam), None);
    }

    #[test]
    fn depth_matches_scalar_reference_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let fx = rng.gen_range(50.0..800.0);
            let b = rng.gen_range(0.05..1.0);
            let d = rng.gen_range(0.5..100.0);
            let cam = CameraModel {
                fx,
                fy: fx,
                cx: 0.0,
                cy: 0.0,
                baseline: b,
                height: 2,
                width: 2,
            };
            let z = disparity_to_depth(d, &cam).unwrap();
            assert!((z - fx * b / d).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_pose_gives_exact_zero_flow() {
        let cam = test_cam(16, 16);
        let disp = constant_disparity(16, 16, 10.0);
        let flow = flow_from_geometry(&disp, &cam, &Isometry3::identity()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!(flow.is_valid(y, x));
                assert_eq!((flow.u(y, x), flow.v(y, x)), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn fronto_parallel_translation_closed_form() {
        // camera translating +t_x along its own x axis: points move by -t_x
        // in the camera frame, so flow = -fx * t_x / z everywhere
        let cam = test_cam(32, 32);
        let d = 4.0;
        let z = disparity_to_depth(d, &cam).unwrap();
        let disp = constant_disparity(32, 32, d);
        let t_x = 0.05;
        let t_rel = Isometry3::translation(-t_x, 0.0, 0.0);
        let flow = flow_from_geometry(&disp, &cam, &t_rel).unwrap();
        let expected = -cam.fx * t_x / z;
        for y in 0..32 {
            for x in 0..32 {
                if flow.is_valid(y, x) {
                    assert!((flow.u(y, x) - expected).abs() < 1e-9);
                    assert!(flow.v(y, x).abs() < 1e-9);
                }
            }
        }
    }

    /// Independent scalar reprojection: plain arithmetic, no nalgebra types.
    fn scalar_reproject_oracle(
        disp: &DisparityMap,
        cam: &CameraModel,
        rot: &[[f64; 3]; 3],
        trans: &[f64; 3],
    ) -> Vec<Option<(f64, f64)>> {
        let mut out = Vec::with_capacity(disp.height * disp.width);
        for y in 0..disp.height {
            for x in 0..disp.width {
                let i = y * disp.width + x;
                if !disp.valid[i] {
                    out.push(None);
                    continue;
                }
                let z = cam.fx * cam.baseline / disp.d[i];
                let px = (x as f64 - cam.cx) * z / cam.fx;
                let py = (y as f64 - cam.cy) * z / cam.fy;
                let pz = z;
                let qx = rot[0][0] * px + rot[0][1] * py + rot[0][2] * pz + trans[0];
                let qy = rot[1][0] * px + rot[1][1] * py + rot[1][2] * pz + trans[1];
                let qz = rot[2][0] * px + rot[2][1] * py + rot[2][2] * pz + trans[2];
                if qz < Z_MIN {
                    out.push(None);
                    continue;
                }
                let ix = cam.fx * qx / qz + cam.cx;
                let iy = cam.fy * qy / qz + cam.cy;
                out.push(Some((ix - x as f64, iy - y as f64)));
            }
        }
        out
    }

    #[test]
    fn flow_matches_scalar_reprojection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = test_cam(64, 64);
        for _ in 0..50 {
            let mut d = vec![0.0; 64 * 64];
            for v in &mut d {
                *v = rng.gen_range(2.0..30.0);
            }
            let disp = DisparityMap::new(d, 64, 64).unwrap();
            // rotation up to ~5 degrees
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.gen_range(-0.087..0.087);
            let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let trans = Vector3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
            let t_rel = Isometry3::from_parts(Translation3::from(trans), rot);
            let flow = flow_from_geometry(&disp, &cam, &t_rel).unwrap();

            let rot_m = rot.to_rotation_matrix();
            let rot_arr = [
                [rot_m[(0, 0)], rot_m[(0, 1)], rot_m[(0, 2)]],
                [rot_m[(1, 0)], rot_m[(1, 1)], rot_m[(1, 2)]],
                [rot_m[(2, 0)], rot_m[(2, 1)], rot_m[(2, 2)]],
            ];
            let oracle = scalar_reproject_oracle(&disp, &cam, &rot_arr, &[trans.x, trans.y, trans.z]);
            for y in 0..64 {
                for x in 0..64 {
                    if let Some((ou, ov)) = oracle[y * 64 + x] {
                        if flow.is_valid(y, x) {
                            assert!((flow.u(y, x) - ou).abs() < 1e-6);
                            assert!((flow.v(y, x) - ov).abs() < 1e-6);
                        }
                    } else {
                        assert!(!flow.is_valid(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn scale_invariance_of_flow() {
        // scaling depth and translation jointly leaves the flow unchanged
        let cam = test_cam(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d1: Vec<f64> = (0..256).map(|_| rng.gen_range(5.0..20.0)).collect();
        let s = 3.7;
        // depth scales by s when disparity scales by 1/s
        let d2: Vec<f64> = d1.iter().map(|v| v / s).collect();
        let disp1 = DisparityMap::new(d1, 16, 16).unwrap();
        let disp2 = DisparityMap::new(d2, 16, 16).unwrap();
        let rot = UnitQuaternion::from_euler_angles(0.01, -0.02, 0.005);
        let t = Vector3::new(0.02, -0.01, 0.03);
        let f1 = flow_from_geometry(
            &disp1,
            &cam,
            &Isometry3::from_parts(Translation3::from(t), rot),
        )
        .unwrap();
        let f2 = flow_from_geometry(
            &disp2,
            &cam,
            &Isometry3::from_parts(Translation3::from(t * s), rot),
        )
        .unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if f1.is_valid(y, x) && f2.is_valid(y, x) {
                    assert!((f1.u(y, x) - f2.u(y, x)).abs() < 1e-8);
                    assert!((f1.v(y, x) - f2.v(y, x)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn validity_monotonicity() {
        let cam = test_cam(8, 8);
        let mut d = vec![10.0; 64];
        d[3] = 0.0;
        d[17] = -2.0;
        let disp = DisparityMap::new(d, 8, 8).unwrap();
        let flow =
            flow_from_geometry(&disp, &cam, &Isometry3::translation(0.01, 0.0, 0.0)).unwrap();
        assert!(!flow.is_valid(0, 3));
        assert!(!flow.is_valid(2, 1));
    }

    #[test]
    fn flow_pair_zero_dt_is_zero() {
        let cam = test_cam(8, 8);
        let disp = constant_disparity(8, 8, 5.0);
        let traj = PoseTrajectory::new(vec![
            (0, Isometry3::identity()),
            (1_000_000, Isometry3::translation(1.0, 0.0, 0.0)),
        ])
        .unwrap();
        let (fwd, bwd) = flow_pair_at_rate(&disp, &cam, &traj, 500_000, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!((fwd.u(y, x), fwd.v(y, x)), (0.0, 0.0));
                assert_eq!((bwd.u(y, x), bwd.v(y, x)), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn constant_velocity_backward_is_negated_forward() {
        let cam = test_cam(32, 32);
        let disp = constant_disparity(32, 32, 2.0);
        // constant velocity along x
        let traj = PoseTrajectory::new(
            (0..=10)
                .map(|k| {
                    (
                        k * 100_000,
                        Isometry3::translation(0.01 * k as f64, 0.0, 0.0),
                    )
                })
                .collect(),
        )
        .unwrap();
        let (fwd, bwd) = flow_pair_at_rate(&disp, &cam, &traj, 500_000, 100_000).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if fwd.is_valid(y, x) && bwd.is_valid(y, x) && fwd.u(y, x).abs() <= 5.0 {
                    assert!((fwd.u(y, x) + bwd.u(y, x)).abs() < 0.1);
                    assert!((fwd.v(y, x) + bwd.v(y, x)).abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn trajectory_gap_is_coverage_error() {
        let traj = PoseTrajectory::new(vec![
            (100, Isometry3::identity()),
            (200, Isometry3::identity()),
        ])
        .unwrap();
        let err = traj.pose_at(300).unwrap_err();
        assert!(matches!(err, Error::Coverage(_)));
        assert!(err.to_string().contains("300"));
    }

    #[test]
    fn consistency_filter_keeps_consistent_and_cuts_planted_blob() {
        let (h, w) = (16, 16);
        // forward flow +2 px in x; consistent backward is -2
        let forward = FlowField::constant(h, w, 2.0, 0.0, Resolution::Full);
        let mut backward = FlowField::constant(h, w, -2.0, 0.0, Resolution::Full);
        let unchanged = consistency_filter(&forward, &backward, 1.0).unwrap();
        assert_eq!(unchanged.valid_mask(), forward.valid_mask());

        // plant a 3x3 blob of 10 px round-trip error in the backward field at
        // the landing area of sources (5..8, 3..6)
        for y in 5..8 {
            for x in 5..8 {
                backward.set(y, x, 8.0, 0.0);
            }
        }
        let filtered = consistency_filter(&forward, &backward, 1.0).unwrap();
        for y in 0..h {
            for x in 0..w {
                let in_blob = (5..8).contains(&y) && (3..6).contains(&x);
                assert_eq!(
                    filtered.is_valid(y, x),
                    !in_blob,
                    "pixel ({y}, {x}) mask mismatch"
                );
            }
        }

        // infinite threshold never filters
        let vacuous = consistency_filter(&forward, &backward, f64::INFINITY).unwrap();
        assert_eq!(vacuous.valid_mask(), forward.valid_mask());
    }

    #[test]
    fn calib_and_trajectory_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cam = test_cam(10, 12);
        let cpath = dir.path().join("calib.toml");
        cam.save_toml(&cpath).unwrap();
        assert_eq!(CameraModel::load_toml(&cpath).unwrap(), cam);

        let traj = PoseTrajectory::new(vec![
            (0, Isometry3::identity()),
            (
                1000,
                Isometry3::from_parts(
                    Translation3::new(0.1, 0.2, -0.3),
                    UnitQuaternion::from_euler_angles(0.1, 0.0, -0.2),
                ),
            ),
        ])
        .unwrap();
        let tpath = dir.path().join("traj.txt");
        traj.save_text(&tpath).unwrap();
        let back = PoseTrajectory::load_text(&tpath).unwrap();
        let p = back.pose_at(1000).unwrap();
        let q = traj.pose_at(1000).unwrap();
        assert!((p.translation.vector - q.translation.vector).norm() < 1e-12);
        assert!(p.rotation.angle_to(&q.rotation) < 1e-12);
    }

    #[test]
    fn disparity_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d: Vec<f64> = (0..48)
            .map(|i| {
                if i % 7 == 0 {
                    0.0
                } else {
                    // representable on the /256 grid
                    (rng.gen_range(1..10000) as f64) / 256.0
                }
            })
            .collect();
        let disp = DisparityMap::new(d.clone(), 6, 8).unwrap();
        let path = dir.path().join("disp.png");
        disp.write_png(&path).unwrap();
        let back = DisparityMap::read_png(&path).unwrap();
        assert_eq!(back.d, d);
        assert_eq!(back.valid, disp.valid);
    }
}
