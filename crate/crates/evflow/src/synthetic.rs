//! Deterministic synthetic event streams with analytically known optical
//! flow, plus matching geometry fixtures. This is the desk-scale oracle that
//! stands in for real recordings.
//!
//! A scene is a static pattern texture moved by a time-parameterized 2-d
//! similarity transform. Events follow the sensor model: each pixel keeps a
//! reference log intensity and fires whenever the rendered intensity departs
//! from it by the threshold, with linearly interpolated trigger times.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{build_voxel_grid, slice_window, Event, EventSequence};
use crate::flow::{FlowField, Resolution};
use crate::geometry::{CameraModel, DisparityMap, PoseTrajectory};
use crate::training::TrainSample;

/// Moving pattern drawn into the scene texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    RandomDots {
        count: usize,
        radius: f64,
        contrast: f64,
    },
    BarGrating {
        /// Period in pixels along the normal direction.
        period: f64,
        /// Normal direction angle in radians (0 = vertical bars).
        angle: f64,
        contrast: f64,
    },
    TexturedPolygon {
        /// Vertices in pattern coordinates (image frame at t = 0).
        vertices: Vec<(f64, f64)>,
        contrast: f64,
    },
}

/// Time-parameterized 2-d similarity about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    /// Translation velocity in pixels per second (u, v).
    pub translation: (f64, f64),
    /// Angular velocity in radians per second.
    pub rotation: f64,
    /// Exponential scale rate per second.
    pub scale_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub pattern: Pattern,
    pub motion: Motion,
    /// Sensor size (H, W).
    pub sensor: (usize, usize),
    pub duration_us: i64,
    /// Ground-truth flow interval.
    pub gt_interval_us: i64,
    /// Event threshold in log-intensity units.
    pub threshold: f64,
    pub seed: u64,
    /// Render substeps per GT interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    32
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration_us <= 0 {
            return Err(Error::config(format!(
                "duration_us must be positive, got {}",
                self.duration_us
            )));
        }
        if self.gt_interval_us <= 0 || self.gt_interval_us > self.duration_us {
            return Err(Error::config(format!(
                "gt_interval_us must be in (0, duration], got {}",
                self.gt_interval_us
            )));
        }
        if self.threshold <= 0.0 {
            return Err(Error::config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.substeps == 0 {
            return Err(Error::config("substeps must be >= 1"));
        }
        let (h, w) = self.sensor;
        if h < 2 || w < 2 {
            return Err(Error::config(format!("sensor {h}x{w} too small")));
        }
        let dur_s = self.duration_us as f64 / 1e6;
        let drift = (self.motion.translation.0.hypot(self.motion.translation.1)) * dur_s;
        let diag = ((h * h + w * w) as f64).sqrt();
        if drift > 2.0 * diag {
            return Err(Error::config(format!(
                "translation drift {drift:.1} px exceeds twice the sensor diagonal {diag:.1}"
            )));
        }
        Ok(())
    }

    pub fn load_toml(path: &std::path::Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path)?;
        let spec: SceneSpec = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save_toml(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::data(format!("serialize scene spec: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    fn center(&self) -> (f64, f64) {
        (
            (self.sensor.1 as f64 - 1.0) / 2.0,
            (self.sensor.0 as f64 - 1.0) / 2.0,
        )
    }

    /// Maps a pattern point (image coords at t = 0) to its image position at
    /// time t.
    fn transform(&self, p: (f64, f64), t_us: i64) -> (f64, f64) {
        let t = t_us as f64 / 1e6;
        let (cx, cy) = self.center();
        let s = (self.motion.scale_rate * t).exp();
        let th = self.motion.rotation * t;
        let (sin, cos) = th.sin_cos();
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        (
            cx + s * (cos * dx - sin * dy) + self.motion.translation.0 * t,
            cy + s * (sin * dx + cos * dy) + self.motion.translation.1 * t,
        )
    }

    /// Inverse of [`SceneSpec::transform`].
    fn untransform(&self, x: (f64, f64), t_us: i64) -> (f64, f64) {
        let t = t_us as f64 / 1e6;
        let (cx, cy) = self.center();
        let s = (self.motion.scale_rate * t).exp();
        let th = self.motion.rotation * t;
        let (sin, cos) = th.sin_cos();
        let dx = (x.0 - self.motion.translation.0 * t - cx) / s;
        let dy = (x.1 - self.motion.translation.1 * t - cy) / s;
        (cx + cos * dx + sin * dy, cy + -sin * dx + cos * dy)
    }
}

/// Exact per-pixel displacement of the moving pattern over `[t_i, t_i + dt]`.
/// Pixels whose destination leaves the frame are masked invalid.
pub fn analytic_flow(spec: &SceneSpec, t_i: i64, dt: i64) -> Result<FlowField> {
    spec.validate()?;
    if t_i < 0 || t_i + dt > spec.duration_us {
        return Err(Error::config(format!(
            "[{t_i}, {}] outside scene duration [0, {}]",
            t_i + dt,
            spec.duration_us
        )));
    }
    let (h, w) = spec.sensor;
    let mut flow = FlowField::zeros(h, w, Resolution::Full);
    for y in 0..h {
        for x in 0..w {
            let p = spec.untransform((x as f64, y as f64), t_i);
            let moved = spec.transform(p, t_i + dt);
            if moved.0 < 0.0 || moved.0 > (w - 1) as f64 || moved.1 < 0.0 || moved.1 > (h - 1) as f64
            {
                flow.set_valid(y, x, false);
                continue;
            }
            flow.set(y, x, moved.0 - x as f64, moved.1 - y as f64);
        }
    }
    Ok(flow)
}

/// Rasterized pattern texture with a motion margin, sampled bilinearly.
struct SceneTexture {
    data: Vec<f64>,
    width: usize,
    height: usize,
    margin: f64,
}

impl SceneTexture {
    fn build(spec: &SceneSpec) -> SceneTexture {
        let (h, w) = spec.sensor;
        let dur_s = spec.duration_us as f64 / 1e6;
        let drift = spec.motion.translation.0.hypot(spec.motion.translation.1) * dur_s;
        let swell = ((spec.motion.scale_rate * dur_s).exp().max(1.0) - 1.0)
            * ((h * h + w * w) as f64).sqrt();
        let margin = (drift + swell + spec.motion.rotation.abs() * dur_s * w.max(h) as f64).ceil()
            + 4.0;
        let tw = w + 2 * margin as usize;
        let th = h + 2 * margin as usize;
        let mut data = vec![0.0; tw * th];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        match &spec.pattern {
            Pattern::RandomDots {
                count,
                radius,
                contrast,
            } => {
                for _ in 0..*count {
                    // anchor each dot to a frame position at a random time so
                    // every dot is visible at some point of the motion
                    let t_vis = rng.gen_range(0..=spec.duration_us);
                    let fx = rng.gen_range(0.0..w as f64 - 1.0);
                    let fy = rng.gen_range(0.0..h as f64 - 1.0);
                    let (cx, cy) = spec.untransform((fx, fy), t_vis);
                    let sigma = radius.max(0.5);
                    let win = (3.0 * sigma).ceil() as isize;
                    let (icx, icy) = ((cx + margin) as isize, (cy + margin) as isize);
                    for ty in icy - win..=icy + win {
                        for tx in icx - win..=icx + win {
                            if ty < 0 || tx < 0 || ty >= th as isize || tx >= tw as isize {
                                continue;
                            }
                            let dx = tx as f64 - (cx + margin);
                            let dy = ty as f64 - (cy + margin);
                            let v = contrast * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                            let cell = &mut data[ty as usize * tw + tx as usize];
                            if v > *cell {
                                *cell = v;
                            }
                        }
                    }
                }
            }
            Pattern::BarGrating {
                period,
                angle,
                contrast,
            } => {
                let (nx, ny) = (angle.cos(), angle.sin());
                for ty in 0..th {
                    for tx in 0..tw {
                        let px = tx as f64 - margin;
                        let py = ty as f64 - margin;
                        let phase = 2.0 * std::f64::consts::PI * (px * nx + py * ny) / period;
                        data[ty * tw + tx] = contrast * 0.5 * (1.0 + phase.cos());
                    }
                }
            }
            Pattern::TexturedPolygon {
                vertices,
                contrast,
            } => {
                // interior filled with a smooth radial texture, soft edges
                for ty in 0..th {
                    for tx in 0..tw {
                        let px = tx as f64 - margin;
                        let py = ty as f64 - margin;
                        if point_in_polygon(px, py, vertices) {
                            let tex =
                                0.75 + 0.25 * ((px * 0.7).sin() * (py * 0.7).cos());
                            data[ty * tw + tx] = contrast * tex;
                        }
                    }
                }
            }
        }
        SceneTexture {
            data,
            width: tw,
            height: th,
            margin,
        }
    }

    /// Bilinear sample at pattern coordinates; outside the texture reads 0.
    fn sample(&self, px: f64, py: f64) -> f64 {
        let fx = px + self.margin;
        let fy = py + self.margin;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut acc = 0.0;
        for (j, wy) in [(y0, 1.0 - ty), (y0 + 1, ty)] {
            if j < 0 || j >= self.height as isize {
                continue;
            }
            for (i, wx) in [(x0, 1.0 - tx), (x0 + 1, tx)] {
                if i < 0 || i >= self.width as isize {
                    continue;
                }
                acc += wy * wx * self.data[j as usize * self.width + i as usize];
            }
        }
        acc
    }
}

fn point_in_polygon(px: f64, py: f64, vertices: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = vertices.len();
    for i in 0..n {
        let (x1, y1) = vertices[i];
        let (x2, y2) = vertices[(i + 1) % n];
        if (y1 > py) != (y2 > py) && px < (x2 - x1) * (py - y1) / (y2 - y1) + x1 {
            inside = !inside;
        }
    }
    inside
}

/// Renders the scene's log intensity at a pixel and time.
pub fn render_intensity(spec: &SceneSpec, tex: &SceneTexture2, x: usize, y: usize, t_us: i64) -> f64 {
    let p = spec.untransform((x as f64, y as f64), t_us);
    tex.0.sample(p.0, p.1)
}

/// Opaque handle to the rasterized pattern (kept reusable across calls).
pub struct SceneTexture2(SceneTexture);

pub fn build_texture(spec: &SceneSpec) -> SceneTexture2 {
    SceneTexture2(SceneTexture::build(spec))
}

/// Generates the event stream of a scene with the per-pixel reference
/// threshold-crossing model. Output is sorted by time (ties by row, column,
/// polarity) and deterministic for a given spec.
pub fn generate_events(spec: &SceneSpec) -> Result<EventSequence> {
    spec.validate()?;
    let tex = SceneTexture::build(spec);
    let (h, w) = spec.sensor;
    let step_us = (spec.gt_interval_us / spec.substeps as i64).max(1);
    let mut events: Vec<Event> = Vec::new();
    let mut reference = vec![0.0f64; h * w];
    let mut previous = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = spec.untransform((x as f64, y as f64), 0);
            let l = tex.sample(p.0, p.1);
            reference[y * w + x] = l;
            previous[y * w + x] = l;
        }
    }
    let mut t_prev = 0i64;
    let mut t_now = step_us;
    while t_prev < spec.duration_us {
        let t_clamped = t_now.min(spec.duration_us);
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let p = spec.untransform((x as f64, y as f64), t_clamped);
                let l_now = tex.sample(p.0, p.1);
                let l_prev = previous[idx];
                let span = l_now - l_prev;
                // emit one event per threshold crossing, linearly interpolated
                loop {
                    let up = reference[idx] + spec.threshold;
                    let down = reference[idx] - spec.threshold;
                    let (crossed, pol) = if l_now >= up {
                        (up, 1i8)
                    } else if l_now <= down {
                        (down, -1i8)
                    } else {
                        break;
                    };
                    let frac = if span.abs() > 1e-15 {
                        ((crossed - l_prev) / span).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    let t_event = t_prev + ((t_clamped - t_prev) as f64 * frac).round() as i64;
                    events.push(Event {
                        x: x as u16,
                        y: y as u16,
                        t: t_event.clamp(0, spec.duration_us),
                        p: pol,
                    });
                    reference[idx] = crossed;
                }
                previous[idx] = l_now;
            }
        }
        t_prev = t_clamped;
        t_now += step_us;
    }
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    EventSequence::new(events, 0, spec.duration_us, (h, w))
}

/// Scene rendered to a plain intensity frame (for consistency checks).
pub fn render_frame(spec: &SceneSpec, t_us: i64) -> Vec<f64> {
    let tex = SceneTexture::build(spec);
    let (h, w) = spec.sensor;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = spec.untransform((x as f64, y as f64), t_us);
            out[y * w + x] = tex.sample(p.0, p.1);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// geometry fixtures
// ---------------------------------------------------------------------------

/// A random smooth-depth scene under a small rigid motion, with the flow
/// computed by an independent scalar reprojection path.
pub struct GeometryFixture {
    pub disparity: DisparityMap,
    pub camera: CameraModel,
    pub trajectory: PoseTrajectory,
    pub flow: FlowField,
    pub dt_us: i64,
}

/// Builds a geometry fixture. The analytic flow here uses hand-rolled
/// Rodrigues rotation and pinhole arithmetic, deliberately independent of the
/// production reprojection path.
pub fn generate_geometry_fixture(seed: u64) -> GeometryFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (64usize, 64usize);
    let camera = CameraModel {
        fx: rng.gen_range(80.0..120.0),
        fy: rng.gen_range(80.0..120.0),
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
        baseline: rng.gen_range(0.1..0.3),
        height: h,
        width: w,
    };
    // smooth depth surface
    let z0 = rng.gen_range(4.0..8.0);
    let amp = rng.gen_range(0.5..1.5);
    let (f1, f2) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let (p1, p2) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut disp = vec![0.0; h * w];
    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let z = z0
                + amp
                    * (std::f64::consts::TAU * x as f64 * f1 / w as f64 + p1).sin()
                    * (std::f64::consts::TAU * y as f64 * f2 / h as f64 + p2).sin();
            depth[y * w + x] = z;
            disp[y * w + x] = camera.fx * camera.baseline / z;
        }
    }
    let disparity = DisparityMap::new(disp, h, w).unwrap();

    // small rigid motion: rotation <= ~4 degrees, translation <= 10 cm
    let axis = {
        let v = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let angle = rng.gen_range(-0.07..0.07f64);
    let trans = [
        rng.gen_range(-0.1..0.1f64),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.05..0.05),
    ];

    // Rodrigues rotation matrix, plain arithmetic
    let (s, c) = angle.sin_cos();
    let (ax, ay, az) = (axis[0], axis[1], axis[2]);
    let rot = [
        [
            c + ax * ax * (1.0 - c),
            ax * ay * (1.0 - c) - az * s,
            ax * az * (1.0 - c) + ay * s,
        ],
        [
            ay * ax * (1.0 - c) + az * s,
            c + ay * ay * (1.0 - c),
            ay * az * (1.0 - c) - ax * s,
        ],
        [
            az * ax * (1.0 - c) - ay * s,
            az * ay * (1.0 - c) + ax * s,
            c + az * az * (1.0 - c),
        ],
    ];

    let mut flow = FlowField::zeros(h, w, Resolution::Full);
    for y in 0..h {
        for x in 0..w {
            let z = depth[y * w + x];
            let px = (x as f64 - camera.cx) * z / camera.fx;
            let py = (y as f64 - camera.cy) * z / camera.fy;
            let qx = rot[0][0] * px + rot[0][1] * py + rot[0][2] * z + trans[0];
            let qy = rot[1][0] * px + rot[1][1] * py + rot[1][2] * z + trans[1];
            let qz = rot[2][0] * px + rot[2][1] * py + rot[2][2] * z + trans[2];
            if qz < crate::geometry::Z_MIN {
                flow.set_valid(y, x, false);
                continue;
            }
            let ix = camera.fx * qx / qz + camera.cx;
            let iy = camera.fy * qy / qz + camera.cy;
            if ix < 0.0 || ix > (w - 1) as f64 || iy < 0.0 || iy > (h - 1) as f64 {
                flow.set_valid(y, x, false);
                continue;
            }
            flow.set(y, x, ix - x as f64, iy - y as f64);
        }
    }

    // trajectory reproducing the same relative motion via the production
    // pose types: pose(t0) = I, pose(t1) = T_rel^-1
    let dt_us = 100_000;
    let quat = nalgebra::UnitQuaternion::from_axis_angle(
        &nalgebra::Unit::new_normalize(nalgebra::Vector3::new(axis[0], axis[1], axis[2])),
        angle,
    );
    let t_rel = nalgebra::Isometry3::from_parts(
        nalgebra::Translation3::new(trans[0], trans[1], trans[2]),
        quat,
    );
    let trajectory = PoseTrajectory::new(vec![
        (0, nalgebra::Isometry3::identity()),
        (dt_us, t_rel.inverse()),
    ])
    .unwrap();

    GeometryFixture {
        disparity,
        camera,
        trajectory,
        flow,
        dt_us,
    }
}

// ---------------------------------------------------------------------------
// ready-made scenes and samples
// ---------------------------------------------------------------------------

/// Random-dot scene translating at constant velocity such that the flow over
/// one GT interval equals `flow_per_interval`.
pub fn translating_scene(
    seed: u64,
    sensor: (usize, usize),
    flow_per_interval: (f64, f64),
    intervals: usize,
) -> SceneSpec {
    let dt_us = 100_000i64;
    let dt_s = dt_us as f64 / 1e6;
    SceneSpec {
        pattern: Pattern::RandomDots {
            count: sensor.0 * sensor.1 / 48,
            radius: 1.2,
            contrast: 1.0,
        },
        motion: Motion {
            translation: (flow_per_interval.0 / dt_s, flow_per_interval.1 / dt_s),
            rotation: 0.0,
            scale_rate: 0.0,
        },
        sensor,
        duration_us: dt_us * (intervals as i64 + 1),
        gt_interval_us: dt_us,
        threshold: 0.15,
        seed,
        substeps: 32,
    }
}

/// Events, per-interval ground truth, and reference times of a scene. The
/// first reference time is one interval in, so the first sample has a
/// preceding event window.
pub fn scene_sequence(spec: &SceneSpec) -> Result<(EventSequence, Vec<FlowField>, Vec<i64>)> {
    let events = generate_events(spec)?;
    let dt = spec.gt_interval_us;
    let n = (spec.duration_us / dt - 1).max(0) as usize;
    let mut gts = Vec::with_capacity(n);
    let mut t_refs = Vec::with_capacity(n);
    for k in 0..n {
        let t_ref = dt * (k as i64 + 1);
        gts.push(analytic_flow(spec, t_ref, dt)?);
        t_refs.push(t_ref);
    }
    Ok((events, gts, t_refs))
}

/// In-memory training sample over a translating-dots scene.
pub fn constant_flow_sample(
    seed: u64,
    sensor: (usize, usize),
    flow_per_interval: (f64, f64),
    n_i: usize,
    bins: usize,
    split_polarity: bool,
) -> Result<TrainSample> {
    let spec = translating_scene(seed, sensor, flow_per_interval, n_i);
    let (events, gts, t_refs) = scene_sequence(&spec)?;
    let mut slices = Vec::with_capacity(t_refs.len());
    for &t_ref in &t_refs {
        slices.push(slice_window(&events, t_ref, spec.gt_interval_us)?);
    }
    let mut grids = Vec::with_capacity(n_i + 1);
    grids.push(build_voxel_grid(&slices[0].0, bins, split_polarity)?);
    for k in 0..t_refs.len() {
        let window = if k + 1 < t_refs.len() {
            &slices[k + 1].0
        } else {
            &slices[k].1
        };
        grids.push(build_voxel_grid(window, bins, split_polarity)?);
    }
    Ok(TrainSample {
        grids,
        gts,
        t_refs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot_spec(seed: u64) -> SceneSpec {
        translating_scene(seed, (32, 32), (1.0, 0.0), 3)
    }

    #[test]
    fn analytic_flow_pure_translation() {
        let spec = SceneSpec {
            motion: Motion {
                translation: (10.0, 0.0),
                rotation: 0.0,
                scale_rate: 0.0,
            },
            ..dot_spec(1)
        };
        let flow = analytic_flow(&spec, 0, 100_000).unwrap();
        for y in 0..32 {
            for x in 0..31 {
                if flow.is_valid(y, x) {
                    assert!((flow.u(y, x) - 1.0).abs() < 1e-12);
                    assert!(flow.v(y, x).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn analytic_flow_rotation_chord() {
        let omega = 0.5; // rad/s
        let spec = SceneSpec {
            motion: Motion {
                translation: (0.0, 0.0),
                rotation: omega,
                scale_rate: 0.0,
            },
            ..dot_spec(2)
        };
        let dt = 100_000;
        let flow = analytic_flow(&spec, 0, dt).unwrap();
        let (cx, cy) = ((31.0) / 2.0, (31.0) / 2.0);
        let theta = omega * dt as f64 / 1e6;
        for y in 0..32 {
            for x in 0..32 {
                if flow.is_valid(y, x) {
                    let r = (x as f64 - cx).hypot(y as f64 - cy);
                    let mag = flow.u(y, x).hypot(flow.v(y, x));
                    let chord = 2.0 * r * (theta / 2.0).sin();
                    assert!(
                        (mag - chord).abs() < 1e-9,
                        "pixel ({y}, {x}): {mag} vs chord {chord}"
                    );
                }
            }
        }
    }

    #[test]
    fn analytic_flow_zero_motion_is_zero() {
        let spec = SceneSpec {
            motion: Motion {
                translation: (0.0, 0.0),
                rotation: 0.0,
                scale_rate: 0.0,
            },
            ..dot_spec(3)
        };
        let flow = analytic_flow(&spec, 100_000, 100_000).unwrap();
        assert!(flow.tensor().data().iter().all(|v| *v == 0.0));
        assert_eq!(flow.valid_count(), 32 * 32);
    }

    #[test]
    fn static_scene_emits_no_events() {
        let spec = SceneSpec {
            motion: Motion {
                translation: (0.0, 0.0),
                rotation: 0.0,
                scale_rate: 0.0,
            },
            ..dot_spec(4)
        };
        let events = generate_events(&spec).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = dot_spec(5);
        let a = generate_events(&spec).unwrap();
        let b = generate_events(&spec).unwrap();
        assert_eq!(a, b);
        let fa = analytic_flow(&spec, 100_000, 100_000).unwrap();
        let fb = analytic_flow(&spec, 100_000, 100_000).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn translating_dot_fires_positive_then_negative() {
        // a single bright dot passing a pixel brightens then darkens it
        let spec = SceneSpec {
            pattern: Pattern::RandomDots {
                count: 1,
                radius: 1.5,
                contrast: 1.0,
            },
            motion: Motion {
                translation: (10.0, 0.0),
                rotation: 0.0,
                scale_rate: 0.0,
            },
            sensor: (9, 9),
            duration_us: 1_000_000,
            gt_interval_us: 100_000,
            threshold: 0.1,
            seed: 11,
            substeps: 32,
        };
        let events = generate_events(&spec).unwrap();
        assert!(!events.is_empty());
        // find a pixel with both polarities and check time ordering
        let mut found = false;
        for y in 0..9u16 {
            for x in 0..9u16 {
                let evs: Vec<&Event> = events
                    .events()
                    .iter()
                    .filter(|e| e.x == x && e.y == y)
                    .collect();
                let first_pos = evs.iter().position(|e| e.p == 1);
                let first_neg = evs.iter().position(|e| e.p == -1);
                if let (Some(fp), Some(fneg)) = (first_pos, first_neg) {
                    if fp < fneg {
                        found = true;
                    }
                }
            }
        }
        assert!(found, "no pixel fired positive before negative");
    }

    #[test]
    fn doubling_threshold_never_increases_per_pixel_counts() {
        let spec = dot_spec(6);
        let spec2 = SceneSpec {
            threshold: spec.threshold * 2.0,
            ..spec.clone()
        };
        let count_per_pixel = |events: &EventSequence| {
            let mut c = vec![0usize; 32 * 32];
            for e in events.events() {
                c[e.y as usize * 32 + e.x as usize] += 1;
            }
            c
        };
        let c1 = count_per_pixel(&generate_events(&spec).unwrap());
        let c2 = count_per_pixel(&generate_events(&spec2).unwrap());
        for (a, b) in c1.iter().zip(&c2) {
            assert!(b <= a, "higher threshold produced more events");
        }
    }

    #[test]
    fn frame_warped_by_flow_matches_next_frame() {
        let spec = dot_spec(7);
        let t_i = 100_000;
        let dt = 100_000;
        let frame_a = render_frame(&spec, t_i);
        let frame_b = render_frame(&spec, t_i + dt);
        let flow = analytic_flow(&spec, t_i, dt).unwrap();
        let (h, w) = (32, 32);
        let mut total_err = 0.0;
        let mut n = 0;
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                if !flow.is_valid(y, x) {
                    continue;
                }
                let tx = x as f64 + flow.u(y, x);
                let ty = y as f64 + flow.v(y, x);
                if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                    continue;
                }
                // bilinear sample of the target frame
                let (x0, y0) = (tx.floor() as usize, ty.floor() as usize);
                let (fx, fy) = (tx - x0 as f64, ty - y0 as f64);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let v = frame_b[y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
                    + frame_b[y0 * w + x1] * fx * (1.0 - fy)
                    + frame_b[y1 * w + x0] * (1.0 - fx) * fy
                    + frame_b[y1 * w + x1] * fx * fy;
                total_err += (v - frame_a[y * w + x]).abs();
                n += 1;
            }
        }
        let mean = total_err / n as f64;
        assert!(mean < 0.02, "mean warp error {mean} exceeds 2% of contrast");
    }

    #[test]
    fn grating_polarity_balance_over_full_period() {
        let spec = SceneSpec {
            pattern: Pattern::BarGrating {
                period: 8.0,
                angle: 0.0,
                contrast: 1.0,
            },
            motion: Motion {
                translation: (8.0, 0.0), // one period per second
                rotation: 0.0,
                scale_rate: 0.0,
            },
            sensor: (24, 24),
            duration_us: 1_000_000, // exactly one period
            gt_interval_us: 100_000,
            threshold: 0.12,
            seed: 8,
            substeps: 32,
        };
        let events = generate_events(&spec).unwrap();
        let pos = events.events().iter().filter(|e| e.p == 1).count() as f64;
        let neg = events.events().iter().filter(|e| e.p == -1).count() as f64;
        assert!(pos > 0.0 && neg > 0.0);
        let imbalance = (pos - neg).abs() / (pos + neg);
        assert!(imbalance < 0.05, "polarity imbalance {imbalance}");
    }

    #[test]
    fn geometry_fixture_identity_motion_gives_zero_flow() {
        // fixture with both pose samples identical must yield zero flow via
        // the production path
        let fixture = generate_geometry_fixture(1);
        let t_rel = fixture
            .trajectory
            .relative(0, 0)
            .unwrap();
        let flow =
            crate::geometry::flow_from_geometry(&fixture.disparity, &fixture.camera, &t_rel)
                .unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if flow.is_valid(y, x) {
                    assert_eq!((flow.u(y, x), flow.v(y, x)), (0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn geometry_fixtures_cross_check_production_path() {
        for seed in 0..20 {
            let fx = generate_geometry_fixture(seed);
            let t_rel = fx.trajectory.relative(0, fx.dt_us).unwrap();
            let flow =
                crate::geometry::flow_from_geometry(&fx.disparity, &fx.camera, &t_rel).unwrap();
            let mut max_diff = 0.0f64;
            for y in 0..64 {
                for x in 0..64 {
                    if flow.is_valid(y, x) && fx.flow.is_valid(y, x) {
                        max_diff = max_diff
                            .max((flow.u(y, x) - fx.flow.u(y, x)).abs())
                            .max((flow.v(y, x) - fx.flow.v(y, x)).abs());
                    }
                }
            }
            assert!(max_diff < 1e-6, "seed {seed}: max diff {max_diff}");
        }
    }

    #[test]
    fn invalid_spec_fields_are_named() {
        let mut spec = dot_spec(9);
        spec.duration_us = 0;
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("duration_us"), "{err}");
    }
}
