//! Differentiable warm-starting of the flow estimate: the previous prediction
//! is forward-warped to the next timestep by average splatting in the target
//! pixel space, normalized with bilinear-kernel weights.
//!
//! The module introduces no trainable parameters; the operation is
//! subdifferentiable in the input flow (both as the splatted value and as the
//! splat coordinates), so gradients propagate through time when it sits in the
//! training graph.
//!
//! Note on the warp target: the displaced position of a source pixel is
//! `g(x_prev) = x_prev + F_prev(x_prev)`, i.e. the landing point under the
//! *previous* prediction. The normalized scatter then reads
//! `F_init(x) = sum_s k_b(x - g(s)) F_prev(s) / sum_s k_b(x - g(s))`.

use crate::autodiff::{kernels, Tape, VarId};
use crate::error::{Error, Result};
use crate::flow::FlowField;

/// Weight cutoff below which a target pixel is cold-started and marked
/// invalid (0/0 in the normalization is undefined there).
pub const SPLAT_EPS: f64 = 1e-6;

/// Separable bilinear splatting kernel
/// `k_b(a) = max(0, 1 - |a_x|) * max(0, 1 - |a_y|)`.
pub fn bilinear_kernel(a: [f64; 2]) -> f64 {
    (1.0 - a[0].abs()).max(0.0) * (1.0 - a[1].abs()).max(0.0)
}

/// Forward-warps a flow field onto its own displaced positions with average
/// splatting. Vacated target pixels (accumulated weight <= eps) read 0 and
/// are marked invalid; out-of-frame splats are discarded. Source pixels whose
/// validity flag is false do not splat.
pub fn forward_warp_flow(prev: &FlowField) -> Result<FlowField> {
    let (h, w) = prev.dims();
    for y in 0..h {
        for x in 0..w {
            if prev.is_valid(y, x) && !(prev.u(y, x).is_finite() && prev.v(y, x).is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite flow at pixel ({y}, {x})"
                )));
            }
        }
    }
    let res = kernels::splat_flow_fwd(prev.tensor(), Some(prev.valid_mask()), SPLAT_EPS);
    FlowField::new(res.out, res.valid, prev.resolution)
}

/// Warm start: forward-warp the previous prediction when enabled, otherwise
/// the zero field (cold start).
pub fn warm_start(prev_prediction: &FlowField, enabled: bool) -> Result<FlowField> {
    if !enabled {
        let (h, w) = prev_prediction.dims();
        return Ok(FlowField::zeros(h, w, prev_prediction.resolution));
    }
    forward_warp_flow(prev_prediction)
}

/// Tape variant used inside the training graph: splats a `[2, h, w]` flow
/// variable and returns the warped variable plus the validity mask.
/// `detach_coords` severs the gradient path through the splat coordinates
/// (ablation switch; the value path stays connected).
pub fn warm_start_on_tape(
    tape: &mut Tape,
    prev_small: VarId,
    detach_coords: bool,
) -> (VarId, Vec<bool>) {
    tape.splat_flow(prev_small, SPLAT_EPS, detach_coords)
}

/// Reference double-loop splatting oracle: iterate sources, scatter to the
/// four integer neighbours, then divide. Kept independent of the production
/// kernel for the acceptance checks.
pub fn splat_oracle(prev: &FlowField) -> FlowField {
    let (h, w) = prev.dims();
    let mut num_u = vec![0.0; h * w];
    let mut num_v = vec![0.0; h * w];
    let mut den = vec![0.0; h * w];
    for sy in 0..h {
        for sx in 0..w {
            if !prev.is_valid(sy, sx) {
                continue;
            }
            let (u, v) = (prev.u(sy, sx), prev.v(sy, sx));
            let gx = sx as f64 + u;
            let gy = sy as f64 + v;
            for ty in 0..h {
                for tx in 0..w {
                    let wgt = bilinear_kernel([tx as f64 - gx, ty as f64 - gy]);
                    if wgt > 0.0 {
                        num_u[ty * w + tx] += wgt * u;
                        num_v[ty * w + tx] += wgt * v;
                        den[ty * w + tx] += wgt;
                    }
                }
            }
        }
    }
    let mut out = FlowField::zeros(h, w, prev.resolution);
    for t in 0..h * w {
        if den[t] > SPLAT_EPS {
            out.set(t / w, t % w, num_u[t] / den[t], num_v[t] / den[t]);
        } else {
            out.set_valid(t / w, t % w, false);
        }
    }
    out
}
