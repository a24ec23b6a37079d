//! Plain-tensor forward/backward kernels behind the tape ops.
//!
//! Every kernel is a pure function of its inputs with a fixed accumulation
//! order, so results are bit-stable across runs.

use crate::tensor::Tensor;

/// Upsampling factor between the internal flow state and sensor resolution.
pub const UP: usize = 8;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> (usize, usize) {
    let ho = (h + 2 * pad.0).saturating_sub(kh) / stride.0 + 1;
    let wo = (w + 2 * pad.1).saturating_sub(kw) / stride.1 + 1;
    (ho, wo)
}

/// Zero-padded 2-d convolution over a `[Ci, H, W]` input.
pub fn conv2d_fwd(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let (ci_n, h, w_in) = x.dims3();
    let (co_n, ci_w, kh, kw) = w.dims4();
    assert_eq!(ci_n, ci_w, "conv2d: input channels mismatch");
    let (sy, sx) = stride;
    let (py, px) = pad;
    let (ho, wo) = conv2d_out_dims(h, w_in, kh, kw, stride, pad);
    let mut out = vec![0.0; co_n * ho * wo];
    if let Some(b) = b {
        for o in 0..co_n {
            let bv = b.data()[o];
            out[o * ho * wo..(o + 1) * ho * wo].fill(bv);
        }
    }
    let xd = x.data();
    let wd = w.data();
    for o in 0..co_n {
        for ci in 0..ci_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((o * ci_n + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * sy + ky) as isize - py as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xd[(ci * h + iy as usize) * w_in..(ci * h + iy as usize + 1) * w_in];
                        let orow = &mut out[(o * ho + oy) * wo..(o * ho + oy + 1) * wo];
                        if sx == 1 {
                            // ix = ox + kx - px
                            let ox_lo = px.saturating_sub(kx);
                            let ox_hi = (w_in + px).saturating_sub(kx).min(wo);
                            if ox_lo < ox_hi {
                                let off = kx as isize - px as isize;
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * xrow[(ox as isize + off) as usize];
                                }
                            }
                        } else {
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * sx + kx) as isize - px as isize;
                                if ix >= 0 && ix < w_in as isize {
                                    *ov += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co_n, ho, wo], out)
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (ci_n, h, w_in) = x.dims3();
    let (co_n, _, kh, kw) = w.dims4();
    let (_, ho, wo) = gout.dims3();
    let (sy, sx) = stride;
    let (py, px) = pad;
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    let mut gx = vec![0.0; ci_n * h * w_in];
    let mut gw = vec![0.0; wd.len()];
    for o in 0..co_n {
        for ci in 0..ci_n {
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * ci_n + ci) * kh + ky) * kw + kx;
                    let wv = wd[widx];
                    let mut wacc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * sy + ky) as isize - py as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xbase = (ci * h + iy as usize) * w_in;
                        let gbase = (o * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * sx + kx) as isize - px as isize;
                            if ix >= 0 && ix < w_in as isize {
                                let g = gd[gbase + ox];
                                wacc += g * xd[xbase + ix as usize];
                                gx[xbase + ix as usize] += g * wv;
                            }
                        }
                    }
                    gw[widx] += wacc;
                }
            }
        }
    }
    let gb = if with_bias {
        let mut gb = vec![0.0; co_n];
        for o in 0..co_n {
            gb[o] = gd[o * ho * wo..(o + 1) * ho * wo].iter().sum();
        }
        Some(Tensor::new(vec![co_n], gb))
    } else {
        None
    };
    (
        Tensor::new(vec![ci_n, h, w_in], gx),
        Tensor::new(w.shape().to_vec(), gw),
        gb,
    )
}

// ---------------------------------------------------------------------------
// pooling / resizing
// ---------------------------------------------------------------------------

/// 2x2 average pooling (floor semantics on odd dims).
pub fn avg_pool2_fwd(x: &Tensor) -> Tensor {
    let (c_n, h, w) = x.dims3();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c_n * ho * wo];
    for c in 0..c_n {
        for y in 0..ho {
            let r0 = x.row3(c, 2 * y);
            let r1 = x.row3(c, 2 * y + 1);
            let orow = &mut out[(c * ho + y) * wo..(c * ho + y + 1) * wo];
            for (x_o, ov) in orow.iter_mut().enumerate() {
                *ov = 0.25 * (r0[2 * x_o] + r0[2 * x_o + 1] + r1[2 * x_o] + r1[2 * x_o + 1]);
            }
        }
    }
    Tensor::new(vec![c_n, ho, wo], out)
}

pub fn avg_pool2_bwd(x_shape: &[usize], gout: &Tensor) -> Tensor {
    let (c_n, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (_, ho, wo) = gout.dims3();
    let mut gx = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for y in 0..ho {
            for x_o in 0..wo {
                let g = 0.25 * gout.at3(c, y, x_o);
                gx[(c * h + 2 * y) * w + 2 * x_o] += g;
                gx[(c * h + 2 * y) * w + 2 * x_o + 1] += g;
                gx[(c * h + 2 * y + 1) * w + 2 * x_o] += g;
                gx[(c * h + 2 * y + 1) * w + 2 * x_o + 1] += g;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Half-pixel bilinear upsampling by an integer factor with edge clamping.
pub fn upsample_bilinear_fwd(x: &Tensor, f: usize) -> Tensor {
    let (c_n, h, w) = x.dims3();
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c_n * ho * wo];
    let taps_x = resize_taps(wo, w, f);
    let taps_y = resize_taps(ho, h, f);
    for c in 0..c_n {
        for oy in 0..ho {
            let (y0, y1, ty) = taps_y[oy];
            let r0 = x.row3(c, y0);
            let r1 = x.row3(c, y1);
            let orow = &mut out[(c * ho + oy) * wo..(c * ho + oy + 1) * wo];
            for (ox, ov) in orow.iter_mut().enumerate() {
                let (x0, x1, tx) = taps_x[ox];
                let top = r0[x0] * (1.0 - tx) + r0[x1] * tx;
                let bot = r1[x0] * (1.0 - tx) + r1[x1] * tx;
                *ov = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new(vec![c_n, ho, wo], out)
}

fn resize_taps(n_out: usize, n_in: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = (o as f64 + 0.5) / f as f64 - 0.5;
            let x0 = s.floor();
            let t = s - x0;
            let i0 = (x0 as isize).clamp(0, n_in as isize - 1) as usize;
            let i1 = (x0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

pub fn upsample_bilinear_bwd(x_shape: &[usize], gout: &Tensor, f: usize) -> Tensor {
    let (c_n, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (_, ho, wo) = gout.dims3();
    let taps_x = resize_taps(wo, w, f);
    let taps_y = resize_taps(ho, h, f);
    let mut gx = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for oy in 0..ho {
            let (y0, y1, ty) = taps_y[oy];
            for ox in 0..wo {
                let (x0, x1, tx) = taps_x[ox];
                let g = gout.at3(c, oy, ox);
                gx[(c * h + y0) * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                gx[(c * h + y0) * w + x1] += g * (1.0 - ty) * tx;
                gx[(c * h + y1) * w + x0] += g * ty * (1.0 - tx);
                gx[(c * h + y1) * w + x1] += g * ty * tx;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Block-mean downsampling by an integer factor (dims must divide).
pub fn downsample_mean_fwd(x: &Tensor, f: usize) -> Tensor {
    let (c_n, h, w) = x.dims3();
    assert!(h % f == 0 && w % f == 0, "downsample: dims must divide factor");
    let (ho, wo) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c_n * ho * wo];
    for c in 0..c_n {
        for y in 0..ho {
            for x_o in 0..wo {
                let mut acc = 0.0;
                for dy in 0..f {
                    let row = x.row3(c, y * f + dy);
                    for dx in 0..f {
                        acc += row[x_o * f + dx];
                    }
                }
                out[(c * ho + y) * wo + x_o] = acc * inv;
            }
        }
    }
    Tensor::new(vec![c_n, ho, wo], out)
}

pub fn downsample_mean_bwd(x_shape: &[usize], gout: &Tensor, f: usize) -> Tensor {
    let (c_n, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (_, ho, wo) = gout.dims3();
    let inv = 1.0 / (f * f) as f64;
    let mut gx = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for y in 0..ho {
            for x_o in 0..wo {
                let g = gout.at3(c, y, x_o) * inv;
                for dy in 0..f {
                    for dx in 0..f {
                        gx[(c * h + y * f + dy) * w + x_o * f + dx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

// ---------------------------------------------------------------------------
// padding / cropping
// ---------------------------------------------------------------------------

/// Replicate padding: (top, bottom, left, right).
pub fn pad_replicate_fwd(x: &Tensor, pad: (usize, usize, usize, usize)) -> Tensor {
    let (c_n, h, w) = x.dims3();
    let (t, b, l, r) = pad;
    let (ho, wo) = (h + t + b, w + l + r);
    let mut out = vec![0.0; c_n * ho * wo];
    for c in 0..c_n {
        for oy in 0..ho {
            let iy = (oy as isize - t as isize).clamp(0, h as isize - 1) as usize;
            let xrow = x.row3(c, iy);
            let orow = &mut out[(c * ho + oy) * wo..(c * ho + oy + 1) * wo];
            for (ox, ov) in orow.iter_mut().enumerate() {
                let ix = (ox as isize - l as isize).clamp(0, w as isize - 1) as usize;
                *ov = xrow[ix];
            }
        }
    }
    Tensor::new(vec![c_n, ho, wo], out)
}

pub fn pad_replicate_bwd(x_shape: &[usize], gout: &Tensor, pad: (usize, usize, usize, usize)) -> Tensor {
    let (c_n, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (t, _, l, _) = pad;
    let (_, ho, wo) = gout.dims3();
    let mut gx = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for oy in 0..ho {
            let iy = (oy as isize - t as isize).clamp(0, h as isize - 1) as usize;
            for ox in 0..wo {
                let ix = (ox as isize - l as isize).clamp(0, w as isize - 1) as usize;
                gx[(c * h + iy) * w + ix] += gout.at3(c, oy, ox);
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

pub fn crop_fwd(x: &Tensor, y0: usize, x0: usize, hh: usize, ww: usize) -> Tensor {
    let (c_n, _, _) = x.dims3();
    let mut out = vec![0.0; c_n * hh * ww];
    for c in 0..c_n {
        for y in 0..hh {
            let src = x.row3(c, y0 + y);
            out[(c * hh + y) * ww..(c * hh + y + 1) * ww].copy_from_slice(&src[x0..x0 + ww]);
        }
    }
    Tensor::new(vec![c_n, hh, ww], out)
}

pub fn crop_bwd(x_shape: &[usize], gout: &Tensor, y0: usize, x0: usize) -> Tensor {
    let (c_n, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (_, hh, ww) = gout.dims3();
    let mut gx = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for y in 0..hh {
            for x_i in 0..ww {
                gx[(c * h + y0 + y) * w + x0 + x_i] += gout.at3(c, y, x_i);
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

// ---------------------------------------------------------------------------
// all-pairs correlation
// ---------------------------------------------------------------------------

/// All-pairs inner products between feature maps, scaled by 1/sqrt(D).
/// Output `[h*w, h, w]`: entry `[sy*w+sx, ty, tx]` correlates source (sx, sy)
/// with target (tx, ty).
pub fn corr_volume_fwd(f1: &Tensor, f2: &Tensor) -> Tensor {
    let (d, h, w) = f1.dims3();
    assert_eq!(f1.shape(), f2.shape(), "corr_volume: shape mismatch");
    let n = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * n];
    let d1 = f1.data();
    let d2 = f2.data();
    for s in 0..n {
        let orow = &mut out[s * n..(s + 1) * n];
        for k in 0..d {
            let a = d1[k * n + s] * scale;
            if a == 0.0 {
                continue;
            }
            let frow = &d2[k * n..(k + 1) * n];
            for (t, ov) in orow.iter_mut().enumerate() {
                *ov += a * frow[t];
            }
        }
    }
    Tensor::new(vec![n, h, w], out)
}

pub fn corr_volume_bwd(f1: &Tensor, f2: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (d, h, w) = f1.dims3();
    let n = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let d1 = f1.data();
    let d2 = f2.data();
    let gd = gout.data();
    let mut g1 = vec![0.0; d1.len()];
    let mut g2 = vec![0.0; d2.len()];
    for s in 0..n {
        let grow = &gd[s * n..(s + 1) * n];
        for k in 0..d {
            let frow = &d2[k * n..(k + 1) * n];
            let mut acc = 0.0;
            let a = d1[k * n + s] * scale;
            for (t, &g) in grow.iter().enumerate() {
                acc += g * frow[t];
                g2[k * n + t] += g * a;
            }
            g1[k * n + s] += acc * scale;
        }
    }
    (
        Tensor::new(f1.shape().to_vec(), g1),
        Tensor::new(f2.shape().to_vec(), g2),
    )
}

// ---------------------------------------------------------------------------
// correlation lookup
// ---------------------------------------------------------------------------

/// Center-aligned coordinate mapping from level-0 target coords into level `l`.
#[inline]
fn to_level(c: f64, l: usize) -> f64 {
    (c + 0.5) / (1usize << l) as f64 - 0.5
}

/// Samples a `(2r+1)^2` window of a pyramid level around each source pixel's
/// flow-displaced target position. Out-of-bounds taps read as zero.
///
/// `vol` is `[h*w, hl, wl]`, `coords` is `[2, h, w]` holding level-0 target
/// coordinates (x + u, y + v). Output is `[(2r+1)^2, h, w]` with tap channel
/// order (dy, dx) row-major.
pub fn corr_lookup_fwd(vol: &Tensor, coords: &Tensor, level: usize, r: usize) -> Tensor {
    let (s_n, hl, wl) = vol.dims3();
    let (two, h, w) = coords.dims3();
    assert_eq!(two, 2);
    assert_eq!(s_n, h * w, "corr_lookup: volume/coord mismatch");
    let side = 2 * r + 1;
    let mut out = vec![0.0; side * side * h * w];
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            let cx = to_level(coords.at3(0, y, x), level);
            let cy = to_level(coords.at3(1, y, x), level);
            for dy in 0..side {
                let py = cy + dy as f64 - r as f64;
                for dx in 0..side {
                    let px = cx + dx as f64 - r as f64;
                    let v = bilinear_read_zero(vol, s, hl, wl, py, px);
                    out[((dy * side + dx) * h + y) * w + x] = v;
                }
            }
        }
    }
    Tensor::new(vec![side * side, h, w], out)
}

#[inline]
fn bilinear_read_zero(vol: &Tensor, s: usize, hl: usize, wl: usize, py: f64, px: f64) -> f64 {
    let x0 = px.floor();
    let y0 = py.floor();
    let tx = px - x0;
    let ty = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0;
    for (j, wy) in [(y0, 1.0 - ty), (y0 + 1, ty)] {
        if j < 0 || j >= hl as isize || wy == 0.0 {
            continue;
        }
        for (i, wx) in [(x0, 1.0 - tx), (x0 + 1, tx)] {
            if i < 0 || i >= wl as isize || wx == 0.0 {
                continue;
            }
            acc += wy * wx * vol.data()[(s * hl + j as usize) * wl + i as usize];
        }
    }
    acc
}

pub fn corr_lookup_bwd(
    vol: &Tensor,
    coords: &Tensor,
    gout: &Tensor,
    level: usize,
    r: usize,
) -> (Tensor, Tensor) {
    let (s_n, hl, wl) = vol.dims3();
    let (_, h, w) = coords.dims3();
    let side = 2 * r + 1;
    let inv_scale = 1.0 / (1usize << level) as f64;
    let mut gvol = vec![0.0; s_n * hl * wl];
    let mut gcoords = vec![0.0; 2 * h * w];
    let vd = vol.data();
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            let cx = to_level(coords.at3(0, y, x), level);
            let cy = to_level(coords.at3(1, y, x), level);
            let mut gcx = 0.0;
            let mut gcy = 0.0;
            for dy in 0..side {
                let py = cy + dy as f64 - r as f64;
                let y0 = py.floor();
                let ty = py - y0;
                let y0 = y0 as isize;
                for dx in 0..side {
                    let g = gout.at3(dy * side + dx, y, x);
                    if g == 0.0 {
                        continue;
                    }
                    let px = cx + dx as f64 - r as f64;
                    let x0 = px.floor();
                    let tx = px - x0;
                    let x0 = x0 as isize;
                    for (j, wy, dwy) in [(y0, 1.0 - ty, -1.0), (y0 + 1, ty, 1.0)] {
                        if j < 0 || j >= hl as isize {
                            continue;
                        }
                        for (i, wx, dwx) in [(x0, 1.0 - tx, -1.0), (x0 + 1, tx, 1.0)] {
                            if i < 0 || i >= wl as isize {
                                continue;
                            }
                            let vidx = (s * hl + j as usize) * wl + i as usize;
                            let v = vd[vidx];
                            gvol[vidx] += g * wy * wx;
                            gcx += g * dwx * wy * v;
                            gcy += g * dwy * wx * v;
                        }
                    }
                }
            }
            gcoords[y * w + x] = gcx * inv_scale;
            gcoords[(h + y) * w + x] = gcy * inv_scale;
        }
    }
    (
        Tensor::new(vol.shape().to_vec(), gvol),
        Tensor::new(vec![2, h, w], gcoords),
    )
}

// ---------------------------------------------------------------------------
// forward warping (average splatting)
// ---------------------------------------------------------------------------

/// Result of splatting a flow field onto its own displaced positions.
pub struct SplatResult {
    pub out: Tensor,
    /// Accumulated bilinear weight per target pixel.
    pub den: Tensor,
    /// True where the accumulated weight exceeds the cutoff.
    pub valid: Vec<bool>,
}

/// Average splatting of a flow field into the target pixel space.
///
/// Each source pixel scatters its flow value to the four integer neighbours of
/// its displaced position with bilinear weights; targets normalise by total
/// received weight. Targets with weight <= `eps` are zeroed and marked invalid.
/// `src_valid`, when given, excludes masked-out source pixels from splatting.
pub fn splat_flow_fwd(flow: &Tensor, src_valid: Option<&[bool]>, eps: f64) -> SplatResult {
    let (two, h, w) = flow.dims3();
    assert_eq!(two, 2, "splat expects [2, H, W] flow");
    let mut num = vec![0.0; 2 * h * w];
    let mut den = vec![0.0; h * w];
    let fd = flow.data();
    for sy in 0..h {
        for sx in 0..w {
            let s = sy * w + sx;
            if let Some(m) = src_valid {
                if !m[s] {
                    continue;
                }
            }
            let u = fd[s];
            let v = fd[h * w + s];
            let gx = sx as f64 + u;
            let gy = sy as f64 + v;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let tx = gx - x0;
            let ty = gy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for (j, wy) in [(y0, 1.0 - ty), (y0 + 1, ty)] {
                if j < 0 || j >= h as isize {
                    continue;
                }
                for (i, wx) in [(x0, 1.0 - tx), (x0 + 1, tx)] {
                    if i < 0 || i >= w as isize {
                        continue;
                    }
                    let t = j as usize * w + i as usize;
                    let wgt = wy * wx;
                    num[t] += wgt * u;
                    num[h * w + t] += wgt * v;
                    den[t] += wgt;
                }
            }
        }
    }
    let mut out = vec![0.0; 2 * h * w];
    let mut valid = vec![false; h * w];
    for t in 0..h * w {
        if den[t] > eps {
            out[t] = num[t] / den[t];
            out[h * w + t] = num[h * w + t] / den[t];
            valid[t] = true;
        }
    }
    SplatResult {
        out: Tensor::new(vec![2, h, w], out),
        den: Tensor::new(vec![h, w], den),
        valid,
    }
}

/// Gradient of `splat_flow_fwd` w.r.t. the input flow.
///
/// The flow enters both as the splatted value and as the splat coordinates;
/// `detach_coords` drops the coordinate path (ablation switch).
pub fn splat_flow_bwd(
    flow: &Tensor,
    res: &SplatResult,
    gout: &Tensor,
    eps: f64,
    detach_coords: bool,
) -> Tensor {
    let (_, h, w) = flow.dims3();
    let fd = flow.data();
    let dd = res.den.data();
    let od = res.out.data();
    let gd = gout.data();
    let mut gflow = vec![0.0; 2 * h * w];
    for sy in 0..h {
        for sx in 0..w {
            let s = sy * w + sx;
            let u = fd[s];
            let v = fd[h * w + s];
            let gx = sx as f64 + u;
            let gy = sy as f64 + v;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let tx = gx - x0;
            let ty = gy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut gu = 0.0;
            let mut gv = 0.0;
            for (j, wy, dwy) in [(y0, 1.0 - ty, -1.0), (y0 + 1, ty, 1.0)] {
                if j < 0 || j >= h as isize {
                    continue;
                }
                for (i, wx, dwx) in [(x0, 1.0 - tx, -1.0), (x0 + 1, tx, 1.0)] {
                    if i < 0 || i >= w as isize {
                        continue;
                    }
                    let t = j as usize * w + i as usize;
                    let den = dd[t];
                    if den <= eps {
                        continue;
                    }
                    let wgt = wy * wx;
                    let g_u = gd[t];
                    let g_v = gd[h * w + t];
                    // value path: out_c = num_c / den, d num_c / d f_c = w
                    gu += g_u * wgt / den;
                    gv += g_v * wgt / den;
                    if !detach_coords {
                        // weight path: d out_c / d w = (f_c - out_c) / den
                        let common =
                            (g_u * (u - od[t]) + g_v * (v - od[h * w + t])) / den;
                        gu += common * dwx * wy;
                        gv += common * dwy * wx;
                    }
                }
            }
            gflow[s] = gu;
            gflow[h * w + s] = gv;
        }
    }
    Tensor::new(vec![2, h, w], gflow)
}

// ---------------------------------------------------------------------------
// learned convex upsampling
// ---------------------------------------------------------------------------

/// Number of combination taps in the convex upsampler (3x3 neighbourhood).
pub const CONVEX_TAPS: usize = 9;

/// Channel count the mask head must produce for a factor-8 convex upsample.
pub const CONVEX_MASK_CHANNELS: usize = UP * UP * CONVEX_TAPS;

/// Upsamples `values` by 8x, combining each coarse 3x3 neighbourhood with
/// per-subpixel softmax weights derived from `logits`.
pub fn convex_upsample_fwd(values: &Tensor, logits: &Tensor) -> Tensor {
    let (c_n, h, w) = values.dims3();
    let (lc, lh, lw) = logits.dims3();
    assert_eq!(lc, CONVEX_MASK_CHANNELS, "convex upsample: bad mask channels");
    assert!(lh == h && lw == w, "convex upsample: mask/value size mismatch");
    let (ho, wo) = (h * UP, w * UP);
    let mut out = vec![0.0; c_n * ho * wo];
    let mut probs = [0.0; CONVEX_TAPS];
    for y in 0..h {
        for x in 0..w {
            for dy in 0..UP {
                for dx in 0..UP {
                    softmax_taps(logits, (dy * UP + dx) * CONVEX_TAPS, y, x, &mut probs);
                    for c in 0..c_n {
                        let mut acc = 0.0;
                        for (j, &p) in probs.iter().enumerate() {
                            let yy = y as isize + (j / 3) as isize - 1;
                            let xx = x as isize + (j % 3) as isize - 1;
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                acc += p * values.at3(c, yy as usize, xx as usize);
                            }
                        }
                        out[(c * ho + y * UP + dy) * wo + x * UP + dx] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_n, ho, wo], out)
}

#[inline]
fn softmax_taps(logits: &Tensor, base: usize, y: usize, x: usize, probs: &mut [f64; CONVEX_TAPS]) {
    let mut mx = f64::NEG_INFINITY;
    for j in 0..CONVEX_TAPS {
        probs[j] = logits.at3(base + j, y, x);
        mx = mx.max(probs[j]);
    }
    let mut sum = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - mx).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
}

pub fn convex_upsample_bwd(values: &Tensor, logits: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (c_n, h, w) = values.dims3();
    let mut gvals = vec![0.0; values.numel()];
    let mut glogits = vec![0.0; logits.numel()];
    let mut probs = [0.0; CONVEX_TAPS];
    let mut vtap = [0.0; CONVEX_TAPS];
    for y in 0..h {
        for x in 0..w {
            for dy in 0..UP {
                for dx in 0..UP {
                    let base = (dy * UP + dx) * CONVEX_TAPS;
                    softmax_taps(logits, base, y, x, &mut probs);
                    for c in 0..c_n {
                        let g = gout.at3(c, y * UP + dy, x * UP + dx);
                        if g == 0.0 {
                            continue;
                        }
                        let mut outv = 0.0;
                        for j in 0..CONVEX_TAPS {
                            let yy = y as isize + (j / 3) as isize - 1;
                            let xx = x as isize + (j % 3) as isize - 1;
                            vtap[j] = if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize
                            {
                                values.at3(c, yy as usize, xx as usize)
                            } else {
                                0.0
                            };
                            outv += probs[j] * vtap[j];
                        }
                        for j in 0..CONVEX_TAPS {
                            let yy = y as isize + (j / 3) as isize - 1;
                            let xx = x as isize + (j % 3) as isize - 1;
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                gvals[(c * h + yy as usize) * w + xx as usize] += g * probs[j];
                            }
                            // d out_c / d logit_j = p_j (v_{c,j} - out_c)
                            glogits[((base + j) * h + y) * w + x] +=
                                g * probs[j] * (vtap[j] - outv);
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(values.shape().to_vec(), gvals),
        Tensor::new(logits.shape().to_vec(), glogits),
    )
}
