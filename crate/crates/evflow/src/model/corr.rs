//! All-pairs correlation volumes at multiple scales and the windowed lookup
//! operator that extracts per-pixel matching costs around the current flow.

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense feature embedding at 1/8 of sensor resolution.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `[D, H/8, W/8]`.
    pub data: Tensor,
    /// Downsampling factor relative to the (padded) sensor resolution.
    pub stride: usize,
}

impl FeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dims3()
    }
}

/// Multi-scale all-pairs correlation volumes. Level 0 holds
/// `<f1(source), f2(target)> / sqrt(D)` for every pair; deeper levels average
/// pool the target dimensions by 2x.
#[derive(Debug, Clone)]
pub struct CorrelationPyramid {
    /// Level `l` has shape `[h*w, h/2^l, w/2^l]`.
    pub levels: Vec<Tensor>,
    pub feature_dim: usize,
}

/// Builds the correlation pyramid from two equally-shaped feature maps.
pub fn correlation_pyramid(
    f1: &FeatureMap,
    f2: &FeatureMap,
    num_levels: usize,
) -> Result<CorrelationPyramid> {
    if f1.data.shape() != f2.data.shape() {
        return Err(Error::shape(format!(
            "correlation inputs differ: {:?} vs {:?}",
            f1.data.shape(),
            f2.data.shape()
        )));
    }
    if num_levels == 0 {
        return Err(Error::config("correlation pyramid needs at least one level"));
    }
    let (d, _, _) = f1.dims();
    let mut levels = vec![kernels::corr_volume_fwd(&f1.data, &f2.data)];
    for _ in 1..num_levels {
        levels.push(kernels::avg_pool2_fwd(levels.last().unwrap()));
    }
    Ok(CorrelationPyramid {
        levels,
        feature_dim: d,
    })
}

impl CorrelationPyramid {
    /// Samples the `(2r+1)^2` window at every level around the flow-displaced
    /// target position of each source pixel. `flow` is `[2, h, w]` at feature
    /// resolution; non-finite values are rejected. Output channels are
    /// ordered level-major, then (dy, dx) row-major.
    pub fn lookup(&self, flow: &Tensor, radius: usize) -> Result<Tensor> {
        let (two, h, w) = flow.dims3();
        if two != 2 {
            return Err(Error::shape(format!("lookup flow needs 2 channels, got {two}")));
        }
        if let Some((idx, v)) = flow.first_non_finite() {
            return Err(Error::numeric(format!(
                "non-finite flow value {v} at flat index {idx} in lookup"
            )));
        }
        let coords = base_grid_plus_flow(flow);
        let side = 2 * radius + 1;
        let mut out = Vec::with_capacity(self.levels.len() * side * side * h * w);
        for (l, vol) in self.levels.iter().enumerate() {
            let function = kernels::corr_lookup_fwd(vol, &coords, l, radius);
            out.extend_from_slice(function.data());
        }
        Ok(Tensor::new(vec![self.levels.len() * side * side, h, w], out))
    }
}

/// Adds the pixel index grid to a `[2, h, w]` flow, producing absolute
/// level-0 target coordinates.
pub fn base_grid_plus_flow(flow: &Tensor) -> Tensor {
    let (_, h, w) = flow.dims3();
    let mut coords = flow.clone();
    for y in 0..h {
        for x in 0..w {
            coords.set3(0, y, x, coords.at3(0, y, x) + x as f64);
            coords.set3(1, y, x, coords.at3(1, y, x) + y as f64);
        }
    }
    coords
}

/// The pixel index grid itself (x in channel 0, y in channel 1).
pub fn base_grid(h: usize, w: usize) -> Tensor {
    base_grid_plus_flow(&Tensor::zeros(&[2, h, w]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(data: Tensor) -> FeatureMap {
        FeatureMap { data, stride: 8 }
    }

    #[test]
    fn zero_target_features_give_zero_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f1 = fmap(Tensor::randn(&[4, 3, 3], 1.0, &mut rng));
        let f2 = fmap(Tensor::zeros(&[4, 3, 3]));
        let pyr = correlation_pyramid(&f1, &f2, 2).unwrap();
        for level in &pyr.levels {
            assert!(level.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn one_hot_orthonormal_features_give_identity_volume() {
        // per-pixel one-hot: D = h*w, f[d, y, x] = 1 iff d == y*w + x
        let (h, w) = (3, 3);
        let d = h * w;
        let mut f = Tensor::zeros(&[d, h, w]);
        for y in 0..h {
            for x in 0..w {
                f.set3(y * w + x, y, x, 1.0);
            }
        }
        let pyr = correlation_pyramid(&fmap(f.clone()), &fmap(f), 1).unwrap();
        let expect = 1.0 / (d as f64).sqrt();
        for s in 0..d {
            for t in 0..d {
                let got = pyr.levels[0].data()[s * d + t];
                if s == t {
                    assert!((got - expect).abs() < 1e-12);
                } else {
                    assert_eq!(got, 0.0);
                }
            }
        }
    }

    #[test]
    fn volume_matches_quadruple_loop_and_manual_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, h, w) = (3, 4, 4);
        let f1 = Tensor::randn(&[d, h, w], 1.0, &mut rng);
        let f2 = Tensor::randn(&[d, h, w], 1.0, &mut rng);
        let pyr = correlation_pyramid(&fmap(f1.clone()), &fmap(f2.clone()), 2).unwrap();

        // quadruple loop over (source, target) pairs
        let scale = 1.0 / (d as f64).sqrt();
        let mut max_diff = 0.0f64;
        for sy in 0..h {
            for sx in 0..w {
                for ty in 0..h {
                    for tx in 0..w {
                        let mut dot = 0.0;
                        for k in 0..d {
                            dot += f1.at3(k, sy, sx) * f2.at3(k, ty, tx);
                        }
                        let got = pyr.levels[0].at3(sy * w + sx, ty, tx);
                        max_diff = max_diff.max((got - dot * scale).abs());
                    }
                }
            }
        }
        assert!(max_diff < 1e-5, "level 0 max diff {max_diff}");

        // manual 2x2 average pooling of level 0 over target dims
        for s in 0..h * w {
            for ty in 0..h / 2 {
                for tx in 0..w / 2 {
                    let manual = 0.25
                        * (pyr.levels[0].at3(s, 2 * ty, 2 * tx)
                            + pyr.levels[0].at3(s, 2 * ty, 2 * tx + 1)
                            + pyr.levels[0].at3(s, 2 * ty + 1, 2 * tx)
                            + pyr.levels[0].at3(s, 2 * ty + 1, 2 * tx + 1));
                    let got = pyr.levels[1].at3(s, ty, tx);
                    assert!((got - manual).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f1 = fmap(Tensor::zeros(&[3, 4, 4]));
        let f2 = fmap(Tensor::zeros(&[3, 4, 5]));
        assert!(matches!(
            correlation_pyramid(&f1, &f2, 1),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn lookup_center_tap_on_identity_volume() {
        let (h, w) = (3, 3);
        let d = h * w;
        let mut f = Tensor::zeros(&[d, h, w]);
        for y in 0..h {
            for x in 0..w {
                f.set3(y * w + x, y, x, 1.0);
            }
        }
        let pyr = correlation_pyramid(&fmap(f.clone()), &fmap(f), 1).unwrap();
        let r = 1;
        let feats = pyr.lookup(&Tensor::zeros(&[2, h, w]), r).unwrap();
        let side = 2 * r + 1;
        let center = (side * side) / 2;
        let peak = 1.0 / (d as f64).sqrt();
        for y in 0..h {
            for x in 0..w {
                for tap in 0..side * side {
                    let got = feats.at3(tap, y, x);
                    if tap == center {
                        assert!((got - peak).abs() < 1e-12, "center tap at ({y}, {x})");
                    } else {
                        // off-center taps only see zeros or other pixels'
                        // one-hot rows, all zero for this source
                        assert_eq!(got, 0.0, "tap {tap} at ({y}, {x})");
                    }
                }
            }
        }
    }

    #[test]
    fn lookup_center_tap_peaks_at_planted_match() {
        // feature of source (1, 1) matches target (1, 3): flow (2, 0)
        let (d, h, w) = (4, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f1 = Tensor::randn(&[d, h, w], 0.1, &mut rng);
        let mut f2 = Tensor::randn(&[d, h, w], 0.1, &mut rng);
        for k in 0..d {
            f1.set3(k, 1, 1, if k == 2 { 5.0 } else { 0.0 });
            f2.set3(k, 1, 3, if k == 2 { 5.0 } else { 0.0 });
        }
        let pyr = correlation_pyramid(&fmap(f1), &fmap(f2), 1).unwrap();
        let mut flow = Tensor::zeros(&[2, h, w]);
        flow.set3(0, 1, 1, 2.0);
        let r = 2;
        let feats = pyr.lookup(&flow, r).unwrap();
        let side = 2 * r + 1;
        let center = (side * side) / 2;
        let center_val = feats.at3(center, 1, 1);
        for tap in 0..side * side {
            assert!(feats.at3(tap, 1, 1) <= center_val + 1e-12, "tap {tap}");
        }
    }

    #[test]
    fn lookup_outside_frame_reads_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (3, 3);
        let f = Tensor::randn(&[2, h, w], 1.0, &mut rng);
        let pyr = correlation_pyramid(&fmap(f.clone()), &fmap(f), 2).unwrap();
        // flow pointing far outside the frame at every pixel
        let flow = {
            let mut t = Tensor::zeros(&[2, h, w]);
            for v in t.data_mut() {
                *v = 100.0;
            }
            t
        };
        let feats = pyr.lookup(&flow, 1).unwrap();
        assert!(feats.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lookup_rejects_non_finite_flow() {
        let f = Tensor::zeros(&[2, 2, 2]);
        let pyr = correlation_pyramid(&fmap(f.clone()), &fmap(f), 1).unwrap();
        let mut flow = Tensor::zeros(&[2, 2, 2]);
        flow.set3(0, 0, 0, f64::NAN);
        assert!(matches!(
            pyr.lookup(&flow, 1),
            Err(crate::error::Error::Numeric(_))
        ));
    }

    #[test]
    fn pooling_chain_matches_repeated_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f1 = fmap(Tensor::randn(&[3, 8, 8], 1.0, &mut rng));
        let f2 = fmap(Tensor::randn(&[3, 8, 8], 1.0, &mut rng));
        let pyr = correlation_pyramid(&f1, &f2, 4).unwrap();
        for l in 1..4 {
            let re = kernels::avg_pool2_fwd(&pyr.levels[l - 1]);
            let diff = re
                .data()
                .iter()
                .zip(pyr.levels[l].data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6);
        }
    }
}
