//! Sample augmentation: horizontal flipping and random cropping, applied
//! consistently to every grid and ground-truth field of a sample.

use rand::Rng;

use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::tensor::Tensor;
use crate::training::TrainSample;

/// Mirrors a voxel grid about the vertical axis.
pub fn hflip_grid(grid: &VoxelGrid) -> VoxelGrid {
    let (c_n, h, w) = grid.data.dims3();
    let mut out = Tensor::zeros(&[c_n, h, w]);
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                out.set3(c, y, x, grid.data.at3(c, y, w - 1 - x));
            }
        }
    }
    VoxelGrid {
        data: out,
        bins: grid.bins,
        window: grid.window,
        split_polarity: grid.split_polarity,
    }
}

fn crop_grid(grid: &VoxelGrid, y0: usize, x0: usize, hh: usize, ww: usize) -> VoxelGrid {
    let (c_n, _, _) = grid.data.dims3();
    let mut out = Tensor::zeros(&[c_n, hh, ww]);
    for c in 0..c_n {
        for y in 0..hh {
            for x in 0..ww {
                out.set3(c, y, x, grid.data.at3(c, y0 + y, x0 + x));
            }
        }
    }
    VoxelGrid {
        data: out,
        bins: grid.bins,
        window: grid.window,
        split_polarity: grid.split_polarity,
    }
}

/// Horizontal flip of a whole sample: grids mirrored, GT u-channels negated.
pub fn hflip_sample(sample: &TrainSample) -> TrainSample {
    TrainSample {
        grids: sample.grids.iter().map(hflip_grid).collect(),
        gts: sample.gts.iter().map(|g| g.hflip()).collect(),
        t_refs: sample.t_refs.clone(),
    }
}

/// Crops the same window out of every grid and GT field.
pub fn crop_sample(
    sample: &TrainSample,
    y0: usize,
    x0: usize,
    hh: usize,
    ww: usize,
) -> Result<TrainSample> {
    let (h, w) = sample.sensor();
    if y0 + hh > h || x0 + ww > w {
        return Err(Error::config(format!(
            "crop {hh}x{ww}+{y0}+{x0} exceeds {h}x{w} sample"
        )));
    }
    Ok(TrainSample {
        grids: sample
            .grids
            .iter()
            .map(|g| crop_grid(g, y0, x0, hh, ww))
            .collect(),
        gts: sample
            .gts
            .iter()
            .map(|g| g.crop(y0, x0, hh, ww))
            .collect::<Result<_>>()?,
        t_refs: sample.t_refs.clone(),
    })
}

/// Random crop (when configured) followed by a horizontal-flip coin toss.
pub fn augment(
    sample: &TrainSample,
    crop: Option<(usize, usize)>,
    hflip_prob: f64,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    let (h, w) = sample.sensor();
    let mut out = match crop {
        Some((ch, cw)) => {
            if ch > h || cw > w {
                return Err(Error::config(format!(
                    "crop {ch}x{cw} larger than {h}x{w} frame"
                )));
            }
            let y0 = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
            let x0 = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
            crop_sample(sample, y0, x0, ch, cw)?
        }
        None => sample.clone(),
    };
    if hflip_prob > 0.0 && rng.gen_bool(hflip_prob) {
        out = hflip_sample(&out);
    }
    Ok(out)
}
