//! Feature/context encoders, correlation pyramid, and GRU-based iterative
//! flow refinement producing per-iteration dense flow predictions.

pub mod checkpoint;
pub mod corr;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Param, Tape, VarId};
use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::flow::{FlowField, Resolution};
use crate::tensor::Tensor;

pub use corr::{correlation_pyramid, CorrelationPyramid, FeatureMap};

use layers::{Conv2d, Encoder, SepConvGRU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    Bilinear,
    LearnedConvex,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Correlation feature dimension D.
    pub feature_dim: usize,
    /// GRU hidden state channels.
    pub hidden_dim: usize,
    /// Static context channels.
    pub context_dim: usize,
    /// First encoder stage width; later stages scale 1.5x and 2x.
    pub encoder_base: usize,
    /// Correlation pyramid depth L.
    pub pyramid_levels: usize,
    /// Lookup window radius r.
    pub lookup_radius: usize,
    /// Default refinement iterations per timestep.
    pub iterations: usize,
    /// Temporal bins B of the voxel grid input.
    pub voxel_bins: usize,
    /// Two-channel (per-polarity) voxel variant.
    pub split_polarity: bool,
    pub upsample: UpsampleMode,
    /// Apply warm starting at full resolution instead of on the 1/8 state.
    pub warmstart_full_res: bool,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn default_config() -> Self {
        ModelConfig {
            feature_dim: 128,
            hidden_dim: 96,
            context_dim: 64,
            encoder_base: 64,
            pyramid_levels: 4,
            lookup_radius: 4,
            iterations: 12,
            voxel_bins: 15,
            split_polarity: false,
            upsample: UpsampleMode::LearnedConvex,
            warmstart_full_res: false,
        }
    }

    /// Desk-scale preset for CPU experiments and the test suite.
    pub fn desk() -> Self {
        ModelConfig {
            feature_dim: 32,
            hidden_dim: 32,
            context_dim: 24,
            encoder_base: 12,
            pyramid_levels: 3,
            lookup_radius: 3,
            iterations: 4,
            voxel_bins: 5,
            split_polarity: false,
            upsample: UpsampleMode::Bilinear,
            warmstart_full_res: false,
        }
    }

    /// Minimal configuration for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 8,
            hidden_dim: 8,
            context_dim: 6,
            encoder_base: 4,
            pyramid_levels: 2,
            lookup_radius: 2,
            iterations: 2,
            voxel_bins: 2,
            split_polarity: false,
            upsample: UpsampleMode::Bilinear,
            warmstart_full_res: false,
        }
    }

    /// Input channel count of the encoders.
    pub fn grid_channels(&self) -> usize {
        if self.split_polarity {
            2 * self.voxel_bins
        } else {
            self.voxel_bins
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("context_dim", self.context_dim),
            ("pyramid_levels", self.pyramid_levels),
            ("lookup_radius", self.lookup_radius),
            ("iterations", self.iterations),
            ("voxel_bins", self.voxel_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.hidden_dim < 4 {
            return Err(Error::config("hidden_dim must be >= 4"));
        }
        if self.encoder_base < 2 {
            return Err(Error::config("encoder_base must be >= 2"));
        }
        Ok(())
    }
}

/// Outputs of one recurrent refinement pass recorded on a tape.
pub struct ForwardOutput {
    /// One full-resolution `[2, H, W]` prediction per iteration.
    pub preds_full: Vec<VarId>,
    /// The running 1/8-resolution flow after each iteration (padded dims).
    pub flows_small: Vec<VarId>,
    /// Final 1/8-resolution flow, the warm-start source for the next step.
    pub final_small: VarId,
    /// (bottom, right) replicate padding applied to reach a multiple of 8.
    pub padding: (usize, usize),
}

/// Recurrent correlation-volume flow network.
#[derive(Debug, Clone)]
pub struct FlowNet {
    pub cfg: ModelConfig,
    fnet: Encoder,
    cnet: Encoder,
    convc1: Conv2d,
    convc2: Conv2d,
    convf1: Conv2d,
    convf2: Conv2d,
    conv_comb: Conv2d,
    gru: SepConvGRU,
    head1: Conv2d,
    head2: Conv2d,
    mask: Option<(Conv2d, Conv2d)>,
}

impl FlowNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let in_ch = cfg.grid_channels();
        let h = cfg.hidden_dim;
        let corr_ch = cfg.pyramid_levels * (2 * cfg.lookup_radius + 1).pow(2);
        let fnet = Encoder::new("fnet", in_ch, cfg.encoder_base, cfg.feature_dim, rng);
        let cnet = Encoder::new(
            "cnet",
            in_ch,
            cfg.encoder_base,
            cfg.hidden_dim + cfg.context_dim,
            rng,
        );
        let convc1 = Conv2d::new("motion.convc1", corr_ch, 2 * h, (1, 1), (1, 1), (0, 0), rng);
        let convc2 = Conv2d::new("motion.convc2", 2 * h, 3 * h / 2, (3, 3), (1, 1), (1, 1), rng);
        let convf1 = Conv2d::new("motion.convf1", 2, h, (7, 7), (1, 1), (3, 3), rng);
        let convf2 = Conv2d::new("motion.convf2", h, h / 2, (3, 3), (1, 1), (1, 1), rng);
        let conv_comb = Conv2d::new(
            "motion.comb",
            3 * h / 2 + h / 2,
            h - 2,
            (3, 3),
            (1, 1),
            (1, 1),
            rng,
        );
        let gru = SepConvGRU::new("gru", h, cfg.context_dim + h, rng);
        let head1 = Conv2d::new("head.c1", h, 2 * h, (3, 3), (1, 1), (1, 1), rng);
        let head2 = Conv2d::new("head.c2", 2 * h, 2, (3, 3), (1, 1), (1, 1), rng);
        let mask = match cfg.upsample {
            UpsampleMode::Bilinear => None,
            UpsampleMode::LearnedConvex => Some((
                Conv2d::new("mask.c1", h, 2 * h, (3, 3), (1, 1), (1, 1), rng),
                Conv2d::new(
                    "mask.c2",
                    2 * h,
                    kernels::CONVEX_MASK_CHANNELS,
                    (1, 1),
                    (1, 1),
                    (0, 0),
                    rng,
                ),
            )),
        };
        Ok(FlowNet {
            cfg,
            fnet,
            cnet,
            convc1,
            convc2,
            convf1,
            convf2,
            conv_comb,
            gru,
            head1,
            head2,
            mask,
        })
    }

    /// The shared feature encoder; both subsequences pass through this same
    /// instance, so the weights are identical by construction.
    pub fn feature_encoder(&self) -> &Encoder {
        &self.fnet
    }

    pub fn context_encoder(&self) -> &Encoder {
        &self.cnet
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.fnet.params();
        v.extend(self.cnet.params());
        for c in [
            &self.convc1,
            &self.convc2,
            &self.convf1,
            &self.convf2,
            &self.conv_comb,
            &self.head1,
            &self.head2,
        ] {
            v.extend(c.params());
        }
        if let Some((m1, m2)) = &self.mask {
            v.extend(m1.params());
            v.extend(m2.params());
        }
        v.extend(self.gru.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fnet.params_mut();
        v.extend(self.cnet.params_mut());
        for c in [
            &mut self.convc1,
            &mut self.convc2,
            &mut self.convf1,
            &mut self.convf2,
            &mut self.conv_comb,
            &mut self.head1,
            &mut self.head2,
        ] {
            v.extend(c.params_mut());
        }
        if let Some((m1, m2)) = &mut self.mask {
            v.extend(m1.params_mut());
            v.extend(m2.params_mut());
        }
        v.extend(self.gru.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    fn check_grid(&self, grid: &VoxelGrid) -> Result<()> {
        let want = self.cfg.grid_channels();
        if grid.channels() != want {
            return Err(Error::config(format!(
                "voxel grid has {} channels but the model expects {want} \
                 (bins {}, split_polarity {})",
                grid.channels(),
                self.cfg.voxel_bins,
                self.cfg.split_polarity
            )));
        }
        Ok(())
    }

    /// Encodes a voxel grid with the shared correlation-feature encoder.
    pub fn encode_features(&self, grid: &VoxelGrid) -> Result<FeatureMap> {
        self.check_grid(grid)?;
        let mut t = Tape::new();
        let g = t.constant(grid.data.clone());
        let g = pad_to_multiple8(&mut t, g).0;
        let f = self.fnet.forward(&mut t, g);
        Ok(FeatureMap {
            data: t.value(f).clone(),
            stride: 8,
        })
    }

    /// Encodes the second subsequence into static context features and the
    /// initial GRU hidden state (tanh-bounded).
    pub fn encode_context(&self, grid: &VoxelGrid) -> Result<(FeatureMap, Tensor)> {
        self.check_grid(grid)?;
        let mut t = Tape::new();
        let g = t.constant(grid.data.clone());
        let g = pad_to_multiple8(&mut t, g).0;
        let (ctx, hidden) = self.context_on_tape(&mut t, g);
        Ok((
            FeatureMap {
                data: t.value(ctx).clone(),
                stride: 8,
            },
            t.value(hidden).clone(),
        ))
    }

    fn context_on_tape(&self, t: &mut Tape, grid_padded: VarId) -> (VarId, VarId) {
        let out = self.cnet.forward(t, grid_padded);
        let hid = t.narrow_c(out, 0, self.cfg.hidden_dim);
        let hid = t.tanh(hid);
        let ctx = t.narrow_c(out, self.cfg.hidden_dim, self.cfg.context_dim);
        let ctx = t.relu(ctx);
        (ctx, hid)
    }

    /// Feature encoding on an existing tape (for reuse across timesteps).
    pub fn encode_features_on_tape(&self, t: &mut Tape, grid_padded: VarId) -> VarId {
        self.fnet.forward(t, grid_padded)
    }

    /// Records one full refinement pass on the tape. `init_small` must be a
    /// `[2, ceil(H/8), ceil(W/8)]` variable when given; zero cold start
    /// otherwise.
    pub fn forward_on_tape(
        &self,
        t: &mut Tape,
        grid1: VarId,
        grid2: VarId,
        init_small: Option<VarId>,
        iters: usize,
    ) -> Result<ForwardOutput> {
        let (g1p, pad) = pad_to_multiple8(t, grid1);
        let f1 = self.encode_features_on_tape(t, g1p);
        let (g2p, _) = pad_to_multiple8(t, grid2);
        let f2 = self.encode_features_on_tape(t, g2p);
        self.forward_from_features(t, f1, f2, g2p, init_small, iters, pad)
    }

    /// Refinement pass from precomputed feature encodings. `g2_padded` feeds
    /// the context encoder (the second subsequence carries the contextual
    /// information for the prediction interval).
    pub fn forward_from_features(
        &self,
        t: &mut Tape,
        f1: VarId,
        f2: VarId,
        g2_padded: VarId,
        init_small: Option<VarId>,
        iters: usize,
        padding: (usize, usize),
    ) -> Result<ForwardOutput> {
        if iters == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if t.value(f1).shape() != t.value(f2).shape() {
            return Err(Error::shape(format!(
                "feature maps differ: {:?} vs {:?}",
                t.value(f1).shape(),
                t.value(f2).shape()
            )));
        }
        let (_, hp, wp) = t.value(g2_padded).dims3();
        let (orig_h, orig_w) = (hp - padding.0, wp - padding.1);
        let (h8, w8) = (hp / 8, wp / 8);

        // correlation pyramid
        let mut vols = vec![t.corr_volume(f1, f2)];
        for _ in 1..self.cfg.pyramid_levels {
            let prev = *vols.last().unwrap();
            vols.push(t.avg_pool2(prev));
        }

        let (ctx, mut hidden) = self.context_on_tape(t, g2_padded);

        let mut flow = match init_small {
            Some(v) => {
                let (two, ih, iw) = t.value(v).dims3();
                if two != 2 || ih != h8 || iw != w8 {
                    return Err(Error::shape(format!(
                        "init flow is {:?}, expected [2, {h8}, {w8}]",
                        t.value(v).shape()
                    )));
                }
                v
            }
            None => t.constant(Tensor::zeros(&[2, h8, w8])),
        };
        let base = t.constant(corr::base_grid(h8, w8));

        let mut preds_full = Vec::with_capacity(iters);
        let mut flows_small = Vec::with_capacity(iters);
        for _ in 0..iters {
            let coords = t.add(flow, base);
            let mut corr_feats = Vec::with_capacity(self.cfg.pyramid_levels);
            for (l, vol) in vols.iter().enumerate() {
                corr_feats.push(t.corr_lookup(*vol, coords, l, self.cfg.lookup_radius));
            }
            let corr_cat = t.concat_c(&corr_feats);

            // motion features
            let c = self.convc1.forward(t, corr_cat);
            let c = t.relu(c);
            let c = self.convc2.forward(t, c);
            let c = t.relu(c);
            let f = self.convf1.forward(t, flow);
            let f = t.relu(f);
            let f = self.convf2.forward(t, f);
            let f = t.relu(f);
            let cf = t.concat_c(&[c, f]);
            let m = self.conv_comb.forward(t, cf);
            let m = t.relu(m);
            let motion = t.concat_c(&[m, flow]);

            let x = t.concat_c(&[ctx, motion]);
            hidden = self.gru.forward(t, hidden, x);
            let d = self.head1.forward(t, hidden);
            let d = t.relu(d);
            let delta = self.head2.forward(t, d);
            flow = t.add(flow, delta);
            flows_small.push(flow);

            let up = match self.cfg.upsample {
                UpsampleMode::Bilinear => t.upsample_bilinear(flow, 8),
                UpsampleMode::LearnedConvex => {
                    let (m1, m2) = self.mask.as_ref().expect("mask head present");
                    let ml = m1.forward(t, hidden);
                    let ml = t.relu(ml);
                    let logits = m2.forward(t, ml);
                    t.convex_upsample(flow, logits)
                }
            };
            let up = t.scale(up, 8.0);
            let up = if padding == (0, 0) {
                up
            } else {
                t.crop(up, 0, 0, orig_h, orig_w)
            };
            preds_full.push(up);
        }

        Ok(ForwardOutput {
            final_small: *flows_small.last().unwrap(),
            preds_full,
            flows_small,
            padding,
        })
    }

    /// Converts an externally supplied initial flow into the internal 1/8
    /// state on the tape.
    pub fn init_to_small(&self, t: &mut Tape, init: &FlowField, requires_grad: bool) -> VarId {
        match init.resolution {
            Resolution::Eighth => t.leaf(init.tensor().clone(), requires_grad),
            Resolution::Full => {
                let full = t.leaf(init.tensor().clone(), requires_grad);
                let (padded, _) = pad_to_multiple8(t, full);
                let small = t.downsample_mean(padded, 8);
                t.scale(small, 1.0 / 8.0)
            }
        }
    }

    /// Runs the refinement and returns one full-resolution prediction per
    /// iteration plus the final internal flow for warm-start chaining.
    pub fn estimate_flow_detailed(
        &self,
        grid1: &VoxelGrid,
        grid2: &VoxelGrid,
        init: Option<&FlowField>,
        iters: usize,
    ) -> Result<EstimateOutput> {
        self.check_grid(grid1)?;
        self.check_grid(grid2)?;
        if grid1.sensor() != grid2.sensor() {
            return Err(Error::shape(format!(
                "grids differ in size: {:?} vs {:?}",
                grid1.sensor(),
                grid2.sensor()
            )));
        }
        let mut t = Tape::new();
        let g1 = t.constant(grid1.data.clone());
        let g2 = t.constant(grid2.data.clone());
        let init_small = match init {
            Some(f) => Some(self.init_to_small(&mut t, f, false)),
            None => None,
        };
        let out = self.forward_on_tape(&mut t, g1, g2, init_small, iters)?;
        let mut predictions = Vec::with_capacity(iters);
        for p in &out.preds_full {
            let tensor = t.value(*p).clone();
            if let Some((idx, v)) = tensor.first_non_finite() {
                return Err(Error::numeric(format!(
                    "non-finite prediction value {v} at flat index {idx}"
                )));
            }
            predictions.push(FlowField::dense(tensor, Resolution::Full)?);
        }
        let final_small = FlowField::dense(t.value(out.final_small).clone(), Resolution::Eighth)?;
        Ok(EstimateOutput {
            predictions,
            final_small,
        })
    }

    /// The per-iteration predictions alone (final entry is the estimate).
    pub fn estimate_flow(
        &self,
        grid1: &VoxelGrid,
        grid2: &VoxelGrid,
        init: Option<&FlowField>,
        iters: usize,
    ) -> Result<Vec<FlowField>> {
        Ok(self
            .estimate_flow_detailed(grid1, grid2, init, iters)?
            .predictions)
    }
}

/// Value-level result of [`FlowNet::estimate_flow_detailed`].
pub struct EstimateOutput {
    pub predictions: Vec<FlowField>,
    pub final_small: FlowField,
}

/// Replicate-pads a `[C, H, W]` variable at the bottom/right to the next
/// multiple of 8. Returns the padded variable and the applied padding.
pub fn pad_to_multiple8(t: &mut Tape, x: VarId) -> (VarId, (usize, usize)) {
    let (_, h, w) = t.value(x).dims3();
    let pb = (8 - h % 8) % 8;
    let pr = (8 - w % 8) % 8;
    if pb == 0 && pr == 0 {
        (x, (0, 0))
    } else {
        (t.pad_replicate(x, (0, pb, 0, pr)), (pb, pr))
    }
}
