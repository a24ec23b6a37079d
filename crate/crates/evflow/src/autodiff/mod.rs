//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The network forward pass records every operation on a [`Tape`]; calling
//! [`Tape::backward`] replays it in reverse and accumulates vector-Jacobian
//! products. Inference uses the same code path with gradients disabled.

pub mod kernels;

use std::collections::HashMap;

use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

type BackFn = Box<dyn Fn(&Tape, &Tensor, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    backward: Option<BackFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound_params: HashMap<String, VarId>,
    param_order: Vec<(String, VarId)>,
}

/// Per-node gradients produced by a backward sweep. Only leaves retain their
/// gradient after the sweep; interior gradients are consumed as they flow.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, backward: Option<BackFn>) -> VarId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs { backward } else { None },
            needs_grad: needs,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a gradient-tracked leaf. Binding the same
    /// name again returns the existing node, so shared weights accumulate
    /// gradients from all their use sites.
    pub fn param(&mut self, p: &Param) -> VarId {
        if let Some(&id) = self.bound_params.get(&p.name) {
            return id;
        }
        let id = self.leaf(p.value.clone(), true);
        self.bound_params.insert(p.name.clone(), id);
        self.param_order.push((p.name.clone(), id));
        id
    }

    /// Gradients of all bound parameters, in binding order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.param_order
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: VarId) -> Gradients {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(back) = &node.backward else {
                continue; // leaf: keep its gradient
            };
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let parent_grads = back(self, &node.value, &gout);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                match &mut grads[pid.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, _, g| vec![g.clone(), g.map(|v| -v)])),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |t, _, g| {
                vec![
                    zip_map(g, t.value(b), |gv, y| gv * y),
                    zip_map(g, t.value(a), |gv, x| gv * x),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let out = self.value(a).map(|v| v * s);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| vec![g.map(|v| v * s)])),
        )
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        // explicit NaN propagation: f64::max would silently drop it
        let out = self.value(a).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |t, _, g| {
                vec![zip_map(g, t.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 })]
            })),
        )
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(f64::tanh);
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, y, g| {
                vec![zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            out,
            vec![a],
            Some(Box::new(|_, y, g| {
                vec![zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))]
            })),
        )
    }

    /// |x| with the subgradient sign(0) = 0.
    pub fn abs(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(f64::abs);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |t, _, g| {
                vec![zip_map(g, t.value(a), |gv, x| gv * sign(x))]
            })),
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let out = Tensor::scalar(self.value(a).sum());
        let shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| vec![Tensor::full(&shape, g.item())])),
        )
    }

    // -- structural -------------------------------------------------------

    pub fn concat_c(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.value(parts[0]).dims3();
        let mut chans = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (c, hh, ww) = t.dims3();
            assert!(hh == h && ww == w, "concat_c: spatial mismatch");
            chans.push(c);
            data.extend_from_slice(t.data());
        }
        let total: usize = chans.iter().sum();
        let out = Tensor::new(vec![total, h, w], data);
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |_, _, g| {
                let mut res = Vec::with_capacity(chans.len());
                let mut off = 0;
                for &c in &chans {
                    let n = c * h * w;
                    res.push(Tensor::new(
                        vec![c, h, w],
                        g.data()[off..off + n].to_vec(),
                    ));
                    off += n;
                }
                res
            })),
        )
    }

    pub fn narrow_c(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let (c, h, w) = self.value(a).dims3();
        assert!(start + len <= c);
        let plane = h * w;
        let out = Tensor::new(
            vec![len, h, w],
            self.value(a).data()[start * plane..(start + len) * plane].to_vec(),
        );
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                let mut gx = vec![0.0; c * plane];
                gx[start * plane..(start + len) * plane].copy_from_slice(g.data());
                vec![Tensor::new(vec![c, h, w], gx)]
            })),
        )
    }

    // -- spatial ops ------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> VarId {
        let out = kernels::conv2d_fwd(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.push(
            out,
            parents,
            Some(Box::new(move |t, _, g| {
                let (gx, gw, gb) =
                    kernels::conv2d_bwd(t.value(x), t.value(w), g, stride, pad, b.is_some());
                let mut res = vec![gx, gw];
                if let Some(gb) = gb {
                    res.push(gb);
                }
                res
            })),
        )
    }

    pub fn avg_pool2(&mut self, a: VarId) -> VarId {
        let out = kernels::avg_pool2_fwd(self.value(a));
        let shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![kernels::avg_pool2_bwd(&shape, g)]
            })),
        )
    }

    pub fn upsample_bilinear(&mut self, a: VarId, f: usize) -> VarId {
        let out = kernels::upsample_bilinear_fwd(self.value(a), f);
        let shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![kernels::upsample_bilinear_bwd(&shape, g, f)]
            })),
        )
    }

    pub fn downsample_mean(&mut self, a: VarId, f: usize) -> VarId {
        let out = kernels::downsample_mean_fwd(self.value(a), f);
        let shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![kernels::downsample_mean_bwd(&shape, g, f)]
            })),
        )
    }

    pub fn pad_replicate(&mut self, a: VarId, pad: (usize, usize, usize, usize)) -> VarId {
        let out = kernels::pad_replicate_fwd(self.value(a), pad);
        let shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![kernels::pad_replicate_bwd(&shape, g, pad)]
            })),
        )
    }

    pub fn crop(&mut self, a: VarId, y0: usize, x0: usize, h: usize, w: usize) -> VarId {
        let out = kernels::crop_fwd(self.value(a), y0, x0, h, w);
        let shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, _, g| {
                vec![kernels::crop_bwd(&shape, g, y0, x0)]
            })),
        )
    }

    pub fn corr_volume(&mut self, f1: VarId, f2: VarId) -> VarId {
        let out = kernels::corr_volume_fwd(self.value(f1), self.value(f2));
        self.push(
            out,
            vec![f1, f2],
            Some(Box::new(move |t, _, g| {
                let (g1, g2) = kernels::corr_volume_bwd(t.value(f1), t.value(f2), g);
                vec![g1, g2]
            })),
        )
    }

    pub fn corr_lookup(&mut self, vol: VarId, coords: VarId, level: usize, r: usize) -> VarId {
        let out = kernels::corr_lookup_fwd(self.value(vol), self.value(coords), level, r);
        self.push(
            out,
            vec![vol, coords],
            Some(Box::new(move |t, _, g| {
                let (gv, gc) =
                    kernels::corr_lookup_bwd(t.value(vol), t.value(coords), g, level, r);
                vec![gv, gc]
            })),
        )
    }

    /// Average-splat a flow field onto its own displaced positions. Returns
    /// the warped flow and the per-target validity mask (weight > eps).
    pub fn splat_flow(
        &mut self,
        flow: VarId,
        eps: f64,
        detach_coords: bool,
    ) -> (VarId, Vec<bool>) {
        let res = kernels::splat_flow_fwd(self.value(flow), None, eps);
        let valid = res.valid.clone();
        let id = self.push(
            res.out.clone(),
            vec![flow],
            Some(Box::new(move |t, out, g| {
                let saved = kernels::SplatResult {
                    out: out.clone(),
                    den: res.den.clone(),
                    valid: vec![],
                };
                vec![kernels::splat_flow_bwd(
                    t.value(flow),
                    &saved,
                    g,
                    eps,
                    detach_coords,
                )]
            })),
        );
        (id, valid)
    }

    pub fn convex_upsample(&mut self, values: VarId, logits: VarId) -> VarId {
        let out = kernels::convex_upsample_fwd(self.value(values), self.value(logits));
        self.push(
            out,
            vec![values, logits],
            Some(Box::new(move |t, _, g| {
                let (gv, gl) = kernels::convex_upsample_bwd(t.value(values), t.value(logits), g);
                vec![gv, gl]
            })),
        )
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise op shape mismatch");
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}
