//! Convolutional building blocks of the flow network.
//!
//! Downsampling uses even (4x4, stride 2) kernels and all other convolutions
//! are odd kernels at stride 1 with symmetric padding, so every layer
//! commutes exactly with horizontal reflection on even-sized inputs.

use rand::Rng;

use crate::autodiff::{Param, Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        ci: usize,
        co: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        // He initialization
        let std = (2.0 / (ci * kernel.0 * kernel.1) as f64).sqrt();
        Conv2d {
            w: Param::new(
                format!("{name}.w"),
                Tensor::randn(&[co, ci, kernel.0, kernel.1], std, rng),
            ),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[co])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: VarId) -> VarId {
        let w = t.param(&self.w);
        let b = t.param(&self.b);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn in_channels(&self) -> usize {
        self.w.value.dims4().1
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.dims4().0
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Two 3x3 convolutions with a skip connection: `relu(x + c2(relu(c1(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ResBlock {
    pub fn new(name: &str, ch: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            c1: Conv2d::new(&format!("{name}.c1"), ch, ch, (3, 3), (1, 1), (1, 1), rng),
            c2: Conv2d::new(&format!("{name}.c2"), ch, ch, (3, 3), (1, 1), (1, 1), rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: VarId) -> VarId {
        let a = self.c1.forward(t, x);
        let a = t.relu(a);
        let a = self.c2.forward(t, a);
        let s = t.add(x, a);
        t.relu(s)
    }

    pub fn params(&self) -> Vec<&Param> {
        [self.c1.params(), self.c2.params()].concat()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.c1.params_mut();
        v.extend(self.c2.params_mut());
        v
    }
}

/// Stride-8 residual encoder: stem, three (downsample, residual) stages, and
/// a 1x1 projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub res: Vec<ResBlock>,
    pub proj: Conv2d,
}

impl Encoder {
    pub fn new(name: &str, in_ch: usize, base: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let widths = [base, base * 3 / 2, base * 2];
        let stem = Conv2d::new(&format!("{name}.stem"), in_ch, base, (3, 3), (1, 1), (1, 1), rng);
        let mut down = Vec::new();
        let mut res = Vec::new();
        let mut prev = base;
        for (i, &wd) in widths.iter().enumerate() {
            down.push(Conv2d::new(
                &format!("{name}.down{i}"),
                prev,
                wd,
                (4, 4),
                (2, 2),
                (1, 1),
                rng,
            ));
            res.push(ResBlock::new(&format!("{name}.res{i}"), wd, rng));
            prev = wd;
        }
        let proj = Conv2d::new(&format!("{name}.proj"), prev, out_ch, (1, 1), (1, 1), (0, 0), rng);
        Encoder {
            stem,
            down,
            res,
            proj,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: VarId) -> VarId {
        let mut a = self.stem.forward(t, x);
        a = t.relu(a);
        for (down, res) in self.down.iter().zip(&self.res) {
            a = down.forward(t, a);
            a = t.relu(a);
            a = res.forward(t, a);
        }
        self.proj.forward(t, a)
    }

    /// Receptive-field radius in input pixels, from the layer stack.
    pub fn receptive_field_radius(&self) -> usize {
        let mut layers = vec![(3usize, 1usize)]; // stem
        for _ in &self.res {
            layers.extend([(4, 2), (3, 1), (3, 1)]); // downsample + res block
        }
        let mut r = 0.0f64;
        let mut jump = 1.0f64;
        for (k, s) in layers {
            r += (k - 1) as f64 / 2.0 * jump;
            jump *= s as f64;
        }
        r.ceil() as usize
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        for (d, r) in self.down.iter().zip(&self.res) {
            v.extend(d.params());
            v.extend(r.params());
        }
        v.extend(self.proj.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        for (d, r) in self.down.iter_mut().zip(self.res.iter_mut()) {
            v.extend(d.params_mut());
            v.extend(r.params_mut());
        }
        v.extend(self.proj.params_mut());
        v
    }
}

/// Separable ConvGRU: a horizontal (1x5) gate pass followed by a vertical
/// (5x1) pass, each with its own update/reset/candidate convolutions.
#[derive(Debug, Clone)]
pub struct SepConvGRU {
    pub hz: Conv2d,
    pub hr: Conv2d,
    pub hq: Conv2d,
    pub vz: Conv2d,
    pub vr: Conv2d,
    pub vq: Conv2d,
}

impl SepConvGRU {
    pub fn new(name: &str, hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let cin = hidden + input;
        let mut mk = |n: &str, k: (usize, usize), p: (usize, usize)| {
            Conv2d::new(&format!("{name}.{n}"), cin, hidden, k, (1, 1), p, rng)
        };
        let hz = mk("hz", (1, 5), (0, 2));
        let hr = mk("hr", (1, 5), (0, 2));
        let hq = mk("hq", (1, 5), (0, 2));
        let vz = mk("vz", (5, 1), (2, 0));
        let vr = mk("vr", (5, 1), (2, 0));
        let vq = mk("vq", (5, 1), (2, 0));
        SepConvGRU {
            hz,
            hr,
            hq,
            vz,
            vr,
            vq,
        }
    }

    fn pass(
        t: &mut Tape,
        h: VarId,
        x: VarId,
        cz: &Conv2d,
        cr: &Conv2d,
        cq: &Conv2d,
    ) -> VarId {
        let hx = t.concat_c(&[h, x]);
        let z = cz.forward(t, hx);
        let z = t.sigmoid(z);
        let r = cr.forward(t, hx);
        let r = t.sigmoid(r);
        let rh = t.mul(r, h);
        let rhx = t.concat_c(&[rh, x]);
        let q = cq.forward(t, rhx);
        let q = t.tanh(q);
        // h' = (1 - z) * h + z * q
        let one = t.constant(Tensor::full(t.value(z).shape(), 1.0));
        let omz = t.sub(one, z);
        let a = t.mul(omz, h);
        let b = t.mul(z, q);
        t.add(a, b)
    }

    pub fn forward(&self, t: &mut Tape, h: VarId, x: VarId) -> VarId {
        let h = Self::pass(t, h, x, &self.hz, &self.hr, &self.hq);
        Self::pass(t, h, x, &self.vz, &self.vr, &self.vq)
    }

    pub fn params(&self) -> Vec<&Param> {
        [&self.hz, &self.hr, &self.hq, &self.vz, &self.vr, &self.vq]
            .iter()
            .flat_map(|c| c.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.hz.params_mut();
        v.extend(self.hr.params_mut());
        v.extend(self.hq.params_mut());
        v.extend(self.vz.params_mut());
        v.extend(self.vr.params_mut());
        v.extend(self.vq.params_mut());
        v
    }
}
