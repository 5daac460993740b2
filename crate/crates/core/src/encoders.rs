//! Per-domain feature encoders and projection heads. Time and frequency
//! branches take 2×N batches through 1-D conv stacks; the constellation
//! branch takes H×W grids through a 2-D conv stack. Every branch emits
//! 128-dim features.

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AvgPool1d, AvgPool2d, Conv1d, Conv2d, Dense, GlobalAvgMaxPool1d, GlobalAvgMaxPool2d, Param, ParamSet, Relu};

pub const FEATURE_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    Res1d,
    Cnn1dPlain,
    Cnn2d,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub width: usize,
    pub depth: usize,
    pub out_dim: usize,
}

impl EncoderSpec {
    pub fn res1d(width: usize, depth: usize) -> Self {
        Self { kind: EncoderKind::Res1d, width, depth, out_dim: FEATURE_DIM }
    }

    pub fn cnn1d_plain(width: usize, depth: usize) -> Self {
        Self { kind: EncoderKind::Cnn1dPlain, width, depth, out_dim: FEATURE_DIM }
    }

    pub fn cnn2d(width: usize, depth: usize) -> Self {
        Self { kind: EncoderKind::Cnn2d, width, depth, out_dim: FEATURE_DIM }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim != FEATURE_DIM {
            return Err(Error::InvalidParam(format!(
                "out_dim {} violates the fixed {FEATURE_DIM}-dim feature contract",
                self.out_dim
            )));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidParam("encoder width/depth must be ≥ 1".into()));
        }
        Ok(())
    }
}

enum Block1d {
    Res { c1: Conv1d, r1: Relu, c2: Conv1d, r2: Relu, skip: Option<Conv1d> },
    Plain { c: Conv1d, r: Relu },
}

/// Fixed second-order input expansion for complex baseband rows: envelope
/// power, lag-one correlation products, and the squared signal. These are
/// the classic quadratic modulation statistics; convolutions alone cannot
/// form input products, so they are supplied as extra stem channels.
pub fn quad_expand(x: &Array3<f32>) -> Array3<f32> {
    let (b, _, n) = x.dim();
    let mut out = Array3::<f32>::zeros((b, 7, n));
    for bi in 0..b {
        for m in 0..n {
            let i = x[[bi, 0, m]];
            let q = x[[bi, 1, m]];
            let (ip, qp) = if m > 0 { (x[[bi, 0, m - 1]], x[[bi, 1, m - 1]]) } else { (i, q) };
            out[[bi, 0, m]] = i;
            out[[bi, 1, m]] = q;
            out[[bi, 2, m]] = i * i + q * q;
            out[[bi, 3, m]] = i * ip + q * qp;
            out[[bi, 4, m]] = q * ip - i * qp;
            out[[bi, 5, m]] = i * i - q * q;
            out[[bi, 6, m]] = 2.0 * i * q;
        }
    }
    out
}

/// 1-D encoder over (B, 2, N) batches.
pub struct Net1d {
    pub spec: EncoderSpec,
    quad_stem: bool,
    stem: Conv1d,
    stem_relu: Relu,
    blocks: Vec<Block1d>,
    pools: Vec<AvgPool1d>,
    pooled: Vec<bool>,
    pool: GlobalAvgMaxPool1d,
    head: Dense,
}

impl Net1d {
    /// `quad_stem` feeds the stem the quadratic channel expansion instead
    /// of raw I/Q; used for the time branch, where second-order products
    /// carry the discriminative structure.
    pub fn new(spec: &EncoderSpec, quad_stem: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let w = spec.width;
        let stem = Conv1d::new(if quad_stem { 7 } else { 2 }, w, 7, 2, 3, rng);
        let mut blocks = Vec::with_capacity(spec.depth);
        let mut pools = Vec::with_capacity(spec.depth);
        // later stages run at 2× the base width
        let widths: Vec<(usize, usize)> = (0..spec.depth)
            .map(|i| (if i <= 1 { w } else { 2 * w }, if i == 0 { w } else { 2 * w }))
            .collect();
        for &(win, wout) in &widths {
            let block = match spec.kind {
                EncoderKind::Res1d => Block1d::Res {
                    c1: Conv1d::new(win, wout, 3, 1, 1, rng),
                    r1: Relu::new(),
                    c2: Conv1d::new(wout, wout, 3, 1, 1, rng),
                    r2: Relu::new(),
                    skip: (win != wout).then(|| Conv1d::new(win, wout, 1, 1, 0, rng)),
                },
                EncoderKind::Cnn1dPlain => {
                    Block1d::Plain { c: Conv1d::new(win, wout, 3, 1, 1, rng), r: Relu::new() }
                }
                EncoderKind::Cnn2d => {
                    return Err(Error::InvalidParam("cnn2d cannot encode 1-D batches".into()));
                }
            };
            blocks.push(block);
            pools.push(AvgPool1d::new());
        }
        let final_w = widths.last().map(|&(_, wo)| wo).unwrap_or(w);
        Ok(Self {
            spec: spec.clone(),
            quad_stem,
            stem,
            stem_relu: Relu::new(),
            blocks,
            pools,
            pooled: vec![false; spec.depth],
            pool: GlobalAvgMaxPool1d::new(),
            head: Dense::new(2 * final_w, spec.out_dim, rng),
        })
    }

    pub fn forward(&mut self, x: &Array3<f32>) -> Array2<f32> {
        let expanded;
        let x = if self.quad_stem {
            expanded = quad_expand(x);
            &expanded
        } else {
            x
        };
        let mut h = self.stem_relu.forward(&self.stem.forward(x));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = match block {
                Block1d::Res { c1, r1, c2, r2, skip } => {
                    let inner = c2.forward(&r1.forward(&c1.forward(&h)));
                    let shortcut = match skip {
                        Some(sk) => sk.forward(&h),
                        None => h,
                    };
                    r2.forward(&(&inner + &shortcut))
                }
                Block1d::Plain { c, r } => r.forward(&c.forward(&h)),
            };
            self.pooled[i] = h.dim().2 > 8;
            if self.pooled[i] {
                h = self.pools[i].forward(&h);
            }
        }
        let flat = self.pool.forward(&h);
        self.head.forward(&flat)
    }

    pub fn infer(&self, x: &Array3<f32>) -> Array2<f32> {
        let expanded;
        let x = if self.quad_stem {
            expanded = quad_expand(x);
            &expanded
        } else {
            x
        };
        let mut h = self.stem_relu.infer(&self.stem.infer(x));
        for (i, block) in self.blocks.iter().enumerate() {
            h = match block {
                Block1d::Res { c1, r1, c2, r2, skip } => {
                    let inner = c2.infer(&r1.infer(&c1.infer(&h)));
                    let shortcut = match skip {
                        Some(sk) => sk.infer(&h),
                        None => h,
                    };
                    r2.infer(&(&inner + &shortcut))
                }
                Block1d::Plain { c, r } => r.infer(&c.infer(&h)),
            };
            if h.dim().2 > 8 {
                h = self.pools[i].infer(&h);
            }
        }
        self.head.infer(&self.pool.infer(&h))
    }

    pub fn backward(&mut self, gy: &Array2<f32>) {
        let g = self.head.backward(gy);
        let mut g = self.pool.backward(&g);
        for i in (0..self.blocks.len()).rev() {
            if self.pooled[i] {
                g = self.pools[i].backward(&g);
            }
            g = match &mut self.blocks[i] {
                Block1d::Res { c1, r1, c2, r2, skip } => {
                    let g_sum = r2.backward(&g);
                    let g_inner = c1.backward(&r1.backward(&c2.backward(&g_sum)));
                    let g_short = match skip {
                        Some(sk) => sk.backward(&g_sum),
                        None => g_sum,
                    };
                    &g_inner + &g_short
                }
                Block1d::Plain { c, r } => c.backward(&r.backward(&g)),
            };
        }
        let _ = self.stem.backward(&self.stem_relu.backward(&g));
    }
}

impl ParamSet for Net1d {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("stem.w", &mut self.stem.w);
        f("stem.b", &mut self.stem.b);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            match block {
                Block1d::Res { c1, c2, skip, .. } => {
                    f(&format!("block{i}.c1.w"), &mut c1.w);
                    f(&format!("block{i}.c1.b"), &mut c1.b);
                    f(&format!("block{i}.c2.w"), &mut c2.w);
                    f(&format!("block{i}.c2.b"), &mut c2.b);
                    if let Some(sk) = skip {
                        f(&format!("block{i}.skip.w"), &mut sk.w);
                        f(&format!("block{i}.skip.b"), &mut sk.b);
                    }
                }
                Block1d::Plain { c, .. } => {
                    f(&format!("block{i}.c.w"), &mut c.w);
                    f(&format!("block{i}.c.b"), &mut c.b);
                }
            }
        }
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }
}

struct Block2d {
    c1: Conv2d,
    r1: Relu,
    c2: Conv2d,
    r2: Relu,
}

/// 2-D encoder over (B, 1, H, W) constellation batches. A learned linear
/// projection of the flattened grid runs beside the conv stack: density
/// grids are nearly linearly separable, and the shortcut lets that
/// structure through while the conv path learns local shape.
pub struct Net2d {
    pub spec: EncoderSpec,
    stem: Conv2d,
    stem_relu: Relu,
    blocks: Vec<Block2d>,
    pools: Vec<AvgPool2d>,
    pooled: Vec<bool>,
    pool: GlobalAvgMaxPool2d,
    lin_path: Dense,
    head: Dense,
    flat_cache: Option<Array2<f32>>,
}

impl Net2d {
    pub fn new(spec: &EncoderSpec, grid: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if spec.kind != EncoderKind::Cnn2d {
            return Err(Error::InvalidParam("constellation encoder must be cnn2d".into()));
        }
        let w = spec.width;
        let mut blocks = Vec::with_capacity(spec.depth);
        let mut pools = Vec::with_capacity(spec.depth);
        for _ in 0..spec.depth {
            blocks.push(Block2d {
                c1: Conv2d::new(w, w, 3, 1, 1, rng),
                r1: Relu::new(),
                c2: Conv2d::new(w, w, 3, 1, 1, rng),
                r2: Relu::new(),
            });
            pools.push(AvgPool2d::new());
        }
        Ok(Self {
            spec: spec.clone(),
            stem: Conv2d::new(1, w, 5, 2, 2, rng),
            stem_relu: Relu::new(),
            blocks,
            pools,
            pooled: vec![false; spec.depth],
            pool: GlobalAvgMaxPool2d::new(),
            lin_path: Dense::new(grid.0 * grid.1, 2 * w, rng),
            head: Dense::new(4 * w, spec.out_dim, rng),
            flat_cache: None,
        })
    }

    fn flatten(x: &Array4<f32>) -> Array2<f32> {
        let (b, _, h, w) = x.dim();
        let mut out = Array2::<f32>::zeros((b, h * w));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    out[[bi, i * w + j]] = x[[bi, 0, i, j]];
                }
            }
        }
        out
    }

    fn join(conv: &Array2<f32>, lin: &Array2<f32>) -> Array2<f32> {
        let (b, cw) = conv.dim();
        let lw = lin.dim().1;
        let mut out = Array2::<f32>::zeros((b, cw + lw));
        for bi in 0..b {
            for j in 0..cw {
                out[[bi, j]] = conv[[bi, j]];
            }
            for j in 0..lw {
                out[[bi, cw + j]] = lin[[bi, j]];
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array2<f32> {
        let flat = Self::flatten(x);
        let lin = self.lin_path.forward(&flat);
        self.flat_cache = Some(flat);
        let mut h = self.stem_relu.forward(&self.stem.forward(x));
        for i in 0..self.blocks.len() {
            let b = &mut self.blocks[i];
            let inner = b.c2.forward(&b.r1.forward(&b.c1.forward(&h)));
            h = b.r2.forward(&(&inner + &h));
            self.pooled[i] = h.dim().2 > 8;
            if self.pooled[i] {
                h = self.pools[i].forward(&h);
            }
        }
        let conv = self.pool.forward(&h);
        self.head.forward(&Self::join(&conv, &lin))
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array2<f32> {
        let lin = self.lin_path.infer(&Self::flatten(x));
        let mut h = self.stem_relu.infer(&self.stem.infer(x));
        for i in 0..self.blocks.len() {
            let b = &self.blocks[i];
            let inner = b.c2.infer(&b.r1.infer(&b.c1.infer(&h)));
            h = b.r2.infer(&(&inner + &h));
            if h.dim().2 > 8 {
                h = self.pools[i].infer(&h);
            }
        }
        let conv = self.pool.infer(&h);
        self.head.infer(&Self::join(&conv, &lin))
    }

    pub fn backward(&mut self, gy: &Array2<f32>) {
        let g = self.head.backward(gy);
        let cw = 2 * self.spec.width;
        let g_conv = g.slice(ndarray::s![.., ..cw]).to_owned();
        let g_lin = g.slice(ndarray::s![.., cw..]).to_owned();
        let _ = self.lin_path.backward(&g_lin);
        let mut g = self.pool.backward(&g_conv);
        for i in (0..self.blocks.len()).rev() {
            if self.pooled[i] {
                g = self.pools[i].backward(&g);
            }
            let b = &mut self.blocks[i];
            let g_sum = b.r2.backward(&g);
            let g_inner = b.c1.backward(&b.r1.backward(&b.c2.backward(&g_sum)));
            g = &g_inner + &g_sum;
        }
        let _ = self.stem.backward(&self.stem_relu.backward(&g));
    }
}

impl ParamSet for Net2d {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("stem.w", &mut self.stem.w);
        f("stem.b", &mut self.stem.b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.c1.w"), &mut b.c1.w);
            f(&format!("block{i}.c1.b"), &mut b.c1.b);
            f(&format!("block{i}.c2.w"), &mut b.c2.w);
            f(&format!("block{i}.c2.b"), &mut b.c2.b);
        }
        f("lin.w", &mut self.lin_path.w);
        f("lin.b", &mut self.lin_path.b);
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }
}

/// Two affine maps with one rectifier; feeds the contrastive similarity
/// space. Discarded after pretraining.
pub struct Projection {
    l1: Dense,
    r: Relu,
    l2: Dense,
}

impl Projection {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Dense::new(FEATURE_DIM, hidden, rng),
            r: Relu::new(),
            l2: Dense::new(hidden, FEATURE_DIM, rng),
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>) -> Array2<f32> {
        self.l2.forward(&self.r.forward(&self.l1.forward(x)))
    }

    pub fn infer(&self, x: &Array2<f32>) -> Array2<f32> {
        self.l2.infer(&self.r.infer(&self.l1.infer(x)))
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array2<f32> {
        self.l1.backward(&self.r.backward(&self.l2.backward(gy)))
    }
}

impl ParamSet for Projection {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("l1.w", &mut self.l1.w);
        f("l1.b", &mut self.l1.b);
        f("l2.w", &mut self.l2.w);
        f("l2.b", &mut self.l2.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn shapes_and_determinism_1d() {
        let mut net = Net1d::new(&EncoderSpec::res1d(16, 3), true, &mut rng(0)).unwrap();
        let x = Array3::from_shape_fn((4, 2, 128), |(b, c, l)| ((b + c + l) % 7) as f32 * 0.1);
        let y = net.forward(&x);
        assert_eq!(y.dim(), (4, 128));
        let a = net.infer(&x);
        let b = net.infer(&x);
        assert_eq!(a, b);
        assert_eq!(a, y); // no dropout/norm layers: train and eval agree
    }

    #[test]
    fn zero_input_gives_finite_outputs() {
        let mut net = Net1d::new(&EncoderSpec::res1d(8, 2), false, &mut rng(1)).unwrap();
        let y = net.forward(&Array3::zeros((2, 2, 64)));
        assert!(y.iter().all(|v| v.is_finite()));
        let mut net2 = Net2d::new(&EncoderSpec::cnn2d(8, 2), (32, 32), &mut rng(2)).unwrap();
        let y = net2.forward(&Array4::zeros((2, 1, 32, 32)));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shapes_2d() {
        let mut net = Net2d::new(&EncoderSpec::cnn2d(8, 3), (64, 64), &mut rng(3)).unwrap();
        let x = Array4::from_shape_fn((3, 1, 64, 64), |(b, _, i, j)| ((b + i + j) % 5) as f32 * 0.2);
        assert_eq!(net.forward(&x).dim(), (3, 128));
    }

    #[test]
    fn gradient_reaches_every_parameter_group() {
        let mut net = Net1d::new(&EncoderSpec::res1d(8, 2), true, &mut rng(4)).unwrap();
        let x = Array3::from_shape_fn((3, 2, 64), |(b, c, l)| ((b * 31 + c * 7 + l) % 11) as f32 * 0.1 - 0.5);
        let y = net.forward(&x);
        net.backward(&Array2::from_elem(y.raw_dim(), 1.0));
        net.visit(&mut |name, p| {
            let norm: f32 = p.g.iter().map(|g| g * g).sum::<f32>().sqrt();
            assert!(norm > 0.0, "no gradient reached {name}");
        });
    }

    #[test]
    fn projection_gradient_flows_to_encoder() {
        let mut net = Net1d::new(&EncoderSpec::res1d(8, 1), false, &mut rng(5)).unwrap();
        let mut proj = Projection::new(128, &mut rng(6));
        let x = Array3::from_shape_fn((2, 2, 32), |(b, c, l)| ((b + 2 * c + l) % 9) as f32 * 0.1);
        let z = proj.forward(&net.forward(&x));
        assert_eq!(z.dim(), (2, 128));
        let gz = Array2::from_elem(z.raw_dim(), 0.5);
        let gf = proj.backward(&gz);
        net.backward(&gf);
        let mut total = 0.0f32;
        net.visit(&mut |_, p| total += p.g.iter().map(|g| g * g).sum::<f32>());
        assert!(total > 0.0);
    }

    #[test]
    fn finite_difference_spot_check_through_encoder() {
        // loss = sum(project(encode(x))); nudge one stem weight
        let mut net = Net1d::new(&EncoderSpec::res1d(4, 1), false, &mut rng(7)).unwrap();
        let mut proj = Projection::new(16, &mut rng(8));
        let x = Array3::from_shape_fn((2, 2, 32), |(b, c, l)| ((b + c + l) % 5) as f32 * 0.2 - 0.4);
        let y = proj.forward(&net.forward(&x));
        let gy = Array2::from_elem(y.raw_dim(), 1.0f32);
        net.backward(&proj.backward(&gy));
        let analytic = net.stem.w.g[[1, 3]] as f64;

        let mut eval = |delta: f32| -> f64 {
            net.stem.w.w[[1, 3]] += delta;
            let v: f64 = proj.infer(&net.infer(&x)).iter().map(|&v| v as f64).sum();
            net.stem.w.w[[1, 3]] -= delta;
            v
        };
        // small step: the max-pool argmax makes the loss piecewise smooth
        let h = 1e-3f32;
        let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
        assert!(
            (analytic - fd).abs() < 0.1 * fd.abs().max(1.0),
            "analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let mut net = Net1d::new(&EncoderSpec::res1d(8, 2), true, &mut rng(9)).unwrap();
        let x = Array3::from_shape_fn((2, 2, 64), |(b, c, l)| ((b + c * 3 + l) % 13) as f32 * 0.07);
        let before = net.infer(&x);
        let mut ck = Checkpoint::new();
        ck.put_spec("enc", &net.spec).unwrap();
        ck.capture("enc", &mut net);
        // scramble, then restore
        net.visit(&mut |_, p| p.w.fill(0.123));
        ck.restore("enc", &mut net).unwrap();
        let after = net.infer(&x);
        assert_eq!(before, after);
    }

    #[test]
    fn wrong_spec_checkpoint_is_rejected() {
        let mut small = Net1d::new(&EncoderSpec::res1d(8, 1), true, &mut rng(10)).unwrap();
        let mut big = Net1d::new(&EncoderSpec::res1d(16, 1), true, &mut rng(11)).unwrap();
        let mut ck = Checkpoint::new();
        ck.capture("enc", &mut small);
        assert!(ck.restore("enc", &mut big).is_err());
    }

    #[test]
    fn out_dim_contract_is_enforced() {
        let bad = EncoderSpec { kind: EncoderKind::Res1d, width: 8, depth: 1, out_dim: 64 };
        assert!(bad.validate().is_err());
        assert!(Net1d::new(&bad, true, &mut rng(12)).is_err());
    }

    #[test]
    fn param_count_is_deterministic_per_spec() {
        let a = Net1d::new(&EncoderSpec::res1d(16, 2), true, &mut rng(13)).unwrap().param_count();
        let b = Net1d::new(&EncoderSpec::res1d(16, 2), true, &mut rng(14)).unwrap().param_count();
        assert_eq!(a, b);
        let plain = Net1d::new(&EncoderSpec::cnn1d_plain(16, 2), true, &mut rng(15)).unwrap().param_count();
        assert!(plain < a);
    }
}
