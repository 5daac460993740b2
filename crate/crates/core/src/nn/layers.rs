use ndarray::{Array, Array2, Array3, Array4, ArrayD, Axis, Dimension};
use rand::Rng;

use super::Param;

/// Fully connected layer, `y = x·Wᵀ + b` over rows of a (B, in) batch.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Param, // (out, in)
    pub b: Param, // (out,)
    x: Option<Array2<f32>>,
}

impl Dense {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w: Param::he(&[out_dim, in_dim], in_dim, rng),
            b: Param::zeros(&[out_dim]),
            x: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.w.shape()[0]
    }

    fn compute(&self, x: &Array2<f32>) -> Array2<f32> {
        let w = self.w.w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.b.w.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    pub fn forward(&mut self, x: &Array2<f32>) -> Array2<f32> {
        self.x = Some(x.clone());
        self.compute(x)
    }

    pub fn infer(&self, x: &Array2<f32>) -> Array2<f32> {
        self.compute(x)
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array2<f32> {
        let x = self.x.as_ref().expect("backward before forward");
        let w = self.w.w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let gw = gy.t().dot(x);
        let gb = gy.sum_axis(Axis(0));
        self.w.g += &gw.into_dyn();
        self.b.g += &gb.into_dyn();
        gy.dot(&w)
    }
}

/// Rectifier with a cached activation mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<ArrayD<f32>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<f32, D>) -> Array<f32, D> {
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }).into_dyn());
        x.mapv(|v| v.max(0.0))
    }

    pub fn infer<D: Dimension>(&self, x: &Array<f32, D>) -> Array<f32, D> {
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward<D: Dimension>(&mut self, gy: &Array<f32, D>) -> Array<f32, D> {
        let mask = self.mask.as_ref().expect("backward before forward");
        let mask = mask.view().into_dimensionality::<D>().unwrap();
        gy * &mask
    }
}

/// Inverted dropout; identity in eval mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f32,
    mask: Option<ArrayD<f32>>,
}

impl Dropout {
    pub fn new(p: f32) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        Self { p, mask: None }
    }

    pub fn forward<D: Dimension, R: Rng>(&mut self, x: &Array<f32, D>, rng: &mut R) -> Array<f32, D> {
        if self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let mask = ArrayD::from_shape_fn(x.raw_dim().into_dyn(), |_| {
            if rng.gen::<f32>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = mask.view().into_dimensionality::<D>().unwrap();
        let y = x * &m;
        self.mask = Some(mask);
        y
    }

    pub fn infer<D: Dimension>(&self, x: &Array<f32, D>) -> Array<f32, D> {
        x.clone()
    }

    pub fn backward<D: Dimension>(&mut self, gy: &Array<f32, D>) -> Array<f32, D> {
        match &self.mask {
            None => gy.clone(),
            Some(mask) => {
                let m = mask.view().into_dimensionality::<D>().unwrap();
                gy * &m
            }
        }
    }
}

/// 1-D convolution over (B, C, L) batches, implemented as im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: Param, // (cout, cin*k)
    pub b: Param, // (cout,)
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cols: Option<Array2<f32>>,
    in_dim: Option<(usize, usize, usize)>,
}

impl Conv1d {
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        Self {
            w: Param::he(&[cout, cin * k], cin * k, rng),
            b: Param::zeros(&[cout]),
            cin,
            cout,
            k,
            stride,
            pad,
            cols: None,
            in_dim: None,
        }
    }

    pub fn out_len(&self, lin: usize) -> usize {
        (lin + 2 * self.pad - self.k) / self.stride + 1
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (bsz, cin, lin) = x.dim();
        let lout = self.out_len(lin);
        let xs = x.as_slice().expect("conv1d input must be standard layout");
        let mut cols = Array2::<f32>::zeros((cin * self.k, bsz * lout));
        {
            let cs = cols.as_slice_mut().unwrap();
            for c in 0..cin {
                for ki in 0..self.k {
                    let row = c * self.k + ki;
                    let rbase = row * bsz * lout;
                    for b in 0..bsz {
                        let xbase = (b * cin + c) * lin;
                        let obase = rbase + b * lout;
                        for l in 0..lout {
                            let src = (l * self.stride + ki) as isize - self.pad as isize;
                            if src >= 0 && (src as usize) < lin {
                                cs[obase + l] = xs[xbase + src as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn cols_to_input_grad(&self, gcols: &Array2<f32>) -> Array3<f32> {
        let (bsz, cin, lin) = self.in_dim.expect("backward before forward");
        let lout = self.out_len(lin);
        let gs = gcols.as_slice().unwrap();
        let mut gx = Array3::<f32>::zeros((bsz, cin, lin));
        {
            let gxs = gx.as_slice_mut().unwrap();
            for c in 0..cin {
                for ki in 0..self.k {
                    let row = c * self.k + ki;
                    let rbase = row * bsz * lout;
                    for b in 0..bsz {
                        let xbase = (b * cin + c) * lin;
                        let obase = rbase + b * lout;
                        for l in 0..lout {
                            let src = (l * self.stride + ki) as isize - self.pad as isize;
                            if src >= 0 && (src as usize) < lin {
                                gxs[xbase + src as usize] += gs[obase + l];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    fn matmul_forward(&self, cols: &Array2<f32>, bsz: usize, lout: usize) -> Array3<f32> {
        let w = self.w.w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y_mat = w.dot(cols); // (cout, bsz*lout)
        for (mut row, &bias) in y_mat.outer_iter_mut().zip(self.b.w.iter()) {
            row += bias;
        }
        let y = y_mat.into_shape_with_order((self.cout, bsz, lout)).unwrap();
        y.permuted_axes([1, 0, 2]).as_standard_layout().to_owned()
    }

    pub fn forward(&mut self, x: &Array3<f32>) -> Array3<f32> {
        let (bsz, cin, lin) = x.dim();
        assert_eq!(cin, self.cin, "conv1d channel mismatch");
        let lout = self.out_len(lin);
        let cols = self.im2col(x);
        let y = self.matmul_forward(&cols, bsz, lout);
        self.cols = Some(cols);
        self.in_dim = Some((bsz, cin, lin));
        y
    }

    pub fn infer(&self, x: &Array3<f32>) -> Array3<f32> {
        let (bsz, cin, lin) = x.dim();
        assert_eq!(cin, self.cin, "conv1d channel mismatch");
        let lout = self.out_len(lin);
        let cols = self.im2col(x);
        self.matmul_forward(&cols, bsz, lout)
    }

    pub fn backward(&mut self, gy: &Array3<f32>) -> Array3<f32> {
        let (bsz, _, lout) = gy.dim();
        let cols = self.cols.as_ref().expect("backward before forward");
        let gy_mat = gy
            .view()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((self.cout, bsz * lout))
            .unwrap();
        let gw = gy_mat.dot(&cols.t());
        let gb = gy_mat.sum_axis(Axis(1));
        self.w.g += &gw.into_dyn();
        self.b.g += &gb.into_dyn();
        let w = self.w.w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let gcols = w.t().dot(&gy_mat);
        self.cols_to_input_grad(&gcols)
    }
}

/// 2-D convolution over (B, C, H, W) batches, square kernel, im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // (cout, cin*k*k)
    pub b: Param, // (cout,)
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cols: Option<Array2<f32>>,
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl Conv2d {
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        Self {
            w: Param::he(&[cout, cin * k * k], cin * k * k, rng),
            b: Param::zeros(&[cout]),
            cin,
            cout,
            k,
            stride,
            pad,
            cols: None,
            in_dim: None,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.pad - self.k) / self.stride + 1
    }

    fn im2col(&self, x: &Array4<f32>) -> Array2<f32> {
        let (bsz, cin, h, w) = x.dim();
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let xs = x.as_slice().expect("conv2d input must be standard layout");
        let mut cols = Array2::<f32>::zeros((cin * self.k * self.k, bsz * ho * wo));
        {
            let cs = cols.as_slice_mut().unwrap();
            let ncols = bsz * ho * wo;
            for c in 0..cin {
                for ki in 0..self.k {
                    for kj in 0..self.k {
                        let row = (c * self.k + ki) * self.k + kj;
                        let rbase = row * ncols;
                        for b in 0..bsz {
                            let xbase = ((b * cin + c) * h) * w;
                            for i in 0..ho {
                                let si = (i * self.stride + ki) as isize - self.pad as isize;
                                let obase = rbase + (b * ho + i) * wo;
                                if si < 0 || si as usize >= h {
                                    continue;
                                }
                                let srow = xbase + si as usize * w;
                                for j in 0..wo {
                                    let sj = (j * self.stride + kj) as isize - self.pad as isize;
                                    if sj >= 0 && (sj as usize) < w {
                                        cs[obase + j] = xs[srow + sj as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn cols_to_input_grad(&self, gcols: &Array2<f32>) -> Array4<f32> {
        let (bsz, cin, h, w) = self.in_dim.expect("backward before forward");
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let gs = gcols.as_slice().unwrap();
        let mut gx = Array4::<f32>::zeros((bsz, cin, h, w));
        {
            let gxs = gx.as_slice_mut().unwrap();
            let ncols = bsz * ho * wo;
            for c in 0..cin {
                for ki in 0..self.k {
                    for kj in 0..self.k {
                        let row = (c * self.k + ki) * self.k + kj;
                        let rbase = row * ncols;
                        for b in 0..bsz {
                            let xbase = ((b * cin + c) * h) * w;
                            for i in 0..ho {
                                let si = (i * self.stride + ki) as isize - self.pad as isize;
                                let obase = rbase + (b * ho + i) * wo;
                                if si < 0 || si as usize >= h {
                                    continue;
                                }
                                let srow = xbase + si as usize * w;
                                for j in 0..wo {
                                    let sj = (j * self.stride + kj) as isize - self.pad as isize;
                                    if sj >= 0 && (sj as usize) < w {
                                        gxs[srow + sj as usize] += gs[obase + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    fn matmul_forward(&self, cols: &Array2<f32>, bsz: usize, ho: usize, wo: usize) -> Array4<f32> {
        let w = self.w.w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y_mat = w.dot(cols);
        for (mut row, &bias) in y_mat.outer_iter_mut().zip(self.b.w.iter()) {
            row += bias;
        }
        let y = y_mat.into_shape_with_order((self.cout, bsz, ho, wo)).unwrap();
        y.permuted_axes([1, 0, 2, 3]).as_standard_layout().to_owned()
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (bsz, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv2d channel mismatch");
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let cols = self.im2col(x);
        let y = self.matmul_forward(&cols, bsz, ho, wo);
        self.cols = Some(cols);
        self.in_dim = Some((bsz, cin, h, w));
        y
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let (bsz, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv2d channel mismatch");
        let (ho, wo) = (self.out_side(h), self.out_side(w));
        let cols = self.im2col(x);
        self.matmul_forward(&cols, bsz, ho, wo)
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let (bsz, _, ho, wo) = gy.dim();
        let cols = self.cols.as_ref().expect("backward before forward");
        let gy_mat = gy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((self.cout, bsz * ho * wo))
            .unwrap();
        let gw = gy_mat.dot(&cols.t());
        let gb = gy_mat.sum_axis(Axis(1));
        self.w.g += &gw.into_dyn();
        self.b.g += &gb.into_dyn();
        let w = self.w.w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let gcols = w.t().dot(&gy_mat);
        self.cols_to_input_grad(&gcols)
    }
}

/// Average pooling by a factor of 2 along the last axis of (B, C, L).
#[derive(Debug, Clone, Default)]
pub struct AvgPool1d {
    in_len: Option<usize>,
}

impl AvgPool1d {
    pub fn new() -> Self {
        Self::default()
    }

    fn compute(x: &Array3<f32>) -> Array3<f32> {
        let (b, c, l) = x.dim();
        let lo = l / 2;
        Array3::from_shape_fn((b, c, lo), |(bi, ci, li)| {
            0.5 * (x[[bi, ci, 2 * li]] + x[[bi, ci, 2 * li + 1]])
        })
    }

    pub fn forward(&mut self, x: &Array3<f32>) -> Array3<f32> {
        self.in_len = Some(x.dim().2);
        Self::compute(x)
    }

    pub fn infer(&self, x: &Array3<f32>) -> Array3<f32> {
        Self::compute(x)
    }

    pub fn backward(&mut self, gy: &Array3<f32>) -> Array3<f32> {
        let (b, c, lo) = gy.dim();
        let l = self.in_len.expect("backward before forward");
        let mut gx = Array3::<f32>::zeros((b, c, l));
        for bi in 0..b {
            for ci in 0..c {
                for li in 0..lo {
                    let g = 0.5 * gy[[bi, ci, li]];
                    gx[[bi, ci, 2 * li]] = g;
                    gx[[bi, ci, 2 * li + 1]] = g;
                }
            }
        }
        gx
    }
}

/// Average pooling by a factor of 2 along both spatial axes of (B, C, H, W).
#[derive(Debug, Clone, Default)]
pub struct AvgPool2d {
    in_dim: Option<(usize, usize)>,
}

impl AvgPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    fn compute(x: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        Array4::from_shape_fn((b, c, ho, wo), |(bi, ci, i, j)| {
            0.25 * (x[[bi, ci, 2 * i, 2 * j]]
                + x[[bi, ci, 2 * i, 2 * j + 1]]
                + x[[bi, ci, 2 * i + 1, 2 * j]]
                + x[[bi, ci, 2 * i + 1, 2 * j + 1]])
        })
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (_, _, h, w) = x.dim();
        self.in_dim = Some((h, w));
        Self::compute(x)
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        Self::compute(x)
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let (b, c, ho, wo) = gy.dim();
        let (h, w) = self.in_dim.expect("backward before forward");
        let mut gx = Array4::<f32>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let g = 0.25 * gy[[bi, ci, i, j]];
                        gx[[bi, ci, 2 * i, 2 * j]] = g;
                        gx[[bi, ci, 2 * i, 2 * j + 1]] = g;
                        gx[[bi, ci, 2 * i + 1, 2 * j]] = g;
                        gx[[bi, ci, 2 * i + 1, 2 * j + 1]] = g;
                    }
                }
            }
        }
        gx
    }
}

/// Mean over the time axis: (B, C, L) → (B, C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool1d {
    in_len: Option<usize>,
}

impl GlobalAvgPool1d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array3<f32>) -> Array2<f32> {
        self.in_len = Some(x.dim().2);
        x.mean_axis(Axis(2)).unwrap()
    }

    pub fn infer(&self, x: &Array3<f32>) -> Array2<f32> {
        x.mean_axis(Axis(2)).unwrap()
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array3<f32> {
        let l = self.in_len.expect("backward before forward");
        let (b, c) = gy.dim();
        let scale = 1.0 / l as f32;
        Array3::from_shape_fn((b, c, l), |(bi, ci, _)| gy[[bi, ci]] * scale)
    }
}

/// Mean over both spatial axes: (B, C, H, W) → (B, C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool2d {
    in_dim: Option<(usize, usize)>,
}

impl GlobalAvgPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array2<f32> {
        let (_, _, h, w) = x.dim();
        self.in_dim = Some((h, w));
        x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap()
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array2<f32> {
        x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap()
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array4<f32> {
        let (h, w) = self.in_dim.expect("backward before forward");
        let (b, c) = gy.dim();
        let scale = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| gy[[bi, ci]] * scale)
    }
}

/// Global average + max pooling over the time axis: (B, C, L) → (B, 2C),
/// averages first, then per-channel maxima.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgMaxPool1d {
    in_len: Option<usize>,
    argmax: Option<Vec<usize>>, // (b*c) flat argmax positions
}

impl GlobalAvgMaxPool1d {
    pub fn new() -> Self {
        Self::default()
    }

    fn compute(x: &Array3<f32>) -> (Array2<f32>, Vec<usize>) {
        let (b, c, l) = x.dim();
        let mut out = Array2::<f32>::zeros((b, 2 * c));
        let mut arg = vec![0usize; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut sum = 0.0f32;
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for li in 0..l {
                    let v = x[[bi, ci, li]];
                    sum += v;
                    if v > best {
                        best = v;
                        best_i = li;
                    }
                }
                out[[bi, ci]] = sum / l as f32;
                out[[bi, c + ci]] = best;
                arg[bi * c + ci] = best_i;
            }
        }
        (out, arg)
    }

    pub fn forward(&mut self, x: &Array3<f32>) -> Array2<f32> {
        self.in_len = Some(x.dim().2);
        let (y, arg) = Self::compute(x);
        self.argmax = Some(arg);
        y
    }

    pub fn infer(&self, x: &Array3<f32>) -> Array2<f32> {
        Self::compute(x).0
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array3<f32> {
        let l = self.in_len.expect("backward before forward");
        let arg = self.argmax.as_ref().expect("backward before forward");
        let (b, c2) = gy.dim();
        let c = c2 / 2;
        let scale = 1.0 / l as f32;
        let mut gx = Array3::<f32>::zeros((b, c, l));
        for bi in 0..b {
            for ci in 0..c {
                let ga = gy[[bi, ci]] * scale;
                for li in 0..l {
                    gx[[bi, ci, li]] = ga;
                }
                gx[[bi, ci, arg[bi * c + ci]]] += gy[[bi, c + ci]];
            }
        }
        gx
    }
}

/// Global average + max pooling over both spatial axes: (B, C, H, W) → (B, 2C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgMaxPool2d {
    in_dim: Option<(usize, usize)>,
    argmax: Option<Vec<(usize, usize)>>,
}

impl GlobalAvgMaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    fn compute(x: &Array4<f32>) -> (Array2<f32>, Vec<(usize, usize)>) {
        let (b, c, h, w) = x.dim();
        let mut out = Array2::<f32>::zeros((b, 2 * c));
        let mut arg = vec![(0usize, 0usize); b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut sum = 0.0f32;
                let mut best = f32::NEG_INFINITY;
                let mut best_ij = (0usize, 0usize);
                for i in 0..h {
                    for j in 0..w {
                        let v = x[[bi, ci, i, j]];
                        sum += v;
                        if v > best {
                            best = v;
                            best_ij = (i, j);
                        }
                    }
                }
                out[[bi, ci]] = sum / (h * w) as f32;
                out[[bi, c + ci]] = best;
                arg[bi * c + ci] = best_ij;
            }
        }
        (out, arg)
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array2<f32> {
        let (_, _, h, w) = x.dim();
        self.in_dim = Some((h, w));
        let (y, arg) = Self::compute(x);
        self.argmax = Some(arg);
        y
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array2<f32> {
        Self::compute(x).0
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array4<f32> {
        let (h, w) = self.in_dim.expect("backward before forward");
        let arg = self.argmax.as_ref().expect("backward before forward");
        let (b, c2) = gy.dim();
        let c = c2 / 2;
        let scale = 1.0 / (h * w) as f32;
        let mut gx = Array4::<f32>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let ga = gy[[bi, ci]] * scale;
                for i in 0..h {
                    for j in 0..w {
                        gx[[bi, ci, i, j]] = ga;
                    }
                }
                let (mi, mj) = arg[bi * c + ci];
                gx[[bi, ci, mi, mj]] += gy[[bi, c + ci]];
            }
        }
        gx
    }
}
