//! Minimal neural-network plumbing: parameter storage with Adam state,
//! dense/convolution layers with explicit forward/backward passes, and
//! weight initialization. Everything is f32 and CPU-only; backward passes
//! accumulate gradients into each [`Param`] until `zero_grad` is called.

mod layers;

pub use layers::{AvgPool1d, AvgPool2d, Conv1d, Conv2d, Dense, Dropout, GlobalAvgMaxPool1d, GlobalAvgMaxPool2d, GlobalAvgPool1d, GlobalAvgPool2d, Relu};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A trainable tensor plus its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub w: ArrayD<f32>,
    pub g: ArrayD<f32>,
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

impl Param {
    pub fn new(w: ArrayD<f32>) -> Self {
        let z = ArrayD::zeros(w.raw_dim());
        Self { g: z.clone(), m: z.clone(), v: z, w }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// He-normal initialization for layers followed by a rectifier.
    pub fn he<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        Self::new(ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng) as f32))
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    /// One Adam update (β1=0.9, β2=0.999, ε=1e-8); `t` is the 1-based step count.
    pub fn adam_step(&mut self, lr: f32, t: u64) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        let bc1 = 1.0 - B1.powi(t as i32);
        let bc2 = 1.0 - B2.powi(t as i32);
        ndarray::Zip::from(&mut self.w)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(&self.g)
            .for_each(|w, m, v, &g| {
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + EPS);
            });
    }

    /// Polyak blend toward `online`: w ← ρ·w + (1−ρ)·online.
    pub fn polyak_from(&mut self, online: &Param, rho: f32) {
        ndarray::Zip::from(&mut self.w).and(&online.w).for_each(|t, &o| {
            *t = rho * *t + (1.0 - rho) * o;
        });
    }
}

/// Anything that exposes named parameters; used by the optimizer step,
/// checkpointing, and parameter-count reports.
pub trait ParamSet {
    /// Visit every parameter as (name, param), in a stable order.
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit(&mut |_, p| p.zero_grad());
    }

    fn adam_step(&mut self, lr: f32, t: u64) {
        self.visit(&mut |_, p| p.adam_step(lr, t));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    /// Flat snapshot of all parameter values (for freeze checks and tests).
    fn snapshot(&mut self) -> Vec<f32> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| out.extend(p.w.iter().copied()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array3, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn2(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
        let d = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((r, c), |_| d.sample(rng) as f32)
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    /// Adjoint identity <L(x), u> == <x, L^T(u)> for the input side of a
    /// linear layer; exact up to f32 rounding, catches transpose bugs.
    #[test]
    fn dense_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Dense::new(7, 5, &mut rng);
        layer.b.w.fill(0.0); // bias is affine, drop it for the adjoint check
        let x = randn2(4, 7, &mut rng);
        let u = randn2(4, 5, &mut rng);
        let y = layer.forward(&x);
        let gx = layer.backward(&u);
        let lhs = dot(y.as_slice().unwrap(), u.as_slice().unwrap());
        let rhs = dot(x.as_slice().unwrap(), gx.as_slice().unwrap());
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn dense_weight_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = Dense::new(3, 2, &mut rng);
        let x = randn2(5, 3, &mut rng);
        // loss = sum(y)
        let y = layer.forward(&x);
        let gy = Array2::from_elem(y.raw_dim(), 1.0f32);
        layer.backward(&gy);
        let analytic = layer.w.g[[1, 2]] as f64;
        let h = 1e-2f32;
        let eval = |wval: f32| -> f64 {
            let mut l2 = layer.clone();
            l2.w.w[[1, 2]] = wval;
            l2.forward(&x).iter().map(|&v| v as f64).sum()
        };
        let w0 = layer.w.w[[1, 2]];
        let fd = (eval(w0 + h) - eval(w0 - h)) / (2.0 * h as f64);
        assert!((analytic - fd).abs() < 1e-2 * fd.abs().max(1.0), "{analytic} vs {fd}");
    }

    #[test]
    fn conv1d_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Conv1d::new(2, 4, 3, 1, 1, &mut rng);
        layer.b.w.fill(0.0);
        let d = Normal::new(0.0, 1.0).unwrap();
        let x = Array3::from_shape_fn((2, 2, 9), |_| d.sample(&mut rng) as f32);
        let y = layer.forward(&x);
        let u = Array3::from_shape_fn(y.raw_dim(), |_| d.sample(&mut rng) as f32);
        let gx = layer.backward(&u);
        let lhs = dot(y.as_slice().unwrap(), u.as_slice().unwrap());
        let rhs = dot(x.as_slice().unwrap(), gx.as_slice().unwrap());
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv1d_strided_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = Conv1d::new(2, 8, 5, 2, 2, &mut rng);
        let x = Array3::<f32>::zeros((3, 2, 128));
        let y = layer.forward(&x);
        assert_eq!(y.dim(), (3, 8, 64));
    }

    #[test]
    fn conv2d_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = Conv2d::new(1, 3, 3, 2, 1, &mut rng);
        layer.b.w.fill(0.0);
        let d = Normal::new(0.0, 1.0).unwrap();
        let x = Array4::from_shape_fn((2, 1, 8, 8), |_| d.sample(&mut rng) as f32);
        let y = layer.forward(&x);
        assert_eq!(y.dim(), (2, 3, 4, 4));
        let u = Array4::from_shape_fn(y.raw_dim(), |_| d.sample(&mut rng) as f32);
        let gx = layer.backward(&u);
        let lhs = dot(y.as_slice().unwrap(), u.as_slice().unwrap());
        let rhs = dot(x.as_slice().unwrap(), gx.as_slice().unwrap());
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv1d_weight_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = Conv1d::new(2, 3, 3, 1, 1, &mut rng);
        let d = Normal::new(0.0, 1.0).unwrap();
        let x = Array3::from_shape_fn((2, 2, 7), |_| d.sample(&mut rng) as f32);
        let y = layer.forward(&x);
        let gy = Array3::from_elem(y.raw_dim(), 1.0f32);
        layer.backward(&gy);
        let analytic = layer.w.g[[2, 4]] as f64;
        let h = 1e-2f32;
        let eval = |wval: f32| -> f64 {
            let mut l2 = layer.clone();
            l2.w.w[[2, 4]] = wval;
            l2.forward(&x).iter().map(|&v| v as f64).sum()
        };
        let w0 = layer.w.w[[2, 4]];
        let fd = (eval(w0 + h) - eval(w0 - h)) / (2.0 * h as f64);
        assert!((analytic - fd).abs() < 1e-2 * fd.abs().max(1.0), "{analytic} vs {fd}");
    }

    #[test]
    fn relu_masks_negative_lanes() {
        let mut relu = Relu::new();
        let x = ndarray::arr2(&[[-1.0f32, 2.0], [0.5, -3.0]]).into_dyn();
        let y = relu.forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 2.0, 0.5, 0.0]);
        let g = relu.backward(&ArrayD::from_elem(x.raw_dim(), 1.0f32));
        assert_eq!(g.as_slice().unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn avgpool_and_global_pool_backward_spread() {
        let mut pool = AvgPool1d::new();
        let x = Array3::from_shape_fn((1, 1, 4), |(_, _, l)| l as f32);
        let y = pool.forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.5, 2.5]);
        let g = pool.backward(&Array3::from_elem((1, 1, 2), 1.0f32));
        assert_eq!(g.as_slice().unwrap(), &[0.5, 0.5, 0.5, 0.5]);

        let mut gap = GlobalAvgPool1d::new();
        let y = gap.forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[1.5]);
        let g = gap.backward(&Array2::from_elem((1, 1), 4.0f32));
        assert_eq!(g.as_slice().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_moves_toward_gradient_descent_direction() {
        let mut p = Param::new(Array1::from_vec(vec![1.0f32]).into_dyn());
        p.g.fill(2.0);
        p.adam_step(0.1, 1);
        assert!(p.w[[0]] < 1.0);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut drop = Dropout::new(0.5);
        let x = Array2::from_elem((4, 8), 1.0f32).into_dyn();
        let y = drop.infer(&x);
        assert_eq!(y, x);
        let y = drop.forward(&x, &mut rng);
        for &v in y.iter() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-6);
        }
    }
}
