//! Soft actor-critic over a continuous [0,1]^A action space: squashed
//! Gaussian policy, twin Q-functions with polyak-tracked targets, a ring
//! replay buffer, and entropy-regularized updates. The action squash is a
//! sigmoid (augmentation intensities are non-negative), and the entropy
//! coefficient is fixed.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Param, ParamSet, Relu};

const LOGSTD_MIN: f32 = -5.0;
const LOGSTD_MAX: f32 = 2.0;
const SQUASH_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub entropy_alpha: f64,
    pub polyak: f64,
    pub lr: f64,
    pub buffer_capacity: usize,
    /// Update minibatch size, clamped to the buffer fill level.
    pub batch: usize,
    pub updates_per_step: usize,
    pub hidden: Vec<usize>,
    /// Restore the literal single-Q backup instead of the twin minimum.
    pub single_q: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            entropy_alpha: 0.2,
            polyak: 0.995,
            lr: 3e-4,
            buffer_capacity: 256,
            batch: 8,
            updates_per_step: 10,
            hidden: vec![64, 64],
            single_q: false,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidParam(format!("gamma {} outside [0,1)", self.gamma)));
        }
        if self.entropy_alpha < 0.0 {
            return Err(Error::InvalidParam("entropy_alpha must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.polyak) && self.polyak != 1.0 {
            return Err(Error::InvalidParam(format!("polyak {} outside (0,1]", self.polyak)));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidParam("at least one hidden layer".into()));
        }
        Ok(())
    }
}

/// One environment step for the replay buffer.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { data: Vec::with_capacity(capacity), capacity: capacity.max(1), next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    /// Distinct indices when n ≤ len; with replacement otherwise.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&Transition>> {
        if self.data.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let len = self.data.len();
        if n <= len {
            let mut idx: Vec<usize> = (0..len).collect();
            for i in 0..n {
                let j = rng.gen_range(i..len);
                idx.swap(i, j);
            }
            Ok(idx[..n].iter().map(|&i| &self.data[i]).collect())
        } else {
            Ok((0..n).map(|_| &self.data[rng.gen_range(0..len)]).collect())
        }
    }
}

struct Mlp {
    layers: Vec<Dense>,
    acts: Vec<Relu>,
}

impl Mlp {
    fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut acts = Vec::new();
        for w in dims.windows(2) {
            layers.push(Dense::new(w[0], w[1], rng));
            acts.push(Relu::new());
        }
        Self { layers, acts }
    }

    fn forward(&mut self, x: &Array2<f32>) -> Array2<f32> {
        let mut h = x.clone();
        for (l, a) in self.layers.iter_mut().zip(self.acts.iter_mut()) {
            h = a.forward(&l.forward(&h));
        }
        h
    }

    fn infer(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut h = x.clone();
        for (l, a) in self.layers.iter().zip(self.acts.iter()) {
            h = a.infer(&l.infer(&h));
        }
        h
    }

    fn backward(&mut self, gy: &Array2<f32>) -> Array2<f32> {
        let mut g = gy.clone();
        for (l, a) in self.layers.iter_mut().zip(self.acts.iter_mut()).rev() {
            g = l.backward(&a.backward(&g));
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.l{i}.w"), &mut l.w);
            f(&format!("{prefix}.l{i}.b"), &mut l.b);
        }
    }
}

struct PolicyNet {
    trunk: Mlp,
    mean: Dense,
    logstd: Dense,
    clamp_mask: Option<Array2<f32>>,
}

impl PolicyNet {
    fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        let last = *dims.last().unwrap();
        Self {
            trunk: Mlp::new(&dims, rng),
            mean: Dense::new(last, action_dim, rng),
            logstd: Dense::new(last, action_dim, rng),
            clamp_mask: None,
        }
    }

    fn clamp_ls(ls: &mut Array2<f32>) -> Array2<f32> {
        let mask = ls.mapv(|v| if (LOGSTD_MIN..=LOGSTD_MAX).contains(&v) { 1.0 } else { 0.0 });
        ls.mapv_inplace(|v| v.clamp(LOGSTD_MIN, LOGSTD_MAX));
        mask
    }

    fn forward(&mut self, s: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let h = self.trunk.forward(s);
        let mean = self.mean.forward(&h);
        let mut ls = self.logstd.forward(&h);
        self.clamp_mask = Some(Self::clamp_ls(&mut ls));
        (mean, ls)
    }

    fn infer(&self, s: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let h = self.trunk.infer(s);
        let mean = self.mean.infer(&h);
        let mut ls = self.logstd.infer(&h);
        let _ = Self::clamp_ls(&mut ls);
        (mean, ls)
    }

    fn backward(&mut self, g_mean: &Array2<f32>, g_ls: &Array2<f32>) {
        let mask = self.clamp_mask.as_ref().expect("backward before forward");
        let g_ls = g_ls * mask;
        let g1 = self.mean.backward(g_mean);
        let g2 = self.logstd.backward(&g_ls);
        self.trunk.backward(&(&g1 + &g2));
    }
}

impl ParamSet for PolicyNet {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.trunk.visit("trunk", f);
        f("mean.w", &mut self.mean.w);
        f("mean.b", &mut self.mean.b);
        f("logstd.w", &mut self.logstd.w);
        f("logstd.b", &mut self.logstd.b);
    }
}

struct QNet {
    trunk: Mlp,
    out: Dense,
}

impl QNet {
    fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        let last = *dims.last().unwrap();
        Self { trunk: Mlp::new(&dims, rng), out: Dense::new(last, 1, rng) }
    }

    fn forward(&mut self, sa: &Array2<f32>) -> Array1<f32> {
        self.out.forward(&self.trunk.forward(sa)).index_axis(Axis(1), 0).to_owned()
    }

    fn infer(&self, sa: &Array2<f32>) -> Array1<f32> {
        self.out.infer(&self.trunk.infer(sa)).index_axis(Axis(1), 0).to_owned()
    }

    /// Returns the gradient with respect to the (state ‖ action) input.
    fn backward(&mut self, gy: &Array1<f32>) -> Array2<f32> {
        let g = gy.view().insert_axis(Axis(1)).to_owned();
        self.trunk.backward(&self.out.backward(&g))
    }
}

impl ParamSet for QNet {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.trunk.visit("trunk", f);
        f("out.w", &mut self.out.w);
        f("out.b", &mut self.out.b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

/// Per-update diagnostics. `entropy_term` is α·mean(log π): the entropy
/// regularizer as it enters the policy objective.
#[derive(Debug, Clone, Copy)]
pub struct SacDiagnostics {
    pub q_loss: f32,
    pub policy_loss: f32,
    pub entropy_term: f32,
}

pub struct SacAgent {
    pub cfg: SacConfig,
    state_dim: usize,
    action_dim: usize,
    policy: PolicyNet,
    q1: QNet,
    q2: QNet,
    q1_target: QNet,
    q2_target: QNet,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    q_steps: u64,
    pi_steps: u64,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl SacAgent {
    pub fn new(state_dim: usize, action_dim: usize, cfg: SacConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyNet::new(state_dim, action_dim, &cfg.hidden, &mut rng);
        let q1 = QNet::new(state_dim, action_dim, &cfg.hidden, &mut rng);
        let q2 = QNet::new(state_dim, action_dim, &cfg.hidden, &mut rng);
        // targets start as exact copies
        let mut q1_target = QNet::new(state_dim, action_dim, &cfg.hidden, &mut rng);
        let mut q2_target = QNet::new(state_dim, action_dim, &cfg.hidden, &mut rng);
        let mut src1 = Vec::new();
        let mut q1m = q1;
        q1m.visit(&mut |_, p| src1.push(p.w.clone()));
        let mut i = 0;
        q1_target.visit(&mut |_, p| {
            p.w.assign(&src1[i]);
            i += 1;
        });
        let mut src2 = Vec::new();
        let mut q2m = q2;
        q2m.visit(&mut |_, p| src2.push(p.w.clone()));
        let mut i = 0;
        q2_target.visit(&mut |_, p| {
            p.w.assign(&src2[i]);
            i += 1;
        });
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        Ok(Self {
            buffer,
            state_dim,
            action_dim,
            policy,
            q1: q1m,
            q2: q2m,
            q1_target,
            q2_target,
            rng,
            q_steps: 0,
            pi_steps: 0,
            cfg,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Sample (or take the squashed mean of) the policy at one state.
    pub fn select_action(&mut self, state: &[f32], mode: ActionMode) -> Result<Vec<f32>> {
        if state.len() != self.state_dim {
            return Err(Error::ShapeMismatch(format!(
                "state width {} vs agent state_dim {}",
                state.len(),
                self.state_dim
            )));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("non-finite state".into()));
        }
        let s = Array2::from_shape_vec((1, self.state_dim), state.to_vec()).unwrap();
        let (mean, ls) = self.policy.infer(&s);
        let a = match mode {
            ActionMode::Deterministic => mean.mapv(sigmoid),
            ActionMode::Stochastic => {
                let mut u = mean.clone();
                for (j, v) in u.iter_mut().enumerate() {
                    let e: f32 = StandardNormal.sample(&mut self.rng);
                    *v += ls[[0, j]].exp() * e;
                }
                u.mapv(sigmoid)
            }
        };
        Ok(a.row(0).to_vec())
    }

    pub fn store(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    fn logp_rows(a: &Array2<f32>, ls: &Array2<f32>, eps: &Array2<f32>) -> Array1<f32> {
        let (b, adim) = a.dim();
        let mut out = Array1::<f32>::zeros(b);
        let c = 0.5 * (2.0 * std::f32::consts::PI).ln();
        for i in 0..b {
            let mut lp = 0.0f32;
            for j in 0..adim {
                let av = a[[i, j]];
                lp += -c - ls[[i, j]] - 0.5 * eps[[i, j]] * eps[[i, j]] - (av * (1.0 - av) + SQUASH_EPS).ln();
            }
            out[i] = lp;
        }
        out
    }

    /// Sample next actions and their log-densities without touching caches.
    fn next_action_logp(&mut self, s2: &Array2<f32>) -> (Array2<f32>, Array1<f32>) {
        let (mean, ls) = self.policy.infer(s2);
        let eps = Array2::from_shape_fn(mean.raw_dim(), |_| StandardNormal.sample(&mut self.rng));
        let u = &mean + &(ls.mapv(f32::exp) * &eps);
        let a = u.mapv(sigmoid);
        let lp = Self::logp_rows(&a, &ls, &eps);
        (a, lp)
    }

    /// Entropy-regularized bootstrap target for one transition.
    pub fn target_q(&mut self, t: &Transition) -> f32 {
        if t.done || self.cfg.gamma == 0.0 {
            return t.reward;
        }
        let s2 = Array2::from_shape_vec((1, self.state_dim), t.next_state.clone()).unwrap();
        let (a2, lp2) = self.next_action_logp(&s2);
        let sa2 = concat_sa(&s2, &a2);
        let q1 = self.q1_target.infer(&sa2)[0];
        let qt = if self.cfg.single_q { q1 } else { q1.min(self.q2_target.infer(&sa2)[0]) };
        t.reward + self.cfg.gamma as f32 * (qt - self.cfg.entropy_alpha as f32 * lp2[0])
    }

    /// One gradient step on the critics and the policy from a sampled batch,
    /// then a polyak blend of the targets.
    pub fn update(&mut self) -> Result<SacDiagnostics> {
        let n = self.cfg.batch.min(self.buffer.len().max(1));
        let batch: Vec<Transition> = {
            let refs = self.buffer.sample(n, &mut self.rng)?;
            refs.into_iter().cloned().collect()
        };
        Ok(self.update_on(&batch))
    }

    pub fn update_on(&mut self, batch: &[Transition]) -> SacDiagnostics {
        assert!(!batch.is_empty(), "update on empty batch");
        let b = batch.len();
        let sdim = self.state_dim;
        let adim = self.action_dim;
        let alpha = self.cfg.entropy_alpha as f32;
        let gamma = self.cfg.gamma as f32;

        let s = Array2::from_shape_fn((b, sdim), |(i, j)| batch[i].state[j]);
        let a = Array2::from_shape_fn((b, adim), |(i, j)| batch[i].action[j]);
        let s2 = Array2::from_shape_fn((b, sdim), |(i, j)| batch[i].next_state[j]);
        let r = Array1::from_shape_fn(b, |i| batch[i].reward);
        let live = Array1::from_shape_fn(b, |i| if batch[i].done { 0.0f32 } else { 1.0 });

        // critic targets
        let (a2, lp2) = self.next_action_logp(&s2);
        let sa2 = concat_sa(&s2, &a2);
        let q1t = self.q1_target.infer(&sa2);
        let qt = if self.cfg.single_q {
            q1t
        } else {
            let q2t = self.q2_target.infer(&sa2);
            Array1::from_shape_fn(b, |i| q1t[i].min(q2t[i]))
        };
        let y = Array1::from_shape_fn(b, |i| r[i] + gamma * live[i] * (qt[i] - alpha * lp2[i]));

        // critic step
        let sa = concat_sa(&s, &a);
        self.q1.zero_grad();
        let q1v = self.q1.forward(&sa);
        let gy1 = Array1::from_shape_fn(b, |i| 2.0 * (q1v[i] - y[i]) / b as f32);
        let _ = self.q1.backward(&gy1);
        self.q_steps += 1;
        self.q1.adam_step(self.cfg.lr as f32, self.q_steps);
        let mut q_loss: f32 = (0..b).map(|i| (q1v[i] - y[i]).powi(2)).sum::<f32>() / b as f32;
        if !self.cfg.single_q {
            self.q2.zero_grad();
            let q2v = self.q2.forward(&sa);
            let gy2 = Array1::from_shape_fn(b, |i| 2.0 * (q2v[i] - y[i]) / b as f32);
            let _ = self.q2.backward(&gy2);
            self.q2.adam_step(self.cfg.lr as f32, self.q_steps);
            q_loss += (0..b).map(|i| (q2v[i] - y[i]).powi(2)).sum::<f32>() / b as f32;
        }

        // policy step (reparameterized)
        self.policy.zero_grad();
        let (mean, ls) = self.policy.forward(&s);
        let eps = Array2::from_shape_fn(mean.raw_dim(), |_| StandardNormal.sample(&mut self.rng));
        let std = ls.mapv(f32::exp);
        let u = &mean + &(&std * &eps);
        let anew = u.mapv(sigmoid);
        let lp = Self::logp_rows(&anew, &ls, &eps);

        let sa_new = concat_sa(&s, &anew);
        self.q1.zero_grad(); // clear the critic-step grads before reuse
        let q1n = self.q1.forward(&sa_new);
        let (qmin, use_q1): (Array1<f32>, Vec<bool>) = if self.cfg.single_q {
            (q1n.clone(), vec![true; b])
        } else {
            self.q2.zero_grad();
            let q2n = self.q2.forward(&sa_new);
            let mut flags = Vec::with_capacity(b);
            let m = Array1::from_shape_fn(b, |i| {
                let f = q1n[i] <= q2n[i];
                flags.push(f);
                if f {
                    q1n[i]
                } else {
                    q2n[i]
                }
            });
            (m, flags)
        };

        // dJ/da from the −Q(s,a) term, via the critic input gradients
        let inv_b = 1.0 / b as f32;
        let gy_q1 = Array1::from_shape_fn(b, |i| if use_q1[i] { -inv_b } else { 0.0 });
        let mut ga = self.q1.backward(&gy_q1);
        if !self.cfg.single_q {
            let gy_q2 = Array1::from_shape_fn(b, |i| if use_q1[i] { 0.0 } else { -inv_b });
            ga += &self.q2.backward(&gy_q2);
        }

        let mut g_mean = Array2::<f32>::zeros((b, adim));
        let mut g_ls = Array2::<f32>::zeros((b, adim));
        for i in 0..b {
            for j in 0..adim {
                let av = anew[[i, j]];
                let dadu = av * (1.0 - av);
                let dlogp_da = -(1.0 - 2.0 * av) / (av * (1.0 - av) + SQUASH_EPS);
                let g_a = alpha * inv_b * dlogp_da + ga[[i, sdim + j]];
                let g_u = g_a * dadu;
                g_mean[[i, j]] = g_u;
                g_ls[[i, j]] = g_u * std[[i, j]] * eps[[i, j]] - alpha * inv_b;
            }
        }
        self.policy.backward(&g_mean, &g_ls);
        self.pi_steps += 1;
        self.policy.adam_step(self.cfg.lr as f32, self.pi_steps);

        let policy_loss = (0..b).map(|i| alpha * lp[i] - qmin[i]).sum::<f32>() / b as f32;
        let entropy_term = alpha * lp.sum() / b as f32;

        // track the online critics
        let rho = self.cfg.polyak as f32;
        polyak_blend(&mut self.q1_target, &mut self.q1, rho);
        if !self.cfg.single_q {
            polyak_blend(&mut self.q2_target, &mut self.q2, rho);
        }

        SacDiagnostics { q_loss, policy_loss, entropy_term }
    }

    /// (name, target value, online value) triples for blend verification.
    pub fn target_pairs(&mut self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        let mut online = Vec::new();
        self.q1.visit(&mut |name, p| online.push((name.to_string(), p.w.iter().copied().collect::<Vec<f32>>())));
        let mut out = Vec::new();
        let mut i = 0;
        self.q1_target.visit(&mut |_, p| {
            let (name, ov) = &online[i];
            out.push((name.clone(), p.w.iter().copied().collect(), ov.clone()));
            i += 1;
        });
        out
    }
}

impl ParamSet for SacAgent {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        let fwd = |prefix: &str, set: &mut dyn ParamSet, f: &mut dyn FnMut(&str, &mut Param)| {
            set.visit(&mut |name, p| f(&format!("{prefix}.{name}"), p));
        };
        fwd("policy", &mut self.policy, f);
        fwd("q1", &mut self.q1, f);
        fwd("q2", &mut self.q2, f);
        fwd("q1_target", &mut self.q1_target, f);
        fwd("q2_target", &mut self.q2_target, f);
    }
}

fn concat_sa(s: &Array2<f32>, a: &Array2<f32>) -> Array2<f32> {
    let (b, sdim) = s.dim();
    let adim = a.dim().1;
    let mut out = Array2::<f32>::zeros((b, sdim + adim));
    for i in 0..b {
        for j in 0..sdim {
            out[[i, j]] = s[[i, j]];
        }
        for j in 0..adim {
            out[[i, sdim + j]] = a[[i, j]];
        }
    }
    out
}

fn polyak_blend(target: &mut dyn ParamSet, online: &mut dyn ParamSet, rho: f32) {
    let mut src = Vec::new();
    online.visit(&mut |_, p| src.push(p.w.clone()));
    let mut i = 0;
    target.visit(&mut |_, p| {
        ndarray::Zip::from(&mut p.w).and(&src[i]).for_each(|t, &o| {
            *t = rho * *t + (1.0 - rho) * o;
        });
        i += 1;
    });
}
