//! Downstream fusion and classification: per-domain feature fusion
//! (concatenation by default), a lightweight domain-attention module, and a
//! small classifier head trained with cross-entropy on the support set.

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Dropout, Param, ParamSet, Relu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Concat,
    Add,
    Dot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub use_attention: bool,
    pub use_classifier_head: bool,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Concat,
            use_attention: true,
            use_classifier_head: true,
            dropout_rate: 0.5,
            num_classes: 2,
        }
    }
}

/// Fuse per-domain feature batches: concat → B×(d·F); add/dot → B×F.
pub fn fuse(features: &[Array2<f32>], mode: FusionMode) -> Result<Array2<f32>> {
    if features.is_empty() {
        return Err(Error::ShapeMismatch("no feature batches to fuse".into()));
    }
    let (b, f) = features[0].dim();
    for z in features {
        if z.dim() != (b, f) {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", z.dim(), (b, f))));
        }
    }
    match mode {
        FusionMode::Concat => {
            let mut out = Array2::<f32>::zeros((b, f * features.len()));
            for (slot, z) in features.iter().enumerate() {
                out.slice_mut(ndarray::s![.., slot * f..(slot + 1) * f]).assign(z);
            }
            Ok(out)
        }
        FusionMode::Add => {
            let mut out = features[0].clone();
            for z in &features[1..] {
                out += z;
            }
            Ok(out)
        }
        FusionMode::Dot => {
            let mut out = features[0].clone();
            for z in &features[1..] {
                out *= z;
            }
            Ok(out)
        }
    }
}

/// Per-domain softmax attention over a concatenated feature row: an affine
/// map to one logit per domain block, softmax weights, each block scaled by
/// (num_blocks · weight) so uniform attention is exactly the identity.
pub struct DomainAttention {
    lin: Dense,
    blocks: usize,
    block_width: usize,
    cache: Option<(Array2<f32>, Array2<f32>)>, // (input, weights)
}

impl DomainAttention {
    pub fn new(blocks: usize, block_width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin: Dense::new(blocks * block_width, blocks, rng),
            blocks,
            block_width,
            cache: None,
        }
    }

    pub fn weights(&self, c: &Array2<f32>) -> Array2<f32> {
        let logits = self.lin.infer(c);
        softmax_rows_f32(&logits)
    }

    fn apply(&self, c: &Array2<f32>, w: &Array2<f32>) -> Array2<f32> {
        let (b, _) = c.dim();
        let k = self.blocks as f32;
        let mut out = c.clone();
        for i in 0..b {
            for blk in 0..self.blocks {
                let scale = k * w[[i, blk]];
                for j in 0..self.block_width {
                    out[[i, blk * self.block_width + j]] *= scale;
                }
            }
        }
        out
    }

    pub fn forward(&mut self, c: &Array2<f32>) -> Array2<f32> {
        let logits = self.lin.forward(c);
        let w = softmax_rows_f32(&logits);
        let y = self.apply(c, &w);
        self.cache = Some((c.clone(), w));
        y
    }

    pub fn infer(&self, c: &Array2<f32>) -> Array2<f32> {
        let w = self.weights(c);
        self.apply(c, &w)
    }

    pub fn backward(&mut self, gy: &Array2<f32>) -> Array2<f32> {
        let (c, w) = self.cache.as_ref().expect("backward before forward").clone();
        let (b, _) = c.dim();
        let k = self.blocks as f32;
        // direct path: y = c ⊙ (k·w per block)
        let mut gc = gy.clone();
        for i in 0..b {
            for blk in 0..self.blocks {
                let scale = k * w[[i, blk]];
                for j in 0..self.block_width {
                    gc[[i, blk * self.block_width + j]] *= scale;
                }
            }
        }
        // weight path: dL/dw[i,blk] = k · Σ_j gy·c over the block
        let mut gw = Array2::<f32>::zeros((b, self.blocks));
        for i in 0..b {
            for blk in 0..self.blocks {
                let mut acc = 0.0f32;
                for j in 0..self.block_width {
                    let col = blk * self.block_width + j;
                    acc += gy[[i, col]] * c[[i, col]];
                }
                gw[[i, blk]] = k * acc;
            }
        }
        // softmax backward
        let mut glogits = Array2::<f32>::zeros((b, self.blocks));
        for i in 0..b {
            let dot: f32 = (0..self.blocks).map(|x| gw[[i, x]] * w[[i, x]]).sum();
            for blk in 0..self.blocks {
                glogits[[i, blk]] = w[[i, blk]] * (gw[[i, blk]] - dot);
            }
        }
        gc + self.lin.backward(&glogits)
    }

    /// Zero the affine map, forcing uniform weights (identity behavior).
    pub fn force_uniform(&mut self) {
        self.lin.w.w.fill(0.0);
        self.lin.b.w.fill(0.0);
    }
}

impl ParamSet for DomainAttention {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("lin.w", &mut self.lin.w);
        f("lin.b", &mut self.lin.b);
    }
}

fn softmax_rows_f32(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

enum ClassifierKind {
    /// affine → rectifier → dropout → affine
    Mlp { l1: Dense, r: Relu, drop: Dropout, l2: Dense },
    /// single affine map
    Bare { l: Dense },
}

/// Attention (optional) plus classifier over fused features.
pub struct Heads {
    pub cfg: FusionConfig,
    pub in_dim: usize,
    attention: Option<DomainAttention>,
    classifier: ClassifierKind,
}

impl Heads {
    pub fn new(cfg: &FusionConfig, domains: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::InvalidParam("need ≥ 2 classes".into()));
        }
        let feature = crate::encoders::FEATURE_DIM;
        let in_dim = match cfg.mode {
            FusionMode::Concat => feature * domains,
            FusionMode::Add | FusionMode::Dot => feature,
        };
        let attention = if cfg.use_attention && matches!(cfg.mode, FusionMode::Concat) {
            Some(DomainAttention::new(domains, feature, rng))
        } else {
            None
        };
        let classifier = if cfg.use_classifier_head {
            ClassifierKind::Mlp {
                l1: Dense::new(in_dim, 128, rng),
                r: Relu::new(),
                drop: Dropout::new(cfg.dropout_rate as f32),
                l2: Dense::new(128, cfg.num_classes, rng),
            }
        } else {
            ClassifierKind::Bare { l: Dense::new(in_dim, cfg.num_classes, rng) }
        };
        Ok(Self { cfg: cfg.clone(), in_dim, attention, classifier })
    }

    pub fn forward(&mut self, fused: &Array2<f32>, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
        if fused.dim().1 != self.in_dim {
            return Err(Error::ShapeMismatch(format!("fused width {} vs {}", fused.dim().1, self.in_dim)));
        }
        let h = match &mut self.attention {
            Some(att) => att.forward(fused),
            None => fused.clone(),
        };
        Ok(match &mut self.classifier {
            ClassifierKind::Mlp { l1, r, drop, l2 } => l2.forward(&drop.forward(&r.forward(&l1.forward(&h)), rng)),
            ClassifierKind::Bare { l } => l.forward(&h),
        })
    }

    pub fn infer(&self, fused: &Array2<f32>) -> Result<Array2<f32>> {
        if fused.dim().1 != self.in_dim {
            return Err(Error::ShapeMismatch(format!("fused width {} vs {}", fused.dim().1, self.in_dim)));
        }
        let h = match &self.attention {
            Some(att) => att.infer(fused),
            None => fused.clone(),
        };
        Ok(match &self.classifier {
            ClassifierKind::Mlp { l1, r, drop, l2 } => l2.infer(&drop.infer(&r.infer(&l1.infer(&h)))),
            ClassifierKind::Bare { l } => l.infer(&h),
        })
    }

    pub fn backward(&mut self, glogits: &Array2<f32>) {
        let g = match &mut self.classifier {
            ClassifierKind::Mlp { l1, r, drop, l2 } => l1.backward(&r.backward(&drop.backward(&l2.backward(glogits)))),
            ClassifierKind::Bare { l } => l.backward(glogits),
        };
        if let Some(att) = &mut self.attention {
            let _ = att.backward(&g);
        }
    }

    pub fn attention_mut(&mut self) -> Option<&mut DomainAttention> {
        self.attention.as_mut()
    }
}

impl ParamSet for Heads {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(att) = &mut self.attention {
            att.visit(&mut |name, p| f(&format!("attention.{name}"), p));
        }
        match &mut self.classifier {
            ClassifierKind::Mlp { l1, l2, .. } => {
                f("classifier.l1.w", &mut l1.w);
                f("classifier.l1.b", &mut l1.b);
                f("classifier.l2.w", &mut l2.w);
                f("classifier.l2.b", &mut l2.b);
            }
            ClassifierKind::Bare { l } => {
                f("classifier.l.w", &mut l.w);
                f("classifier.l.b", &mut l.b);
            }
        }
    }
}

/// Mean negative log softmax probability of the true class, with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidParam(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = Array2::<f64>::zeros((b, c));
    let mut loss = 0.0f64;
    for i in 0..b {
        let row = logits.index_axis(Axis(0), i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - logits[[i, labels[i]]];
        for j in 0..c {
            let p = (logits[[i, j]] - log_z).exp();
            grad[[i, j]] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}
