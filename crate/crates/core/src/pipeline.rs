//! Stage orchestration: RL-wrapped contrastive pretraining, supervised
//! head fine-tuning on the support set, and frozen evaluation on the query
//! set. All stochastic behavior derives from `RunConfig::seed` through
//! fixed stream ids, so identical configs replay identical runs.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augment::{augment_triple, AugAction};
use crate::checkpoint::Checkpoint;
use crate::clustering::{cluster_accuracy, kmeans_fit, reward, KMeansConfig};
use crate::config::RunConfig;
use crate::conloss::total_loss;
use crate::domains::{to_triple, Domain, DomainTriple, FreqRepr};
use crate::encoders::{EncoderSpec, Net1d, Net2d, Projection, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::heads::{cross_entropy, fuse, Heads};
use crate::nn::{Param, ParamSet};
use crate::sac::{ActionMode, SacAgent, Transition};
use crate::sigdata::{Dataset, SignalFrame, UnlabeledView};

// rng stream ids, one per independent randomness source
const STREAM_ENC_INIT: u64 = 1;
const STREAM_AGENT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_HEADS_INIT: u64 = 20;
const STREAM_FINETUNE_SHUFFLE: u64 = 21;
const STREAM_DROPOUT: u64 = 22;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Per-domain batches in encoder-input layout.
pub struct Batches {
    pub time: Option<Array3<f32>>,
    pub freq: Option<Array3<f32>>,
    pub konst: Option<Array4<f32>>,
}

/// Build the three views of every frame once up front.
pub fn build_triples<'a>(iqs: impl Iterator<Item = &'a Array2<f32>>, cfg: &RunConfig) -> Vec<DomainTriple> {
    let spec = cfg.constellation_spec();
    iqs.map(|iq| {
        let frame = SignalFrame { iq: iq.clone(), label: 0, snr_db: 0 };
        to_triple(&frame, cfg.freq_repr, &spec)
    })
    .collect()
}

/// Stack triples into per-domain batches. Frequency magnitudes are
/// log1p-compressed (ReIm rows are scaled by 1/√N) so encoder inputs stay
/// O(1) regardless of N.
pub fn stack_batches(items: &[&DomainTriple], active: &[Domain], freq_repr: FreqRepr) -> Batches {
    let b = items.len();
    let mut out = Batches { time: None, freq: None, konst: None };
    for d in active {
        match d {
            Domain::Time => {
                let n = items[0].time.dim().1;
                let mut x = Array3::<f32>::zeros((b, 2, n));
                for (i, t) in items.iter().enumerate() {
                    x.index_axis_mut(Axis(0), i).assign(&t.time);
                }
                out.time = Some(x);
            }
            Domain::Freq => {
                let n = items[0].freq.dim().1;
                let scale = 1.0 / (n as f32).sqrt();
                let mut x = Array3::<f32>::zeros((b, 2, n));
                for (i, t) in items.iter().enumerate() {
                    x.index_axis_mut(Axis(0), i).assign(&t.freq);
                }
                match freq_repr {
                    // log compression keeps the in-band peaks and the noise
                    // floor on comparable footing
                    FreqRepr::MagPhase => x.slice_mut(ndarray::s![.., 0, ..]).mapv_inplace(|v| v.ln_1p()),
                    FreqRepr::ReIm => x.mapv_inplace(|v| v * scale),
                }
                out.freq = Some(x);
            }
            Domain::Const => {
                let (h, w) = items[0].konst.dim();
                let mut x = Array4::<f32>::zeros((b, 1, h, w));
                for (i, t) in items.iter().enumerate() {
                    x.slice_mut(ndarray::s![i, 0, .., ..]).assign(&t.konst);
                }
                out.konst = Some(x);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderSetSpec {
    domains: String,
    time: Option<EncoderSpec>,
    freq: Option<EncoderSpec>,
    konst: Option<EncoderSpec>,
    projection_hidden: usize,
    freq_repr: FreqRepr,
    #[serde(default = "default_true")]
    time_quad_stem: bool,
    #[serde(default = "default_grid")]
    konst_grid: (usize, usize),
}

fn default_grid() -> (usize, usize) {
    (64, 64)
}

fn default_true() -> bool {
    true
}

/// The per-domain encoders and projection heads of one run.
pub struct EncoderSet {
    pub active: Vec<Domain>,
    spec: EncoderSetSpec,
    time: Option<Net1d>,
    freq: Option<Net1d>,
    konst: Option<Net2d>,
    ptime: Option<Projection>,
    pfreq: Option<Projection>,
    pkonst: Option<Projection>,
}

impl EncoderSet {
    pub fn new(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let active = cfg.active_domains();
        let spec = EncoderSetSpec {
            domains: cfg.domains.clone(),
            time: active.contains(&Domain::Time).then(|| cfg.enc.spec_1d(cfg.enc.time_kind)),
            freq: active.contains(&Domain::Freq).then(|| cfg.enc.spec_1d(cfg.enc.freq_kind)),
            konst: active.contains(&Domain::Const).then(|| cfg.enc.spec_2d()),
            projection_hidden: cfg.enc.projection_hidden,
            freq_repr: cfg.freq_repr,
            time_quad_stem: true,
            konst_grid: (cfg.const_grid, cfg.const_grid),
        };
        Self::from_spec(spec, rng)
    }

    fn from_spec(spec: EncoderSetSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut active = Vec::new();
        let time = match &spec.time {
            Some(s) => {
                active.push(Domain::Time);
                Some(Net1d::new(s, spec.time_quad_stem, rng)?)
            }
            None => None,
        };
        let freq = match &spec.freq {
            Some(s) => {
                active.push(Domain::Freq);
                Some(Net1d::new(s, false, rng)?)
            }
            None => None,
        };
        let konst = match &spec.konst {
            Some(s) => {
                active.push(Domain::Const);
                Some(Net2d::new(s, spec.konst_grid, rng)?)
            }
            None => None,
        };
        let hidden = spec.projection_hidden;
        Ok(Self {
            ptime: time.is_some().then(|| Projection::new(hidden, rng)),
            pfreq: freq.is_some().then(|| Projection::new(hidden, rng)),
            pkonst: konst.is_some().then(|| Projection::new(hidden, rng)),
            active,
            spec,
            time,
            freq,
            konst,
        })
    }

    /// Rebuild a set from a pretraining checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: EncoderSetSpec = ck.spec("encoders")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut set = Self::from_spec(spec, &mut rng)?;
        ck.restore("encoders", &mut set)?;
        Ok(set)
    }

    pub fn capture(&mut self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.put_spec("encoders", &self.spec)?;
        if let Some(s) = &self.spec.time {
            ck.put_spec("encoder_time", s)?;
        }
        if let Some(s) = &self.spec.freq {
            ck.put_spec("encoder_freq", s)?;
        }
        if let Some(s) = &self.spec.konst {
            ck.put_spec("encoder_const", s)?;
        }
        ck.capture("encoders", self);
        Ok(ck)
    }

    pub fn freq_repr(&self) -> FreqRepr {
        self.spec.freq_repr
    }

    pub fn state_width(&self) -> usize {
        FEATURE_DIM * self.active.len()
    }

    /// Raw encoder features per active domain (eval path, no caches).
    pub fn infer_features(&self, b: &Batches) -> Vec<Array2<f32>> {
        let mut out = Vec::new();
        if let (Some(net), Some(x)) = (&self.time, &b.time) {
            out.push(net.infer(x));
        }
        if let (Some(net), Some(x)) = (&self.freq, &b.freq) {
            out.push(net.infer(x));
        }
        if let (Some(net), Some(x)) = (&self.konst, &b.konst) {
            out.push(net.infer(x));
        }
        out
    }

    /// Projected embeddings per active domain (training path, caches set).
    pub fn forward_projected(&mut self, b: &Batches) -> Vec<Array2<f32>> {
        let mut out = Vec::new();
        if let (Some(net), Some(p), Some(x)) = (&mut self.time, &mut self.ptime, &b.time) {
            out.push(p.forward(&net.forward(x)));
        }
        if let (Some(net), Some(p), Some(x)) = (&mut self.freq, &mut self.pfreq, &b.freq) {
            out.push(p.forward(&net.forward(x)));
        }
        if let (Some(net), Some(p), Some(x)) = (&mut self.konst, &mut self.pkonst, &b.konst) {
            out.push(p.forward(&net.forward(x)));
        }
        out
    }

    /// Backpropagate per-domain embedding gradients (same order as
    /// `forward_projected`).
    pub fn backward_projected(&mut self, grads: &[Array2<f32>]) {
        let mut it = grads.iter();
        if let (Some(net), Some(p)) = (&mut self.time, &mut self.ptime) {
            net.backward(&p.backward(it.next().expect("time grad")));
        }
        if let (Some(net), Some(p)) = (&mut self.freq, &mut self.pfreq) {
            net.backward(&p.backward(it.next().expect("freq grad")));
        }
        if let (Some(net), Some(p)) = (&mut self.konst, &mut self.pkonst) {
            net.backward(&p.backward(it.next().expect("const grad")));
        }
    }
}

impl ParamSet for EncoderSet {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        let fwd = |prefix: &str, set: &mut dyn ParamSet, f: &mut dyn FnMut(&str, &mut Param)| {
            set.visit(&mut |name, p| f(&format!("{prefix}.{name}"), p));
        };
        if let Some(n) = &mut self.time {
            fwd("time", n, f);
        }
        if let Some(n) = &mut self.freq {
            fwd("freq", n, f);
        }
        if let Some(n) = &mut self.konst {
            fwd("const", n, f);
        }
        if let Some(p) = &mut self.ptime {
            fwd("proj_time", p, f);
        }
        if let Some(p) = &mut self.pfreq {
            fwd("proj_freq", p, f);
        }
        if let Some(p) = &mut self.pkonst {
            fwd("proj_const", p, f);
        }
    }
}

/// One RL step of the pretraining trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlStep {
    pub step: usize,
    pub action: [f64; 5],
    pub reward: f64,
    pub acc: f64,
}

/// Output of one stage: trace, curves, metrics events, checkpoints.
pub struct StageResult {
    pub stage: String,
    pub rl_trace: Vec<RlStep>,
    pub loss_curves: Vec<Vec<f64>>,
    pub support_acc_curve: Vec<f64>,
    pub best_acc: f64,
    pub checkpoint: Checkpoint,
    pub agent_checkpoint: Option<Checkpoint>,
    pub metrics: Vec<Value>,
}

fn metrics_event(
    run_id: &str,
    stage: &str,
    rl_step: Option<usize>,
    epoch: Option<usize>,
    fields: Value,
    started: Instant,
) -> Value {
    let mut obj = json!({
        "run_id": run_id,
        "stage": stage,
        "wall_ms": started.elapsed().as_millis() as u64,
    });
    let map = obj.as_object_mut().unwrap();
    if let Some(s) = rl_step {
        map.insert("rl_step".into(), json!(s));
    }
    if let Some(e) = epoch {
        map.insert("epoch".into(), json!(e));
    }
    if let Value::Object(extra) = fields {
        for (k, v) in extra {
            map.insert(k, v);
        }
    }
    obj
}

/// One contrastive-learning round: `e_cl` epochs of augmented multi-domain
/// batches against the λ-weighted total loss. Returns per-epoch mean loss.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_round(
    encs: &mut EncoderSet,
    triples: &[DomainTriple],
    action: &AugAction,
    cfg: &RunConfig,
    rl_step: usize,
    adam_t: &mut u64,
    run_id: &str,
    metrics: &mut Vec<Value>,
    started: Instant,
) -> Result<Vec<f64>> {
    action.validate()?;
    if triples.len() < 2 {
        return Err(Error::InvalidParam(format!("{} frames cannot form a contrastive batch", triples.len())));
    }
    let loss_cfg = cfg.loss_config();
    let names: Vec<&str> = encs.active.iter().map(|d| d.letter()).collect();
    let mut curve = Vec::with_capacity(cfg.e_cl);
    for epoch in 0..cfg.e_cl {
        // distinct stream per (source, rl step, epoch)
        let stream = ((rl_step as u64) << 20) | epoch as u64;
        let mut shuffle_rng = stream_rng(cfg.seed, (STREAM_SHUFFLE << 52) | stream);
        let mut aug_rng = stream_rng(cfg.seed, (STREAM_AUGMENT << 52) | stream);
        let mut order: Vec<usize> = (0..triples.len()).collect();
        fisher_yates(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut batches_done = 0usize;
        let mut last_breakdown: Vec<(String, f64)> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // the loss denominator needs at least two samples
            }
            let b = chunk.len();
            let orig: Vec<&DomainTriple> = chunk.iter().map(|&i| &triples[i]).collect();
            let augmented: Vec<DomainTriple> =
                orig.iter().map(|t| augment_triple(t, action, &cfg.aug, &mut aug_rng)).collect();
            let mut stacked: Vec<&DomainTriple> = orig.clone();
            stacked.extend(augmented.iter());
            let batches = stack_batches(&stacked, &encs.active, cfg.freq_repr);

            let z = encs.forward_projected(&batches);
            let mut z_orig = Vec::with_capacity(z.len());
            let mut z_aug = Vec::with_capacity(z.len());
            for zd in &z {
                let zo = zd.slice(ndarray::s![..b, ..]).mapv(|v| v as f64);
                let za = zd.slice(ndarray::s![b.., ..]).mapv(|v| v as f64);
                z_orig.push(zo);
                z_aug.push(za);
            }
            let out = total_loss(&z_orig, &z_aug, &names, &loss_cfg)?;
            epoch_loss += out.total;
            batches_done += 1;
            last_breakdown = out.breakdown.clone();

            let grads: Vec<Array2<f32>> = (0..z.len())
                .map(|d| {
                    let mut g = Array2::<f32>::zeros((2 * b, FEATURE_DIM));
                    for i in 0..b {
                        for j in 0..FEATURE_DIM {
                            g[[i, j]] = out.grad_orig[d][[i, j]] as f32;
                            g[[b + i, j]] = out.grad_aug[d][[i, j]] as f32;
                        }
                    }
                    g
                })
                .collect();
            encs.zero_grad();
            encs.backward_projected(&grads);
            *adam_t += 1;
            encs.adam_step(cfg.lr as f32, *adam_t);
        }
        if batches_done == 0 {
            return Err(Error::InvalidParam("every batch was smaller than 2 samples".into()));
        }
        let mean = epoch_loss / batches_done as f64;
        curve.push(mean);
        let breakdown: serde_json::Map<String, Value> =
            last_breakdown.into_iter().map(|(k, v)| (k, json!(v))).collect();
        metrics.push(metrics_event(
            run_id,
            "pretrain",
            Some(rl_step),
            Some(epoch),
            json!({"loss": mean, "breakdown": breakdown}),
            started,
        ));
    }
    Ok(curve)
}

fn fisher_yates(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Row-L2-normalize each domain's feature block so no branch dominates
/// fused distances (the fixed 128-dim outputs exist to keep branches
/// balanced; their norms are free parameters the loss never constrains).
pub fn normalize_features(feats: &mut [Array2<f32>]) {
    for f in feats.iter_mut() {
        for mut row in f.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
    }
}

/// Mean-pooled concatenated encoder features over the probe batch (the RL
/// state).
pub fn compute_state(encs: &EncoderSet, probe: &Batches) -> Vec<f32> {
    let feats = encs.infer_features(probe);
    let mut state = Vec::with_capacity(encs.state_width());
    for f in feats {
        let mean = f.mean_axis(Axis(0)).expect("non-empty probe");
        state.extend(mean.iter().copied());
    }
    state
}

/// Embed the support set (concatenated raw features), run k-means with
/// k = class count, score clustering accuracy, and return
/// (acc − prev_acc, acc).
pub fn compute_reward(
    encs: &EncoderSet,
    support: &Dataset,
    support_triples: &[DomainTriple],
    cfg: &RunConfig,
    prev_acc: f64,
) -> Result<(f64, f64)> {
    let k = support.num_classes();
    if support.len() < k {
        return Err(Error::Dataset(format!("support of {} frames cannot seed {k} clusters", support.len())));
    }
    let refs: Vec<&DomainTriple> = support_triples.iter().collect();
    let batches = stack_batches(&refs, &encs.active, encs.freq_repr());
    let mut feats = encs.infer_features(&batches);
    normalize_features(&mut feats);
    let fused = fuse(&feats, crate::heads::FusionMode::Concat)?;
    let x = fused.mapv(|v| v as f64);
    let kcfg = KMeansConfig {
        k,
        max_iters: cfg.kmeans_max_iters,
        tol: cfg.kmeans_tol,
        restarts: cfg.kmeans_restarts,
        seed: cfg.seed,
    };
    let fit = kmeans_fit(x.view(), &kcfg)?;
    let truth: Vec<usize> = (0..support.len()).map(|i| support.label(i) as usize).collect();
    let acc = cluster_accuracy(&fit.assignments, &truth, k)?;
    Ok((reward(acc, prev_acc), acc))
}

/// Unsupervised pretraining: the first step uses the zero action, later
/// steps come from the agent (or the fixed intensity when RL is off).
/// Encoder checkpoints persist only when clustering accuracy improves.
pub fn pretrain(base: UnlabeledView<'_>, support: &Dataset, cfg: &RunConfig) -> Result<StageResult> {
    cfg.validate()?;
    let started = Instant::now();
    let run_id = format!("run-{:016x}", cfg.seed);
    if base.len() < 2 {
        return Err(Error::Dataset("base set needs at least 2 frames".into()));
    }

    let base_triples = build_triples((0..base.len()).map(|i| base.iq(i)), cfg);
    let support_triples = build_triples((0..support.len()).map(|i| support.iq(i)), cfg);

    let mut enc_rng = stream_rng(cfg.seed, STREAM_ENC_INIT);
    let mut encs = EncoderSet::new(cfg, &mut enc_rng)?;

    let probe_n = cfg.probe_batch_size.min(base.len());
    let probe_refs: Vec<&DomainTriple> = base_triples[..probe_n].iter().collect();
    let probe = stack_batches(&probe_refs, &encs.active, cfg.freq_repr);

    let mut agent = if cfg.rl_enabled {
        Some(SacAgent::new(encs.state_width(), 5, cfg.sac.clone(), cfg.seed ^ STREAM_AGENT)?)
    } else {
        None
    };

    let mut metrics = Vec::new();
    let mut trace = Vec::new();
    let mut loss_curves = Vec::new();
    let mut s_prev = compute_state(&encs, &probe);
    let mut acc_prev = 0.0f64;
    let mut acc_best = 0.0f64;
    let mut best_ck: Option<Checkpoint> = None;
    let mut adam_t = 0u64;

    for t in 1..=cfg.e_rl {
        let action = if t == 1 {
            AugAction::zero()
        } else if let Some(agent) = agent.as_mut() {
            let a = agent.select_action(&s_prev, ActionMode::Stochastic)?;
            AugAction([a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64, a[4] as f64])
        } else {
            AugAction::uniform(cfg.fixed_action)
        };

        let curve = contrastive_round(&mut encs, &base_triples, &action, cfg, t, &mut adam_t, &run_id, &mut metrics, started)?;
        loss_curves.push(curve);

        let (r, acc) = compute_reward(&encs, support, &support_triples, cfg, acc_prev)?;
        let s_t = compute_state(&encs, &probe);

        if let Some(agent) = agent.as_mut() {
            agent.store(Transition {
                state: s_prev.clone(),
                action: action.0.iter().map(|&v| v as f32).collect(),
                reward: r as f32,
                next_state: s_t.clone(),
                done: t == cfg.e_rl,
            });
            for _ in 0..cfg.sac.updates_per_step {
                let d = agent.update()?;
                if !(d.q_loss.is_finite() && d.policy_loss.is_finite()) {
                    return Err(Error::InvalidParam("agent diagnostics diverged".into()));
                }
            }
        }

        metrics.push(metrics_event(
            &run_id,
            "pretrain",
            Some(t),
            None,
            json!({"acc": acc, "reward": r, "action": action.0}),
            started,
        ));
        trace.push(RlStep { step: t, action: action.0, reward: r, acc });

        if acc > acc_best {
            acc_best = acc;
            best_ck = Some(encs.capture()?);
        }
        s_prev = s_t;
        acc_prev = acc;
    }

    let agent_checkpoint = match agent.as_mut() {
        Some(agent) => {
            let mut ck = Checkpoint::new();
            ck.put_spec("agent", &cfg.sac)?;
            ck.capture("agent", agent);
            Some(ck)
        }
        None => None,
    };

    Ok(StageResult {
        stage: "pretrain".into(),
        rl_trace: trace,
        loss_curves,
        support_acc_curve: Vec::new(),
        best_acc: acc_best,
        checkpoint: best_ck.expect("accuracy is always positive, so a checkpoint exists"),
        agent_checkpoint,
        metrics,
    })
}

/// Freeze the encoders from a checkpoint and train the fusion heads on the
/// support set with cross-entropy.
pub fn finetune(encoder_ck: &Checkpoint, support: &Dataset, cfg: &RunConfig) -> Result<StageResult> {
    cfg.validate()?;
    let started = Instant::now();
    let run_id = format!("run-{:016x}", cfg.seed);
    if support.is_empty() {
        return Err(Error::Dataset("empty support set".into()));
    }
    let encs = EncoderSet::from_checkpoint(encoder_ck)?;
    let support_triples = build_triples((0..support.len()).map(|i| support.iq(i)), cfg);

    // encoders are frozen: embed the support set once
    let refs: Vec<&DomainTriple> = support_triples.iter().collect();
    let batches = stack_batches(&refs, &encs.active, encs.freq_repr());
    let mut feats = encs.infer_features(&batches);
    normalize_features(&mut feats);
    let fused = fuse(&feats, cfg.fusion.mode)?;
    let labels: Vec<usize> = (0..support.len()).map(|i| support.label(i) as usize).collect();

    let fusion_cfg = cfg.fusion.to_config(support.num_classes());
    let mut heads_rng = stream_rng(cfg.seed, STREAM_HEADS_INIT);
    let mut heads = Heads::new(&fusion_cfg, encs.active.len(), &mut heads_rng)?;
    let mut drop_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_FINETUNE_SHUFFLE);

    let accuracy = |heads: &Heads| -> Result<f64> {
        let logits = heads.infer(&fused)?;
        let mut correct = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.index_axis(Axis(0), i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    };

    let mut metrics = Vec::new();
    let mut loss_curve = Vec::new();
    let mut acc_curve = vec![accuracy(&heads)?];
    let mut adam_t = 0u64;
    for epoch in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..support.len()).collect();
        fisher_yates(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.support_batch.max(1)) {
            let mut x = Array2::<f32>::zeros((chunk.len(), fused.dim().1));
            let mut y = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                x.row_mut(row).assign(&fused.row(i));
                y.push(labels[i]);
            }
            let logits = heads.forward(&x, &mut drop_rng)?;
            let logits64 = logits.mapv(|v| v as f64);
            let (loss, grad) = cross_entropy(&logits64, &y)?;
            epoch_loss += loss;
            steps += 1;
            heads.zero_grad();
            heads.backward(&grad.mapv(|v| v as f32));
            adam_t += 1;
            heads.adam_step(cfg.lr as f32, adam_t);
        }
        let acc = accuracy(&heads)?;
        acc_curve.push(acc);
        let mean = epoch_loss / steps.max(1) as f64;
        loss_curve.push(mean);
        metrics.push(metrics_event(&run_id, "finetune", None, Some(epoch), json!({"loss": mean, "acc": acc}), started));
    }

    let mut ck = Checkpoint::new();
    ck.put_spec("heads", &fusion_cfg)?;
    ck.put_spec("heads_domains", &encs.active.len())?;
    ck.capture("heads", &mut heads);

    let final_acc = *acc_curve.last().expect("at least the epoch-0 accuracy");
    Ok(StageResult {
        stage: "finetune".into(),
        rl_trace: Vec::new(),
        loss_curves: vec![loss_curve],
        support_acc_curve: acc_curve,
        best_acc: final_acc,
        checkpoint: ck,
        agent_checkpoint: None,
        metrics,
    })
}

/// Per-slice accuracy entry of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceAcc {
    pub acc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub n_query: usize,
    pub shots: usize,
    pub per_class: BTreeMap<String, SliceAcc>,
    pub per_snr: BTreeMap<String, SliceAcc>,
}

/// Frozen evaluation of the query set; mutates nothing.
pub fn evaluate(encoder_ck: &Checkpoint, heads_ck: &Checkpoint, query: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    let encs = EncoderSet::from_checkpoint(encoder_ck)?;
    let fusion_cfg: crate::heads::FusionConfig = heads_ck.spec("heads")?;
    let domains: usize = heads_ck.spec("heads_domains")?;
    let mut heads_rng = ChaCha8Rng::seed_from_u64(0);
    let mut heads = Heads::new(&fusion_cfg, domains, &mut heads_rng)?;
    heads_ck.restore("heads", &mut heads)?;
    let heads = heads; // frozen from here on
    if query.is_empty() {
        return Err(Error::Dataset("empty query set".into()));
    }
    if query.num_classes() != fusion_cfg.num_classes {
        return Err(Error::Dataset(format!(
            "query has {} classes but the classifier was trained for {}",
            query.num_classes(),
            fusion_cfg.num_classes
        )));
    }

    let chunk_size = cfg.probe_batch_size.max(1);
    let mut correct_total = 0usize;
    let mut per_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_snr: BTreeMap<i16, (usize, usize)> = BTreeMap::new();

    let mut idx = 0usize;
    while idx < query.len() {
        let end = (idx + chunk_size).min(query.len());
        let triples = build_triples((idx..end).map(|i| query.iq(i)), cfg);
        let refs: Vec<&DomainTriple> = triples.iter().collect();
        let batches = stack_batches(&refs, &encs.active, encs.freq_repr());
        let mut feats = encs.infer_features(&batches);
        normalize_features(&mut feats);
        let fused = fuse(&feats, fusion_cfg.mode)?;
        let logits = heads.infer(&fused)?;
        for (row, i) in (idx..end).enumerate() {
            let r = logits.index_axis(Axis(0), row);
            let pred = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            let label = query.label(i) as usize;
            let hit = pred == label;
            correct_total += usize::from(hit);
            let cls = query.class_names()[label].clone();
            let e = per_class.entry(cls).or_insert((0, 0));
            e.0 += usize::from(hit);
            e.1 += 1;
            let e = per_snr.entry(query.snr(i)).or_insert((0, 0));
            e.0 += usize::from(hit);
            e.1 += 1;
        }
        idx = end;
    }

    Ok(EvalReport {
        overall: correct_total as f64 / query.len() as f64,
        n_query: query.len(),
        shots: cfg.shots,
        per_class: per_class
            .into_iter()
            .map(|(k, (c, n))| (k, SliceAcc { acc: c as f64 / n as f64, n }))
            .collect(),
        per_snr: per_snr
            .into_iter()
            .map(|(k, (c, n))| (k.to_string(), SliceAcc { acc: c as f64 / n as f64, n }))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigdata::{generate_dataset, split, GenConfig, Modulation, SplitSpec};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 5;
        cfg.e_rl = 2;
        cfg.e_cl = 1;
        cfg.batch_size = 8;
        cfg.probe_batch_size = 16;
        cfg.const_grid = 16;
        cfg.shots = 3;
        cfg.support_batch = 4;
        cfg.finetune_epochs = 2;
        cfg.enc.width_1d = 4;
        cfg.enc.depth_1d = 1;
        cfg.enc.width_2d = 4;
        cfg.enc.depth_2d = 1;
        cfg.enc.projection_hidden = 16;
        cfg.sac.updates_per_step = 2;
        cfg.kmeans_restarts = 2;
        cfg
    }

    fn tiny_data(cfg: &RunConfig) -> (Dataset, Dataset, Dataset) {
        let classes = [Modulation::Bpsk, Modulation::Qpsk];
        let gen = GenConfig::default();
        let train = generate_dataset(&classes, 16, &[10], 64, 1, &gen).unwrap();
        let test = generate_dataset(&classes, 4, &[10], 64, 2, &gen).unwrap();
        let spec = SplitSpec { base_fraction: 0.7, shots: cfg.shots, seed: cfg.seed };
        split(&train, &test, &spec).unwrap()
    }

    #[test]
    fn smoke_pretrain_finetune_evaluate() {
        let cfg = tiny_config();
        let (base, support, query) = tiny_data(&cfg);
        let result = pretrain(base.unlabeled(), &support, &cfg).unwrap();
        assert_eq!(result.rl_trace.len(), 2);
        assert_eq!(result.rl_trace[0].action, [0.0; 5]);
        assert_eq!(result.loss_curves.len(), 2);
        assert!(result.loss_curves.iter().all(|c| c.len() == 1 && c[0].is_finite()));
        assert_eq!(base.label_reads(), 0, "pretraining must not read base labels");
        assert!(support.label_reads() > 0, "reward oracle reads support labels");
        let best = result.best_acc;
        let trace_max = result.rl_trace.iter().map(|s| s.acc).fold(0.0f64, f64::max);
        assert_eq!(best, trace_max);

        let ft = finetune(&result.checkpoint, &support, &cfg).unwrap();
        assert_eq!(ft.support_acc_curve.len(), cfg.finetune_epochs + 1);

        let report = evaluate(&result.checkpoint, &ft.checkpoint, &query, &cfg).unwrap();
        assert_eq!(report.n_query, query.len());
        // weighted per-snr accuracies reproduce the overall accuracy
        let num: f64 = report.per_snr.values().map(|s| s.acc * s.n as f64).sum();
        let den: f64 = report.per_snr.values().map(|s| s.n as f64).sum();
        assert!((num / den - report.overall).abs() < 1e-9);
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let cfg = tiny_config();
        let (base, support, _) = tiny_data(&cfg);
        let r1 = pretrain(base.unlabeled(), &support, &cfg).unwrap();
        let r2 = pretrain(base.unlabeled(), &support, &cfg).unwrap();
        let strip = |m: &[Value]| -> Vec<Value> {
            m.iter()
                .map(|v| {
                    let mut v = v.clone();
                    v.as_object_mut().unwrap().remove("wall_ms");
                    v
                })
                .collect()
        };
        assert_eq!(strip(&r1.metrics), strip(&r2.metrics));
    }

    #[test]
    fn finetune_leaves_encoders_bit_identical() {
        let cfg = tiny_config();
        let (base, support, _) = tiny_data(&cfg);
        let result = pretrain(base.unlabeled(), &support, &cfg).unwrap();
        let mut before = EncoderSet::from_checkpoint(&result.checkpoint).unwrap();
        let snap_before = before.snapshot();
        let _ft = finetune(&result.checkpoint, &support, &cfg).unwrap();
        let mut after = EncoderSet::from_checkpoint(&result.checkpoint).unwrap();
        assert_eq!(snap_before, after.snapshot());
    }

    #[test]
    fn domain_subset_runs_time_only() {
        let mut cfg = tiny_config();
        cfg.domains = "t".into();
        cfg.rl_enabled = false;
        let (base, support, query) = tiny_data(&cfg);
        let result = pretrain(base.unlabeled(), &support, &cfg).unwrap();
        // fixed mid-intensity action when RL is off (after the zero first step)
        assert_eq!(result.rl_trace[1].action, [0.5; 5]);
        let ft = finetune(&result.checkpoint, &support, &cfg).unwrap();
        let report = evaluate(&result.checkpoint, &ft.checkpoint, &query, &cfg).unwrap();
        assert!(report.overall.is_finite());
    }
}
