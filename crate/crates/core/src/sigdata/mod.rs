//! Synthetic modulated-signal generation, the dataset container, the
//! base/support/query split, and the portable `.sigds` on-disk format.

mod gen;
mod io;

pub use gen::{generate_dataset, generate_frame, FrameRng, GenConfig, Modulation, Shaping};
pub use io::{load, save};

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One IQ record: 2×N matrix (row 0 = I, row 1 = Q), class label, SNR tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFrame {
    pub iq: Array2<f32>,
    pub label: u16,
    pub snr_db: i16,
}

impl SignalFrame {
    pub fn validate(&self) -> Result<()> {
        let (rows, n) = self.iq.dim();
        if rows != 2 || n < 8 {
            return Err(Error::ShapeMismatch(format!("frame must be 2×N with N ≥ 8, got {rows}×{n}")));
        }
        if self.iq.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("frame contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.iq.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Channel model parameters for one generated frame.
#[derive(Debug, Clone)]
pub struct ChannelParams {
    /// Carrier frequency offset in cycles/sample (Δf·T_s).
    pub cfo_hz_norm: f64,
    /// Initial phase ψ₀ in radians.
    pub phase0_rad: f64,
    /// Channel impulse response taps (complex); must be non-empty.
    pub impulse_response: Vec<num_complex::Complex64>,
    /// Target SNR for additive noise; `None` disables the noise stage.
    pub snr_db: Option<f64>,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            cfo_hz_norm: 0.0,
            phase0_rad: 0.0,
            impulse_response: vec![num_complex::Complex64::new(1.0, 0.0)],
            snr_db: None,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.cfo_hz_norm.abs() >= 0.5 {
            return Err(Error::InvalidParam(format!(
                "cfo {} cycles/sample is not sub-Nyquist",
                self.cfo_hz_norm
            )));
        }
        if self.impulse_response.is_empty() {
            return Err(Error::InvalidParam("impulse response must be non-empty".into()));
        }
        Ok(())
    }
}

/// Ordered frame collection with class names and provenance. Label reads go
/// through [`Dataset::label`], which counts accesses so the pretraining
/// stage's label hygiene can be audited.
#[derive(Debug)]
pub struct Dataset {
    frames: Vec<SignalFrame>,
    class_names: Vec<String>,
    frame_len: usize,
    provenance: String,
    label_reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            frames: self.frames.clone(),
            class_names: self.class_names.clone(),
            frame_len: self.frame_len,
            provenance: self.provenance.clone(),
            label_reads: AtomicU64::new(0),
        }
    }
}

impl Dataset {
    pub fn new(class_names: Vec<String>, frame_len: usize, provenance: String) -> Self {
        Self { frames: Vec::new(), class_names, frame_len, provenance, label_reads: AtomicU64::new(0) }
    }

    pub fn push(&mut self, frame: SignalFrame) -> Result<()> {
        frame.validate()?;
        if frame.len() != self.frame_len {
            return Err(Error::Dataset(format!(
                "frame width {} does not match dataset frame_len {}",
                frame.len(),
                self.frame_len
            )));
        }
        if frame.label as usize >= self.class_names.len() {
            return Err(Error::Dataset(format!(
                "label {} out of range for {} classes",
                frame.label,
                self.class_names.len()
            )));
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn iq(&self, idx: usize) -> &Array2<f32> {
        &self.frames[idx].iq
    }

    pub fn snr(&self, idx: usize) -> i16 {
        self.frames[idx].snr_db
    }

    /// Audited label access.
    pub fn label(&self, idx: usize) -> u16 {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.frames[idx].label
    }

    /// How many times any label of this dataset has been read.
    pub fn label_reads(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// SNR levels present, ascending and deduplicated.
    pub fn snr_levels(&self) -> Vec<i16> {
        let mut v: Vec<i16> = self.frames.iter().map(|f| f.snr_db).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// A label-free view for the unsupervised stage.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView { ds: self }
    }

    pub(crate) fn frames(&self) -> &[SignalFrame] {
        &self.frames
    }
}

/// Label-free dataset view: only sample data and SNR tags are reachable.
#[derive(Clone, Copy)]
pub struct UnlabeledView<'a> {
    ds: &'a Dataset,
}

impl<'a> UnlabeledView<'a> {
    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.ds.frame_len()
    }

    pub fn iq(&self, idx: usize) -> &'a Array2<f32> {
        self.ds.iq(idx)
    }

    pub fn snr(&self, idx: usize) -> i16 {
        self.ds.snr(idx)
    }
}

/// Base/support/query split parameters.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    /// Fraction of the train set kept as the unlabeled base pool.
    pub base_fraction: f64,
    /// Labeled samples per class in the support set.
    pub shots: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { base_fraction: 0.9, shots: 5, seed: 0 }
    }
}

/// Split a train/test pair into (base, support, query).
///
/// Per class the train indices are shuffled; the first `base_fraction` go to
/// the base pool and `shots` of the remainder become the support set. The
/// query set is the whole test partition.
pub fn split(train: &Dataset, test: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    if !(0.0..1.0).contains(&spec.base_fraction) {
        return Err(Error::InvalidParam(format!("base_fraction {} outside [0,1)", spec.base_fraction)));
    }
    if spec.shots == 0 {
        return Err(Error::InvalidParam("shots must be ≥ 1".into()));
    }
    let ncls = train.num_classes();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ncls];
    for (i, f) in train.frames.iter().enumerate() {
        per_class[f.label as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut base_idx = Vec::new();
    let mut support_idx = Vec::new();
    for (c, idxs) in per_class.iter().enumerate() {
        if idxs.len() < spec.shots {
            return Err(Error::Dataset(format!(
                "class {c} has {} frames, fewer than shots={}",
                idxs.len(),
                spec.shots
            )));
        }
        let mut shuffled = idxs.clone();
        shuffled.shuffle(&mut rng);
        let n_base = (spec.base_fraction * idxs.len() as f64).floor() as usize;
        let remainder = &shuffled[n_base..];
        if remainder.len() < spec.shots {
            return Err(Error::Dataset(format!(
                "class {c}: shots={} exceed the {} frames left outside the base pool",
                spec.shots,
                remainder.len()
            )));
        }
        base_idx.extend_from_slice(&shuffled[..n_base]);
        support_idx.extend_from_slice(&remainder[..spec.shots]);
    }
    base_idx.sort_unstable();
    support_idx.sort_unstable();

    let subset = |name: &str, idxs: &[usize]| -> Dataset {
        let mut ds = Dataset::new(
            train.class_names.clone(),
            train.frame_len,
            format!("{} of [{}] (seed {})", name, train.provenance, spec.seed),
        );
        for &i in idxs {
            ds.frames.push(train.frames[i].clone());
        }
        ds
    };
    let base = subset("base", &base_idx);
    let support = subset("support", &support_idx);
    let mut query = test.clone();
    query.provenance = format!("query of [{}]", test.provenance);
    Ok((base, support, query))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        let mut ds = Dataset::new(names, 16, "toy".into());
        for c in 0..classes {
            for i in 0..per_class {
                let iq = Array2::from_elem((2, 16), (c * per_class + i) as f32);
                ds.push(SignalFrame { iq, label: c as u16, snr_db: 10 }).unwrap();
            }
        }
        ds
    }

    #[test]
    fn split_counts_match_contract() {
        let train = toy_dataset(4, 110);
        let test = toy_dataset(4, 10);
        let spec = SplitSpec { base_fraction: 0.9, shots: 5, seed: 3 };
        let (base, support, query) = split(&train, &test, &spec).unwrap();
        assert_eq!(base.len(), 396);
        assert_eq!(support.len(), 20);
        assert_eq!(query.len(), 40);
    }

    #[test]
    fn split_one_shot_gives_one_per_class() {
        let train = toy_dataset(4, 20);
        let test = toy_dataset(4, 4);
        let spec = SplitSpec { base_fraction: 0.9, shots: 1, seed: 0 };
        let (_, support, _) = split(&train, &test, &spec).unwrap();
        assert_eq!(support.len(), 4);
        let mut counts = [0usize; 4];
        for i in 0..support.len() {
            counts[support.label(i) as usize] += 1;
        }
        assert_eq!(counts, [1, 1, 1, 1]);
    }

    #[test]
    fn split_base_and_support_are_disjoint() {
        let train = toy_dataset(3, 40);
        let test = toy_dataset(3, 4);
        let spec = SplitSpec { base_fraction: 0.8, shots: 4, seed: 9 };
        let (base, support, _) = split(&train, &test, &spec).unwrap();
        // frames were constructed with unique constant fill values, so the
        // fill value identifies the original frame
        let key = |ds: &Dataset, i: usize| ds.iq(i)[[0, 0]].to_bits();
        let base_keys: std::collections::HashSet<u32> = (0..base.len()).map(|i| key(&base, i)).collect();
        for i in 0..support.len() {
            assert!(!base_keys.contains(&key(&support, i)));
        }
    }

    #[test]
    fn split_is_deterministic() {
        let train = toy_dataset(4, 30);
        let test = toy_dataset(4, 4);
        let spec = SplitSpec { base_fraction: 0.9, shots: 2, seed: 42 };
        let (b1, s1, _) = split(&train, &test, &spec).unwrap();
        let (b2, s2, _) = split(&train, &test, &spec).unwrap();
        for i in 0..b1.len() {
            assert_eq!(b1.iq(i), b2.iq(i));
        }
        for i in 0..s1.len() {
            assert_eq!(s1.iq(i), s2.iq(i));
        }
    }

    #[test]
    fn split_rejects_excess_shots() {
        let train = toy_dataset(2, 10);
        let test = toy_dataset(2, 2);
        let spec = SplitSpec { base_fraction: 0.9, shots: 5, seed: 0 };
        assert!(split(&train, &test, &spec).is_err());
    }

    #[test]
    fn label_reads_are_audited() {
        let ds = toy_dataset(2, 3);
        assert_eq!(ds.label_reads(), 0);
        let _ = ds.label(0);
        let _ = ds.label(1);
        assert_eq!(ds.label_reads(), 2);
        let _ = ds.iq(0);
        let _ = ds.snr(0);
        assert_eq!(ds.label_reads(), 2);
    }
}
