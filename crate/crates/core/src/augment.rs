//! The five signal augmentations (noise, time shift, scaling, dropout,
//! interpolation), the mapping from an RL action vector to concrete
//! per-domain parameters, and the triple-wide augmentation step with
//! constellation analogues.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domains::DomainTriple;
use crate::error::{Error, Result};

/// RL action: five augmentation intensities in [0,1], ordered
/// (noise, shift, scale, dropout, interpolate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugAction(pub [f64; 5]);

impl AugAction {
    pub fn zero() -> Self {
        Self([0.0; 5])
    }

    pub fn uniform(v: f64) -> Self {
        Self([v; 5])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidParam(format!("action {:?} outside [0,1]^5", self.0)));
        }
        Ok(())
    }
}

/// Maximum-intensity bounds for each augmentation. Every range contains the
/// identity parameter at action component 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugRanges {
    pub sigma_max: f64,
    pub shift_frac_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub dropout_p_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for AugRanges {
    fn default() -> Self {
        Self {
            sigma_max: 0.2,
            shift_frac_max: 0.25,
            scale_min: 0.5,
            scale_max: 1.5,
            dropout_p_max: 0.3,
            gamma_min: 0.8,
            gamma_max: 1.25,
        }
    }
}

/// Ranges plus the per-type enable mask (the augmentation-subset ablation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugConfig {
    pub ranges: AugRanges,
    pub enabled: [bool; 5],
}

impl Default for AugConfig {
    fn default() -> Self {
        Self { ranges: AugRanges::default(), enabled: [true; 5] }
    }
}

/// Concrete per-application parameters produced by [`map_action`].
#[derive(Debug, Clone, PartialEq)]
pub struct MappedParams {
    pub sigma: f64,
    /// Δ_max as a fraction of the frame length.
    pub shift_frac: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub dropout_p: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

/// Affine action→parameter mapping. Component 0 always maps to the identity
/// parameter; component 1 reaches the configured extreme.
pub fn map_action(action: &AugAction, ranges: &AugRanges) -> MappedParams {
    let [a1, a2, a3, a4, a5] = action.0;
    MappedParams {
        sigma: a1 * ranges.sigma_max,
        shift_frac: a2 * ranges.shift_frac_max,
        scale_lo: 1.0 - a3 * (1.0 - ranges.scale_min),
        scale_hi: 1.0 + a3 * (ranges.scale_max - 1.0),
        dropout_p: a4 * ranges.dropout_p_max,
        gamma_lo: 1.0 - a5 * (1.0 - ranges.gamma_min),
        gamma_hi: 1.0 + a5 * (ranges.gamma_max - 1.0),
    }
}

/// x + σ·ε with ε ~ N(0,1) per entry; σ = 0 returns the input bit-exactly.
pub fn add_noise(x: &Array2<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    debug_assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += (sigma * e) as f32;
    }
    out
}

/// Cyclic shift of both rows by `delta` samples: out[n] = x[(n+Δ) mod N].
pub fn time_shift(x: &Array2<f32>, delta: isize) -> Array2<f32> {
    let (rows, n) = x.dim();
    let d = delta.rem_euclid(n as isize) as usize;
    if d == 0 {
        return x.clone();
    }
    let mut out = Array2::<f32>::zeros((rows, n));
    for r in 0..rows {
        for m in 0..n {
            out[[r, m]] = x[[r, (m + d) % n]];
        }
    }
    out
}

/// Elementwise α·x.
pub fn scale(x: &Array2<f32>, alpha: f64) -> Array2<f32> {
    debug_assert!(alpha > 0.0);
    if alpha == 1.0 {
        return x.clone();
    }
    x.mapv(|v| (v as f64 * alpha) as f32)
}

/// Zero whole time columns (I and Q jointly) with probability p; surviving
/// columns are bit-identical to the input.
pub fn random_dropout(x: &Array2<f32>, p: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    debug_assert!((0.0..1.0).contains(&p));
    if p == 0.0 {
        return x.clone();
    }
    let (rows, n) = x.dim();
    let mut out = x.clone();
    for m in 0..n {
        if rng.gen::<f64>() < p {
            for r in 0..rows {
                out[[r, m]] = 0.0;
            }
        }
    }
    out
}

fn resample_row(src: &[f32], dst_len: usize) -> Vec<f32> {
    let n = src.len();
    if dst_len == n {
        return src.to_vec();
    }
    let mut dst = Vec::with_capacity(dst_len);
    if dst_len == 1 {
        dst.push(src[0]);
        return dst;
    }
    let step = (n - 1) as f64 / (dst_len - 1) as f64;
    for j in 0..dst_len {
        let pos = j as f64 * step;
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let frac = pos - i0 as f64;
        dst.push(((1.0 - frac) * src[i0] as f64 + frac * src[i1] as f64) as f32);
    }
    dst
}

/// Linearly resample each row to round(γN) points and back to N, so the
/// output length never changes.
pub fn interpolate(x: &Array2<f32>, gamma: f64) -> Result<Array2<f32>> {
    let (rows, n) = x.dim();
    let m = (gamma * n as f64).round() as usize;
    if m < 2 {
        return Err(Error::InvalidParam(format!("interpolation factor {gamma} collapses {n} samples to {m}")));
    }
    if m == n {
        return Ok(x.clone());
    }
    let mut out = Array2::<f32>::zeros((rows, n));
    for r in 0..rows {
        let row: Vec<f32> = x.row(r).iter().copied().collect();
        let up = resample_row(&row, m);
        let back = resample_row(&up, n);
        for (j, v) in back.into_iter().enumerate() {
            out[[r, j]] = v;
        }
    }
    Ok(out)
}

fn roll_grid(grid: &Array2<f32>, dr: isize, dc: isize) -> Array2<f32> {
    let (h, w) = grid.dim();
    let dr = dr.rem_euclid(h as isize) as usize;
    let dc = dc.rem_euclid(w as isize) as usize;
    if dr == 0 && dc == 0 {
        return grid.clone();
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[r, c]] = grid[[(r + dr) % h, (c + dc) % w]];
        }
    }
    out
}

fn resize_grid(grid: &Array2<f32>, hh: usize, ww: usize) -> Array2<f32> {
    let (h, _w) = grid.dim();
    // separable bilinear: rows, then columns
    let mut rows_done = Array2::<f32>::zeros((h, ww));
    for r in 0..h {
        let row: Vec<f32> = grid.row(r).iter().copied().collect();
        for (j, v) in resample_row(&row, ww).into_iter().enumerate() {
            rows_done[[r, j]] = v;
        }
    }
    let mut out = Array2::<f32>::zeros((hh, ww));
    for c in 0..ww {
        let col: Vec<f32> = rows_done.column(c).iter().copied().collect();
        for (i, v) in resample_row(&col, hh).into_iter().enumerate() {
            out[[i, c]] = v;
        }
    }
    out
}

/// Which augmentation was applied to a triple (diagnostic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugKind {
    Noise,
    Shift,
    Scale,
    Dropout,
    Interpolate,
}

const KINDS: [AugKind; 5] = [AugKind::Noise, AugKind::Shift, AugKind::Scale, AugKind::Dropout, AugKind::Interpolate];

/// Augment one triple: a single augmentation type is chosen uniformly among
/// the enabled ones and applied across all three views with the
/// action-mapped intensity. The same underlying draw (shift fraction,
/// scale factor, interpolation factor) is shared across views; noise and
/// dropout masks are drawn per view. The constellation view stays ≥ 0.
pub fn augment_triple(
    triple: &DomainTriple,
    action: &AugAction,
    cfg: &AugConfig,
    rng: &mut ChaCha8Rng,
) -> DomainTriple {
    let enabled: Vec<AugKind> = KINDS
        .iter()
        .zip(cfg.enabled.iter())
        .filter_map(|(k, &on)| on.then_some(*k))
        .collect();
    if enabled.is_empty() {
        return triple.clone();
    }
    let kind = enabled[rng.gen_range(0..enabled.len())];
    let p = map_action(action, &cfg.ranges);
    let (h, w) = triple.konst.dim();
    let n = triple.time.dim().1;

    match kind {
        AugKind::Noise => {
            let time = add_noise(&triple.time, p.sigma, rng);
            let freq = add_noise(&triple.freq, p.sigma, rng);
            let konst = if p.sigma == 0.0 {
                triple.konst.clone()
            } else {
                let mut g = triple.konst.clone();
                for v in g.iter_mut() {
                    let e: f64 = StandardNormal.sample(rng);
                    *v = (*v + (p.sigma * e) as f32).max(0.0);
                }
                g
            };
            DomainTriple { time, freq, konst }
        }
        AugKind::Shift => {
            let dfrac = if p.shift_frac == 0.0 {
                0.0
            } else {
                rng.gen_range(-1.0f64..=1.0) * p.shift_frac
            };
            let dt = (dfrac * n as f64).round() as isize;
            let dpx_r = (dfrac * h as f64).round() as isize;
            let dpx_c = (dfrac * w as f64).round() as isize;
            DomainTriple {
                time: time_shift(&triple.time, dt),
                freq: time_shift(&triple.freq, dt),
                konst: roll_grid(&triple.konst, dpx_r, dpx_c),
            }
        }
        AugKind::Scale => {
            let alpha = if p.scale_lo == p.scale_hi {
                p.scale_lo
            } else {
                rng.gen_range(p.scale_lo..=p.scale_hi)
            };
            DomainTriple {
                time: scale(&triple.time, alpha),
                freq: scale(&triple.freq, alpha),
                konst: scale(&triple.konst, alpha),
            }
        }
        AugKind::Dropout => {
            let time = random_dropout(&triple.time, p.dropout_p, rng);
            let freq = random_dropout(&triple.freq, p.dropout_p, rng);
            let konst = if p.dropout_p == 0.0 {
                triple.konst.clone()
            } else {
                let mut g = triple.konst.clone();
                for v in g.iter_mut() {
                    if rng.gen::<f64>() < p.dropout_p {
                        *v = 0.0;
                    }
                }
                g
            };
            DomainTriple { time, freq, konst }
        }
        AugKind::Interpolate => {
            let gamma = if p.gamma_lo == p.gamma_hi {
                p.gamma_lo
            } else {
                rng.gen_range(p.gamma_lo..=p.gamma_hi)
            };
            if gamma == 1.0 {
                return triple.clone();
            }
            let hh = ((gamma * h as f64).round() as usize).max(2);
            let ww = ((gamma * w as f64).round() as usize).max(2);
            let down = resize_grid(&triple.konst, hh, ww);
            DomainTriple {
                // the frame-length contract makes these infallible for γ in range
                time: interpolate(&triple.time, gamma).expect("gamma within configured range"),
                freq: interpolate(&triple.freq, gamma).expect("gamma within configured range"),
                konst: resize_grid(&down, h, w),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{to_triple, ConstellationSpec, FreqRepr};
    use crate::sigdata::{generate_frame, ChannelParams, FrameRng, GenConfig, Modulation};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_x(n: usize, seed: u64) -> Array2<f32> {
        let mut r = rng(seed);
        Array2::from_shape_fn((2, n), |_| r.gen_range(-1.0f32..1.0))
    }

    fn random_triple(seed: u64) -> DomainTriple {
        let cfg = GenConfig::default();
        let ch = ChannelParams { snr_db: Some(12.0), ..ChannelParams::default() };
        let mut fr = FrameRng::new(seed, 0);
        let f = generate_frame(Modulation::Qam16, 128, &cfg, &ch, &mut fr).unwrap();
        let spec = ConstellationSpec { height: 32, width: 32, ..ConstellationSpec::default() };
        to_triple(&f, FreqRepr::MagPhase, &spec)
    }

    #[test]
    fn zero_parameters_are_bit_exact_identities() {
        let x = random_x(128, 1);
        assert_eq!(add_noise(&x, 0.0, &mut rng(0)), x);
        assert_eq!(time_shift(&x, 0), x);
        assert_eq!(time_shift(&x, 128), x);
        assert_eq!(scale(&x, 1.0), x);
        assert_eq!(random_dropout(&x, 0.0, &mut rng(0)), x);
        assert_eq!(interpolate(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let x = Array2::<f32>::zeros((2, 128));
        let mut r = rng(5);
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for _ in 0..1000 {
            let y = add_noise(&x, 0.1, &mut r);
            for &v in y.iter() {
                acc += (v as f64) * (v as f64);
                count += 1;
            }
        }
        let var = acc / count as f64;
        assert!((var - 0.01).abs() < 0.001, "sample variance {var}");
    }

    #[test]
    fn shift_preserves_column_multiset() {
        let x = random_x(64, 2);
        let y = time_shift(&x, 17);
        let cols = |a: &Array2<f32>| {
            let mut v: Vec<(u32, u32)> = (0..64).map(|m| (a[[0, m]].to_bits(), a[[1, m]].to_bits())).collect();
            v.sort_unstable();
            v
        };
        assert_eq!(cols(&x), cols(&y));
    }

    #[test]
    fn scale_composes_multiplicatively() {
        let x = random_x(32, 3);
        let a = scale(&scale(&x, 1.3), 0.7);
        let b = scale(&x, 1.3 * 0.7);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-7);
        }
        assert!((scale(&x, 2.0)[[0, 5]] - 2.0 * x[[0, 5]]).abs() < 1e-7);
    }

    #[test]
    fn dropout_column_count_concentrates() {
        let x = Array2::<f32>::from_elem((2, 128), 1.0);
        let mut r = rng(7);
        let trials = 2000;
        let mut total = 0usize;
        for _ in 0..trials {
            let y = random_dropout(&x, 0.3, &mut r);
            for m in 0..128 {
                let zeroed = y[[0, m]] == 0.0 && y[[1, m]] == 0.0;
                let half = (y[[0, m]] == 0.0) != (y[[1, m]] == 0.0);
                assert!(!half, "columns must drop jointly");
                if zeroed {
                    total += 1;
                }
            }
        }
        let mean = total as f64 / trials as f64;
        let expected = 128.0 * 0.3;
        let sigma_mean = (128.0 * 0.3 * 0.7f64).sqrt() / (trials as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * sigma_mean,
            "mean {mean:.3} vs {expected} ± {:.3}",
            3.0 * sigma_mean
        );
    }

    #[test]
    fn dropout_leaves_surviving_columns_untouched() {
        let x = random_x(64, 11);
        let y = random_dropout(&x, 0.4, &mut rng(13));
        for m in 0..64 {
            if y[[0, m]] != 0.0 || y[[1, m]] != 0.0 {
                assert_eq!(y[[0, m]].to_bits(), x[[0, m]].to_bits());
                assert_eq!(y[[1, m]].to_bits(), x[[1, m]].to_bits());
            }
        }
    }

    #[test]
    fn interpolate_keeps_constants_and_length() {
        let x = Array2::<f32>::from_elem((2, 100), 0.37);
        for gamma in [0.8, 0.93, 1.17, 1.25] {
            let y = interpolate(&x, gamma).unwrap();
            assert_eq!(y.dim(), (2, 100));
            for &v in y.iter() {
                assert!((v - 0.37).abs() < 1e-6);
            }
        }
        assert!(interpolate(&random_x(8, 0), 0.1).is_err());
    }

    #[test]
    fn action_mapping_hits_identity_and_extremes() {
        let ranges = AugRanges::default();
        let z = map_action(&AugAction::zero(), &ranges);
        assert_eq!(z.sigma, 0.0);
        assert_eq!(z.shift_frac, 0.0);
        assert_eq!((z.scale_lo, z.scale_hi), (1.0, 1.0));
        assert_eq!(z.dropout_p, 0.0);
        assert_eq!((z.gamma_lo, z.gamma_hi), (1.0, 1.0));

        let one = map_action(&AugAction::uniform(1.0), &ranges);
        assert_eq!(one.sigma, 0.2);
        assert_eq!(one.shift_frac, 0.25);
        assert_eq!((one.scale_lo, one.scale_hi), (0.5, 1.5));
        assert!((one.dropout_p - 0.3).abs() < 1e-12);
        assert_eq!((one.gamma_lo, one.gamma_hi), (0.8, 1.25));
    }

    #[test]
    fn action_mapping_is_monotone() {
        let ranges = AugRanges::default();
        let lo = map_action(&AugAction::uniform(0.3), &ranges);
        let hi = map_action(&AugAction::uniform(0.8), &ranges);
        assert!(lo.sigma <= hi.sigma);
        assert!(lo.shift_frac <= hi.shift_frac);
        assert!(lo.scale_lo >= hi.scale_lo && lo.scale_hi <= hi.scale_hi);
        assert!(lo.dropout_p <= hi.dropout_p);
        assert!(lo.gamma_lo >= hi.gamma_lo && lo.gamma_hi <= hi.gamma_hi);
    }

    #[test]
    fn zero_action_triple_is_bit_exact() {
        let t = random_triple(21);
        let cfg = AugConfig::default();
        for seed in 0..20u64 {
            let out = augment_triple(&t, &AugAction::zero(), &cfg, &mut rng(seed));
            assert_eq!(out, t, "seed {seed}");
        }
    }

    #[test]
    fn augment_triple_is_seed_deterministic() {
        let t = random_triple(4);
        let cfg = AugConfig::default();
        let action = AugAction([0.7, 0.4, 0.9, 0.2, 0.6]);
        let a = augment_triple(&t, &action, &cfg, &mut rng(99));
        let b = augment_triple(&t, &action, &cfg, &mut rng(99));
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn augmented_triples_keep_shape_and_nonnegative_grid(
            seed in 0u64..1000, a1 in 0.0f64..1.0, a2 in 0.0f64..1.0,
            a3 in 0.0f64..1.0, a4 in 0.0f64..1.0, a5 in 0.0f64..1.0,
        ) {
            let t = random_triple(2);
            let cfg = AugConfig::default();
            let action = AugAction([a1, a2, a3, a4, a5]);
            let out = augment_triple(&t, &action, &cfg, &mut rng(seed));
            prop_assert_eq!(out.time.dim(), t.time.dim());
            prop_assert_eq!(out.freq.dim(), t.freq.dim());
            prop_assert_eq!(out.konst.dim(), t.konst.dim());
            for &v in out.konst.iter() {
                prop_assert!(v >= 0.0);
            }
        }
    }
}
