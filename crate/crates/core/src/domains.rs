//! Representation-domain transforms: a time-domain frame maps to its
//! magnitude/phase spectrum and to a binned constellation density grid,
//! packaged together as a [`DomainTriple`].

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::sigdata::SignalFrame;

/// Representation-domain tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Time,
    Freq,
    Const,
}

impl Domain {
    pub fn letter(&self) -> &'static str {
        match self {
            Domain::Time => "T",
            Domain::Freq => "F",
            Domain::Const => "C",
        }
    }
}

/// The three views of one frame: time (2×N), frequency (2×N), constellation
/// (H×W density grid, single channel).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTriple {
    pub time: Array2<f32>,
    pub freq: Array2<f32>,
    pub konst: Array2<f32>,
}

/// Which 2×N frequency tensor to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FreqRepr {
    /// Row 0 = |x[k]|, row 1 = ∠x[k].
    #[default]
    MagPhase,
    /// Row 0 = Re(x[k]), row 1 = Im(x[k]).
    ReIm,
}

/// Constellation binning normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConstNorm {
    /// Raw hit counts.
    Count,
    /// log1p(count) scaled so the densest bin is 1.
    #[default]
    Log1pMax,
    /// count / max(count).
    MaxOne,
}

/// Constellation grid parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstellationSpec {
    pub height: usize,
    pub width: usize,
    /// Symmetric axis range [−r, r] after per-frame RMS normalization.
    pub extent: f64,
    pub normalize: ConstNorm,
}

impl Default for ConstellationSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, extent: 3.0, normalize: ConstNorm::Log1pMax }
    }
}

fn dft_complex(frame: &SignalFrame) -> Vec<Complex64> {
    let n = frame.len();
    let mut buf: Vec<Complex64> = (0..n)
        .map(|m| Complex64::new(frame.iq[[0, m]] as f64, frame.iq[[1, m]] as f64))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf
}

/// DFT of x[n] = I[n] + jQ[n] over k = 0..N−1, returned as a 2×N tensor in
/// the requested representation. Phase lands in (−π, π].
pub fn frequency_view(frame: &SignalFrame, repr: FreqRepr) -> Array2<f32> {
    let spec = dft_complex(frame);
    let n = spec.len();
    let mut out = Array2::<f32>::zeros((2, n));
    match repr {
        FreqRepr::MagPhase => {
            for (k, v) in spec.iter().enumerate() {
                out[[0, k]] = v.norm() as f32;
                let mut ph = v.im.atan2(v.re);
                if ph <= -std::f64::consts::PI {
                    ph = std::f64::consts::PI;
                }
                out[[1, k]] = ph as f32;
            }
        }
        FreqRepr::ReIm => {
            for (k, v) in spec.iter().enumerate() {
                out[[0, k]] = v.re as f32;
                out[[1, k]] = v.im as f32;
            }
        }
    }
    out
}

/// Magnitude/phase spectrum of a frame.
pub fn to_frequency(frame: &SignalFrame) -> Array2<f32> {
    frequency_view(frame, FreqRepr::MagPhase)
}

/// Raw hit counts of RMS-normalized (I, Q) samples on the grid; out-of-range
/// samples clip to the edge bins, so counts always sum to N.
pub fn constellation_counts(frame: &SignalFrame, spec: &ConstellationSpec) -> Array2<f32> {
    let n = frame.len();
    let mut ms = 0.0f64;
    for m in 0..n {
        let i = frame.iq[[0, m]] as f64;
        let q = frame.iq[[1, m]] as f64;
        ms += i * i + q * q;
    }
    let rms = (ms / n as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };

    let mut grid = Array2::<f32>::zeros((spec.height, spec.width));
    let r = spec.extent;
    let bin = |v: f64, count: usize| -> usize {
        let u = (v + r) / (2.0 * r);
        let idx = (u * count as f64).floor() as isize;
        idx.clamp(0, count as isize - 1) as usize
    };
    for m in 0..n {
        let i = frame.iq[[0, m]] as f64 * scale;
        let q = frame.iq[[1, m]] as f64 * scale;
        let col = bin(i, spec.width);
        let row = bin(q, spec.height);
        grid[[row, col]] += 1.0;
    }
    grid
}

/// Heatmap constellation: bin, then normalize. Normalization is monotone in
/// the raw counts for every mode.
pub fn to_constellation(frame: &SignalFrame, spec: &ConstellationSpec) -> Array2<f32> {
    let mut grid = constellation_counts(frame, spec);
    match spec.normalize {
        ConstNorm::Count => {}
        ConstNorm::Log1pMax => {
            grid.mapv_inplace(|c| c.ln_1p());
            let max = grid.iter().cloned().fold(0.0f32, f32::max);
            if max > 0.0 {
                grid.mapv_inplace(|c| c / max);
            }
        }
        ConstNorm::MaxOne => {
            let max = grid.iter().cloned().fold(0.0f32, f32::max);
            if max > 0.0 {
                grid.mapv_inplace(|c| c / max);
            }
        }
    }
    grid
}

/// Build all three views of a frame.
pub fn to_triple(frame: &SignalFrame, repr: FreqRepr, spec: &ConstellationSpec) -> DomainTriple {
    DomainTriple {
        time: frame.iq.clone(),
        freq: frequency_view(frame, repr),
        konst: to_constellation(frame, spec),
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigdata::{generate_frame, ChannelParams, FrameRng, GenConfig, Modulation};
    use ndarray::Array2;

    fn frame_from_iq(iq: Array2<f32>) -> SignalFrame {
        SignalFrame { iq, label: 0, snr_db: 0 }
    }

    fn random_frame(n_len: usize, stream: u64) -> SignalFrame {
        let cfg = GenConfig::default();
        let ch = ChannelParams { snr_db: Some(10.0), ..ChannelParams::default() };
        let mut rng = FrameRng::new(17, stream);
        generate_frame(Modulation::Qam16, n_len, &cfg, &ch, &mut rng).unwrap()
    }

    #[test]
    fn impulse_spectrum_is_flat() {
        let mut iq = Array2::<f32>::zeros((2, 16));
        iq[[0, 0]] = 1.0;
        let f = frame_from_iq(iq);
        let spec = to_frequency(&f);
        for k in 0..16 {
            assert!((spec[[0, k]] - 1.0).abs() < 1e-6);
            assert!(spec[[1, k]].abs() < 1e-6);
        }
    }

    #[test]
    fn dc_signal_concentrates_at_bin_zero() {
        let mut iq = Array2::<f32>::zeros((2, 16));
        for m in 0..16 {
            iq[[0, m]] = 1.0;
        }
        let spec = to_frequency(&frame_from_iq(iq));
        assert!((spec[[0, 0]] - 16.0).abs() < 1e-5);
        for k in 1..16 {
            assert!(spec[[0, k]].abs() < 1e-5, "bin {k} = {}", spec[[0, k]]);
        }
    }

    #[test]
    fn fft_matches_direct_dft_oracle() {
        for &n in &[16usize, 64, 128] {
            for s in 0..10u64 {
                let f = random_frame(n, s);
                let spec = to_frequency(&f);
                let want = oracle::direct_dft(&f);
                let max_mag = want.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
                for (k, w) in want.iter().enumerate() {
                    let got = Complex64::from_polar(spec[[0, k]] as f64, spec[[1, k]] as f64);
                    let err = (got - w).norm();
                    let tol = 1e-5 * w.norm().max(1e-9 * max_mag);
                    assert!(err <= tol, "n={n} s={s} bin {k}: err {err:.3e} tol {tol:.3e}");
                }
            }
        }
    }

    #[test]
    fn parseval_identity_holds() {
        for s in 0..20u64 {
            let f = random_frame(128, s);
            let time_e: f64 = f.iq.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let spec = to_frequency(&f);
            let freq_e: f64 = (0..128).map(|k| (spec[[0, k]] as f64).powi(2)).sum::<f64>() / 128.0;
            assert!(
                (time_e - freq_e).abs() <= 1e-5 * time_e.abs(),
                "stream {s}: {time_e} vs {freq_e}"
            );
        }
    }

    #[test]
    fn phase_row_stays_in_half_open_interval() {
        for s in 0..20u64 {
            let f = random_frame(64, s);
            let spec = to_frequency(&f);
            for k in 0..64 {
                let ph = spec[[1, k]];
                assert!(ph > -std::f32::consts::PI - 1e-7 && ph <= std::f32::consts::PI + 1e-7);
                assert!(spec[[0, k]] >= 0.0);
            }
        }
    }

    #[test]
    fn point_mass_lands_in_center_bin() {
        let iq = Array2::<f32>::zeros((2, 32));
        let f = frame_from_iq(iq);
        let spec = ConstellationSpec { normalize: ConstNorm::Count, ..ConstellationSpec::default() };
        let grid = to_constellation(&f, &spec);
        let total: f32 = grid.sum();
        assert_eq!(total, 32.0);
        // zero-power frame: RMS guard keeps samples at the origin
        assert_eq!(grid[[32, 32]], 32.0);
    }

    #[test]
    fn counts_are_conserved_under_clipping() {
        for s in 0..10u64 {
            let f = random_frame(128, s);
            let spec = ConstellationSpec {
                height: 16,
                width: 16,
                extent: 0.5, // tiny extent forces heavy clipping
                normalize: ConstNorm::Count,
            };
            let grid = to_constellation(&f, &spec);
            assert_eq!(grid.sum(), 128.0);
        }
    }

    #[test]
    fn swapping_iq_rows_transposes_the_grid() {
        for s in 0..10u64 {
            let f = random_frame(128, s);
            let mut swapped = f.clone();
            for m in 0..128 {
                swapped.iq[[0, m]] = f.iq[[1, m]];
                swapped.iq[[1, m]] = f.iq[[0, m]];
            }
            let spec = ConstellationSpec { normalize: ConstNorm::Count, ..ConstellationSpec::default() };
            let a = to_constellation(&f, &spec);
            let b = to_constellation(&swapped, &spec);
            assert_eq!(a, b.t().to_owned(), "stream {s}");
        }
    }

    #[test]
    fn normalization_is_monotone() {
        let f = random_frame(128, 3);
        let spec_raw = ConstellationSpec { normalize: ConstNorm::Count, ..ConstellationSpec::default() };
        // sort bins by raw count; normalized values must be non-decreasing
        for mode in [ConstNorm::Log1pMax, ConstNorm::MaxOne] {
            let spec = ConstellationSpec { normalize: mode, ..ConstellationSpec::default() };
            let raw = to_constellation(&f, &spec_raw);
            let norm = to_constellation(&f, &spec);
            let mut pairs: Vec<(f32, f32)> = raw.iter().cloned().zip(norm.iter().cloned()).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in pairs.windows(2) {
                assert!(w[1].1 >= w[0].1 - 1e-7);
            }
        }
    }

    #[test]
    fn triple_time_view_is_identity() {
        let f = random_frame(128, 9);
        let t = to_triple(&f, FreqRepr::MagPhase, &ConstellationSpec::default());
        assert_eq!(t.time, f.iq);
        assert_eq!(t.freq, to_frequency(&f));
        let t2 = to_triple(&f, FreqRepr::MagPhase, &ConstellationSpec::default());
        assert_eq!(t, t2);
    }

    #[test]
    fn reim_variant_returns_cartesian_rows() {
        let f = random_frame(64, 4);
        let reim = frequency_view(&f, FreqRepr::ReIm);
        let want = oracle::direct_dft(&f);
        for k in 0..64 {
            assert!((reim[[0, k]] as f64 - want[k].re).abs() < 1e-4);
            assert!((reim[[1, k]] as f64 - want[k].im).abs() < 1e-4);
        }
    }
}
