//! Baseband waveform synthesis: symbol mapping, pulse shaping, channel
//! impairments (CFO, phase, impulse response, AWGN).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{ChannelParams, Dataset, SignalFrame};
use crate::error::{Error, Result};

/// Supported digital modulation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
    Qam64,
    Pam4,
    Cpfsk,
    Fsk2,
}

impl Modulation {
    pub const ALL: [Modulation; 8] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Psk8,
        Modulation::Qam16,
        Modulation::Qam64,
        Modulation::Pam4,
        Modulation::Cpfsk,
        Modulation::Fsk2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Modulation::Bpsk => "bpsk",
            Modulation::Qpsk => "qpsk",
            Modulation::Psk8 => "8psk",
            Modulation::Qam16 => "16qam",
            Modulation::Qam64 => "64qam",
            Modulation::Pam4 => "pam4",
            Modulation::Cpfsk => "cpfsk",
            Modulation::Fsk2 => "2fsk",
        }
    }

    fn is_linear(&self) -> bool {
        !matches!(self, Modulation::Cpfsk | Modulation::Fsk2)
    }

    /// Unit-average-energy symbol alphabet for linear schemes.
    fn alphabet(&self) -> Vec<Complex64> {
        match self {
            Modulation::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            Modulation::Qpsk => {
                let a = 1.0 / 2f64.sqrt();
                vec![
                    Complex64::new(a, a),
                    Complex64::new(-a, a),
                    Complex64::new(-a, -a),
                    Complex64::new(a, -a),
                ]
            }
            Modulation::Psk8 => (0..8)
                .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / 8.0))
                .collect(),
            Modulation::Qam16 => square_qam(&[-3.0, -1.0, 1.0, 3.0]),
            Modulation::Qam64 => square_qam(&[-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0]),
            Modulation::Pam4 => {
                let norm = 5f64.sqrt();
                [-3.0, -1.0, 1.0, 3.0]
                    .iter()
                    .map(|&a| Complex64::new(a / norm, 0.0))
                    .collect()
            }
            _ => unreachable!("frequency schemes have no linear alphabet"),
        }
    }

    /// Modulation index for the phase-continuous frequency schemes.
    fn mod_index(&self) -> f64 {
        match self {
            Modulation::Cpfsk => 0.5,
            Modulation::Fsk2 => 1.0,
            _ => unreachable!(),
        }
    }
}

fn square_qam(levels: &[f64]) -> Vec<Complex64> {
    let mean_e: f64 = {
        let per_axis: f64 = levels.iter().map(|l| l * l).sum::<f64>() / levels.len() as f64;
        2.0 * per_axis
    };
    let norm = mean_e.sqrt();
    let mut pts = Vec::with_capacity(levels.len() * levels.len());
    for &re in levels {
        for &im in levels {
            pts.push(Complex64::new(re / norm, im / norm));
        }
    }
    pts
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Modulation::ALL
            .iter()
            .find(|m| m.name() == lower)
            .copied()
            .ok_or_else(|| Error::UnknownModulation(s.to_string()))
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pulse shaping for the linear schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shaping {
    /// Root-raised-cosine with the given roll-off, spanning ±4 symbols.
    Rrc { rolloff: f64 },
    /// Rectangular (zero-order hold).
    Rect,
}

impl Default for Shaping {
    fn default() -> Self {
        Shaping::Rrc { rolloff: 0.35 }
    }
}

/// Generator-level knobs shared by every frame.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub oversampling: usize,
    pub shaping: Shaping,
    /// CFO draw range in cycles/sample for dataset generation.
    pub cfo_range: (f64, f64),
    /// Initial-phase draw range in radians for dataset generation.
    pub phase_range: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            oversampling: 8,
            shaping: Shaping::default(),
            // a quarter-cycle of drift across a 128-sample frame; larger
            // offsets fully smear the angular constellation structure
            cfo_range: (-0.0025, 0.0025),
            phase_range: (0.0, 2.0 * PI),
        }
    }
}

/// Independent seed streams for one frame: symbol data, channel draws and
/// noise never share a stream, so a frame can be regenerated without noise
/// to recover the clean signal component.
pub struct FrameRng {
    symbols: ChaCha8Rng,
    channel: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl FrameRng {
    /// Streams are derived from `(seed, frame_index)`.
    pub fn new(seed: u64, frame_index: u64) -> Self {
        let mk = |salt: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            r.set_stream(frame_index);
            r
        };
        Self { symbols: mk(1), channel: mk(2), noise: mk(3) }
    }

    pub(crate) fn draw_channel(&mut self, cfg: &GenConfig) -> (f64, f64) {
        let cfo = if cfg.cfo_range.0 == cfg.cfo_range.1 {
            cfg.cfo_range.0
        } else {
            Uniform::new(cfg.cfo_range.0, cfg.cfo_range.1).sample(&mut self.channel)
        };
        let phase = if cfg.phase_range.0 == cfg.phase_range.1 {
            cfg.phase_range.0
        } else {
            Uniform::new(cfg.phase_range.0, cfg.phase_range.1).sample(&mut self.channel)
        };
        (cfo, phase)
    }
}

/// Root-raised-cosine impulse response over `span` symbols each side.
fn rrc_taps(rolloff: f64, os: usize, span: usize) -> Vec<f64> {
    let half = (span * os) as isize;
    let t_sym = os as f64;
    let beta = rolloff;
    let mut taps = Vec::with_capacity((2 * half + 1) as usize);
    for m in -half..=half {
        let t = m as f64 / t_sym; // time in symbol periods
        let tap = if t == 0.0 {
            1.0 + beta * (4.0 / PI - 1.0)
        } else if beta > 0.0 && (t.abs() - 1.0 / (4.0 * beta)).abs() < 1e-9 {
            (beta / 2f64.sqrt())
                * ((1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin()
                    + (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos())
        } else {
            let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
            let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
            num / den
        };
        taps.push(tap);
    }
    // unit-energy normalization
    let energy: f64 = taps.iter().map(|x| x * x).sum();
    let scale = 1.0 / energy.sqrt();
    taps.iter().map(|x| x * scale).collect()
}

fn linear_baseband(
    scheme: Modulation,
    n: usize,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Complex64> {
    let os = cfg.oversampling;
    match cfg.shaping {
        Shaping::Rect => {
            let alphabet = scheme.alphabet();
            let nsym = n.div_ceil(os);
            let mut out = Vec::with_capacity(n);
            for _ in 0..nsym {
                let sym = alphabet[rng.gen_range(0..alphabet.len())];
                for _ in 0..os {
                    if out.len() < n {
                        out.push(sym);
                    }
                }
            }
            out
        }
        Shaping::Rrc { rolloff } => {
            let span = 4usize;
            let alphabet = scheme.alphabet();
            // lead-in/out symbols cover the filter transient
            let nsym = n.div_ceil(os) + 2 * span;
            let taps = rrc_taps(rolloff, os, span);
            let half = span * os;
            let mut impulse = vec![Complex64::new(0.0, 0.0); nsym * os];
            for k in 0..nsym {
                impulse[k * os] = alphabet[rng.gen_range(0..alphabet.len())];
            }
            let mut out = Vec::with_capacity(n);
            let start = span * os; // skip the lead-in transient
            for m in start..start + n {
                let mut acc = Complex64::new(0.0, 0.0);
                for (f, &tap) in taps.iter().enumerate() {
                    let src = m as isize + half as isize - f as isize;
                    if src >= 0 && (src as usize) < impulse.len() {
                        acc += impulse[src as usize] * tap;
                    }
                }
                out.push(acc);
            }
            out
        }
    }
}

fn frequency_baseband(
    scheme: Modulation,
    n: usize,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Complex64> {
    let os = cfg.oversampling;
    let h = scheme.mod_index();
    let nsym = n.div_ceil(os);
    let mut out = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    for _ in 0..nsym {
        let d = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let dphi = PI * h * d / os as f64;
        for _ in 0..os {
            if out.len() < n {
                out.push(Complex64::from_polar(1.0, phase));
                phase += dphi;
            }
        }
    }
    out
}

/// Generate one frame: symbols → pulse shaping → channel convolution →
/// CFO/phase rotation → unit-power normalization → AWGN.
pub fn generate_frame(
    scheme: Modulation,
    n: usize,
    cfg: &GenConfig,
    channel: &ChannelParams,
    rng: &mut FrameRng,
) -> Result<SignalFrame> {
    channel.validate()?;
    if n < 8 || n < cfg.oversampling {
        return Err(Error::InvalidParam(format!(
            "frame length {n} shorter than one symbol at oversampling {}",
            cfg.oversampling
        )));
    }
    let mut s = if scheme.is_linear() {
        linear_baseband(scheme, n, cfg, &mut rng.symbols)
    } else {
        frequency_baseband(scheme, n, cfg, &mut rng.symbols)
    };

    // channel impulse response (same-size convolution, first tap aligned)
    if channel.impulse_response.len() > 1 || channel.impulse_response[0] != Complex64::new(1.0, 0.0) {
        let taps = &channel.impulse_response;
        let mut conv = vec![Complex64::new(0.0, 0.0); n];
        for (m, c) in conv.iter_mut().enumerate() {
            for (t, &tap) in taps.iter().enumerate() {
                if m >= t {
                    *c += s[m - t] * tap;
                }
            }
        }
        s = conv;
    }

    // carrier frequency offset and initial phase
    if channel.cfo_hz_norm != 0.0 || channel.phase0_rad != 0.0 {
        for (m, v) in s.iter_mut().enumerate() {
            let ang = 2.0 * PI * channel.cfo_hz_norm * m as f64 + channel.phase0_rad;
            *v *= Complex64::from_polar(1.0, ang);
        }
    }

    // normalize mean power to 1 before the noise stage
    let power: f64 = s.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
    if power > 0.0 {
        let scale = 1.0 / power.sqrt();
        for v in s.iter_mut() {
            *v *= scale;
        }
    }

    let snr_tag = if let Some(snr_db) = channel.snr_db {
        let noise_var = 10f64.powf(-snr_db / 10.0);
        let std = (noise_var / 2.0).sqrt();
        for v in s.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng.noise);
            let im: f64 = StandardNormal.sample(&mut rng.noise);
            *v += Complex64::new(re * std, im * std);
        }
        snr_db.round() as i16
    } else {
        0
    };

    let mut iq = Array2::<f32>::zeros((2, n));
    for (m, v) in s.iter().enumerate() {
        iq[[0, m]] = v.re as f32;
        iq[[1, m]] = v.im as f32;
    }
    Ok(SignalFrame { iq, label: 0, snr_db: snr_tag })
}

/// Generate a dataset laid out class-major, then SNR, then frame index.
/// Deterministic for a fixed seed; each frame draws from its own streams.
pub fn generate_dataset(
    classes: &[Modulation],
    frames_per_class_per_snr: usize,
    snr_list: &[i16],
    n: usize,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Dataset> {
    if classes.is_empty() || snr_list.is_empty() {
        return Err(Error::InvalidParam("classes and snr_list must be non-empty".into()));
    }
    if frames_per_class_per_snr == 0 {
        return Err(Error::InvalidParam("frames_per_class_per_snr must be ≥ 1".into()));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for c in classes {
            if !seen.insert(*c) {
                return Err(Error::InvalidParam(format!("duplicate class `{c}`")));
            }
        }
    }
    let names = classes.iter().map(|m| m.name().to_string()).collect();
    let provenance = format!(
        "gen seed={seed} n={n} per={frames_per_class_per_snr} snr={snr_list:?} classes={:?}",
        classes.iter().map(|c| c.name()).collect::<Vec<_>>()
    );
    let mut ds = Dataset::new(names, n, provenance);
    let mut frame_index = 0u64;
    for (label, &scheme) in classes.iter().enumerate() {
        for &snr in snr_list {
            for _ in 0..frames_per_class_per_snr {
                let mut rng = FrameRng::new(seed, frame_index);
                let (cfo, phase) = rng.draw_channel(cfg);
                let channel = ChannelParams {
                    cfo_hz_norm: cfo,
                    phase0_rad: phase,
                    impulse_response: vec![Complex64::new(1.0, 0.0)],
                    snr_db: Some(snr as f64),
                };
                let mut frame = generate_frame(scheme, n, cfg, &channel, &mut rng)?;
                frame.label = label as u16;
                frame.snr_db = snr;
                ds.push(frame)?;
                frame_index += 1;
            }
        }
    }
    Ok(ds)
}
