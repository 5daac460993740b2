//! Browser demo: generate a modulated frame, view its three representation
//! domains, drive the five augmentation intensities interactively, and run
//! k-means over the constellation points.

use std::str::FromStr;

use wasm_bindgen::prelude::*;
use wasm_bindgen::JsCast;
use web_sys::{CanvasRenderingContext2d, HtmlCanvasElement, ImageData};

use modcl::augment::{augment_triple, AugAction, AugConfig};
use modcl::clustering::{kmeans_fit, KMeansConfig};
use modcl::domains::{to_triple, ConstellationSpec, DomainTriple, FreqRepr};
use modcl::sigdata::{generate_frame, ChannelParams, FrameRng, GenConfig, Modulation, SignalFrame};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ctx(id: &str) -> Result<(HtmlCanvasElement, CanvasRenderingContext2d), JsValue> {
    let document = web_sys::window()
        .ok_or("no window")?
        .document()
        .ok_or("no document")?;
    let canvas = document
        .get_element_by_id(id)
        .ok_or_else(|| JsValue::from_str(&format!("missing canvas #{id}")))?
        .dyn_into::<HtmlCanvasElement>()?;
    let c = canvas
        .get_context("2d")?
        .ok_or("no 2d context")?
        .dyn_into::<CanvasRenderingContext2d>()?;
    Ok((canvas, c))
}

fn clear(canvas: &HtmlCanvasElement, c: &CanvasRenderingContext2d) {
    c.set_fill_style_str("#10141c");
    c.fill_rect(0.0, 0.0, canvas.width() as f64, canvas.height() as f64);
}

fn draw_rows(id: &str, rows: &Array2<f32>, colors: &[&str], y_range: Option<(f32, f32)>) -> Result<(), JsValue> {
    let (canvas, c) = ctx(id)?;
    clear(&canvas, &c);
    let (w, h) = (canvas.width() as f64, canvas.height() as f64);
    let n = rows.dim().1;
    let (lo, hi) = y_range.unwrap_or_else(|| {
        let lo = rows.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = rows.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let pad = 0.1 * (hi - lo).max(1e-6);
        (lo - pad, hi + pad)
    });
    let to_y = |v: f32| h - ((v - lo) / (hi - lo)) as f64 * h;
    c.set_stroke_style_str("#2a3242");
    c.begin_path();
    c.move_to(0.0, to_y(0.0));
    c.line_to(w, to_y(0.0));
    c.stroke();
    for (r, color) in colors.iter().enumerate().take(rows.dim().0) {
        c.set_stroke_style_str(color);
        c.set_line_width(1.5);
        c.begin_path();
        for m in 0..n {
            let x = m as f64 / (n - 1) as f64 * w;
            let y = to_y(rows[[r, m]]);
            if m == 0 {
                c.move_to(x, y);
            } else {
                c.line_to(x, y);
            }
        }
        c.stroke();
    }
    Ok(())
}

fn heat_color(v: f32) -> (u8, u8, u8) {
    // dark blue → cyan → yellow ramp
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (v * v)) as u8;
    let g = (255.0 * v.powf(0.7)) as u8;
    let b = (90.0 + 120.0 * (1.0 - v)) as u8;
    (r, g, b)
}

fn draw_grid(id: &str, grid: &Array2<f32>) -> Result<(), JsValue> {
    let (canvas, c) = ctx(id)?;
    let (gh, gw) = grid.dim();
    let (w, h) = (canvas.width() as usize, canvas.height() as usize);
    let max = grid.iter().cloned().fold(0.0f32, f32::max).max(1e-9);
    let mut pixels = vec![0u8; w * h * 4];
    for py in 0..h {
        for px in 0..w {
            // grid row 0 is the lowest Q bin: flip vertically for display
            let gy = gh - 1 - (py * gh / h).min(gh - 1);
            let gx = (px * gw / w).min(gw - 1);
            let (r, g, b) = heat_color(grid[[gy, gx]] / max);
            let o = (py * w + px) * 4;
            pixels[o] = r;
            pixels[o + 1] = g;
            pixels[o + 2] = b;
            pixels[o + 3] = 255;
        }
    }
    let data = ImageData::new_with_u8_clamped_array_and_sh(wasm_bindgen::Clamped(&pixels), w as u32, h as u32)?;
    c.put_image_data(&data, 0.0, 0.0)?;
    Ok(())
}

fn draw_triple(prefix: &str, t: &DomainTriple) -> Result<(), JsValue> {
    draw_rows(&format!("{prefix}-time"), &t.time, &["#5cc8ff", "#ffb454"], None)?;
    let n = t.freq.dim().1;
    let mut mag = Array2::<f32>::zeros((1, n));
    let mut ph = Array2::<f32>::zeros((1, n));
    for m in 0..n {
        mag[[0, m]] = t.freq[[0, m]];
        ph[[0, m]] = t.freq[[1, m]];
    }
    draw_rows(&format!("{prefix}-mag"), &mag, &["#8ef0a2"], None)?;
    draw_rows(&format!("{prefix}-phase"), &ph, &["#d9a7ff"], Some((-3.3, 3.3)))?;
    draw_grid(&format!("{prefix}-const"), &t.konst)?;
    Ok(())
}

const KMEANS_COLORS: [&str; 8] = [
    "#5cc8ff", "#ffb454", "#8ef0a2", "#ff6b8a", "#d9a7ff", "#ffe66d", "#64e0d2", "#c0c8d8",
];

/// Interactive state: one generated frame, its domain triple, and the
/// constellation binning used for display.
#[wasm_bindgen]
pub struct Demo {
    frame: SignalFrame,
    triple: DomainTriple,
    spec: ConstellationSpec,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsValue> {
        console_error_panic_hook::set_once();
        let spec = ConstellationSpec { extent: 2.0, ..ConstellationSpec::default() };
        let mut demo = Demo {
            frame: SignalFrame { iq: Array2::zeros((2, 128)), label: 0, snr_db: 0 },
            triple: DomainTriple {
                time: Array2::zeros((2, 128)),
                freq: Array2::zeros((2, 128)),
                konst: Array2::zeros((64, 64)),
            },
            spec,
        };
        demo.set_signal("qpsk", 128, 18.0, 0.002, 7)?;
        Ok(demo)
    }

    /// Regenerate the frame and redraw the original-domain row.
    pub fn set_signal(&mut self, scheme: &str, n: usize, snr_db: f64, cfo: f64, seed: u32) -> Result<(), JsValue> {
        let modulation = Modulation::from_str(scheme).map_err(|e| JsValue::from_str(&e.to_string()))?;
        let cfg = GenConfig::default();
        let channel = ChannelParams {
            cfo_hz_norm: cfo,
            phase0_rad: 0.7,
            snr_db: Some(snr_db),
            ..ChannelParams::default()
        };
        let mut rng = FrameRng::new(seed as u64, 0);
        let frame = generate_frame(modulation, n, &cfg, &channel, &mut rng)
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
        self.triple = to_triple(&frame, FreqRepr::MagPhase, &self.spec);
        self.frame = frame;
        draw_triple("orig", &self.triple)
    }

    /// Apply the five-component action and redraw the augmented row.
    pub fn set_action(&mut self, a1: f64, a2: f64, a3: f64, a4: f64, a5: f64, seed: u32) -> Result<(), JsValue> {
        let action = AugAction([a1, a2, a3, a4, a5]);
        action.validate().map_err(|e| JsValue::from_str(&e.to_string()))?;
        let cfg = AugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let augmented = augment_triple(&self.triple, &action, &cfg, &mut rng);
        draw_triple("aug", &augmented)
    }

    /// K-means over the frame's (I, Q) sample points; returns the WCSS.
    pub fn run_kmeans(&self, k: usize, seed: u32) -> Result<f64, JsValue> {
        let n = self.frame.len();
        let pts = Array2::from_shape_fn((n, 2), |(i, j)| self.frame.iq[[j, i]] as f64);
        let cfg = KMeansConfig { seed: seed as u64, ..KMeansConfig::new(k.clamp(1, 8)) };
        let fit = kmeans_fit(pts.view(), &cfg).map_err(|e| JsValue::from_str(&e.to_string()))?;

        let (canvas, c) = ctx("kmeans")?;
        clear(&canvas, &c);
        let (w, h) = (canvas.width() as f64, canvas.height() as f64);
        let r = 1.9f64;
        let sx = |v: f64| (v + r) / (2.0 * r) * w;
        let sy = |v: f64| h - (v + r) / (2.0 * r) * h;
        c.set_stroke_style_str("#2a3242");
        c.begin_path();
        c.move_to(sx(0.0), 0.0);
        c.line_to(sx(0.0), h);
        c.move_to(0.0, sy(0.0));
        c.line_to(w, sy(0.0));
        c.stroke();
        for i in 0..n {
            let color = KMEANS_COLORS[fit.assignments[i] % KMEANS_COLORS.len()];
            c.set_fill_style_str(color);
            c.begin_path();
            let _ = c.arc(sx(pts[[i, 0]]), sy(pts[[i, 1]]), 2.5, 0.0, std::f64::consts::TAU);
            c.fill();
        }
        for ci in 0..fit.centers.nrows() {
            c.set_stroke_style_str("#ffffff");
            c.set_line_width(1.8);
            c.begin_path();
            let _ = c.arc(sx(fit.centers[[ci, 0]]), sy(fit.centers[[ci, 1]]), 6.0, 0.0, std::f64::consts::TAU);
            c.stroke();
        }
        Ok(fit.wcss)
    }

    /// Supported modulation names, comma separated (for the UI dropdown).
    pub fn schemes(&self) -> String {
        Modulation::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
    }
}
