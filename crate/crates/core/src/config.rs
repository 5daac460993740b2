//! Run configuration: one flat, human-editable `key = value` file drives
//! every stage. Dotted keys map onto the nested config structs; values are
//! JSON literals with a bare-word fallback for strings. CLI `--set`
//! overrides reuse the same path machinery, so ablations are config diffs.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugConfig;
use crate::conloss::LossConfig;
use crate::domains::{ConstNorm, ConstellationSpec, FreqRepr};
use crate::encoders::{EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::heads::{FusionConfig, FusionMode};
use crate::sac::SacConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train: String,
    pub test: String,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self { train: String::new(), test: String::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodersConfig {
    pub time_kind: EncoderKind,
    pub freq_kind: EncoderKind,
    pub width_1d: usize,
    pub depth_1d: usize,
    pub width_2d: usize,
    pub depth_2d: usize,
    pub projection_hidden: usize,
}

impl Default for EncodersConfig {
    fn default() -> Self {
        Self {
            time_kind: EncoderKind::Res1d,
            freq_kind: EncoderKind::Res1d,
            width_1d: 32,
            depth_1d: 3,
            width_2d: 16,
            depth_2d: 3,
            projection_hidden: 128,
        }
    }
}

impl EncodersConfig {
    pub fn spec_1d(&self, kind: EncoderKind) -> EncoderSpec {
        EncoderSpec { kind, width: self.width_1d, depth: self.depth_1d, out_dim: crate::encoders::FEATURE_DIM }
    }

    pub fn spec_2d(&self) -> EncoderSpec {
        EncoderSpec::cnn2d(self.width_2d, self.depth_2d)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossTerms {
    pub intra: bool,
    pub inter_orig: bool,
    pub inter_aug: bool,
    pub inter_cross: bool,
    pub simclr_denominator: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self { intra: true, inter_orig: true, inter_aug: true, inter_cross: false, simclr_denominator: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSettings {
    pub mode: FusionMode,
    pub use_attention: bool,
    pub use_classifier_head: bool,
    pub dropout_rate: f64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self { mode: FusionMode::Concat, use_attention: true, use_classifier_head: true, dropout_rate: 0.5 }
    }
}

impl FusionSettings {
    pub fn to_config(&self, num_classes: usize) -> FusionConfig {
        FusionConfig {
            mode: self.mode,
            use_attention: self.use_attention,
            use_classifier_head: self.use_classifier_head,
            dropout_rate: self.dropout_rate,
            num_classes,
        }
    }
}

/// Everything a run needs; defaults carry the published hyperparameters
/// (τ=0.05, λ=0.8, lr=0.001, 30 contrastive epochs per RL step, 10 RL
/// steps, 10 fine-tune epochs) plus the desk-scale gap-filling choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub shots: usize,
    pub base_fraction: f64,
    pub batch_size: usize,
    pub support_batch: usize,
    pub probe_batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub e_cl: usize,
    pub e_rl: usize,
    pub finetune_epochs: usize,
    /// Active representation domains, a subset of the letters "tfc".
    pub domains: String,
    pub rl_enabled: bool,
    /// Fixed action intensity used for every step when RL is disabled.
    pub fixed_action: f64,
    pub freq_repr: FreqRepr,
    pub const_grid: usize,
    pub const_extent: f64,
    pub const_norm: ConstNorm,
    pub aug: AugConfig,
    pub loss_terms: LossTerms,
    pub sac: SacConfig,
    pub enc: EncodersConfig,
    pub fusion: FusionSettings,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            shots: 5,
            base_fraction: 0.9,
            batch_size: 64,
            support_batch: 8,
            probe_batch_size: 256,
            lr: 0.001,
            tau: 0.05,
            lambda: 0.8,
            e_cl: 30,
            e_rl: 10,
            finetune_epochs: 10,
            domains: "tfc".into(),
            rl_enabled: true,
            fixed_action: 0.5,
            freq_repr: FreqRepr::MagPhase,
            const_grid: 64,
            const_extent: 3.0,
            const_norm: ConstNorm::Log1pMax,
            aug: AugConfig::default(),
            loss_terms: LossTerms::default(),
            sac: SacConfig::default(),
            enc: EncodersConfig::default(),
            fusion: FusionSettings::default(),
            kmeans_restarts: 5,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-4,
            data: DataPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_cl == 0 || self.e_rl == 0 || self.finetune_epochs == 0 || self.shots == 0 {
            return Err(Error::Config("epoch/shot counts must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2 for the contrastive loss".into()));
        }
        let dom = self.active_domains();
        if dom.is_empty() {
            return Err(Error::Config(format!("domains `{}` activates nothing (use letters t/f/c)", self.domains)));
        }
        if !(0.0..=1.0).contains(&self.fixed_action) {
            return Err(Error::Config("fixed_action must be in [0,1]".into()));
        }
        if self.const_grid < 8 {
            return Err(Error::Config("const_grid must be ≥ 8".into()));
        }
        if self.const_extent <= 0.0 {
            return Err(Error::Config("const_extent must be > 0".into()));
        }
        self.loss_config().validate()?;
        self.sac.validate()?;
        Ok(())
    }

    /// Ordered active domains parsed from the `domains` string.
    pub fn active_domains(&self) -> Vec<crate::domains::Domain> {
        use crate::domains::Domain;
        let lower = self.domains.to_ascii_lowercase();
        let mut out = Vec::new();
        if lower.contains('t') {
            out.push(Domain::Time);
        }
        if lower.contains('f') {
            out.push(Domain::Freq);
        }
        if lower.contains('c') {
            out.push(Domain::Const);
        }
        out
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.lambda,
            intra: self.loss_terms.intra,
            inter_orig: self.loss_terms.inter_orig,
            inter_aug: self.loss_terms.inter_aug,
            inter_cross: self.loss_terms.inter_cross,
            simclr_denominator: self.loss_terms.simclr_denominator,
        }
    }

    pub fn constellation_spec(&self) -> ConstellationSpec {
        ConstellationSpec {
            height: self.const_grid,
            width: self.const_grid,
            extent: self.const_extent,
            normalize: self.const_norm,
        }
    }
}

fn flatten_value(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_value(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Render a config as sorted flat `key = value` lines.
pub fn to_flat_string(cfg: &RunConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    let mut pairs = Vec::new();
    flatten_value("", &v, &mut pairs);
    pairs.sort();
    let mut s = String::new();
    for (k, val) in pairs {
        s.push_str(&k);
        s.push_str(" = ");
        s.push_str(&val);
        s.push('\n');
    }
    s
}

fn set_path(root: &mut Value, path: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            match map.get(*part) {
                None => return Err(Error::Config(format!("unknown config key `{path}`"))),
                Some(Value::Object(_)) => {
                    return Err(Error::Config(format!("`{path}` is a section, not a value")));
                }
                Some(_) => {
                    map.insert((*part).to_string(), new);
                    return Ok(());
                }
            }
        }
        cur = map
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    }
    unreachable!("empty key path");
}

fn parse_value(raw: &str) -> Value {
    let trimmed = raw.trim();
    serde_json::from_str::<Value>(trimmed).unwrap_or_else(|_| Value::String(trimmed.to_string()))
}

/// Apply one `key = value` (or `key=value`) assignment.
fn apply_line(root: &mut Value, line: &str) -> Result<()> {
    let (key, val) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
    set_path(root, key.trim(), parse_value(val))
}

/// Parse a flat config file body on top of the defaults.
pub fn parse_flat(text: &str) -> Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        apply_line(&mut root, line).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply `--set key=value` overrides on top of an existing config.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut root = serde_json::to_value(cfg)?;
    for kv in overrides {
        apply_line(&mut root, kv)?;
    }
    let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_format() {
        let cfg = RunConfig::default();
        let text = to_flat_string(&cfg);
        let back = parse_flat(&text).unwrap();
        assert_eq!(serde_json::to_value(&cfg).unwrap(), serde_json::to_value(&back).unwrap());
    }

    #[test]
    fn defaults_carry_published_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.tau, 0.05);
        assert_eq!(cfg.lambda, 0.8);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.e_cl, 30);
        assert_eq!(cfg.e_rl, 10);
        assert_eq!(cfg.finetune_epochs, 10);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let cfg = RunConfig::default();
        let out = apply_overrides(&cfg, &["lambda=1.0".into(), "sac.gamma = 0.5".into()]).unwrap();
        assert_eq!(out.lambda, 1.0);
        assert_eq!(out.sac.gamma, 0.5);
        assert!(apply_overrides(&cfg, &["lambada=1.0".into()]).is_err());
        assert!(apply_overrides(&cfg, &["sac=1".into()]).is_err());
    }

    #[test]
    fn flat_file_accepts_comments_and_bare_words() {
        let text = "# a comment\n\ndomains = tf\nenc.time_kind = cnn1d-plain\naug.enabled = [true,false,true,false,true]\n";
        let cfg = parse_flat(text).unwrap();
        assert_eq!(cfg.domains, "tf");
        assert_eq!(cfg.enc.time_kind, EncoderKind::Cnn1dPlain);
        assert_eq!(cfg.aug.enabled, [true, false, true, false, true]);
        assert_eq!(cfg.active_domains().len(), 2);
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(parse_flat("tau = 0").is_err());
        assert!(parse_flat("domains = xyz").is_err());
        assert!(parse_flat("batch_size = 1").is_err());
        assert!(parse_flat("lambda = 1.5").is_err());
    }
}
