//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Strings may be bare or double-quoted. Unknown keys, repeated keys and
//! out-of-range values are errors.

use std::collections::BTreeSet;
use std::path::Path;

use trigger_xai::eval::GateThresholds;
use trigger_xai::fusion::MethodWeights;
use trigger_xai::labeler::{LfThresholds, LfWeights};
use trigger_xai::numeric::ThresholdRule;
use trigger_xai::pipeline::ExplainConfig;
use trigger_xai::saliency::MIN_CONCEPT_SET;
use trigger_xai::trigger::MaiaWeights;
use trigger_xai::ModelKind;

use crate::error::{CliError, CliResult};

pub const CONFIG_ENV: &str = "TRIGGER_XAI_CONFIG";

/// Every accepted key, for diagnostics and documentation.
pub const KEYS: &[&str] = &[
    "seed",
    "backend",
    "threads",
    "input.side",
    "input.weak_labeled",
    "gradcam.layer",
    "rise.masks",
    "rise.cells",
    "rise.keep_prob",
    "rise.seed",
    "tcav.layer",
    "tcav.concepts",
    "tcav.jitters",
    "fusion.weights",
    "fusion.temperature",
    "his.gamma",
    "maia.alpha",
    "maia.beta",
    "maia.delta",
    "maia.top_k",
    "trigger.entropy",
    "trigger.agreement",
    "trigger.margin",
    "align.threshold",
    "drift.threshold",
    "gate.aic",
    "gate.bic",
    "gate.brier",
    "gate.confidence",
    "gate.iou",
    "eval.binarize",
    "eval.step",
    "label.yellow_fraction",
    "label.webbing_contrast",
    "label.red_ratio",
    "label.healthy_ratio",
    "label.weights",
    "nms.iou",
    "report.timing",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendSpec {
    One(ModelKind),
    All,
}

impl BackendSpec {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "micro-cnn" => BackendSpec::One(ModelKind::Cnn),
            "vit-proxy" => BackendSpec::One(ModelKind::VitProxy),
            "yolo-proxy" => BackendSpec::One(ModelKind::YoloProxy),
            "all" => BackendSpec::All,
            _ => return None,
        })
    }

    pub fn kinds(self) -> Vec<ModelKind> {
        match self {
            BackendSpec::One(k) => vec![k],
            BackendSpec::All => ModelKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: BackendSpec,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub explain: ExplainConfig,
    pub lf_thresholds: LfThresholds,
    pub lf_weights: LfWeights,
    pub nms_iou: f64,
    pub timing: bool,
    /// Un-normalized MAIA axis weights as configured.
    maia_raw: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backend: BackendSpec::One(ModelKind::Cnn),
            threads: 0,
            explain: ExplainConfig::default(),
            lf_thresholds: LfThresholds::default(),
            lf_weights: LfWeights::default(),
            nms_iou: 0.5,
            timing: false,
            maia_raw: [1.0; 3],
        }
    }
}

fn num(key: &str, v: &str) -> CliResult<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| CliError::config(format!("`{key}` expects a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(CliError::config(format!("`{key}` must be finite")));
    }
    Ok(x)
}

fn in_range(key: &str, v: &str, lo: f64, hi: f64, lo_open: bool, hi_open: bool) -> CliResult<f64> {
    let x = num(key, v)?;
    let ok_lo = if lo_open { x > lo } else { x >= lo };
    let ok_hi = if hi_open { x < hi } else { x <= hi };
    if !(ok_lo && ok_hi) {
        let (l, r) = (if lo_open { '(' } else { '[' }, if hi_open { ')' } else { ']' });
        return Err(CliError::config(format!("`{key}` = {x} outside {l}{lo}, {hi}{r}")));
    }
    Ok(x)
}

fn int(key: &str, v: &str, min: u64) -> CliResult<u64> {
    let x: u64 = v
        .parse()
        .map_err(|_| CliError::config(format!("`{key}` expects a non-negative integer, got `{v}`")))?;
    if x < min {
        return Err(CliError::config(format!("`{key}` must be at least {min}")));
    }
    Ok(x)
}

fn boolean(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::config(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn four(key: &str, v: &str) -> CliResult<[f64; 4]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(CliError::config(format!("`{key}` expects four comma-separated numbers")));
    }
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = num(key, p)?;
        if *o < 0.0 {
            return Err(CliError::config(format!("`{key}` entries must be non-negative")));
        }
    }
    Ok(out)
}

fn layer(key: &str, v: &str) -> CliResult<String> {
    if v.is_empty() {
        return Err(CliError::config(format!("`{key}` must not be empty")));
    }
    Ok(v.to_string())
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> CliResult<()> {
        let v = unquote(raw.trim());
        match key {
            "seed" => self.seed = int(key, v, 0)?,
            "backend" => {
                self.backend = BackendSpec::parse(v).ok_or_else(|| {
                    CliError::config(format!(
                        "`backend` must be micro-cnn, vit-proxy, yolo-proxy or all, got `{v}`"
                    ))
                })?
            }
            "threads" => self.threads = int(key, v, 0)? as usize,
            "input.side" => {
                let s = int(key, v, 0)? as usize;
                if s != 0 && s < trigger_xai::model::MIN_INPUT_SIDE {
                    return Err(CliError::config(format!(
                        "`input.side` must be 0 or at least {}",
                        trigger_xai::model::MIN_INPUT_SIDE
                    )));
                }
                self.explain.input_side = s;
            }
            "input.weak_labeled" => self.explain.weak_labeled = boolean(key, v)?,
            "gradcam.layer" => self.explain.gradcam_layer = layer(key, v)?,
            "rise.masks" => self.explain.rise.masks = int(key, v, 1)? as usize,
            "rise.cells" => self.explain.rise.cells = int(key, v, 1)? as usize,
            "rise.keep_prob" => self.explain.rise.keep_prob = in_range(key, v, 0.0, 1.0, true, true)?,
            "rise.seed" => self.explain.rise.seed = int(key, v, 0)?,
            "tcav.layer" => self.explain.tcav_layer = layer(key, v)?,
            "tcav.concepts" => self.explain.tcav_concepts = int(key, v, MIN_CONCEPT_SET as u64)? as usize,
            "tcav.jitters" => self.explain.tcav_jitters = int(key, v, 0)? as usize,
            "fusion.weights" => {
                self.explain.weights = MethodWeights::new(four(key, v)?).map_err(|err| CliError::config(format!("`{key}`: {err}")))?
            }
            "fusion.temperature" => self.explain.gate_temperature = in_range(key, v, 0.0, f64::MAX, true, false)?,
            "his.gamma" => self.explain.his_gamma = num(key, v)?,
            "maia.alpha" | "maia.beta" | "maia.delta" => {
                let x = in_range(key, v, 0.0, 1.0, false, false)?;
                let slot = ["maia.alpha", "maia.beta", "maia.delta"].iter().position(|k| *k == key);
                self.maia_raw[slot.expect("matched above")] = x;
            }
            "maia.top_k" => {
                let k = int(key, v, 1)?;
                if k > 4 {
                    return Err(CliError::config("`maia.top_k` must be between 1 and 4"));
                }
                self.explain.maia_top_k = k as usize;
            }
            "trigger.entropy" => self.explain.trigger.entropy = in_range(key, v, 0.0, f64::MAX, false, false)?,
            "trigger.agreement" => self.explain.trigger.agreement = in_range(key, v, 0.0, 1.0, false, false)?,
            "trigger.margin" => self.explain.trigger.margin = in_range(key, v, 0.0, 1.0, false, false)?,
            "align.threshold" => self.explain.align_threshold = in_range(key, v, -1.0, 1.0, false, false)?,
            "drift.threshold" => self.explain.drift_threshold = in_range(key, v, 0.0, 1.0, false, false)?,
            "gate.aic" => self.explain.gates.aic = num(key, v)?,
            "gate.bic" => self.explain.gates.bic = num(key, v)?,
            "gate.brier" => self.explain.gates.brier = in_range(key, v, 0.0, 2.0, false, false)?,
            "gate.confidence" => self.explain.gates.confidence = in_range(key, v, 0.0, 1.0, false, false)?,
            "gate.iou" => self.explain.gates.iou = in_range(key, v, 0.0, 1.0, false, false)?,
            "eval.binarize" => self.explain.binarize = ThresholdRule::FractionOfMax(in_range(key, v, 0.0, 1.0, true, false)?),
            "eval.step" => self.explain.perturb_step = in_range(key, v, 0.0, 1.0, true, false)?,
            "label.yellow_fraction" => self.lf_thresholds.yellow_fraction = in_range(key, v, 0.0, 1.0, false, false)?,
            "label.webbing_contrast" => {
                self.lf_thresholds.webbing_contrast = in_range(key, v, 0.0, f64::MAX, false, false)?
            }
            "label.red_ratio" => self.lf_thresholds.red_ratio = in_range(key, v, 0.0, f64::MAX, true, false)?,
            "label.healthy_ratio" => self.lf_thresholds.healthy_ratio = in_range(key, v, 0.0, f64::MAX, true, false)?,
            "label.weights" => {
                let w = four(key, v)?;
                if w.iter().any(|&x| x <= 0.0) {
                    return Err(CliError::config("`label.weights` entries must be positive"));
                }
                self.lf_weights = LfWeights(w);
            }
            "nms.iou" => self.nms_iou = in_range(key, v, 0.0, 1.0, true, true)?,
            "report.timing" => self.timing = boolean(key, v)?,
            _ => return Err(CliError::config(format!("unknown key `{key}`"))),
        }
        if key.starts_with("maia.") && key != "maia.top_k" {
            let [a, b, d] = self.maia_raw;
            self.explain.maia = MaiaWeights::new(a, b, d).map_err(|err| CliError::config(format!("maia weights: {err}")))?;
        }
        if key == "seed" {
            self.explain.seed = self.seed;
        }
        Ok(())
    }

    /// Applies a whole file's text; `origin` names it in diagnostics.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) if !in_quotes(line, i) => &line[..i],
                _ => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::config(format!("{origin}:{}: key `{k}` repeated", n + 1)));
            }
            self.set(k, v)
                .map_err(|e| CliError::config(format!("{origin}:{}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Gate thresholds shared by `explain` and `evaluate`.
    pub fn gates(&self) -> GateThresholds {
        self.explain.gates
    }
}

fn in_quotes(line: &str, idx: usize) -> bool {
    line[..idx].matches('"').count() % 2 == 1
}

fn strip(e: &CliError) -> String {
    match e {
        CliError::Config(m) | CliError::Input(m) | CliError::Internal(m) => m.clone(),
    }
}
