//! Experiment configuration.
//!
//! A config file is flat TOML. Resolution layers three JSON objects: the
//! family defaults, then the named preset, then the keys in the file. Any key
//! the schema does not know is rejected.

use crate::error::{Error, Result};
use crate::reprogram::Family;
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    pub preset: String,
    pub seed: u64,
    pub out_dir: String,

    // data
    pub n_total: usize,
    /// Fractions for tar_train, tar_held, shadow_train, shadow_held,
    /// ref_train, test.
    pub split: [f64; 6],
    pub n_classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub n_modes: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub temperature: f64,

    // models
    pub hidden: usize,
    pub hidden_layers: usize,
    pub activation: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub t_max: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,

    // pattern
    pub pattern_steps: usize,
    pub pattern_lr: f64,
    pub pattern_batch: usize,
    pub prompt_len: usize,
    pub prompt_init_std: f64,
    pub delta_bound: f64,
    pub mining_k: f64,
    pub mining_gamma: f64,
    pub log_scores: bool,
    pub eta: f64,
    pub lambda: f64,
    pub eps_guard: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_sep: f64,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_lr: f64,

    // scoring
    pub min_k_ratio: f64,
    pub t_probe: usize,
    pub p_norm: f64,
    pub normalize_eps: bool,
    pub use_reference: bool,
    /// `constant_one` or `neighbor_mean`.
    pub ni_mode: String,
    pub ni_radius: f64,
    pub ni_neighbors: usize,
    pub naive_mc: usize,

    // evaluation
    pub attacks: Vec<String>,
    /// `none`, `logits_noise:<std>` or `input_smoothing:<std>`.
    pub defenses: Vec<String>,
    pub fpr_targets: Vec<f64>,

    // theory
    pub power_iters: usize,
    pub theory_samples: usize,
}

/// Fractions giving six equal subsets.
const SIXTH: f64 = 1.0 / 6.0;

fn family_defaults(family: Family) -> Value {
    let mut v = json!({
        "preset": "default",
        "seed": 1,
        "out_dir": "runs/default",
        "n_total": 600,
        "split": [SIXTH, SIXTH, SIXTH, SIXTH, SIXTH, SIXTH],
        "n_classes": 4,
        "dim": 2,
        "spread": 0.5,
        "n_modes": 8,
        "vocab_size": 16,
        "seq_len": 16,
        "temperature": 0.5,
        "hidden": 64,
        "hidden_layers": 2,
        "activation": "relu",
        "d_model": 32,
        "n_heads": 2,
        "t_max": 100,
        "beta_1": 1e-4,
        "beta_t": 0.02,
        "epochs": 300,
        "lr": 0.05,
        "momentum": 0.9,
        "batch_size": 0,
        "pattern_steps": 300,
        "pattern_lr": 1e-2,
        "pattern_batch": 16,
        "prompt_len": 8,
        "prompt_init_std": 0.1,
        "delta_bound": 16.0 / 255.0,
        "mining_k": 0.25,
        "mining_gamma": 1.0,
        "log_scores": false,
        "eta": 0.5,
        "lambda": 1e-3,
        "eps_guard": 1e-12,
        "alpha": 1.0,
        "beta": 1e-3,
        "gamma_sep": 1.0,
        "mlp_hidden": 16,
        "mlp_epochs": 300,
        "mlp_lr": 1e-2,
        "min_k_ratio": 0.2,
        "t_probe": 15,
        "p_norm": 2.0,
        "normalize_eps": true,
        "use_reference": true,
        "ni_mode": "constant_one",
        "ni_radius": 0.1,
        "ni_neighbors": 4,
        "naive_mc": 8,
        "defenses": ["none"],
        "fpr_targets": [0.01, 0.05, 0.1],
        "power_iters": 50,
        "theory_samples": 32,
    });
    let attacks = match family {
        Family::Classifier => json!(["reprogram", "calibrated", "loss", "reprogram_mlp"]),
        Family::Lm => json!(["reprogram", "mink_pp", "loss", "mink", "reference"]),
        Family::Diffusion => json!(["reprogram", "pia", "pian", "naive"]),
    };
    let obj = v.as_object_mut().unwrap();
    obj.insert("family".into(), json!(family));
    obj.insert("attacks".into(), attacks);
    let extra = match family {
        Family::Classifier => json!({}),
        Family::Lm => json!({
            "n_total": 768,
            "epochs": 60,
            "lr": 0.05,
            "batch_size": 16,
            "hidden": 64,
            "pattern_lr": 1e-3,
        }),
        Family::Diffusion => json!({
            "dim": 8,
            "spread": 0.08,
            "epochs": 800,
            "lr": 0.02,
            "batch_size": 0,
            "hidden": 64,
            "normalize_eps": false,
        }),
    };
    merge(&mut v, &extra);
    v
}

/// Named override sets.
pub const PRESETS: [&str; 4] = ["default", "overfit", "quick", "linear"];

fn preset_overrides(family: Family, preset: &str) -> Result<Value> {
    let v = match (preset, family) {
        ("default", _) => json!({}),
        ("overfit", Family::Classifier) => json!({
            "dim": 8, "spread": 0.9, "epochs": 600, "lr": 0.05, "hidden": 64, "activation": "tanh",
        }),
        ("overfit", Family::Lm) => json!({ "temperature": 1.0, "epochs": 30 }),
        ("overfit", Family::Diffusion) => json!({
            "n_total": 300, "spread": 0.5, "epochs": 3000, "batch_size": 25, "hidden": 256,
        }),
        ("quick", _) => json!({
            "n_total": 240, "epochs": 20, "pattern_steps": 10, "mlp_epochs": 20,
            "theory_samples": 32, "power_iters": 20,
        }),
        ("linear", _) => json!({ "hidden_layers": 0, "activation": "tanh" }),
        (other, _) => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(v)
}

fn merge(base: &mut Value, over: &Value) {
    if let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) {
        for (k, v) in o {
            b.insert(k.clone(), v.clone());
        }
    }
}

fn schema_keys() -> Vec<String> {
    family_defaults(Family::Classifier)
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect()
}

impl ExperimentConfig {
    /// Resolves family defaults, the preset, then `user` (a JSON object).
    pub fn resolve(user: &Value) -> Result<Self> {
        let obj = user
            .as_object()
            .ok_or_else(|| Error::Config("config must be a table of keys".into()))?;
        let known = schema_keys();
        if let Some(k) = obj.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        let family: Family = serde_json::from_value(
            obj.get("family")
                .cloned()
                .ok_or_else(|| Error::Config("missing required key \"family\"".into()))?,
        )
        .map_err(|e| Error::Config(format!("family: {e}")))?;
        let preset = obj.get("preset").and_then(Value::as_str).unwrap_or("default").to_string();
        let mut v = family_defaults(family);
        merge(&mut v, &preset_overrides(family, &preset)?);
        merge(&mut v, user);
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let t: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let v = serde_json::to_value(t).map_err(|e| Error::Config(e.to_string()))?;
        Self::resolve(&v)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let s = crate::io::read_string(path).map_err(|e| Error::Config(e.to_string()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_str(&s).map_err(|e| Error::Config(e.to_string()))?;
            Self::resolve(&v)
        } else {
            Self::from_toml_str(&s)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every key except `out_dir`, which names a location rather than an
    /// experiment. This is what `config.json` stores and what the hash covers.
    pub fn identity_value(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        v.as_object_mut().unwrap().remove("out_dir");
        Ok(v)
    }

    /// Compact JSON of [`Self::identity_value`] with keys in sorted order.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(canonical(&self.identity_value()?))
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded.
    pub fn hash(&self) -> Result<String> {
        let d = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(d.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let allowed: &[&str] = match self.family {
            Family::Classifier => &["reprogram", "calibrated", "loss", "reprogram_mlp"],
            Family::Lm => &["reprogram", "mink_pp", "loss", "mink", "reference"],
            Family::Diffusion => &["reprogram", "pia", "pian", "naive"],
        };
        if self.attacks.is_empty() {
            return bad("attacks must not be empty".into());
        }
        for a in &self.attacks {
            if !allowed.contains(&a.as_str()) {
                return bad(format!(
                    "attack {a:?} is not available for the {} family (choose from {})",
                    self.family.name(),
                    allowed.join(", ")
                ));
            }
        }
        if self.defenses.is_empty() {
            return bad("defenses must not be empty (use [\"none\"])".into());
        }
        for d in &self.defenses {
            let def = Defense::parse(d)?;
            if matches!(def, Defense::InputSmoothing(_)) && self.family == Family::Lm {
                return bad("input smoothing has no meaning for token inputs".into());
            }
        }
        if self.fpr_targets.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad(format!("fpr targets must lie in (0, 1], got {:?}", self.fpr_targets));
        }
        if !(self.min_k_ratio > 0.0 && self.min_k_ratio <= 1.0) {
            return bad(format!("min_k_ratio must lie in (0, 1], got {}", self.min_k_ratio));
        }
        if !(self.mining_k > 0.0 && self.mining_k <= 1.0) {
            return bad(format!("mining_k must lie in (0, 1], got {}", self.mining_k));
        }
        if !matches!(self.activation.as_str(), "relu" | "tanh") {
            return bad(format!("activation must be relu or tanh, got {:?}", self.activation));
        }
        if !matches!(self.ni_mode.as_str(), "constant_one" | "neighbor_mean") {
            return bad(format!("ni_mode must be constant_one or neighbor_mean, got {:?}", self.ni_mode));
        }
        if self.t_probe == 0 || self.t_probe > self.t_max {
            return bad(format!("t_probe must lie in [1, {}], got {}", self.t_max, self.t_probe));
        }
        if self.delta_bound < 0.0 || self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return bad("delta_bound, lambda, alpha and beta must be >= 0".into());
        }
        if self.family == Family::Lm && self.prompt_len == 0 {
            return bad("prompt_len must be at least 1".into());
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2".into());
        }
        Ok(())
    }

    /// Named sub-seeds derived from the master seed.
    pub fn seeds(&self) -> Seeds {
        Seeds::new(self.seed)
    }

    /// Keys whose value is a single number or boolean.
    pub fn sweepable_keys() -> Vec<String> {
        family_defaults(Family::Classifier)
            .as_object()
            .unwrap()
            .iter()
            .filter(|(_, v)| v.is_number() || v.is_boolean())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// A copy with one scalar key replaced, re-validated.
    pub fn with_value(&self, key: &str, value: &str) -> Result<Self> {
        let keys = Self::sweepable_keys();
        if !keys.iter().any(|k| k == key) {
            return Err(Error::Config(format!(
                "parameter {key:?} cannot be swept; sweepable keys: {}",
                keys.join(", ")
            )));
        }
        let mut v = serde_json::to_value(self)?;
        let old = &v[key];
        let parsed = if old.is_boolean() {
            Value::Bool(value.parse().map_err(|_| Error::Config(format!("{key}: expected a boolean, got {value:?}")))?)
        } else if old.is_u64() {
            json!(value
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))?)
        } else {
            json!(value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))?)
        };
        v.as_object_mut().unwrap().insert(key.into(), parsed);
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Sub-seeds, one per pipeline component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub target_train: u64,
    pub shadow_train: u64,
    pub reference_train: u64,
    pub pattern: u64,
    pub noise_defense: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            data: derive_seed(master, "data"),
            target_train: derive_seed(master, "target-train"),
            shadow_train: derive_seed(master, "shadow-train"),
            reference_train: derive_seed(master, "reference-train"),
            pattern: derive_seed(master, "pattern"),
            noise_defense: derive_seed(master, "noise-defense"),
            eval: derive_seed(master, "eval"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Defense {
    None,
    LogitsNoise(f64),
    InputSmoothing(f64),
}

impl Defense {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Defense::None);
        }
        let (kind, std) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("defense {s:?}: expected none, logits_noise:<std> or input_smoothing:<std>")))?;
        let std: f64 = std
            .parse()
            .map_err(|_| Error::Config(format!("defense {s:?}: bad standard deviation")))?;
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("defense {s:?}: std must be >= 0")));
        }
        match kind {
            "logits_noise" => Ok(Defense::LogitsNoise(std)),
            "input_smoothing" => Ok(Defense::InputSmoothing(std)),
            other => Err(Error::Config(format!("unknown defense {other:?}"))),
        }
    }
}

/// Canonical JSON of an arbitrary object (sorted keys, compact).
pub fn canonical(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(v).to_string()
}
