//! Flat key-value configuration: an INI-like text format and flat JSON
//! objects are accepted interchangeably. Unknown keys are rejected, and
//! the model parameters have no defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use fedpriv_core::ModelConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Raw key -> value map read from a config file.
#[derive(Debug, Clone)]
pub struct Raw {
    map: BTreeMap<String, String>,
}

impl Raw {
    pub fn from_file(path: &Path) -> Result<Raw, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Raw::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Raw, ConfigError> {
        if text.trim_start().starts_with('{') {
            Raw::from_json(text)
        } else {
            Raw::from_ini(text)
        }
    }

    fn from_ini(text: &str) -> Result<Raw, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected key = value", i + 1));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return err(format!("duplicate key `{key}`"));
            }
        }
        Ok(Raw { map })
    }

    fn from_json(text: &str) -> Result<Raw, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError(format!("bad JSON: {e}")))?;
        let serde_json::Value::Object(obj) = value else {
            return err("JSON config must be a flat object");
        };
        let mut map = BTreeMap::new();
        for (key, v) in obj {
            let s = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                other => return err(format!("key `{key}`: unsupported value {other}")),
            };
            map.insert(key, s);
        }
        Ok(Raw { map })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    /// The raw map as a flat JSON object. Feeding this back through
    /// `--config` reproduces the run byte for byte.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.map
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key)
            .ok_or_else(|| ConfigError(format!("missing required field `{key}`")))
    }

    pub fn f64_req(&self, key: &str) -> Result<f64, ConfigError> {
        parse_f64(key, self.required(key)?)
    }

    pub fn f64_opt(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            Some(v) => parse_f64(key, v),
            None => Ok(default),
        }
    }

    pub fn usize_req(&self, key: &str) -> Result<usize, ConfigError> {
        self.required(key)?
            .parse()
            .map_err(|_| ConfigError(format!("field `{key}` must be a positive integer")))
    }

    pub fn usize_opt(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError(format!("field `{key}` must be a positive integer"))),
            None => Ok(default),
        }
    }

    pub fn u32_opt(&self, key: &str, default: Option<u32>) -> Result<Option<u32>, ConfigError> {
        match self.get(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("field `{key}` must be a positive integer"))),
            None => Ok(default),
        }
    }

    pub fn bool_opt(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => err(format!("field `{key}`: expected true/false, got `{other}`")),
            None => Ok(default),
        }
    }

    pub fn str_opt(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|v| parse_f64(key, v.trim()))
                .collect::<Result<Vec<f64>, _>>()
                .map(Some),
        }
    }

    /// Rejects any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                return err(format!("unknown key `{key}`"));
            }
        }
        Ok(())
    }

    /// The model parameters. Every physics-relevant field must be
    /// present; only kappa_tilde has a default.
    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let cfg = ModelConfig {
            m: self.usize_req("m")?,
            n: self.usize_req("n")?,
            sigma: self.f64_req("sigma")?,
            s: self.f64_req("s")?,
            r: self.f64_req("r")?,
            p: self.f64_req("p")?,
            q: self.f64_req("q")?,
            epsilon: self.f64_req("epsilon")?,
            delta: self.f64_req("delta")?,
            alpha: self.f64_req("alpha")?,
            kappa_tilde: self.f64_opt("kappa_tilde", 1.0)?,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}

/// Keys common to every command: the model parameters.
pub const MODEL_KEYS: &[&str] = &[
    "m", "n", "sigma", "s", "r", "p", "q", "epsilon", "delta", "alpha", "kappa_tilde",
];

fn parse_f64(key: &str, raw: &str) -> Result<f64, ConfigError> {
    match raw {
        "inf" | "Inf" | "INF" => Ok(f64::INFINITY),
        _ => raw
            .parse()
            .map_err(|_| ConfigError(format!("field `{key}`: `{raw}` is not a number"))),
    }
}
