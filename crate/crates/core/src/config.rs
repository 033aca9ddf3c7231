//! `key = value` workbench configuration with `[section]` headers.
//!
//! Top-level settings live under `[run]`; every other section names one
//! field of [`PipelineConfig`]. Nested values use dotted keys
//! (`style.gamma`), vectors are comma separated (`origin = 0.3, 0.1, 0.4`)
//! and `none` clears an optional value. Keys not present in the defaults
//! are rejected.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkbenchConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

fn is_vector(m: &Map<String, Value>) -> bool {
    m.len() == 3 && ["x", "y", "z"].iter().all(|k| m.get(*k).is_some_and(Value::is_number))
}

fn parse_scalar(existing: &Value, s: &str) -> std::result::Result<Value, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Value::Null);
    }
    match existing {
        Value::Bool(_) => s.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got '{s}'")),
        Value::Number(n) if n.is_u64() => s
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a non-negative integer, got '{s}'")),
        Value::Number(n) if n.is_i64() => s.parse::<i64>().map(Value::from).map_err(|_| format!("expected an integer, got '{s}'")),
        Value::Number(_) | Value::Null => s
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a finite number, got '{s}'")),
        Value::String(_) => Ok(Value::String(s.trim_matches('"').to_string())),
        _ => Err(format!("cannot set a compound value from '{s}'")),
    }
}

fn parse_like(existing: &Value, s: &str) -> std::result::Result<Value, String> {
    match existing {
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::String(String::new()));
            s.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| parse_scalar(&proto, p))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Object(m) if is_vector(m) => {
            let parts: Vec<&str> = s.split(',').map(str::trim).collect();
            if parts.len() != m.len() {
                return Err(format!("expected {} comma-separated numbers, got '{s}'", m.len()));
            }
            let mut out = Map::new();
            for ((k, v), p) in m.iter().zip(parts) {
                out.insert(k.clone(), parse_scalar(v, p)?);
            }
            Ok(Value::Object(out))
        }
        Value::Object(_) => Err("key names a group; set its fields with dotted keys".into()),
        other => parse_scalar(other, s),
    }
}

impl WorkbenchConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::desk(),
        }
    }

    /// Parses `text` on top of the full-protocol defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default()).map_err(json_err)?;
        let mut section = String::from("run");
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                let known = name == "run" || root.get(name).is_some_and(|v| v.is_object() && !v.as_object().is_some_and(is_vector));
                if !known {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(format!("expected 'key = value', got '{line}'")));
            };
            let (key, value) = (key.trim(), value.trim());
            let mut node = if section == "run" {
                if root.get(key).is_some_and(|v| v.is_object() && !v.as_object().is_some_and(is_vector)) {
                    return Err(at(format!("'{key}' is a section, not a [run] key")));
                }
                &mut root
            } else {
                root.get_mut(&section).unwrap()
            };
            for part in key.split('.') {
                node = node
                    .get_mut(part)
                    .ok_or_else(|| at(format!("unknown key '{key}' in [{section}]")))?;
            }
            *node = parse_like(node, value).map_err(|m| at(format!("{key}: {m}")))?;
        }
        let cfg: Self = serde_json::from_value(root).map_err(json_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        p.sim.validate()?;
        p.dataset.validate()?;
        p.cut.validate()?;
        p.train.validate()?;
        if p.dataset.image_size != p.cut.image_size {
            return Err(Error::Config(format!(
                "dataset image size {} differs from translator image size {}",
                p.dataset.image_size, p.cut.image_size
            )));
        }
        if p.embed.k != p.cut.k || p.embed.l > p.cut.num_taps {
            return Err(Error::Config("embedding must match the translator's head and taps".into()));
        }
        if p.variants.is_empty() {
            return Err(Error::Config("no policy variants selected".into()));
        }
        if !(p.scale > 0.0 && p.scale.is_finite()) {
            return Err(Error::Config(format!("scale {} must be positive", p.scale)));
        }
        if !(p.lowess_frac > 0.0 && p.lowess_frac <= 1.0) {
            return Err(Error::Config(format!("lowess_frac {} outside (0, 1]", p.lowess_frac)));
        }
        if p.select.top_n == 0 || p.select.is_splits == 0 {
            return Err(Error::Config("top_n and is_splits must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields `self` again.
    pub fn to_text(&self) -> Result<String> {
        let root = serde_json::to_value(self).map_err(json_err)?;
        let obj = root.as_object().unwrap();
        let mut run = String::from("[run]\n");
        let mut sections = String::new();
        for (k, v) in obj {
            match v {
                Value::Object(m) if !is_vector(m) => {
                    sections.push_str(&format!("\n[{k}]\n"));
                    emit(&mut sections, "", m);
                }
                _ => run.push_str(&format!("{k} = {}\n", render(v))),
            }
        }
        Ok(run + &sections)
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        Value::Object(m) => m.values().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn emit(out: &mut String, prefix: &str, m: &Map<String, Value>) {
    for (k, v) in m {
        match v {
            Value::Object(inner) if !is_vector(inner) => emit(out, &format!("{prefix}{k}."), inner),
            _ => out.push_str(&format!("{prefix}{k} = {}\n", render(v))),
        }
    }
}
