//! Scenario files: a base configuration plus named variants, each a set of
//! dotted-key overrides.
//!
//! ```toml
//! [scenario]
//! name = "ablation-dualslo"
//!
//! [executor]
//! admission = "dual"
//!
//! [[variant]]
//! name = "ttft-only"
//! set = { "executor.admission" = "ttft-only" }
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::{set_dotted, ConfigError, SimConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    name: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantSpec {
    name: String,
    #[serde(default)]
    set: toml::Table,
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub set: toml::Table,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    base: toml::Table,
    pub variants: Vec<Variant>,
    base_dir: Option<PathBuf>,
}

const BUNDLED: [(&str, &str); 6] = [
    ("default", include_str!("../scenarios/default.toml")),
    ("ablation-memory", include_str!("../scenarios/ablation-memory.toml")),
    ("ablation-dualslo", include_str!("../scenarios/ablation-dualslo.toml")),
    ("ablation-scheduler", include_str!("../scenarios/ablation-scheduler.toml")),
    ("elasticity", include_str!("../scenarios/elasticity.toml")),
    ("fuzz", include_str!("../scenarios/fuzz.toml")),
];

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn bundled(name: &str) -> Option<Scenario> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_toml_str(text).expect("bundled scenarios parse"))
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let meta = match table.remove("scenario") {
            Some(v) => serde_path_to_error::deserialize::<_, Meta>(v).map_err(|e| ConfigError::Schema {
                path: format!("scenario.{}", e.path()),
                message: e.inner().to_string(),
            })?,
            None => Meta { name: "unnamed".into(), description: String::new() },
        };
        let variants = match table.remove("variant") {
            Some(v) => serde_path_to_error::deserialize::<_, Vec<VariantSpec>>(v)
                .map_err(|e| ConfigError::Schema { path: format!("variant{}", e.path()), message: e.inner().to_string() })?
                .into_iter()
                .map(|v| Variant { name: v.name, set: v.set })
                .collect(),
            None => Vec::new(),
        };
        let s = Scenario { name: meta.name, description: meta.description, base: table, variants, base_dir: None };
        // surface schema errors at load time
        s.configs()?;
        Ok(s)
    }

    /// Loads a scenario file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Syntax(format!("{}: {e}", path.display())))?;
        let mut s = Self::from_toml_str(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    /// Applies `key=value` to the base (every variant sees it).
    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<(), ConfigError> {
        set_dotted(&mut self.base, key, value)?;
        self.configs().map(|_| ())
    }

    pub fn variant_names(&self) -> Vec<String> {
        if self.variants.is_empty() {
            vec!["base".into()]
        } else {
            self.variants.iter().map(|v| v.name.clone()).collect()
        }
    }

    /// One resolved configuration per variant (or the base alone).
    pub fn configs(&self) -> Result<Vec<(String, SimConfig)>, ConfigError> {
        if self.variants.is_empty() {
            return Ok(vec![("base".into(), self.resolve(&self.base)?)]);
        }
        self.variants
            .iter()
            .map(|v| {
                let mut t = self.base.clone();
                for (k, val) in &v.set {
                    set_dotted(&mut t, k, val.clone())?;
                }
                let cfg = self.resolve(&t).map_err(|e| ConfigError::Override {
                    key: format!("variant {}", v.name),
                    reason: e.to_string(),
                })?;
                Ok((v.name.clone(), cfg))
            })
            .collect()
    }

    pub fn config(&self, variant: &str) -> Result<SimConfig, ConfigError> {
        self.configs()?
            .into_iter()
            .find(|(n, _)| n == variant)
            .map(|(_, c)| c)
            .ok_or_else(|| ConfigError::Override { key: variant.into(), reason: "no such variant".into() })
    }

    fn resolve(&self, t: &toml::Table) -> Result<SimConfig, ConfigError> {
        let mut cfg = SimConfig::from_table(t.clone())?;
        if let Some(dir) = &self.base_dir {
            if let Some(p) = cfg.serving.trace.as_mut().filter(|p| p.is_relative()) {
                *p = dir.join(&*p);
            }
            if let Some(p) = cfg.profiles.path.as_mut().filter(|p| p.is_relative()) {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Parses `key=value` with the value as a TOML literal, falling back to a
/// bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Override { key: s.into(), reason: "expected key=value".into() })?;
    let (k, v) = (k.trim(), v.trim());
    let value = format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
