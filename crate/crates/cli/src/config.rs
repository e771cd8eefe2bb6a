//! Settings shared by all subcommands, layered flag > environment > file > default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use airlift::runtime::EnvPolicy;
use anyhow::{bail, Context, Result};

pub const ENV_PREFIX: &str = "AIRLIFT_";

/// Keys accepted in the config file; `AIRLIFT_<KEY>` in the environment.
pub const KEYS: &[&str] = &["site_bind_dirs", "default_env_policy", "verbosity"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalConfig {
    /// Absolute host directories bound into every container.
    pub site_bind_dirs: Vec<PathBuf>,
    pub default_env_policy: EnvPolicy,
    /// 0 = warnings, 1 = info, 2 = debug, 3+ = trace.
    pub verbosity: u8,
    pub config_file_path: Option<PathBuf>,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            site_bind_dirs: Vec::new(),
            default_env_policy: EnvPolicy::InheritHost,
            verbosity: 0,
            config_file_path: None,
        }
    }
}

/// One source of settings; None means "not set here".
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layer {
    pub site_bind_dirs: Option<Vec<PathBuf>>,
    pub default_env_policy: Option<EnvPolicy>,
    pub verbosity: Option<u8>,
}

impl Layer {
    /// Builds a layer from `key -> value` strings, rejecting unknown keys.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>, origin: &str) -> Result<Self> {
        let mut layer = Layer::default();
        for (key, value) in pairs {
            match key {
                "site_bind_dirs" => {
                    let dirs: Vec<PathBuf> = value.split(':').filter(|s| !s.is_empty()).map(PathBuf::from).collect();
                    if let Some(rel) = dirs.iter().find(|d| !d.is_absolute()) {
                        bail!(
                            "{origin}: site_bind_dirs entry {} is not an absolute path",
                            rel.display()
                        );
                    }
                    layer.site_bind_dirs = Some(dirs);
                }
                "default_env_policy" => {
                    layer.default_env_policy =
                        Some(value.parse().with_context(|| format!("{origin}: default_env_policy"))?);
                }
                "verbosity" => {
                    layer.verbosity = Some(
                        value
                            .parse()
                            .with_context(|| format!("{origin}: verbosity {value:?} is not a number 0-255"))?,
                    );
                }
                other => bail!("{origin}: unknown setting {other:?} (known: {})", KEYS.join(", ")),
            }
        }
        Ok(layer)
    }

    /// `AIRLIFT_SITE_BIND_DIRS`, `AIRLIFT_DEFAULT_ENV_POLICY`, `AIRLIFT_VERBOSITY`.
    pub fn from_env(vars: &BTreeMap<String, String>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = KEYS
            .iter()
            .filter_map(|k| {
                let var = format!("{ENV_PREFIX}{}", k.to_uppercase());
                vars.get(&var).map(|v| (*k, v.as_str()))
            })
            .collect();
        Layer::from_pairs(pairs, "environment")
    }

    /// `key = value` lines; `#` starts a comment line.
    pub fn parse_file(text: &str, origin: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{origin}:{}: expected key = value", n + 1);
            };
            pairs.push((k.trim(), v.trim()));
        }
        Layer::from_pairs(pairs, origin)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        Layer::parse_file(&text, &path.display().to_string())
    }
}

impl GlobalConfig {
    /// Each setting comes from the first layer that sets it.
    pub fn resolve(flags: &Layer, env: &Layer, file: &Layer, config_file_path: Option<PathBuf>) -> Self {
        let d = GlobalConfig::default();
        let layers = [flags, env, file];
        GlobalConfig {
            site_bind_dirs: layers
                .iter()
                .find_map(|l| l.site_bind_dirs.clone())
                .unwrap_or(d.site_bind_dirs),
            default_env_policy: layers
                .iter()
                .find_map(|l| l.default_env_policy)
                .unwrap_or(d.default_env_policy),
            verbosity: layers.iter().find_map(|l| l.verbosity).unwrap_or(d.verbosity),
            config_file_path,
        }
    }

    /// Reads the environment and the config file (flag path, then
    /// `AIRLIFT_CONFIG`) and applies `flags` on top.
    pub fn load(flags: &Layer, config_flag: Option<&Path>, vars: &BTreeMap<String, String>) -> Result<Self> {
        let env = Layer::from_env(vars)?;
        let path = config_flag
            .map(Path::to_path_buf)
            .or_else(|| vars.get(&format!("{ENV_PREFIX}CONFIG")).map(PathBuf::from));
        let file = match &path {
            Some(p) => Layer::load_file(p)?,
            None => Layer::default(),
        };
        Ok(GlobalConfig::resolve(flags, &env, &file, path))
    }
}
