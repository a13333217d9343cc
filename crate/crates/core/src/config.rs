//! Run configuration, layered as flag > environment > file > default.
//!
//! Every setting has the same key in all three layers: `max_attempts` in the
//! TOML file, `CAPSULE_MAX_ATTEMPTS` in the environment, `--max-attempts` on
//! the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendKind, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::dataset::{BigCodeBenchSplit, SourceFormat};
use crate::refine::DEFAULT_BUDGET;
use crate::sandbox::ExecKind;

pub const ENV_PREFIX: &str = "CAPSULE_";

/// When to add the inferred signature hint to the generation prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintMode {
    /// Only for formats whose descriptions carry no signature.
    #[default]
    Auto,
    Always,
    Never,
}

impl FromStr for HintMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(HintMode::Auto),
            "always" => Ok(HintMode::Always),
            "never" => Ok(HintMode::Never),
            other => Err(format!("unknown hint mode '{other}' (expected auto, always or never)")),
        }
    }
}

impl HintMode {
    pub fn applies_to(self, format: SourceFormat) -> bool {
        match self {
            HintMode::Auto => !format.provides_signature(),
            HintMode::Always => true,
            HintMode::Never => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {message}")]
    Value { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

macro_rules! config_fields {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Fully resolved settings for a run.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        /// One configuration layer. Unset keys fall through to the next layer.
        #[derive(Debug, Clone, Default, PartialEq, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct PartialConfig {
            $( pub $name: Option<<$ty as Layered>::Value>, )*
        }

        impl PartialConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name), )*];

            /// Fills unset keys from `lower`.
            pub fn or(self, lower: PartialConfig) -> PartialConfig {
                PartialConfig { $( $name: self.$name.or(lower.$name), )* }
            }

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $( stringify!($name) => {
                        self.$name = Some(<$ty as Layered>::parse(value).map_err(|message| ConfigError::Value {
                            key: key.to_string(),
                            message,
                        })?);
                    } )*
                    other => return Err(ConfigError::Value { key: other.to_string(), message: "unknown key".into() }),
                }
                Ok(())
            }

            /// Applies this layer over the defaults.
            pub fn resolve(self) -> Result<RunConfig, ConfigError> {
                let d = RunConfig::default();
                let c = RunConfig { $( $name: <$ty as Layered>::apply(d.$name, self.$name), )* };
                c.validate()?;
                Ok(c)
            }
        }
    };
}

/// Maps a config field type to the value a layer stores for it.
pub trait Layered: Sized {
    type Value: Clone + fmt::Debug + PartialEq + for<'de> Deserialize<'de>;
    fn parse(s: &str) -> Result<Self::Value, String>;
    fn apply(default: Self, v: Option<Self::Value>) -> Self;
}

macro_rules! layered_plain {
    ($($t:ty),*) => {$(
        impl Layered for $t {
            type Value = $t;
            fn parse(s: &str) -> Result<$t, String> {
                s.trim().parse::<$t>().map_err(|e| e.to_string())
            }
            fn apply(default: $t, v: Option<$t>) -> $t {
                v.unwrap_or(default)
            }
        }
    )*};
}

layered_plain!(usize, u32, f64, bool, String, PathBuf);

macro_rules! layered_enum {
    ($($t:ty),*) => {$(
        impl Layered for $t {
            type Value = $t;
            fn parse(s: &str) -> Result<$t, String> {
                s.trim().parse::<$t>()
            }
            fn apply(default: $t, v: Option<$t>) -> $t {
                v.unwrap_or(default)
            }
        }
    )*};
}

layered_enum!(SourceFormat, BackendKind, ExecKind, HintMode, BigCodeBenchSplit);

impl<T> Layered for Option<T>
where
    T: Layered<Value = T> + Clone + fmt::Debug + PartialEq + for<'de> Deserialize<'de>,
{
    type Value = T;
    fn parse(s: &str) -> Result<T, String> {
        T::parse(s)
    }
    fn apply(default: Option<T>, v: Option<T>) -> Option<T> {
        v.or(default)
    }
}

config_fields! {
    dataset_path: Option<PathBuf> = None,
    format: SourceFormat = SourceFormat::Custom,
    /// BigCodeBench prompt variant used as the description.
    split: BigCodeBenchSplit = BigCodeBenchSplit::Complete,
    backend: BackendKind = BackendKind::Mock,
    model_name: String = "gpt-4-1106-preview".to_string(),
    temperature: f64 = 0.0,
    max_output_tokens: u32 = DEFAULT_MAX_OUTPUT_TOKENS,
    /// Fix-mode attempts after the initial generation.
    max_attempts: usize = 5,
    timeout_secs: f64 = 10.0,
    workers: usize = 1,
    /// In-flight completion requests allowed across all workers.
    max_concurrent_requests: usize = 4,
    error_budget: usize = DEFAULT_BUDGET,
    exec_backend: ExecKind = ExecKind::Subprocess,
    output_path: PathBuf = PathBuf::from("runlog.jsonl"),
    keep_artifacts: bool = false,
    record_transcript: Option<PathBuf> = None,
    mock_script: Option<PathBuf> = None,
    replay_transcript: Option<PathBuf> = None,
    hint_mode: HintMode = HintMode::Auto,
    work_dir: Option<PathBuf> = None,
    guidance_file: Option<PathBuf> = None,
    prompts_dir: Option<PathBuf> = None,
    python: String = "python3".to_string(),
    engine: String = "docker".to_string(),
    image: String = "python:3.11-slim".to_string(),
    memory_limit: Option<String> = None,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad("timeout_secs must be > 0");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if self.max_concurrent_requests == 0 {
            return bad("max_concurrent_requests must be >= 1");
        }
        if self.error_budget < crate::refine::MIN_BUDGET {
            return Err(ConfigError::Invalid(format!("error_budget must be >= {}", crate::refine::MIN_BUDGET)));
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        Ok(())
    }

    /// Builds the configuration from its layers.
    pub fn layered(flags: PartialConfig, env: PartialConfig, file: PartialConfig) -> Result<RunConfig, ConfigError> {
        flags.or(env).or(file).resolve()
    }
}

impl PartialConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    /// Reads `CAPSULE_<KEY>` variables through `get`.
    pub fn from_env_with(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut p = PartialConfig::default();
        for key in Self::KEYS {
            let var = format!("{ENV_PREFIX}{}", key.to_ascii_uppercase());
            if let Some(v) = get(&var) {
                p.set(key, &v).map_err(|e| match e {
                    ConfigError::Value { message, .. } => ConfigError::Value { key: var.clone(), message },
                    other => other,
                })?;
            }
        }
        Ok(p)
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_env_with(|k| std::env::var(k).ok())
    }
}
