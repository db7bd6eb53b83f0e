//! Run configuration. Layers, lowest first: built-in defaults, `UTTS_SEED`, the
//! JSON config file, command-line flags. Values that follow from the corpus or a
//! checkpoint are pinned afterwards and must agree with anything set explicitly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use unet_tts::corpus::CorpusSpec;
use unet_tts::model::ModelConfig;
use unet_tts::training::{TrainConfig, VERSION};

use crate::Failure;

pub const RUN_CONFIG_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Checkpoint runs land in subdirectories of this.
    pub runs: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub texts_per_cell: usize,
    pub dist_texts: usize,
    /// Validation points averaged at the end of each ablation curve.
    pub curve_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let model = ModelConfig {
            n_phonemes: 1 + corpus.n_voiced + corpus.n_unvoiced,
            n_speakers: corpus.n_train,
            ..ModelConfig::desk()
        };
        Self {
            version: VERSION.to_string(),
            paths: Paths {
                corpus: "corpus".into(),
                runs: "runs".into(),
                reports: "reports".into(),
            },
            corpus,
            model,
            train: TrainConfig::default(),
            eval: EvalConfig {
                seed: 0,
                texts_per_cell: 10,
                dist_texts: 2,
                curve_window: 3,
            },
        }
    }
}

/// Resolved configuration plus the leaves that were set explicitly (file or flag).
#[derive(Debug, Clone)]
pub struct Resolved {
    value: Value,
    explicit: BTreeMap<String, Value>,
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn merge(base: &mut Value, over: &Value, path: &str, explicit: &mut BTreeMap<String, Value>) -> Result<(), String> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = join(path, k);
                let slot = b.get_mut(k).ok_or_else(|| format!("unknown key `{p}`"))?;
                merge(slot, v, &p, explicit)?;
            }
            Ok(())
        }
        (b, o) if b.is_null() || std::mem::discriminant(b) == std::mem::discriminant(o) => {
            if o.is_object() {
                return Err(format!("`{path}`: expected {}, got an object", kind(b)));
            }
            *b = o.clone();
            explicit.insert(path.to_string(), o.clone());
            Ok(())
        }
        (b, o) => Err(format!("`{path}`: expected {}, got {}", kind(b), kind(o))),
    }
}

fn nest(path: &str, value: Value) -> Value {
    path.rsplit('.').fold(value, |inner, key| {
        let mut m = Map::new();
        m.insert(key.to_string(), inner);
        Value::Object(m)
    })
}

/// Parses `key.path=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), Failure> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl Resolved {
    /// `flags` are `(key.path, value)` pairs; `env_seed` is `UTTS_SEED` applied to `seed_key`.
    pub fn resolve(
        file: Option<&Path>,
        flags: &[(String, Value)],
        env_seed: Option<&str>,
        seed_key: &str,
    ) -> Result<Self, Failure> {
        let usage = Failure::Usage;
        let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        let mut scratch = BTreeMap::new();
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| usage(format!("UTTS_SEED must be an unsigned integer, got {s:?}")))?;
            merge(&mut value, &nest(seed_key, seed.into()), "", &mut scratch).map_err(usage)?;
        }
        let mut explicit = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            let over: Value = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: malformed JSON: {e}", path.display())))?;
            if !over.is_object() {
                return Err(usage(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut value, &over, "", &mut explicit)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        }
        for (key, v) in flags {
            merge(&mut value, &nest(key, v.clone()), "", &mut explicit).map_err(usage)?;
        }
        let resolved = Self { value, explicit };
        resolved.config()?;
        Ok(resolved)
    }

    pub fn config(&self) -> Result<RunConfig, Failure> {
        let mut cfg: RunConfig = typed(&self.value)?;
        cfg.version = VERSION.to_string();
        Ok(cfg)
    }

    /// Replaces the value at `path`; an explicit setting under it must agree.
    pub fn pin<T: Serialize>(&mut self, path: &str, actual: &T, reason: &str) -> Result<(), Failure> {
        let actual = serde_json::to_value(actual).expect("pinned value serializes");
        for (key, given) in self.explicit.range(path.to_string()..) {
            let Some(rest) = key.strip_prefix(path) else { break };
            if !(rest.is_empty() || rest.starts_with('.')) {
                continue;
            }
            let found = rest.split('.').filter(|s| !s.is_empty()).try_fold(&actual, |v, k| v.get(k));
            if found != Some(given) {
                return Err(Failure::Usage(format!(
                    "`{key}` is fixed by {reason} ({}); got {given}",
                    found.map_or("absent".to_string(), Value::to_string)
                )));
            }
        }
        let slot = path
            .split('.')
            .try_fold(&mut self.value, |v, k| v.get_mut(k))
            .ok_or_else(|| Failure::Usage(format!("unknown key `{path}`")))?;
        *slot = actual;
        Ok(())
    }

    /// Like [`Resolved::pin`] but overrides silently.
    pub fn set<T: Serialize>(&mut self, path: &str, value: &T) {
        self.explicit.retain(|k, _| k != path && !k.starts_with(&format!("{path}.")));
        self.pin(path, value, "").expect("no explicit values remain under the path");
    }
}

fn typed<T: DeserializeOwned>(value: &Value) -> Result<T, Failure> {
    serde_path_to_error::deserialize(value.clone()).map_err(|e| {
        let path = e.path().to_string();
        Failure::Usage(format!("`{path}`: {}", e.into_inner()))
    })
}

/// Validates every section; invalid values are usage errors.
pub fn validate(cfg: &RunConfig) -> Result<(), Failure> {
    let wrap = |e: unet_tts::Error| Failure::Usage(e.to_string());
    cfg.corpus.validate().map_err(wrap)?;
    cfg.model.validate().map_err(wrap)?;
    cfg.train.validate().map_err(wrap)?;
    if cfg.eval.texts_per_cell == 0 || cfg.eval.dist_texts == 0 || cfg.eval.curve_window == 0 {
        return Err(Failure::Usage("eval counts must be positive".into()));
    }
    Ok(())
}

pub fn write_run_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    fs::write(dir.join(RUN_CONFIG_FILE), text)?;
    Ok(())
}
