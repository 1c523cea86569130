//! Run configuration: built-in defaults, then the TOML file, then
//! `MOECTL_SEED`, then command-line flags.
//!
//! Also the flat `key = value` block stored inside checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use moe_edit_core::dataset::FilterPolicy;
use moe_edit_core::model::ModelConfig;
use moe_edit_core::moe::GatePooling;
use moe_edit_core::training::{SamplingConfig, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "MOECTL_SEED";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    model: ModelSection,
    train: TrainSection,
    filter: FilterSection,
    corpus: CorpusSection,
    clients: ClientsSection,
    sampling: SamplingSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    preset: Option<String>,
    vocab: Option<usize>,
    dim: Option<usize>,
    max_len: Option<usize>,
    hidden: Option<usize>,
    experts: Option<usize>,
    image: Option<usize>,
    channels: Option<usize>,
    attn_dim: Option<usize>,
    time_dim: Option<usize>,
    timesteps: Option<usize>,
    beta_start: Option<f64>,
    beta_end: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    w: Option<f64>,
    learning_rate: Option<f64>,
    steps: Option<u64>,
    batch_size: Option<usize>,
    moe: Option<bool>,
    gate_pooling: Option<String>,
    freeze_encoder: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FilterSection {
    min_height: Option<usize>,
    min_width: Option<usize>,
    min_aesthetic: Option<f64>,
    min_clip: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CorpusSection {
    per_family: Option<usize>,
    image_size: Option<usize>,
    text_scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ClientsSection {
    enabled: Option<bool>,
    captioner: Option<String>,
    generator: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SamplingSection {
    steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub per_family: usize,
    pub image_size: usize,
    pub text_scales: Vec<f64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            per_family: 100,
            image_size: 16,
            text_scales: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientsConfig {
    /// Route pairs through the caption and generator clients instead of the
    /// procedural transforms.
    pub enabled: bool,
    pub captioner: String,
    pub generator: String,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            captioner: "template".into(),
            generator: "procedural".into(),
        }
    }
}

/// Every setting a command may need.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter: FilterPolicy,
    pub corpus: CorpusConfig,
    pub clients: ClientsConfig,
    pub sampling: SamplingConfig,
}

pub fn model_preset(name: &str) -> CliResult<ModelConfig> {
    match name {
        "tiny" => Ok(ModelConfig::tiny()),
        "small" => Ok(ModelConfig::small()),
        "default" => Ok(ModelConfig::default()),
        other => Err(CliError::config(format!("unknown model preset {other:?} (tiny, small, default)"))),
    }
}

pub fn parse_pooling(s: &str) -> CliResult<GatePooling> {
    GatePooling::parse(s).map_err(CliError::from)
}

impl RunConfig {
    /// Defaults overlaid with `path` (if any) and `MOECTL_SEED` (if set).
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        Self::from_toml(&text, env_seed)
    }

    pub fn from_toml(text: &str, env_seed: Option<u64>) -> CliResult<Self> {
        let file: FileConfig = toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        let mut c = RunConfig::default();

        let m = &file.model;
        if let Some(p) = &m.preset {
            c.model = model_preset(p)?;
        }
        let model = &mut c.model;
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut model.encoder.vocab, m.vocab);
        set(&mut model.encoder.max_len, m.max_len);
        if let Some(d) = m.dim {
            model.encoder.dim = d;
            model.moe.dim = d;
            model.moe.hidden = 4 * d;
            model.denoiser.cond_dim = d;
        }
        set(&mut model.moe.hidden, m.hidden);
        set(&mut model.moe.experts, m.experts);
        set(&mut model.denoiser.image, m.image);
        set(&mut model.denoiser.channels, m.channels);
        set(&mut model.denoiser.attn_dim, m.attn_dim);
        set(&mut model.denoiser.time_dim, m.time_dim);
        set(&mut model.timesteps, m.timesteps);
        if let Some(v) = m.beta_start {
            model.beta_start = v;
        }
        if let Some(v) = m.beta_end {
            model.beta_end = v;
        }

        let t = &file.train;
        let train = &mut c.train;
        if let Some(v) = t.w {
            train.w = v;
        }
        if let Some(v) = t.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = t.steps {
            train.steps = v;
        }
        set(&mut train.batch_size, t.batch_size);
        if let Some(v) = t.moe {
            train.moe_enabled = v;
        }
        if let Some(p) = &t.gate_pooling {
            train.gate_pooling = parse_pooling(p)?;
        }
        if let Some(v) = t.freeze_encoder {
            train.freeze_encoder = v;
        }

        let f = &file.filter;
        set(&mut c.filter.min_height, f.min_height);
        set(&mut c.filter.min_width, f.min_width);
        if let Some(v) = f.min_aesthetic {
            c.filter.min_aesthetic = v;
        }
        if let Some(v) = f.min_clip {
            c.filter.min_clip = v;
        }

        set(&mut c.corpus.per_family, file.corpus.per_family);
        set(&mut c.corpus.image_size, file.corpus.image_size);
        if let Some(v) = &file.corpus.text_scales {
            c.corpus.text_scales = v.clone();
        }

        if let Some(v) = file.clients.enabled {
            c.clients.enabled = v;
        }
        if let Some(v) = &file.clients.captioner {
            c.clients.captioner = v.clone();
        }
        if let Some(v) = &file.clients.generator {
            c.clients.generator = v.clone();
        }
        set(&mut c.sampling.steps, file.sampling.steps);

        if let Some(s) = file.seed {
            c.set_seed(s);
        }
        if let Some(s) = env_seed {
            c.set_seed(s);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.sampling.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.apply(self.model).validate()?;
        self.train.validate()?;
        self.filter.validate()?;
        if self.corpus.per_family == 0 {
            return Err(CliError::config("corpus.per_family must be at least 1"));
        }
        if self.corpus.text_scales.is_empty() || self.corpus.text_scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(CliError::config("corpus.text_scales must be non-empty and nonnegative"));
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.model.timesteps {
            return Err(CliError::config(format!("sampling.steps must be in 1..={}", self.model.timesteps)));
        }
        Ok(())
    }

    /// Model layout with the training switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        self.train.apply(self.model)
    }
}

/// Flat `key = value` encoding of the configs a checkpoint needs.
pub fn to_kv(model: &ModelConfig, train: &TrainConfig) -> String {
    let entries: Vec<(&str, String)> = vec![
        ("model.vocab", model.encoder.vocab.to_string()),
        ("model.dim", model.encoder.dim.to_string()),
        ("model.max_len", model.encoder.max_len.to_string()),
        ("model.moe_dim", model.moe.dim.to_string()),
        ("model.hidden", model.moe.hidden.to_string()),
        ("model.experts", model.moe.experts.to_string()),
        ("model.pooling", model.moe.pooling.as_str().to_string()),
        ("model.image", model.denoiser.image.to_string()),
        ("model.channels", model.denoiser.channels.to_string()),
        ("model.cond_dim", model.denoiser.cond_dim.to_string()),
        ("model.attn_dim", model.denoiser.attn_dim.to_string()),
        ("model.time_dim", model.denoiser.time_dim.to_string()),
        ("model.timesteps", model.timesteps.to_string()),
        ("model.beta_start", format!("{:?}", model.beta_start)),
        ("model.beta_end", format!("{:?}", model.beta_end)),
        ("model.moe_enabled", model.moe_enabled.to_string()),
        ("model.freeze_encoder", model.freeze_encoder.to_string()),
        ("train.w", format!("{:?}", train.w)),
        ("train.learning_rate", format!("{:?}", train.learning_rate)),
        ("train.steps", train.steps.to_string()),
        ("train.seed", train.seed.to_string()),
        ("train.batch_size", train.batch_size.to_string()),
        ("train.moe_enabled", train.moe_enabled.to_string()),
        ("train.gate_pooling", train.gate_pooling.as_str().to_string()),
        ("train.freeze_encoder", train.freeze_encoder.to_string()),
    ];
    entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Inverse of [`to_kv`]; every key must be present.
pub fn from_kv(text: &str) -> Result<(ModelConfig, TrainConfig), String> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once(" = ").ok_or_else(|| format!("bad config line {line:?}"))?;
        map.insert(k.trim(), v.trim());
    }
    fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T, String> {
        let raw = map.get(key).ok_or_else(|| format!("missing config key {key}"))?;
        raw.parse().map_err(|_| format!("bad value {raw:?} for {key}"))
    }
    let pooling = |key: &str| -> Result<GatePooling, String> {
        let raw: String = get(&map, key)?;
        GatePooling::parse(&raw).map_err(|e| e.to_string())
    };
    let mut model = ModelConfig::default();
    model.encoder.vocab = get(&map, "model.vocab")?;
    model.encoder.dim = get(&map, "model.dim")?;
    model.encoder.max_len = get(&map, "model.max_len")?;
    model.moe.dim = get(&map, "model.moe_dim")?;
    model.moe.hidden = get(&map, "model.hidden")?;
    model.moe.experts = get(&map, "model.experts")?;
    model.moe.pooling = pooling("model.pooling")?;
    model.denoiser.image = get(&map, "model.image")?;
    model.denoiser.channels = get(&map, "model.channels")?;
    model.denoiser.cond_dim = get(&map, "model.cond_dim")?;
    model.denoiser.attn_dim = get(&map, "model.attn_dim")?;
    model.denoiser.time_dim = get(&map, "model.time_dim")?;
    model.timesteps = get(&map, "model.timesteps")?;
    model.beta_start = get(&map, "model.beta_start")?;
    model.beta_end = get(&map, "model.beta_end")?;
    model.moe_enabled = get(&map, "model.moe_enabled")?;
    model.freeze_encoder = get(&map, "model.freeze_encoder")?;
    let train = TrainConfig {
        w: get(&map, "train.w")?,
        learning_rate: get(&map, "train.learning_rate")?,
        steps: get(&map, "train.steps")?,
        seed: get(&map, "train.seed")?,
        batch_size: get(&map, "train.batch_size")?,
        moe_enabled: get(&map, "train.moe_enabled")?,
        gate_pooling: pooling("train.gate_pooling")?,
        freeze_encoder: get(&map, "train.freeze_encoder")?,
    };
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("", None).unwrap(), RunConfig::default());
    }

    #[test]
    fn file_then_env_seed() {
        let c = RunConfig::from_toml("seed = 4\n[train]\nw = 0.25\nsteps = 9\n", None).unwrap();
        assert_eq!((c.seed, c.train.seed, c.train.w, c.train.steps), (4, 4, 0.25, 9));
        let c = RunConfig::from_toml("seed = 4\n", Some(11)).unwrap();
        assert_eq!(c.train.seed, 11);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "[train]\nmomentum = 0.9\n",
            "[train]\nsteps = 0\n",
            "[model]\npreset = \"huge\"\n",
            "[train]\nw = -1.0\n",
        ] {
            let err = RunConfig::from_toml(text, None).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let mut model = ModelConfig::tiny();
        model.beta_start = 0.1 + 0.2;
        let train = TrainConfig {
            w: 1.0 / 3.0,
            ..TrainConfig::default()
        };
        let (m, t) = from_kv(&to_kv(&model, &train)).unwrap();
        assert_eq!(m, model);
        assert_eq!(t, train);
        assert!(from_kv("model.vocab = 3\n").is_err());
    }
}
