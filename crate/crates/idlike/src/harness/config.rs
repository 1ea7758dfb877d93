//! Line-oriented `key = value` run configuration with dotted section keys.
//!
//! No nesting: one key per line, `#` starts a comment, later occurrences of
//! a single-valued key win. `data.ood_test` and `prompts.template` may repeat.
//! Relative paths resolve against the config file's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::miner::MinerConfig;
use crate::prompt::{OutLossForm, TrainConfig};
use crate::{Error, Result};

const KNOWN_KEYS: &[&str] = &[
    "data.id_train",
    "data.id_test",
    "data.ood_test",
    "encoder.kind",
    "encoder.seed",
    "encoder.dim",
    "encoder.endpoint",
    "miner.M",
    "miner.Q",
    "miner.seed",
    "miner.scale_lo",
    "miner.scale_hi",
    "miner.aspect_lo",
    "miner.aspect_hi",
    "prompts.C",
    "prompts.L",
    "prompts.seed",
    "prompts.template",
    "loss.lambda_out",
    "loss.lambda_div",
    "loss.tau",
    "train.lr",
    "train.epochs",
    "train.seed",
    "train.out_loss_form",
    "train.batch_size",
    "train.weight_decay",
    "run.shots",
    "run.seed",
    "run.output_dir",
];

/// Keys that accumulate across repeated lines instead of overwriting.
const REPEATABLE_KEYS: &[&str] = &["data.ood_test", "prompts.template"];

/// Raw parsed config: ordered `(key, value)` pairs.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    pairs: Vec<(String, String)>,
    base_dir: PathBuf,
}

impl ConfigMap {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(Self {
            pairs,
            base_dir: base_dir.into(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, base)
    }

    /// Apply a `--key value` override. Repeatable keys are replaced wholesale
    /// the first time an override mentions them.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
        }
        if REPEATABLE_KEYS.contains(&key) {
            self.pairs.push((key.to_string(), value.to_string()));
        } else {
            self.pairs.retain(|(k, _)| k != key);
            self.pairs.push((key.to_string(), value.to_string()));
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn get_all(&self, key: &str) -> Vec<&str> {
        self.pairs
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<V>().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("key {key} has unparseable value {raw:?}"))
            }),
        }
    }

    fn resolve_path(&self, raw: &str) -> PathBuf {
        let p = PathBuf::from(raw);
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Which encoder backs a run.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderChoice {
    Toy { seed: u64, dim: usize },
    /// Out-of-process pretrained encoder speaking the adapter wire schema.
    Adapter { endpoint: String },
}

/// Fully-resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub id_train: Option<PathBuf>,
    pub id_test: Option<PathBuf>,
    pub ood_tests: Vec<PathBuf>,
    pub encoder: EncoderChoice,
    pub miner: MinerConfig,
    pub train: TrainConfig,
    pub num_ood_prompts: usize,
    pub token_len: usize,
    pub prompts_seed: u64,
    pub templates: Vec<String>,
    pub lambda_out: f64,
    pub lambda_div: f64,
    pub tau: f64,
    pub shots: usize,
    pub fewshot_seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let known: HashSet<&str> = KNOWN_KEYS.iter().copied().collect();
        for (key, _) in &map.pairs {
            if !known.contains(key.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
            }
        }

        let train_seed: u64 = map.parse_value("train.seed")?.unwrap_or(0);
        let train = TrainConfig {
            epochs: map.parse_value("train.epochs")?.unwrap_or(3),
            learning_rate: map.parse_value("train.lr")?.unwrap_or(0.005),
            batch_size: map.parse_value("train.batch_size")?.unwrap_or(1),
            weight_decay: map.parse_value("train.weight_decay")?.unwrap_or(0.0),
            seed: train_seed,
            out_loss_form: match map.get("train.out_loss_form") {
                None => OutLossForm::RatioB,
                Some(raw) => raw.parse()?,
            },
            ..TrainConfig::default()
        };
        train.validate()?;

        let miner = MinerConfig {
            crops_per_image: map.parse_value("miner.M")?.unwrap_or(256),
            keep_per_side: map.parse_value("miner.Q")?.unwrap_or(32),
            scale_range: (
                map.parse_value("miner.scale_lo")?.unwrap_or(0.1),
                map.parse_value("miner.scale_hi")?.unwrap_or(1.0),
            ),
            aspect_range: (
                map.parse_value("miner.aspect_lo")?.unwrap_or(0.75),
                map.parse_value("miner.aspect_hi")?.unwrap_or(4.0 / 3.0),
            ),
            seed: map.parse_value("miner.seed")?.unwrap_or(train_seed),
        };
        miner.validate()?;

        let encoder = match map.get("encoder.kind").unwrap_or("toy") {
            "toy" => {
                let dim = map.parse_value("encoder.dim")?.unwrap_or(512);
                if dim < 8 {
                    return Err(Error::InvalidConfig(format!(
                        "encoder.dim must be >= 8, got {dim}"
                    )));
                }
                EncoderChoice::Toy {
                    seed: map.parse_value("encoder.seed")?.unwrap_or(0),
                    dim,
                }
            }
            "adapter" => EncoderChoice::Adapter {
                endpoint: map
                    .get("encoder.endpoint")
                    .ok_or_else(|| {
                        Error::InvalidConfig(
                            "encoder.kind = adapter requires encoder.endpoint".into(),
                        )
                    })?
                    .to_string(),
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "encoder.kind {other:?} is not available (expected: toy or adapter)"
                )))
            }
        };

        let tau: f64 = map.parse_value("loss.tau")?.unwrap_or(0.01);
        if tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "loss.tau must be positive, got {tau}"
            )));
        }
        let lambda_out: f64 = map.parse_value("loss.lambda_out")?.unwrap_or(0.3);
        let lambda_div: f64 = map.parse_value("loss.lambda_div")?.unwrap_or(0.2);
        if lambda_out < 0.0 || lambda_div < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }

        let shots: usize = map.parse_value("run.shots")?.unwrap_or(1);
        if shots == 0 {
            return Err(Error::InvalidConfig("run.shots must be >= 1".into()));
        }

        let mut templates: Vec<String> = map
            .get_all("prompts.template")
            .into_iter()
            .map(str::to_string)
            .collect();
        if templates.is_empty() {
            templates.push("a photo of a {}".to_string());
        }

        Ok(Self {
            id_train: map.get("data.id_train").map(|p| map.resolve_path(p)),
            id_test: map.get("data.id_test").map(|p| map.resolve_path(p)),
            ood_tests: map
                .get_all("data.ood_test")
                .into_iter()
                .map(|p| map.resolve_path(p))
                .collect(),
            encoder,
            miner,
            train,
            num_ood_prompts: map.parse_value("prompts.C")?.unwrap_or(100),
            token_len: map.parse_value("prompts.L")?.unwrap_or(16),
            prompts_seed: map.parse_value("prompts.seed")?.unwrap_or(train_seed),
            templates,
            lambda_out,
            lambda_div,
            tau,
            shots,
            fewshot_seed: map.parse_value("run.seed")?.unwrap_or(train_seed),
            output_dir: map
                .get("run.output_dir")
                .map(|p| map.resolve_path(p))
                .unwrap_or_else(|| PathBuf::from("out")),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_map(&ConfigMap::from_file(path)?)
    }

    /// Canonical `key = value` rendering with sorted keys, used for the
    /// checkpoint snapshot.
    pub fn canonical(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        if let Some(p) = &self.id_train {
            lines.push(format!("data.id_train = {}", p.display()));
        }
        if let Some(p) = &self.id_test {
            lines.push(format!("data.id_test = {}", p.display()));
        }
        for p in &self.ood_tests {
            lines.push(format!("data.ood_test = {}", p.display()));
        }
        match &self.encoder {
            EncoderChoice::Toy { seed, dim } => {
                lines.push("encoder.kind = toy".to_string());
                lines.push(format!("encoder.seed = {seed}"));
                lines.push(format!("encoder.dim = {dim}"));
            }
            EncoderChoice::Adapter { endpoint } => {
                lines.push("encoder.kind = adapter".to_string());
                lines.push(format!("encoder.endpoint = {endpoint}"));
            }
        }
        lines.push(format!("loss.lambda_div = {}", self.lambda_div));
        lines.push(format!("loss.lambda_out = {}", self.lambda_out));
        lines.push(format!("loss.tau = {}", self.tau));
        lines.push(format!("miner.M = {}", self.miner.crops_per_image));
        lines.push(format!("miner.Q = {}", self.miner.keep_per_side));
        lines.push(format!("miner.aspect_hi = {}", self.miner.aspect_range.1));
        lines.push(format!("miner.aspect_lo = {}", self.miner.aspect_range.0));
        lines.push(format!("miner.scale_hi = {}", self.miner.scale_range.1));
        lines.push(format!("miner.scale_lo = {}", self.miner.scale_range.0));
        lines.push(format!("miner.seed = {}", self.miner.seed));
        lines.push(format!("prompts.C = {}", self.num_ood_prompts));
        lines.push(format!("prompts.L = {}", self.token_len));
        lines.push(format!("prompts.seed = {}", self.prompts_seed));
        for t in &self.templates {
            lines.push(format!("prompts.template = {t}"));
        }
        lines.push(format!("run.output_dir = {}", self.output_dir.display()));
        lines.push(format!("run.seed = {}", self.fewshot_seed));
        lines.push(format!("run.shots = {}", self.shots));
        lines.push(format!("train.batch_size = {}", self.train.batch_size));
        lines.push(format!("train.epochs = {}", self.train.epochs));
        lines.push(format!("train.lr = {}", self.train.learning_rate));
        lines.push(format!(
            "train.out_loss_form = {}",
            match self.train.out_loss_form {
                OutLossForm::RatioA => "ratio_a",
                OutLossForm::RatioB => "ratio_b",
            }
        ));
        lines.push(format!("train.seed = {}", self.train.seed));
        lines.push(format!("train.weight_decay = {}", self.train.weight_decay));
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Cache directory: `IDLIKE_CACHE_DIR` when set, else the output dir.
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var_os("IDLIKE_CACHE_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}
