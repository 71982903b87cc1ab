//! Run configuration: defaults, a `key = value` file, then flag overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use implicit_sent::layers::CellKind;
use implicit_sent::training::{Optimizer, TrainConfig};
use implicit_sent::{ModelKind, ModelSpec};

use crate::error::CliError;

/// Flags shared by every command that builds or trains a model. Values are
/// kept as text and applied with the same parser as the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// Config file with one `key = value` per line; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// dnn, cnn, lstm, bilstm or bilstm_attention.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub train: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub test: Option<String>,
    /// word2vec text-format vectors.
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub replicates: Option<String>,
    #[arg(long)]
    pub max_len: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<String>,
    #[arg(long)]
    pub dropout: Option<String>,
    /// lstm or gru.
    #[arg(long)]
    pub cell: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub trainable_embeddings: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let fields = [
            ("model", &self.model),
            ("train", &self.train),
            ("test", &self.test),
            ("embeddings", &self.embeddings),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("optimizer", &self.optimizer),
            ("seed", &self.seed),
            ("replicates", &self.replicates),
            ("max_len", &self.max_len),
            ("embedding_dim", &self.embedding_dim),
            ("dropout", &self.dropout),
            ("cell", &self.cell),
            ("trainable_embeddings", &self.trainable_embeddings),
            ("out", &self.out),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for (key, value) in self.overrides() {
            config.set(key, value).map_err(|e| CliError::config(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
        Ok(config)
    }
}

/// Model spec, training settings and data paths for one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Explicit learning rate; otherwise the optimizer's default applies.
    pub lr: Option<f64>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn num<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{value:?}: {e}"))
}

fn flag(value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{value:?} is not a boolean")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut config = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("config line {}: expected `key = value`", i + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| CliError::config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let spec = &mut self.spec;
        let train = &mut self.train;
        match key.replace('-', "_").as_str() {
            "model" => spec.kind = value.parse::<ModelKind>().map_err(|e| e.to_string())?,
            "train" => self.train_path = Some(value.into()),
            "test" => self.test_path = Some(value.into()),
            "embeddings" => self.embeddings_path = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "epochs" => train.epochs = num(value)?,
            "batch_size" => train.batch_size = num(value)?,
            "lr" => self.lr = Some(num(value)?),
            "optimizer" => train.optimizer = value.parse::<Optimizer>()?,
            "seed" => train.seed = num(value)?,
            "replicates" => train.replicates = num(value)?,
            "clip_norm" => train.clip_norm = num(value)?,
            "max_len" => spec.max_len = num(value)?,
            "embedding_dim" => spec.embedding_dim = num(value)?,
            "dropout" => spec.dropout = num(value)?,
            "dnn_dims" => {
                spec.dnn_dims = value
                    .split(',')
                    .map(|d| num(d.trim()))
                    .collect::<Result<_, _>>()?
            }
            "lstm_hidden" => spec.lstm_hidden = num(value)?,
            "conv_filters" => spec.conv_filters = num(value)?,
            "kernel_width" => spec.kernel_width = num(value)?,
            "attention_dim" => {
                spec.attention_dim = match value {
                    "none" | "" => None,
                    v => Some(num(v)?),
                }
            }
            "cell" => {
                spec.cell = match value.to_ascii_lowercase().as_str() {
                    "lstm" => CellKind::Lstm,
                    "gru" => CellKind::Gru,
                    other => return Err(format!("unknown cell {other:?} (expected lstm or gru)")),
                }
            }
            "trainable_embeddings" => spec.trainable_embeddings = flag(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Training settings with the learning rate resolved.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.learning_rate = self.lr.unwrap_or_else(|| t.optimizer.default_learning_rate());
        t
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.spec.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.train_config().validate().map_err(|e| CliError::config(e.to_string()))
    }

    /// The effective configuration in the file format [`RunConfig::parse`]
    /// reads.
    pub fn echo(&self) -> String {
        let s = &self.spec;
        let t = self.train_config();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("model", s.kind.to_string());
        for (k, p) in [
            ("train", path(&self.train_path)),
            ("test", path(&self.test_path)),
            ("embeddings", path(&self.embeddings_path)),
            ("out", path(&self.out)),
        ] {
            if let Some(p) = p {
                line(k, p);
            }
        }
        line("epochs", t.epochs.to_string());
        line("batch_size", t.batch_size.to_string());
        line("optimizer", t.optimizer.to_string());
        line("lr", t.learning_rate.to_string());
        line("seed", t.seed.to_string());
        line("replicates", t.replicates.to_string());
        line("clip_norm", t.clip_norm.to_string());
        line("max_len", s.max_len.to_string());
        line("embedding_dim", s.embedding_dim.to_string());
        line("dropout", s.dropout.to_string());
        line("dnn_dims", s.dnn_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        line("lstm_hidden", s.lstm_hidden.to_string());
        line("conv_filters", s.conv_filters.to_string());
        line("kernel_width", s.kernel_width.to_string());
        line("attention_dim", s.attention_dim.map_or("none".into(), |d| d.to_string()));
        line("cell", format!("{:?}", s.cell).to_ascii_lowercase());
        line("trainable_embeddings", s.trainable_embeddings.to_string());
        out
    }

    /// The named path, or a config error naming the missing setting.
    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::config(format!("no {key} path given (use --{key} or `{key} =` in the config)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_model_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.spec, ModelSpec::default());
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn parses_file_format() {
        let c = RunConfig::parse("# comment\nmodel = bilstm\nepochs=3\n\ndnn_dims = 8, 4\ncell = gru\ntrainable-embeddings = yes\n").unwrap();
        assert_eq!(c.spec.kind, ModelKind::Bilstm);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.spec.dnn_dims, vec![8, 4]);
        assert_eq!(c.spec.cell, CellKind::Gru);
        assert!(c.spec.trainable_embeddings);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let e = RunConfig::parse("epochs = 2\nnonsense\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = RunConfig::parse("colour = blue").unwrap_err();
        assert!(e.to_string().contains("unknown key"), "{e}");
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("model = rnn").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "model = cnn\nepochs = 4\nseed = 9\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            epochs: Some("7".into()),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!((c.spec.kind, c.train.epochs, c.train.seed), (ModelKind::Cnn, 7, 9));
    }

    #[test]
    fn learning_rate_follows_optimizer_unless_set() {
        let c = RunConfig::parse("optimizer = sgd").unwrap();
        assert_eq!(c.train_config().learning_rate, Optimizer::Sgd.default_learning_rate());
        let c = RunConfig::parse("optimizer = sgd\nlr = 0.25").unwrap();
        assert_eq!(c.train_config().learning_rate, 0.25);
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig::parse("model = bilstm_attention\ntrain = a.tsv\nlr = 0.003\nattention_dim = 16\ndropout = 0.25").unwrap();
        let again = RunConfig::parse(&c.echo()).unwrap();
        assert_eq!(again.echo(), c.echo());
        assert_eq!(again.train_config(), c.train_config());
        assert_eq!(again.spec, c.spec);
        c.lr = None;
        assert_eq!(RunConfig::parse(&c.echo()).unwrap().train_config(), c.train_config());
    }
}
