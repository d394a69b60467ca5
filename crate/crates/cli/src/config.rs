//! Plain-text `key = value` configuration with `[section]` headers, layered
//! as preset defaults, then file values, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use attnprior_lm::config::{ExperimentConfig, GptConfig, Preset, TrainConfig};

use crate::error::{CliError, Result};

pub const DEFAULT_CORPUS: &str = "data/shakespeare_tragedies.txt";

/// Parses `text` into `section.key -> value`. Keys before the first section
/// header are top-level. `#` and `;` start comment lines.
pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |msg: String| CliError::Parse { path: path.to_path_buf(), line: i as u64 + 1, msg };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated section header {line:?}")))?;
            let name = name.trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err(format!("invalid section name {name:?}")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let k = k.trim();
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(err(format!("invalid key {k:?}")));
        }
        let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(err(format!("duplicate key {key:?}")));
        }
    }
    Ok(out)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every recognized key with its preset default.
pub fn defaults(preset: Preset) -> BTreeMap<String, String> {
    let ExperimentConfig { gpt, train, min_count, lambdas, sigmas, noise_draws } = preset.config();
    let fig2 = attnprior_core::attention_prior::Figure2Config::default();
    let fig3 = attnprior_core::attention_prior::Figure3Config::default();
    let entries: Vec<(&str, String)> = vec![
        ("preset", format!("{preset:?}").to_lowercase()),
        ("seed", train.seed.to_string()),
        ("out", "out".into()),
        ("prior.a", "-0.25".into()),
        ("prior.w_q", String::new()),
        ("prior.w_k", String::new()),
        ("prior.w_v", String::new()),
        ("prior.sigma", "1".into()),
        ("prior.mode", "strict".into()),
        ("figures.x1", fig2.x1.to_string()),
        ("figures.x2", fig2.x2.to_string()),
        ("figures.x3_min", fig2.x3_min.to_string()),
        ("figures.x3_max", fig2.x3_max.to_string()),
        ("figures.x3_points", fig2.x3_points.to_string()),
        ("figures.couplings", join(&fig2.couplings)),
        ("figures.var_max", fig2.var_max.to_string()),
        ("figures.var_points", fig2.var_points.to_string()),
        ("figures.population_a", "0.2".into()),
        ("figures.population_size", fig3.sequences.to_string()),
        ("figures.population_len", fig3.len.to_string()),
        ("figures.population_std", fig3.embed_std.to_string()),
        ("model.d_model", gpt.d_model.to_string()),
        ("model.n_heads", gpt.n_heads.to_string()),
        ("model.n_layers", gpt.n_layers.to_string()),
        ("model.context", gpt.context.to_string()),
        ("model.dropout", gpt.dropout.to_string()),
        ("model.tied", gpt.tied.to_string()),
        ("train.corpus", DEFAULT_CORPUS.into()),
        ("train.min_count", min_count.to_string()),
        ("train.lambda", train.lambda_m.to_string()),
        ("train.sigma", train.sigma.to_string()),
        ("train.lr", train.lr.to_string()),
        ("train.weight_decay", train.weight_decay.to_string()),
        ("train.epochs", train.epochs.to_string()),
        ("train.batch", train.batch.to_string()),
        ("train.clip", train.clip.to_string()),
        ("train.quadratic", train.quadratic.to_string()),
        ("train.freeze_prior", train.freeze_prior.to_string()),
        ("train.steps_per_epoch", train.steps_per_epoch.to_string()),
        ("train.eval_windows", train.eval_windows.to_string()),
        ("robustness.sigma_max", sigmas.last().copied().unwrap_or(0.5).to_string()),
        ("robustness.points", sigmas.len().to_string()),
        ("robustness.draws", noise_draws.to_string()),
        ("sweep.lambdas", join(&lambdas)),
        ("sweep.sigma", attnprior_lm::sweep::SWEEP_SIGMA.to_string()),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// The effective configuration of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub sigma_max: Option<f64>,
    pub epochs: Option<usize>,
    pub corpus: Option<PathBuf>,
}

impl RunConfig {
    /// Preset defaults, overlaid with `file` (if any), overlaid with flags.
    /// The preset is taken from the flag, else the file, else `desk`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let file_values = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                parse_config(&text, p)?
            }
            None => BTreeMap::new(),
        };
        let preset = match (flags.preset, file_values.get("preset")) {
            (Some(p), _) => p,
            (None, Some(s)) => Preset::from_str(s).map_err(|e| CliError::config("preset", e.to_string()))?,
            (None, None) => Preset::Desk,
        };
        let mut values = defaults(preset);
        for (k, v) in file_values {
            if !values.contains_key(&k) {
                return Err(CliError::config(&k, "unknown key"));
            }
            values.insert(k, v);
        }
        values.insert("preset".into(), format!("{preset:?}").to_lowercase());
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        };
        set("seed", flags.seed.map(|v| v.to_string()));
        set("out", flags.out.as_ref().map(|p| p.display().to_string()));
        set("train.lambda", flags.lambda.map(|v| v.to_string()));
        set("robustness.sigma_max", flags.sigma_max.map(|v| v.to_string()));
        set("train.epochs", flags.epochs.map(|v| v.to_string()));
        set("train.corpus", flags.corpus.as_ref().map(|p| p.display().to_string()));
        Ok(RunConfig { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).parse().map_err(|e: T::Err| CliError::config(key, format!("{:?}: {e}", self.raw(key))))
    }

    /// Comma-separated reals; empty means none.
    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.raw(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|e| CliError::config(key, format!("{s:?}: {e}"))))
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn corpus(&self) -> PathBuf {
        PathBuf::from(self.raw("train.corpus"))
    }

    pub fn gpt(&self) -> Result<GptConfig> {
        Ok(GptConfig {
            d_model: self.get("model.d_model")?,
            n_heads: self.get("model.n_heads")?,
            n_layers: self.get("model.n_layers")?,
            context: self.get("model.context")?,
            vocab: 0,
            dropout: self.get("model.dropout")?,
            tied: self.get("model.tied")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lambda_m: self.get("train.lambda")?,
            sigma: self.get("train.sigma")?,
            lr: self.get("train.lr")?,
            weight_decay: self.get("train.weight_decay")?,
            epochs: self.get("train.epochs")?,
            batch: self.get("train.batch")?,
            clip: self.get("train.clip")?,
            seed: self.seed()?,
            quadratic: self.get("train.quadratic")?,
            freeze_prior: self.get("train.freeze_prior")?,
            steps_per_epoch: self.get("train.steps_per_epoch")?,
            eval_windows: self.get("train.eval_windows")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `points` equally spaced noise levels in `[0, sigma_max]`.
    pub fn sigma_grid(&self) -> Result<Vec<f64>> {
        let max: f64 = self.get("robustness.sigma_max")?;
        let n: usize = self.get("robustness.points")?;
        if !(max >= 0.0) || n < 2 {
            return Err(CliError::config("robustness.points", "need at least 2 points and sigma_max >= 0"));
        }
        Ok((0..n).map(|i| max * i as f64 / (n - 1) as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_comments_and_errors() {
        let p = Path::new("x.cfg");
        let m = parse_config("seed = 3\n# note\n[train]\nlambda=0.1\n\n[model]\n d_model = 16 \n", p).unwrap();
        assert_eq!(m["seed"], "3");
        assert_eq!(m["train.lambda"], "0.1");
        assert_eq!(m["model.d_model"], "16");
        let e = parse_config("[train]\nlambda\n", p).unwrap_err();
        assert_eq!(e.to_string(), "x.cfg:2: expected key = value, got \"lambda\"");
        assert!(parse_config("a=1\na=2\n", p).is_err());
        assert!(parse_config("[bad\n", p).is_err());
    }

    #[test]
    fn flags_override_file_and_preset() {
        let dir = std::env::temp_dir().join(format!("attnprior-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let f = dir.join("run.cfg");
        std::fs::write(&f, "seed = 5\n[train]\nlambda = 0.1\nepochs = 2\n").unwrap();
        let flags = Overrides { lambda: Some(0.02), ..Default::default() };
        let c = RunConfig::resolve(Some(&f), &flags).unwrap();
        assert_eq!(c.seed().unwrap(), 5);
        assert_eq!(c.train().unwrap().lambda_m, 0.02);
        assert_eq!(c.train().unwrap().epochs, 2);
        std::fs::write(&f, "[train]\nlamda = 0.1\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&f), &flags), Err(CliError::Config { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn default_sigma_grid_has_eleven_points() {
        let c = RunConfig::resolve(None, &Overrides::default()).unwrap();
        let g = c.sigma_grid().unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!((g[0], g[6], g[10]), (0.0, 0.3, 0.5));
        assert_eq!(c.list("sweep.lambdas").unwrap(), vec![0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2]);
    }
}
