//! The on-disk layout of one run:
//! `config.json`, `data/manifests.json`, `base.lwbk`, `bank.lwbk`,
//! `reports/*.json` and `logs/*.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lorawhisper::bank::load_base;
use lorawhisper::experiment::{ExperimentConfig, LanguageManifest, Suite};
use lorawhisper::{AdapterBank, BaseWeights};

use crate::exit::CliError;

pub struct RunDir {
    pub root: PathBuf,
    pub force: bool,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        Self { root: root.into(), force }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn existing(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(CliError::Missing(p).into());
        }
        Ok(p)
    }

    /// Refuses to overwrite unless `--force` was given.
    pub fn claim(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.force {
            return Err(CliError::Exists(p).into());
        }
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.claim(rel)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: serde::Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write(rel, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let p = self.existing("config.json")?;
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn suite(&self, cfg: &ExperimentConfig) -> Result<Suite> {
        let p = self.existing("data/manifests.json")?;
        let manifests: Vec<LanguageManifest> =
            serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
        Ok(Suite::from_manifests(&manifests, cfg.model.special().eot)?)
    }

    pub fn base(&self, rel: &str, cfg: &ExperimentConfig) -> Result<BaseWeights> {
        let p = self.existing(rel)?;
        let base = load_base(&p).with_context(|| format!("loading {}", p.display()))?;
        if base.config() != &cfg.model {
            return Err(CliError::Invalid(format!("{} was trained with a different model config", p.display())).into());
        }
        Ok(base)
    }

    pub fn bank(&self, rel: &str, base: &BaseWeights) -> Result<AdapterBank> {
        let p = self.existing(rel)?;
        AdapterBank::load(&p, Some(&base.fingerprint())).with_context(|| format!("loading {}", p.display()))
    }
}

/// True if `dir` exists and has at least one entry.
pub fn non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}
