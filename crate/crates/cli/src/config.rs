//! Run configuration documents (TOML or JSON).

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use locemb::embedding::{self, EmbeddingStore, DEFAULT_TEXT_DIM};
use locemb::eval::{self, EvalOptions};
use locemb::poi::{DescriptionVariant, PoiRecord};
use locemb::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Invalid;

/// Where the text vectors for one description variant come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSource {
    /// GEMB vector file and its id sidecar. When absent, vectors come from
    /// the hashing encoder.
    pub vectors: Option<PathBuf>,
    pub ids: Option<PathBuf>,
    pub truncate_dims: Option<usize>,
    /// Dimension of hashing-encoder vectors (default 384).
    pub fallback_dim: Option<usize>,
    pub fallback_seed: u64,
}

impl TextSource {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.vectors, &mut self.ids].into_iter().flatten() {
            *p = base.join(&*p);
        }
    }

    fn problems(&self, what: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.vectors.is_some() != self.ids.is_some() {
            out.push(format!("{what}: `vectors` and `ids` must be given together"));
        }
        if self.truncate_dims == Some(0) {
            out.push(format!("{what}: truncate_dims must be positive"));
        }
        if self.fallback_dim.is_some_and(|d| d < 8) {
            out.push(format!("{what}: fallback_dim must be at least 8"));
        }
        out
    }

    pub fn tag(&self) -> &'static str {
        if self.vectors.is_some() {
            "external"
        } else {
            "fallback"
        }
    }

    /// Loads (or computes) the vectors for `records` rendered as `variant`.
    pub fn load(&self, records: &[PoiRecord], variant: DescriptionVariant) -> Result<EmbeddingStore> {
        let store = match (&self.vectors, &self.ids) {
            (Some(v), Some(i)) => embedding::load_embeddings(v, i)
                .with_context(|| format!("loading text vectors {}", v.display()))?,
            _ => eval::fallback_variant_store(
                records,
                variant,
                self.fallback_dim.unwrap_or(DEFAULT_TEXT_DIM),
                self.fallback_seed,
            )?,
        };
        Ok(match self.truncate_dims {
            Some(k) => embedding::truncate_dims(&store, k)?,
            None => store,
        })
    }

    pub fn input_files(&self) -> Vec<&Path> {
        [&self.vectors, &self.ids].into_iter().flatten().map(|p| p.as_path()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pois: Option<PathBuf>,
    pub text: TextSource,
    pub luc: Option<PathBuf>,
    pub sdm: Option<PathBuf>,
}

/// One ablation arm: a description variant and its vector source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub variant: DescriptionVariant,
    #[serde(default)]
    pub source_tag: Option<String>,
    #[serde(default)]
    pub text: TextSource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub arms: Vec<ArmConfig>,
}

impl RunConfig {
    /// Reads a `.json` or TOML document; relative paths inside it are taken
    /// relative to the document's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut cfg.data;
        for p in [&mut d.pois, &mut d.luc, &mut d.sdm].into_iter().flatten() {
            *p = base.join(&*p);
        }
        d.text.resolve(base);
        for arm in &mut cfg.arms {
            arm.text.resolve(base);
        }
        Ok(cfg)
    }

    /// Every problem with the document, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.validate();
        out.extend(self.data.text.problems("data"));
        for (i, arm) in self.arms.iter().enumerate() {
            out.extend(arm.text.problems(&format!("arms[{i}]")));
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Invalid(format!("invalid config:\n  {}", p.join("\n  "))).into())
        }
    }

    pub fn pois(&self) -> Result<&Path> {
        self.data
            .pois
            .as_deref()
            .ok_or_else(|| Invalid("config has no `data.pois` file".into()).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[data]\npois = \"pois.csv\"\n\n[data.text]\nfallback_dim = 64\n\n[train]\ntemperature = 0.1\nmax_epochs = 3\n\n\
             [[arms]]\nvariant = \"name_only\"\n\n[arms.text]\nvectors = \"v.gemb\"\nids = \"v.ids\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.pois.as_deref(), Some(dir.path().join("pois.csv").as_path()));
        assert_eq!(cfg.data.text.fallback_dim, Some(64));
        assert_eq!(cfg.train.temperature, 0.1);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.arms[0].text.vectors.as_deref(), Some(dir.path().join("v.gemb").as_path()));
        assert!(cfg.problems().is_empty());
    }

    #[test]
    fn problems_are_collected() {
        let mut cfg = RunConfig::default();
        cfg.train.temperature = 0.0;
        cfg.train.batch_size = 0;
        cfg.data.text.vectors = Some("x".into());
        let p = cfg.problems();
        assert_eq!(p.len(), 3, "{p:?}");
        assert!(p.iter().any(|s| s.contains("temperature must be positive")));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"train": {"temprature": 0.1}}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("temprature"), "{err}");
    }
}
