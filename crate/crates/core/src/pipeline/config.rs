use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::error::{Error, Result};
use crate::kb::Mode;
use crate::linker::LinkerConfig;
use crate::ner::NerConfig;
use crate::retrieval::{RetrieverConfig, DEFAULT_RECALL_KS};
use crate::synth::SynthConfig;

/// Environment variables that may replace a configured path.
pub const PATH_OVERRIDES: [(&str, &str); 4] = [
    ("ENTLINK_KB", "kb"),
    ("ENTLINK_CORPUS", "corpus"),
    ("ENTLINK_MODEL_DIR", "model_dir"),
    ("ENTLINK_OUT_DIR", "out_dir"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: PathBuf,
    pub corpus: PathBuf,
    /// Evaluation corpus. Without one, a document-level 4:1 split of
    /// `corpus` provides train and evaluation data.
    pub test: Option<PathBuf>,
    pub model_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Ensemble manifest; replaces the single recognizer and linker.
    pub ensemble: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            kb: "data/kb.jsonl".into(),
            corpus: "data/corpus.jsonl".into(),
            test: None,
            model_dir: "models".into(),
            out_dir: "out".into(),
            ensemble: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub mode: Mode,
    pub split_seed: u64,
    pub recall_ks: Vec<usize>,
    /// Train any stage whose model is missing instead of failing.
    pub train_if_missing: bool,
    /// Track 1 reads gold spans instead of running the recognizer, which
    /// isolates linking and filtering from recognition errors.
    pub oracle_spans: bool,
    pub retriever: RetrieverConfig,
    pub ner: NerConfig,
    pub linker: LinkerConfig,
    /// Generator settings for the `synth` verb.
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            mode: Mode::Track1,
            split_seed: 1,
            recall_ks: DEFAULT_RECALL_KS.to_vec(),
            train_if_missing: false,
            oracle_spans: false,
            retriever: RetrieverConfig::default(),
            ner: NerConfig::default(),
            linker: LinkerConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.paths.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// Applies the `ENTLINK_*` path overrides found by `lookup`.
    pub fn apply_env_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (var, field) in PATH_OVERRIDES {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                let slot = match field {
                    "kb" => &mut self.paths.kb,
                    "corpus" => &mut self.paths.corpus,
                    "model_dir" => &mut self.paths.model_dir,
                    _ => &mut self.paths.out_dir,
                };
                *slot = PathBuf::from(v);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return Err(Error::Config("recall_ks must be a non-empty list of positive K".into()));
        }
        if self.retriever.top_k == 0 || self.linker.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ner.gold_candidate_dropout) {
            return Err(Error::Config("ner.gold_candidate_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hash of every setting except file locations, so that runs writing to
    /// different directories share a fingerprint.
    pub fn fingerprint(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.paths = Paths::default();
        Ok(format!("{:016x}", xxh3_64(serde_json::to_string(&canonical)?.as_bytes())))
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.kb);
        join(&mut self.corpus);
        join(&mut self.model_dir);
        join(&mut self.out_dir);
        self.test.iter_mut().chain(self.ensemble.iter_mut()).for_each(join);
    }
}

/// xxh3 of a file's bytes, hex.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", xxh3_64(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = PipelineConfig::from_toml_str(
            r#"
            mode = "track2"
            recall_ks = [1, 8]
            [paths]
            kb = "k.jsonl"
            [retriever]
            dim = 32
            schedule = ["random"]
            [ner]
            use_candidates = false
            [linker]
            sampler = "uniform"
            sampler_params = {}
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Track2);
        assert_eq!(cfg.recall_ks, vec![1, 8]);
        assert_eq!(cfg.paths.kb, PathBuf::from("k.jsonl"));
        assert_eq!(cfg.retriever.bi_encoder.dim, 32);
        assert!(!cfg.ner.use_candidates);
        assert_eq!(cfg.linker.sampler, "uniform");
        assert_eq!(cfg.linker.top_k, 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(PipelineConfig::from_toml_str("modee = 1"), Err(Error::Config(_))));
        assert!(PipelineConfig::from_toml_str("recall_ks = []").is_err());
        assert!(PipelineConfig::from_toml_str("mode = \"track3\"").is_err());
    }

    #[test]
    fn load_rebases_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[paths]\nkb = \"kb.jsonl\"\nout_dir = \"/tmp/x\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.kb, dir.path().join("kb.jsonl"));
        assert_eq!(cfg.paths.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn env_overrides_touch_paths_only() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_env_overrides(|k| match k {
            "ENTLINK_KB" => Some("/data/kb.jsonl".into()),
            "ENTLINK_OUT_DIR" => Some(String::new()),
            _ => None,
        });
        assert_eq!(cfg.paths.kb, PathBuf::from("/data/kb.jsonl"));
        assert_eq!(cfg.paths.out_dir, Paths::default().out_dir);
    }

    #[test]
    fn fingerprint_ignores_paths_but_not_settings() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.ner.hidden += 1;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }
}
