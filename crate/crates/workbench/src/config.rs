use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rkld::corpus::CorpusConfig;
use rkld::lm::LmConfig;
use rkld::train::TrainConfig;
use rkld::unlearn::{Method, UnlearnSpec};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Corpus shape; the seed comes from the pipeline seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n_persons: usize,
    pub qa_per_person: usize,
    pub forget_pct: u32,
}

impl Default for CorpusParams {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            n_persons: c.n_persons,
            qa_per_person: c.qa_per_person,
            forget_pct: c.forget_pct,
        }
    }
}

/// Model shape; vocabulary size comes from the corpus tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ctx_len: 64,
        }
    }
}

/// Optimizer settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Ignored by the unlearning stage, which takes epochs from each method.
    pub epochs: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Schedule {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// One full pipeline per seed (corpus, model init and data order).
    pub seeds: Vec<u64>,
    pub corpus: CorpusParams,
    pub model: ModelParams,
    pub finetune: Schedule,
    pub strengthen: Schedule,
    /// Strengthening resumes the Adam moments of the finetuning run instead
    /// of starting from zero.
    pub strengthen_resumes_optimizer: bool,
    pub unlearn: Schedule,
    pub methods: Vec<UnlearnSpec>,
    /// Number of retain items scored for model utility; `None` scores all.
    pub retain_eval_limit: Option<usize>,
    /// `k` of the fill-in-blank leakage probe.
    pub leakage_top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seeds: vec![1, 2, 3, 4, 5],
            corpus: CorpusParams::default(),
            model: ModelParams::default(),
            finetune: Schedule {
                lr: 5e-3,
                weight_decay: 0.01,
                batch_size: 32,
                epochs: 40,
                grad_clip: None,
            },
            strengthen: Schedule {
                lr: 3e-3,
                weight_decay: 0.01,
                batch_size: 8,
                epochs: 5,
                grad_clip: None,
            },
            strengthen_resumes_optimizer: true,
            unlearn: Schedule {
                lr: 7e-3,
                weight_decay: 0.01,
                batch_size: 8,
                epochs: 10,
                grad_clip: None,
            },
            methods: vec![
                UnlearnSpec::new(Method::Rkld),
                UnlearnSpec::new(Method::Fkld),
                UnlearnSpec::new(Method::Ga),
            ],
            retain_eval_limit: Some(40),
            leakage_top_k: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!(
                "`{}` is not a usable run name",
                self.name
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config(format!(
                "seeds must be distinct: {:?}",
                self.seeds
            )));
        }
        self.corpus_config(self.seeds[0]).validate()?;
        self.lm_config(1, 0).validate()?;
        for s in [&self.finetune, &self.strengthen] {
            s.train_config(0).validate()?;
        }
        let mut unlearn = self.unlearn.train_config(0);
        unlearn.epochs = 1;
        unlearn.validate()?;
        let mut labels = BTreeSet::new();
        for m in &self.methods {
            m.validate()?;
            if !labels.insert(m.label()) {
                return Err(Error::Config(format!(
                    "method `{}` is listed twice",
                    m.label()
                )));
            }
        }
        if self.leakage_top_k == 0 {
            return Err(Error::Config("leakage_top_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn corpus_config(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            seed,
            n_persons: self.corpus.n_persons,
            qa_per_person: self.corpus.qa_per_person,
            forget_pct: self.corpus.forget_pct,
        }
    }

    pub fn lm_config(&self, vocab_size: usize, seed: u64) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            ctx_len: self.model.ctx_len,
            seed,
        }
    }
}
