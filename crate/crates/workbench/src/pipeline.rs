//! Pipeline stages. Every stage reads its inputs from the run directory and
//! writes its outputs there, so stages can run separately from the CLI.
//! A stage whose outputs already exist with matching provenance is skipped.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rkld::corpus::{CorpusBundle, QaItem};
use rkld::eval::{evaluate, leakage_rate, truth_ratios, EvalReport};
use rkld::lm::{LanguageModel, Tokenizer};
use rkld::train::{continued_train, finetune, retrain, OptState};
use rkld::unlearn::{run_unlearn, UnlearnSpec};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_checkpoint, load_opt_state, peek, save_checkpoint, save_opt_state, Checkpoint, Provenance,
};
use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};

/// Paths inside `runs/<name>/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(out: &Path, cfg: &ExperimentConfig) -> Self {
        Self {
            root: out.join(&cfg.name),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn corpus(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("corpus.json")
    }

    pub fn ckpt(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed)
            .join("ckpt")
            .join(format!("{name}.ckpt"))
    }

    pub fn optimizer(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("ckpt").join("original.adam")
    }

    pub fn epoch_ckpt(&self, seed: u64, label: &str, epoch: usize) -> PathBuf {
        self.ckpt(seed, &format!("{label}/epoch-{epoch:02}"))
    }

    pub fn eval(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed)
            .join("eval")
            .join(format!("{name}.json"))
    }

    pub fn epoch_eval(&self, seed: u64, label: &str, epoch: usize) -> PathBuf {
        self.eval(seed, &format!("{label}/epoch-{epoch:02}"))
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// One evaluated model, as stored under `eval/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub model: String,
    pub epoch: usize,
    pub checkpoint_checksum: u32,
    pub leakage: f64,
    pub report: EvalReport,
}

fn digest<T: Serialize>(value: &T) -> u32 {
    crc32fast::hash(&serde_json::to_vec(value).expect("settings are plain data"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("plain data");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn require(stage: &'static str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            stage,
            artifact: path.to_path_buf(),
        })
    }
}

/// True when `path` holds a valid checkpoint with exactly this provenance.
fn up_to_date(path: &Path, provenance: &Provenance) -> bool {
    matches!(peek(path), Ok((p, _)) if &p == provenance)
}

/// Writes `config.json`, or checks that an existing run directory was made
/// with the same config.
pub fn prepare(dir: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let path = dir.config();
    if path.exists() {
        let existing: ExperimentConfig = read_json(&path)?;
        if &existing != cfg {
            return Err(Error::Stage {
                stage: "synth",
                reason: format!(
                    "{} was created with a different config; use another name or output directory",
                    dir.root.display()
                ),
            });
        }
        return Ok(());
    }
    write_json(&path, cfg)
}

/// Generates and stores the corpus for every seed.
pub fn cmd_synth(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    prepare(dir, cfg)?;
    for &seed in &cfg.seeds {
        let bundle = CorpusBundle::generate(cfg.corpus_config(seed))?;
        let text = bundle.to_json();
        let path = dir.corpus(seed);
        if fs::read_to_string(&path).is_ok_and(|old| old == text) {
            continue;
        }
        fs::create_dir_all(dir.seed_dir(seed)).map_err(io_err(dir.seed_dir(seed)))?;
        fs::write(&path, text).map_err(io_err(&path))?;
        info!("seed {seed}: corpus written to {}", path.display());
    }
    Ok(())
}

fn load_corpus(stage: &'static str, dir: &RunDir, seed: u64) -> Result<(CorpusBundle, Tokenizer)> {
    let path = dir.corpus(seed);
    require(stage, &path)?;
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bundle = CorpusBundle::from_json(&text)?;
    let tok = bundle.tokenizer();
    Ok((bundle, tok))
}

fn load_model(stage: &'static str, path: &Path) -> Result<Checkpoint> {
    require(stage, path)?;
    load_checkpoint(path)
}

/// Which part of the training stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    All,
    Finetune,
    Retrain,
    Strengthen,
}

impl TrainStage {
    fn includes(self, other: TrainStage) -> bool {
        self == TrainStage::All || self == other
    }
}

/// Trains the original, reference and strengthened models for every seed.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &RunDir, which: TrainStage) -> Result<()> {
    prepare(dir, cfg)?;
    for &seed in &cfg.seeds {
        let (bundle, tok) = load_corpus("train", dir, seed)?;
        let lm = cfg.lm_config(tok.vocab_size(), seed);
        let corpus_digest = crc32fast::hash(bundle.to_json().as_bytes());
        let ft = cfg.finetune.train_config(seed);

        let prov = |stage: &str, parent: Option<u32>, settings: u32| Provenance {
            stage: stage.into(),
            seed,
            method: None,
            epoch: None,
            parent_checksum: parent,
            settings_digest: settings,
        };
        let ft_digest = digest(&(&lm, &ft, corpus_digest));
        let original_prov = prov("finetune", None, ft_digest);
        if which.includes(TrainStage::Finetune) {
            let path = dir.ckpt(seed, "original");
            if !(up_to_date(&path, &original_prov) && dir.optimizer(seed).exists()) {
                info!("seed {seed}: finetuning the original model");
                let fit = finetune(&bundle, &tok, &lm, &ft)?;
                let checksum = save_checkpoint(&path, &fit.model, &original_prov)?;
                save_opt_state(
                    &dir.optimizer(seed),
                    &fit.model,
                    &fit.state,
                    &prov("finetune", Some(checksum), ft_digest),
                )?;
            }
        }
        if which.includes(TrainStage::Retrain) {
            let path = dir.ckpt(seed, "retrain");
            let p = prov("retrain", None, ft_digest);
            if !up_to_date(&path, &p) {
                info!("seed {seed}: training the reference model without the forget set");
                let fit = retrain(&bundle, &tok, &lm, &ft)?;
                save_checkpoint(&path, &fit.model, &p)?;
            }
        }
        if which.includes(TrainStage::Strengthen) {
            let original = load_model("strengthen", &dir.ckpt(seed, "original"))?;
            let st = cfg.strengthen.train_config(seed);
            let p = prov(
                "strengthen",
                Some(original.checksum),
                digest(&(&st, cfg.strengthen_resumes_optimizer)),
            );
            let path = dir.ckpt(seed, "strengthened");
            if !up_to_date(&path, &p) {
                info!("seed {seed}: continued training on the forget set");
                let state: Option<OptState> = if cfg.strengthen_resumes_optimizer {
                    require("strengthen", &dir.optimizer(seed))?;
                    Some(load_opt_state(&dir.optimizer(seed), &original.model)?)
                } else {
                    None
                };
                let fit = continued_train(&original.model, state.as_ref(), &bundle, &tok, &st)?;
                save_checkpoint(&path, &fit.model, &p)?;
            }
        }
    }
    Ok(())
}

/// Runs every configured unlearning method, one checkpoint per epoch.
pub fn cmd_unlearn(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    prepare(dir, cfg)?;
    for &seed in &cfg.seeds {
        let (bundle, tok) = load_corpus("unlearn", dir, seed)?;
        let original = load_model("unlearn", &dir.ckpt(seed, "original"))?;
        let needs_strong = cfg.methods.iter().any(|m| m.method.needs_strengthened());
        let strong = if needs_strong {
            Some(load_model("unlearn", &dir.ckpt(seed, "strengthened"))?)
        } else {
            None
        };
        let ul = cfg.unlearn.train_config(seed);
        for spec in &cfg.methods {
            let label = spec.label();
            let parent = if spec.method.needs_strengthened() {
                strong.as_ref().map(|s| s.checksum)
            } else {
                Some(original.checksum)
            };
            let settings = digest(&(spec, &ul, original.checksum));
            let prov = |epoch: usize| Provenance {
                stage: "unlearn".into(),
                seed,
                method: Some(label.clone()),
                epoch: Some(epoch),
                parent_checksum: parent,
                settings_digest: settings,
            };
            let n = epochs_of(spec);
            if (1..=n).all(|e| up_to_date(&dir.epoch_ckpt(seed, &label, e), &prov(e))) {
                continue;
            }
            info!("seed {seed}: unlearning with {label}");
            let run = run_unlearn(
                &original.model,
                strong.as_ref().map(|s| &s.model),
                &bundle,
                &tok,
                spec,
                &ul,
            )?;
            for (i, model) in run.checkpoints.iter().enumerate() {
                save_checkpoint(&dir.epoch_ckpt(seed, &label, i + 1), model, &prov(i + 1))?;
            }
        }
    }
    Ok(())
}

/// Number of checkpoints a method produces.
pub fn epochs_of(spec: &UnlearnSpec) -> usize {
    if spec.method == rkld::unlearn::Method::Ta {
        1
    } else {
        spec.epochs
    }
}

struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    bundle: CorpusBundle,
    tok: Tokenizer,
    reference: Vec<f64>,
    seed: u64,
}

impl Evaluator<'_> {
    fn record(&self, name: &str, epoch: usize, ckpt: &Checkpoint) -> Result<EvalRecord> {
        let model: &LanguageModel = &ckpt.model;
        let report = evaluate(
            model,
            &self.reference,
            &self.bundle,
            &self.tok,
            self.cfg.retain_eval_limit,
        )?;
        let forget: Vec<&QaItem> = self.bundle.forget().collect();
        let leakage = leakage_rate(model, &self.tok, &forget, self.cfg.leakage_top_k)?;
        Ok(EvalRecord {
            seed: self.seed,
            model: name.to_string(),
            epoch,
            checkpoint_checksum: ckpt.checksum,
            leakage,
            report,
        })
    }

    fn run(&self, path: &Path, ckpt_path: &Path, name: &str, epoch: usize) -> Result<()> {
        let ckpt = load_model("eval", ckpt_path)?;
        if let Ok(old) = read_json::<EvalRecord>(path) {
            if old.checkpoint_checksum == ckpt.checksum {
                return Ok(());
            }
        }
        write_json(path, &self.record(name, epoch, &ckpt)?)
    }
}

/// Evaluates the original, reference and every unlearning checkpoint.
pub fn cmd_eval(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    prepare(dir, cfg)?;
    for &seed in &cfg.seeds {
        let (bundle, tok) = load_corpus("eval", dir, seed)?;
        let reference = load_model("eval", &dir.ckpt(seed, "retrain"))?;
        let forget: Vec<&QaItem> = bundle.forget().collect();
        let ratios = truth_ratios(&reference.model, &tok, &forget)?;
        let ev = Evaluator {
            cfg,
            bundle,
            tok,
            reference: ratios,
            seed,
        };
        info!("seed {seed}: evaluating");
        for name in ["original", "retrain"] {
            ev.run(&dir.eval(seed, name), &dir.ckpt(seed, name), name, 0)?;
        }
        for spec in &cfg.methods {
            let label = spec.label();
            for e in 1..=epochs_of(spec) {
                ev.run(
                    &dir.epoch_eval(seed, &label, e),
                    &dir.epoch_ckpt(seed, &label, e),
                    &label,
                    e,
                )?;
            }
        }
    }
    Ok(())
}

pub(crate) fn load_record(stage: &'static str, path: &Path) -> Result<EvalRecord> {
    require(stage, path)?;
    read_json(path)
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

/// All stages in order, then the report.
pub fn run_all(cfg: &ExperimentConfig, dir: &RunDir) -> Result<crate::report::Report> {
    cmd_synth(cfg, dir)?;
    cmd_train(cfg, dir, TrainStage::All)?;
    cmd_unlearn(cfg, dir)?;
    cmd_eval(cfg, dir)?;
    crate::report::cmd_report(cfg, dir)
}
