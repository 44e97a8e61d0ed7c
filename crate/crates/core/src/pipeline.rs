//! Artifact layout, manifests and stage orchestration shared by the
//! command line, the examples and the tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{hex_digest, ModelConfig, RunConfig};
use crate::corpus::{ingest_tsv, Corpus, TimeSplit};
use crate::error::{Error, Result};
use crate::heads::HybridModel;
use crate::serving::{build_ad_store, AdStore};
use crate::train::{
    train_stage_global, train_stage_local, Targets, TrainData, TrainReport, STAGE_GLOBAL, STAGE_LOCAL,
};

/// `key=value` sidecar written next to every artifact.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest(BTreeMap<String, String>);

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

impl Manifest {
    pub fn new(kind: &str, config: &RunConfig) -> Self {
        let mut m = Self::default();
        m.set("kind", kind);
        m.set("config_hash", config.hash());
        m.set("seed", config.seed.to_string());
        m
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_owned(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad manifest line `{line}`")))?;
            m.set(k, v);
        }
        Ok(m)
    }

    pub fn write(&self, artifact: &Path) -> Result<()> {
        Ok(fs::write(manifest_path(artifact), self.to_text())?)
    }

    pub fn read(artifact: &Path) -> Result<Self> {
        let path = manifest_path(artifact);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path)?))
}

/// Where each artifact lives under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("train_metrics.jsonl")
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("store")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Global,
    Local,
    Progressive,
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            "progressive" => Ok(Self::Progressive),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// TSV corpus from `config.data_dir`, split by `data.train_fraction`.
pub fn load_corpus(config: &RunConfig) -> Result<Corpus> {
    ingest_tsv(&config.data_dir, TimeSplit::Fraction(config.data.train_fraction))
}

/// Model shapes with the vocabulary size taken from the corpus.
pub fn model_config(config: &RunConfig, corpus: &Corpus) -> ModelConfig {
    config.model.clone().with_vocab(corpus.vocab().len())
}

fn stages_of(manifest: &Manifest) -> Vec<String> {
    manifest
        .get("stages")
        .map(|s| s.split(',').filter(|x| !x.is_empty()).map(str::to_owned).collect())
        .unwrap_or_default()
}

/// Trained model plus its training log.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: HybridModel,
    pub report: TrainReport,
}

/// Runs `stage` in memory. `Local` continues from `resume`, which must
/// already have completed the global stage.
pub fn train(corpus: &Corpus, config: &RunConfig, stage: Stage, resume: Option<Trained>) -> Result<Trained> {
    config.validate()?;
    let mc = model_config(config, corpus);
    let targets = Targets {
        hybrid: true,
        cross: config.train.train_cross,
    };
    let (mut model, mut report) = match (stage, resume) {
        (Stage::Local, Some(t)) => (t.model, t.report),
        (Stage::Local, None) => {
            return Err(Error::Invariant(
                "local stage requires a globally trained checkpoint".into(),
            ))
        }
        _ => (HybridModel::init(&mc, config.seed)?, TrainReport::default()),
    };
    let data = TrainData::new(corpus, &model)?;
    if stage != Stage::Local {
        train_stage_global(&mut model, &data, &config.train, config.seed, targets, &mut report)?;
    }
    if stage != Stage::Global {
        train_stage_local(&mut model, &data, &config.train, config.seed, targets, &mut report)?;
    }
    Ok(Trained { model, report })
}

/// Trains and writes the checkpoint, its manifest and the metrics log.
pub fn train_to_dir(corpus: &Corpus, config: &RunConfig, stage: Stage, layout: &Layout) -> Result<Trained> {
    let resume = if stage == Stage::Local {
        let ckpt = layout.checkpoint();
        if !ckpt.exists() {
            return Err(Error::Invariant(format!(
                "local stage needs a checkpoint at {}",
                ckpt.display()
            )));
        }
        let manifest = Manifest::read(&ckpt)?;
        let stages = stages_of(&manifest);
        if !stages.iter().any(|s| s == STAGE_GLOBAL) {
            return Err(Error::Invariant(format!(
                "{} has not completed the global stage",
                ckpt.display()
            )));
        }
        if manifest.get("seed") != Some(config.seed.to_string().as_str()) {
            log::warn!("continuing a checkpoint trained with a different seed");
        }
        let model = HybridModel::load(&model_config(config, corpus), &ckpt)?;
        let mut report = TrainReport {
            stages_done: stages,
            ..TrainReport::default()
        };
        if let Ok(text) = fs::read_to_string(layout.metrics()) {
            for line in text.lines().filter(|l| !l.is_empty()) {
                report
                    .records
                    .push(serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?);
            }
        }
        Some(Trained { model, report })
    } else {
        None
    };
    let trained = train(corpus, config, stage, resume)?;
    fs::create_dir_all(&layout.root)?;
    let ckpt = layout.checkpoint();
    trained.model.save(&ckpt)?;
    let mut m = Manifest::new("checkpoint", config);
    m.set("stages", trained.report.stages_done.join(","));
    m.set("degree", trained.model.degree().to_string());
    m.write(&ckpt)?;
    fs::write(layout.metrics(), trained.report.to_jsonl())?;
    Ok(trained)
}

/// Loads the checkpoint under `layout`; it must have finished both stages
/// unless `allow_partial`.
pub fn load_model(corpus: &Corpus, config: &RunConfig, layout: &Layout, allow_partial: bool) -> Result<HybridModel> {
    let ckpt = layout.checkpoint();
    let manifest = Manifest::read(&ckpt)?;
    let stages = stages_of(&manifest);
    if !allow_partial && !stages.iter().any(|s| s == STAGE_LOCAL) {
        log::warn!("checkpoint has only completed stages: {}", stages.join(","));
    }
    if let Some(k) = manifest.get("degree") {
        if k != config.model.degree.to_string() {
            return Err(Error::Degree {
                left: k.parse().unwrap_or(0),
                right: config.model.degree,
            });
        }
    }
    HybridModel::load(&model_config(config, corpus), &ckpt)
}

/// Builds the ad store from the checkpoint under `layout` and records the
/// checkpoint digest in the store manifest.
pub fn build_store_to_dir(corpus: &Corpus, config: &RunConfig, layout: &Layout) -> Result<AdStore> {
    let model = load_model(corpus, config, layout, true)?;
    let store = build_ad_store(&model, corpus, &config.index, config.seed)?;
    let dir = layout.store();
    store.save(&dir)?;
    let mut m = Manifest::new("store", config);
    m.set("checkpoint_digest", file_digest(&layout.checkpoint())?);
    m.set("degree", store.degree.to_string());
    m.set("ads", store.len().to_string());
    m.set("index", store.index.mode().as_str());
    m.write(&dir)?;
    Ok(store)
}

/// Loads model and store, refusing a store built from another checkpoint.
pub fn load_serving(corpus: &Corpus, config: &RunConfig, layout: &Layout) -> Result<(HybridModel, AdStore)> {
    let model = load_model(corpus, config, layout, false)?;
    let dir = layout.store();
    let manifest = Manifest::read(&dir)?;
    let digest = file_digest(&layout.checkpoint())?;
    if manifest.get("checkpoint_digest") != Some(digest.as_str()) {
        return Err(Error::Invariant(
            "store was built from a different checkpoint; rerun build-store".into(),
        ));
    }
    let store = AdStore::load(&dir)?;
    store.check_model(&model)?;
    Ok((model, store))
}
