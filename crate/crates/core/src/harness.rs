//! Declarative experiment configs, cached pipeline stages and reports.
//!
//! A run is a chain of stages: `data → pretrain → distill → crp → proxies →
//! finetune → attack`, with `analyze` branching off after `crp`. Each stage
//! writes its artifacts to a directory named by a key that hashes the stage
//! name, the config subtree the stage reads, and the digests of its upstream
//! artifacts. A stage whose directory is complete is reused.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    beta_ablation, gradient_norm_distribution, invert_feature, monotone_pairs, paired_bootstrap_ci,
    positive_similarity_distribution, AblationCurve, Keep, Summary,
};
use crate::attack::{
    adaptive_nonrobust_attack, evaluate, pgd, transfer_attack, AttackConfig, AttackKind, ADAPTIVE_EPSILON,
};
use crate::data::{load_cifar10_with, make_synthetic_split, CifarLoad, Dataset, Split, SyntheticSpec};
use crate::distill::{distill_masks, estimate_channel_profile, load_masks, save_masks, ChannelProfile, DistillConfig, MaskSet};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Activation, Architecture, BaseLoss, SplitClassifier};
use crate::perturb::{apply_crp, class_subsets, decode_f64, encode_f64, load_crps, optimize_rp, save_crps, PerturbOptConfig};
use crate::proxy::{load_bank, refresh_bank_of_kind, save_bank, ProxyKind};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{
    finetune_from, pretrain, refresh_crps, refresh_masks, refresh_seed, ATMethod, DistilledSubsets, EpochHook,
    EpochRecord, Objective, RefreshConfig, Resume, Sgd, TrainConfig, TrainState,
};

/// Environment variable that overrides the stage cache directory.
pub const CACHE_ENV: &str = "ROBUST_PROXY_CACHE";

const DONE_FILE: &str = "STAGE_DONE.json";
const PROGRESS_DIR: &str = "progress";

/// Full description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub ceo: PerturbOptConfig,
    #[serde(default)]
    pub proxies: ProxyConfig,
    #[serde(default = "PerturbOptConfig::rp_default")]
    pub rp: PerturbOptConfig,
    pub finetune: FinetuneConfig,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_attacks() -> Vec<AttackSpec> {
    let pgd = AttackConfig::default();
    vec![
        AttackSpec::Clean {},
        AttackSpec::Fgsm { epsilon: pgd.epsilon },
        AttackSpec::Pgd(pgd.clone()),
        AttackSpec::Cw(pgd.clone()),
        AttackSpec::Adaptive(AttackConfig::linf(ADAPTIVE_EPSILON, 20)),
        AttackSpec::Transfer(pgd),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Cifar10(CifarConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarConfig {
    pub dir: PathBuf,
    #[serde(default = "five")]
    pub train_files: usize,
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default)]
    pub max_test: Option<usize>,
}

fn five() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: [usize; 4],
    pub activation: Activation,
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 16, 32],
            activation: Activation::Silu,
            bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "madry")]
    pub method: ATMethod,
    pub adversarial: TrainConfig,
    /// Clean model; a second copy with another seed is the transfer source.
    pub standard: TrainConfig,
}

fn madry() -> ATMethod {
    ATMethod::Madry
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub kind: ProxyKind,
    /// Training images behind the channel profile (0: all).
    pub profile_examples: usize,
    pub class_majority_masks: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            kind: ProxyKind::Robust,
            profile_examples: 1000,
            class_majority_masks: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "madry")]
    pub method: ATMethod,
    pub train: TrainConfig,
}

/// One entry of the attack suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttackSpec {
    Clean {},
    Fgsm { epsilon: f64 },
    Pgd(AttackConfig),
    Cw(AttackConfig),
    /// Ascends the non-robust gradient norm as well as the margin loss.
    Adaptive(AttackConfig),
    /// PGD crafted on the clean surrogate and replayed on the target.
    Transfer(AttackConfig),
}

impl AttackSpec {
    pub fn name(&self) -> String {
        match self {
            AttackSpec::Clean {} => "clean".into(),
            AttackSpec::Fgsm { epsilon } => format!("fgsm(eps={})", fmt_eps(*epsilon)),
            AttackSpec::Pgd(c) => format!("pgd{}-{}(eps={})", c.steps, norm_name(c), fmt_eps(c.epsilon)),
            AttackSpec::Cw(c) => format!("cw{}(eps={})", c.steps, fmt_eps(c.epsilon)),
            AttackSpec::Adaptive(c) => format!("adaptive{}(eps={})", c.steps, fmt_eps(c.epsilon)),
            AttackSpec::Transfer(c) => format!("transfer-pgd{}(eps={})", c.steps, fmt_eps(c.epsilon)),
        }
    }
}

fn norm_name(c: &AttackConfig) -> &'static str {
    match c.norm {
        crate::attack::Norm::Linf => "linf",
        crate::attack::Norm::L2 => "l2",
    }
}

fn fmt_eps(e: f64) -> String {
    let k = e * 255.0;
    if (k - k.round()).abs() < 1e-4 {
        format!("{}/255", k.round())
    } else {
        format!("{e}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test images scored by every attack.
    pub examples: usize,
    pub chunk: usize,
    /// Test images given per-image robust perturbations.
    pub rp_examples: usize,
    /// Attack used to compare `x`, `x + r` and `x + r^k`.
    pub perturbation_attack: AttackConfig,
    /// Loss ascended by the adaptive attack.
    pub adaptive_loss: BaseLoss,
    /// Slack of the gradient-obfuscation checks, as an accuracy fraction.
    pub sanity_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            examples: 500,
            chunk: 128,
            rp_examples: 100,
            perturbation_attack: AttackConfig::default(),
            adaptive_loss: BaseLoss::margin(1.0),
            sanity_tolerance: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Test images behind the gradient-norm distributions.
    pub examples: usize,
    pub pairs: usize,
    pub bootstrap_resamples: usize,
    pub betas: Vec<f64>,
    /// Test images distilled at every β of the ablation.
    pub ablation_examples: usize,
    /// Gradient steps of the feature inversion (0 skips it).
    pub inversion_steps: usize,
    pub inversion_lr: f64,
    pub export_features: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            examples: 200,
            pairs: 2000,
            bootstrap_resamples: 2000,
            betas: vec![0.1, 1.0, 10.0, 100.0],
            ablation_examples: 200,
            inversion_steps: 0,
            inversion_lr: 0.05,
            export_features: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, reporting the field path of the first schema error.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: String::new(),
            detail: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            detail: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, detail: &str| {
            Err(Error::Config {
                path: path.into(),
                detail: detail.into(),
            })
        };
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name", "must be a non-empty file name");
        }
        if self.model.widths.contains(&0) {
            return bad("model.widths", "widths must be positive");
        }
        if self.evaluation.examples == 0 {
            return bad("evaluation.examples", "must be positive");
        }
        if self.evaluation.chunk == 0 {
            return bad("evaluation.chunk", "must be positive");
        }
        if !(self.evaluation.sanity_tolerance >= 0.0) {
            return bad("evaluation.sanity_tolerance", "must be non-negative");
        }
        if self.analysis.betas.iter().any(|b| !(*b > 0.0)) {
            return bad("analysis.betas", "every beta must be positive");
        }
        for (name, t) in [
            ("pretrain.adversarial", &self.pretrain.adversarial),
            ("pretrain.standard", &self.pretrain.standard),
            ("finetune.train", &self.finetune.train),
        ] {
            t.validate().map_err(|e| Error::Config {
                path: name.into(),
                detail: e.to_string(),
            })?;
        }
        self.pretrain.method.validate()?;
        self.finetune.method.validate()?;
        Ok(())
    }

    /// Hash of the config as canonical JSON, independent of field order and
    /// of where outputs go.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        sha256_hex(canonical_json(&v).as_bytes())
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}", self.name, &self.hash()[..12])
    }

    fn refresh_config(&self) -> RefreshConfig {
        RefreshConfig {
            distill: self.distill.clone(),
            ceo: self.ceo.clone(),
            class_majority_masks: self.proxies.class_majority_masks,
            profile_examples: self.proxies.profile_examples,
            proxy_kind: self.proxies.kind,
        }
    }

    fn finetune_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "finetune"),
            ..self.finetune.train.clone()
        }
    }
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn walk(v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String((*k).clone()).to_string());
                    out.push(':');
                    walk(&m[*k], out);
                }
                out.push('}');
            }
            Value::Array(a) => {
                out.push('[');
                for (i, x) in a.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    walk(x, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut s = String::new();
    walk(v, &mut s);
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Pretrain,
    Distill,
    Crp,
    Proxies,
    Finetune,
    Attack,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Data,
        Stage::Pretrain,
        Stage::Distill,
        Stage::Crp,
        Stage::Proxies,
        Stage::Finetune,
        Stage::Attack,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Distill => "distill",
            Stage::Crp => "crp",
            Stage::Proxies => "proxies",
            Stage::Finetune => "finetune",
            Stage::Attack => "attack",
            Stage::Analyze => "analyze",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Pretrain => &[Stage::Data],
            Stage::Distill => &[Stage::Pretrain],
            Stage::Crp => &[Stage::Distill],
            Stage::Proxies => &[Stage::Crp],
            Stage::Finetune => &[Stage::Proxies],
            Stage::Attack => &[Stage::Distill, Stage::Crp, Stage::Finetune],
            Stage::Analyze => &[Stage::Distill, Stage::Crp],
        }
    }

    /// `self` and everything it depends on, in execution order.
    pub fn closure(self) -> Vec<Stage> {
        let mut out = Vec::new();
        fn visit(s: Stage, out: &mut Vec<Stage>) {
            for &u in s.upstream() {
                visit(u, out);
            }
            if !out.contains(&s) {
                out.push(s);
            }
        }
        visit(self, &mut out);
        out
    }
}

/// Where a stage's artifacts live and what they hash to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub digest: String,
    pub dir: PathBuf,
    /// Reused from an earlier run rather than computed now.
    #[serde(skip)]
    pub cached: bool,
}

/// Runs stages against a cache directory.
pub struct Pipeline {
    cfg: ExperimentConfig,
    run_dir: PathBuf,
    cache_dir: PathBuf,
    resume: bool,
    /// When false, a stage that is not cached is an error.
    compute: bool,
    records: BTreeMap<Stage, StageRecord>,
    data: Option<(Dataset, Dataset)>,
}

impl Pipeline {
    /// `run_dir` is `output_dir/name`; the cache is `run_dir/cache` unless
    /// [`CACHE_ENV`] is set.
    pub fn new(cfg: ExperimentConfig, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let run_dir = cfg.output_dir.join(&cfg.name);
        let cache_dir = match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => run_dir.join("cache"),
        };
        Ok(Self {
            cfg,
            run_dir,
            cache_dir,
            resume,
            compute: true,
            records: BTreeMap::new(),
            data: None,
        })
    }

    /// Only reuse cached stages; never compute.
    pub fn read_only(mut self) -> Self {
        self.compute = false;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    pub fn records(&self) -> &BTreeMap<Stage, StageRecord> {
        &self.records
    }

    pub fn record(&self, stage: Stage) -> Result<&StageRecord> {
        self.records
            .get(&stage)
            .ok_or_else(|| Error::contract(format!("stage `{}` has not run", stage.name())))
    }

    /// Runs `target` and its upstream stages.
    pub fn run_to(&mut self, target: Stage) -> Result<()> {
        for s in target.closure() {
            self.run_stage(s)?;
        }
        self.write_manifest()
    }

    /// Runs every stage.
    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        self.write_manifest()
    }

    fn subtree(&self, stage: Stage) -> Value {
        let c = &self.cfg;
        match stage {
            Stage::Data => json!({ "dataset": c.dataset }),
            Stage::Pretrain => json!({ "seed": c.seed, "model": c.model, "pretrain": c.pretrain }),
            Stage::Distill => json!({
                "seed": c.seed,
                "distill": c.distill,
                "proxies": c.proxies,
                "samples_per_class": c.ceo.samples_per_class,
                "eval_examples": c.evaluation.examples,
            }),
            Stage::Crp => json!({ "seed": c.seed, "ceo": c.ceo }),
            Stage::Proxies => json!({
                "seed": c.seed,
                "kind": c.proxies.kind,
                "refresh_period": c.finetune.train.refresh_period,
            }),
            Stage::Finetune => json!({ "seed": c.seed, "finetune": c.finetune }),
            Stage::Attack => json!({
                "seed": c.seed,
                "attacks": c.attacks,
                "evaluation": c.evaluation,
                "rp": c.rp,
                "distill": c.distill,
            }),
            Stage::Analyze => json!({ "seed": c.seed, "analysis": c.analysis, "distill": c.distill }),
        }
    }

    /// Cache key of `stage` given its upstream digests.
    pub fn stage_key(&self, stage: Stage) -> Result<String> {
        let upstream = stage
            .upstream()
            .iter()
            .map(|u| self.record(*u).map(|r| json!({ "stage": u.name(), "digest": r.digest })))
            .collect::<Result<Vec<_>>>()?;
        let v = json!({
            "stage": stage.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.subtree(stage),
            "upstream": upstream,
        });
        Ok(sha256_hex(canonical_json(&v).as_bytes()))
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        if self.records.contains_key(&stage) {
            return Ok(());
        }
        if stage == Stage::Data || self.data.is_none() {
            self.data = Some(self.load_data()?);
        }
        let key = self.stage_key(stage)?;
        let dir = self.cache_dir.join(format!("{}-{}", stage.name(), &key[..16]));
        let done = dir.join(DONE_FILE);
        if done.exists() {
            let rec: StageRecord = serde_json::from_slice(&fs::read(&done)?)?;
            if rec.key == key {
                info!("stage {}: cached at {}", stage.name(), dir.display());
                self.records.insert(stage, StageRecord { dir, cached: true, ..rec });
                return Ok(());
            }
        }
        if !self.compute {
            return Err(Error::contract(format!(
                "stage `{}` has no cached artifacts under {}; run it first",
                stage.name(),
                self.cache_dir.display()
            )));
        }
        if dir.exists() && !self.resume {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        info!("stage {}: computing into {}", stage.name(), dir.display());
        match stage {
            Stage::Data => self.stage_data(&dir)?,
            Stage::Pretrain => self.stage_pretrain(&dir)?,
            Stage::Distill => self.stage_distill(&dir)?,
            Stage::Crp => self.stage_crp(&dir)?,
            Stage::Proxies => self.stage_proxies(&dir)?,
            Stage::Finetune => self.stage_finetune(&dir)?,
            Stage::Attack => self.stage_attack(&dir)?,
            Stage::Analyze => self.stage_analyze(&dir)?,
        }
        let rec = StageRecord {
            stage,
            key,
            digest: dir_digest(&dir)?,
            dir: dir.clone(),
            cached: false,
        };
        fs::write(&done, serde_json::to_vec_pretty(&rec)?)?;
        self.records.insert(stage, rec);
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        fs::create_dir_all(&self.run_dir)?;
        let stages: BTreeMap<&str, &StageRecord> = self.records.iter().map(|(s, r)| (s.name(), r)).collect();
        let manifest = json!({
            "run_id": self.cfg.run_id(),
            "config_hash": self.cfg.hash(),
            "stages": stages,
        });
        fs::write(self.run_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(
            self.run_dir.join("config.json"),
            serde_json::to_vec_pretty(&serde_json::to_value(&self.cfg)?)?,
        )?;
        Ok(())
    }

    // ---- data ----

    fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.cfg.dataset {
            DatasetConfig::Synthetic(spec) => Ok((
                make_synthetic_split(spec, Split::Train)?,
                make_synthetic_split(spec, Split::Test)?,
            )),
            DatasetConfig::Cifar10(c) => load_cifar10_with(
                &c.dir,
                &CifarLoad {
                    train_files: c.train_files,
                    max_train: c.max_train,
                    max_test: c.max_test,
                },
            ),
        }
    }

    fn train_set(&self) -> &Dataset {
        &self.data.as_ref().expect("data loaded before stages").0
    }

    fn test_set(&self) -> &Dataset {
        &self.data.as_ref().expect("data loaded before stages").1
    }

    /// The test prefix every attack is scored on.
    pub fn eval_set(&self) -> Result<Dataset> {
        let test = self.test_set();
        test.take(self.cfg.evaluation.examples.min(test.len()))
    }

    fn architecture(&self) -> Architecture {
        let train = self.train_set();
        let mut arch = Architecture::with_widths(train.image_shape(), train.num_classes, self.cfg.model.widths);
        arch.activation = self.cfg.model.activation;
        arch.bias = self.cfg.model.bias;
        arch
    }

    fn stage_data(&self, dir: &Path) -> Result<()> {
        let (train, test) = self.data.as_ref().expect("data loaded");
        let summary = |ds: &Dataset| {
            let mut bytes = Vec::with_capacity(ds.images().data().len() * 8);
            for v in ds.images().data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            for &y in ds.labels() {
                bytes.extend_from_slice(&(y as u64).to_le_bytes());
            }
            json!({
                "examples": ds.len(),
                "shape": ds.image_shape(),
                "classes": ds.num_classes,
                "digest": sha256_hex(&bytes),
            })
        };
        let v = json!({ "train": summary(train), "test": summary(test) });
        fs::write(dir.join("data.json"), serde_json::to_vec_pretty(&v)?)?;
        Ok(())
    }

    // ---- models ----

    fn stage_pretrain(&self, dir: &Path) -> Result<()> {
        let arch = self.architecture();
        let c = &self.cfg;
        let train = self.train_set();
        let mut histories = BTreeMap::new();
        for (name, objective, tcfg) in [
            ("standard", Objective::Standard, &c.pretrain.standard),
            ("surrogate", Objective::Standard, &c.pretrain.standard),
            ("adversarial", Objective::Adversarial(c.pretrain.method), &c.pretrain.adversarial),
        ] {
            let seed = derive_seed(c.seed, &format!("pretrain-{name}"));
            let model = SplitClassifier::new(arch.clone(), derive_seed(seed, "init"))?;
            let tcfg = TrainConfig {
                seed,
                ..tcfg.clone()
            };
            let (model, history) = pretrain(model, train, None, &objective, &tcfg)?;
            save_checkpoint(&model, &dir.join(format!("{name}.ckpt")))?;
            histories.insert(name, history);
        }
        fs::write(dir.join("history.json"), serde_json::to_vec_pretty(&histories)?)?;
        Ok(())
    }

    /// Loads `standard`, `surrogate`, `adversarial` or `proxy`.
    pub fn model(&self, name: &str) -> Result<SplitClassifier> {
        let path = match name {
            "proxy" => self.record(Stage::Finetune)?.dir.join("finetuned.ckpt"),
            _ => self.record(Stage::Pretrain)?.dir.join(format!("{name}.ckpt")),
        };
        load_checkpoint(&path)
    }

    fn eval_distill_config(&self, label: &str) -> DistillConfig {
        DistillConfig {
            seed: derive_seed(self.cfg.seed, &format!("distill-eval-{label}")),
            ..self.cfg.distill.clone()
        }
    }

    fn profile_for(&self, model: &SplitClassifier) -> Result<ChannelProfile> {
        let train = self.train_set();
        let n = self.cfg.proxies.profile_examples;
        let reference = if n > 0 && n < train.len() { train.take(n)?.all() } else { train.all() };
        estimate_channel_profile(model, &[reference])
    }

    // ---- distill / crp / proxies ----

    fn distilled_subsets(&self, model: &SplitClassifier) -> Result<DistilledSubsets> {
        let ft = self.cfg.finetune_train();
        refresh_masks(model, self.train_set(), &self.cfg.refresh_config(), 0, refresh_seed(&ft))
    }

    fn stage_distill(&self, dir: &Path) -> Result<()> {
        let model = self.model("adversarial")?;
        let d = self.distilled_subsets(&model)?;
        fs::write(dir.join("profile.json"), serde_json::to_vec_pretty(&d.profile)?)?;
        save_masks(&d.masks, &dir.join("masks_train.json"))?;
        let eval = self.eval_set()?.all();
        let masks = distill_masks(&model, &eval, &d.profile, &self.eval_distill_config("adversarial"))?;
        save_masks(&masks, &dir.join("masks_eval.json"))?;
        let summary = json!({
            "beta": self.cfg.distill.beta,
            "threshold": d.profile.threshold,
            "channels": d.profile.channels(),
            "train_mean_robust_channels": d.masks.mean_robust_count(),
            "eval_mean_robust_channels": masks.mean_robust_count(),
        });
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
        Ok(())
    }

    fn stage_crp(&self, dir: &Path) -> Result<()> {
        let model = self.model("adversarial")?;
        let ddir = &self.record(Stage::Distill)?.dir;
        let profile: ChannelProfile = serde_json::from_slice(&fs::read(ddir.join("profile.json"))?)?;
        let masks = load_masks(&ddir.join("masks_train.json"))?;
        let ft = self.cfg.finetune_train();
        let seed = refresh_seed(&ft);
        let subsets = class_subsets(self.train_set(), model.num_classes(), self.cfg.ceo.samples_per_class, seed)?;
        let d = DistilledSubsets {
            profile,
            subsets,
            masks,
        };
        let crps = refresh_crps(&model, &d, &self.cfg.refresh_config(), 0, seed)?;
        save_crps(&crps, &dir.join("crps.json"))?;
        Ok(())
    }

    fn stage_proxies(&self, dir: &Path) -> Result<()> {
        let model = self.model("adversarial")?;
        let crps = load_crps(&self.record(Stage::Crp)?.dir.join("crps.json"))?;
        let ft = self.cfg.finetune_train();
        let bank = refresh_bank_of_kind(
            &model,
            self.train_set(),
            Some(&crps),
            0,
            refresh_seed(&ft),
            ft.refresh_period,
            self.cfg.proxies.kind,
        )?;
        save_bank(&bank, &dir.join("bank.json"))?;
        Ok(())
    }

    // ---- fine-tuning ----

    fn stage_finetune(&self, dir: &Path) -> Result<()> {
        let model = self.model("adversarial")?;
        let ft = self.cfg.finetune_train();
        let progress = dir.join(PROGRESS_DIR);
        fs::create_dir_all(&progress)?;
        let resumed = if self.resume { latest_progress(&progress)? } else { None };
        let (model, resume) = match resumed {
            Some(epoch) => {
                info!("finetune: resuming after epoch {}", epoch + 1);
                let m = load_checkpoint(&progress.join(format!("epoch-{epoch}.ckpt")))?;
                (m, load_progress(&progress, epoch)?)
            }
            None => {
                let bank = load_bank(&self.record(Stage::Proxies)?.dir.join("bank.json"))?;
                let crps = load_crps(&self.record(Stage::Crp)?.dir.join("crps.json"))?;
                (
                    model,
                    Resume {
                        start_epoch: 0,
                        bank: Some(bank),
                        crps: Some(crps),
                        velocity: None,
                        history: Vec::new(),
                        bank_fresh: true,
                    },
                )
            }
        };
        let mut hook = |m: &SplitClassifier, state: &TrainState, opt: &Sgd| -> Result<()> {
            save_progress(&progress, m, state, opt)
        };
        let out = finetune_from(
            model,
            self.train_set(),
            None,
            &self.cfg.finetune.method,
            &ft,
            &self.cfg.refresh_config(),
            Some(resume),
            Some(&mut hook as &mut EpochHook<'_>),
        )?;
        save_checkpoint(&out.model, &dir.join("finetuned.ckpt"))?;
        fs::write(dir.join("history.json"), serde_json::to_vec_pretty(&out.state.history)?)?;
        if let Some(b) = &out.state.bank {
            save_bank(b, &dir.join("bank.json"))?;
        }
        if let Some(c) = &out.state.crps {
            save_crps(c, &dir.join("crps.json"))?;
        }
        fs::remove_dir_all(&progress)?;
        Ok(())
    }

    // ---- attacks ----

    fn stage_attack(&self, dir: &Path) -> Result<()> {
        let c = &self.cfg;
        let eval = self.eval_set()?;
        let batch = eval.all();
        let surrogate = self.model("surrogate")?;
        let mut rows = Vec::new();
        let mut versions = BTreeMap::new();
        for name in ["standard", "adversarial", "proxy"] {
            let model = self.model(name)?;
            versions.insert(name.to_string(), model.param_version());
            let mut masks: Option<MaskSet> = None;
            for (i, spec) in c.attacks.iter().enumerate() {
                let seed = derive_seed(c.seed, &format!("attack-{name}-{i}"));
                let (accuracy, reference) = match spec {
                    AttackSpec::Clean {} => (evaluate(&model, &eval, &AttackKind::Clean, c.evaluation.chunk)?.accuracy, None),
                    AttackSpec::Fgsm { epsilon } => (
                        evaluate(&model, &eval, &AttackKind::Fgsm { epsilon: *epsilon }, c.evaluation.chunk)?.accuracy,
                        None,
                    ),
                    AttackSpec::Pgd(a) => (
                        evaluate(&model, &eval, &AttackKind::Pgd(a.clone().with_seed(seed)), c.evaluation.chunk)?.accuracy,
                        None,
                    ),
                    AttackSpec::Cw(a) => (
                        evaluate(&model, &eval, &AttackKind::CwLinf(a.clone().with_seed(seed)), c.evaluation.chunk)?
                            .accuracy,
                        None,
                    ),
                    AttackSpec::Adaptive(a) => {
                        if masks.is_none() {
                            masks = Some(self.eval_masks(name, &model)?);
                        }
                        let m = masks.as_ref().expect("set above");
                        let adv = adaptive_nonrobust_attack(
                            &model,
                            &batch,
                            m,
                            &c.evaluation.adaptive_loss,
                            &a.clone().with_seed(seed),
                        )?;
                        (adv.robust_accuracy(), None)
                    }
                    AttackSpec::Transfer(a) => {
                        let a = a.clone().with_seed(seed);
                        let mut correct = 0.0;
                        for b in eval.sequential_batches(c.evaluation.chunk) {
                            correct += transfer_attack(&surrogate, &model, &b, &a)?.robust_accuracy() * b.len() as f64;
                        }
                        let white = evaluate(&model, &eval, &AttackKind::Pgd(a), c.evaluation.chunk)?.accuracy;
                        (correct / eval.len() as f64, Some(white))
                    }
                };
                info!("attack {name} {}: {accuracy:.4}", spec.name());
                rows.push(AttackRow {
                    model: name.into(),
                    condition: "x".into(),
                    attack: spec.name(),
                    examples: eval.len(),
                    accuracy,
                    white_box_accuracy: reference,
                });
            }
        }
        let out = AttackArtifacts {
            rows,
            perturbation_rows: self.perturbation_rows()?,
            param_versions: versions,
        };
        fs::write(dir.join("rows.json"), serde_json::to_vec_pretty(&out)?)?;
        Ok(())
    }

    fn eval_masks(&self, name: &str, model: &SplitClassifier) -> Result<MaskSet> {
        if name == "adversarial" {
            return load_masks(&self.record(Stage::Distill)?.dir.join("masks_eval.json"));
        }
        let profile = self.profile_for(model)?;
        distill_masks(model, &self.eval_set()?.all(), &profile, &self.eval_distill_config(name))
    }

    /// PGD accuracy of the adversarial model on `x`, `x + r` and `x + r^k`,
    /// with the attack run on the perturbed inputs.
    fn perturbation_rows(&self) -> Result<Vec<AttackRow>> {
        let c = &self.cfg;
        let n = c.evaluation.rp_examples.min(c.evaluation.examples);
        if n == 0 {
            return Ok(Vec::new());
        }
        let model = self.model("adversarial")?;
        let masks = load_masks(&self.record(Stage::Distill)?.dir.join("masks_eval.json"))?;
        let crps = load_crps(&self.record(Stage::Crp)?.dir.join("crps.json"))?;
        let batch = self.eval_set()?.take(n)?.all();
        let rp_cfg = PerturbOptConfig {
            seed: derive_seed(c.seed, "rp"),
            ..c.rp.clone()
        };
        let rp = optimize_rp(&model, &batch, &masks, &rp_cfg)?;
        let atk = c.evaluation.perturbation_attack.clone().with_seed(derive_seed(c.seed, "perturbation-attack"));
        let name = format!("pgd{}-{}(eps={})", atk.steps, norm_name(&atk), fmt_eps(atk.epsilon));
        let conditions = [
            ("x", batch.clone()),
            ("x+r", rp.apply(&batch)?),
            ("x+r^k", apply_crp(&batch, &crps)?),
        ];
        let mut rows = Vec::new();
        for (cond, b) in conditions {
            let clean = crate::model::accuracy(&model.predict(&b.pixels)?, &b.labels);
            let robust = pgd(&model, &b, &atk)?.robust_accuracy();
            for (attack, accuracy) in [("clean".to_string(), clean), (name.clone(), robust)] {
                rows.push(AttackRow {
                    model: "adversarial".into(),
                    condition: cond.into(),
                    attack,
                    examples: b.len(),
                    accuracy,
                    white_box_accuracy: None,
                });
            }
        }
        Ok(rows)
    }

    // ---- analysis ----

    fn stage_analyze(&self, dir: &Path) -> Result<()> {
        let c = &self.cfg;
        let a = &c.analysis;
        let model = self.model("adversarial")?;
        let ddir = &self.record(Stage::Distill)?.dir;
        let masks = load_masks(&ddir.join("masks_eval.json"))?;
        let profile: ChannelProfile = serde_json::from_slice(&fs::read(ddir.join("profile.json"))?)?;
        let crps = load_crps(&self.record(Stage::Crp)?.dir.join("crps.json"))?;
        let eval = self.eval_set()?;
        let sample = eval.take(a.examples.min(eval.len()))?.all();

        let gn = gradient_norm_distribution(&model, &sample, &masks, Some(&crps), &c.ceo.loss)?;
        let gn_with = gn.with_crp.clone().expect("crps given");
        fs::write(dir.join("gnr_without_crp.csv"), gn.without_crp.to_csv())?;
        fs::write(dir.join("gnr_with_crp.csv"), gn_with.to_csv())?;

        let pair_seed = derive_seed(c.seed, "pairs");
        let test = self.test_set();
        let sim_without = positive_similarity_distribution(&model, test, None, a.pairs, pair_seed)?;
        let sim_with = positive_similarity_distribution(&model, test, Some(&crps), a.pairs, pair_seed)?;
        fs::write(dir.join("similarity_without_crp.csv"), sim_without.to_csv())?;
        fs::write(dir.join("similarity_with_crp.csv"), sim_with.to_csv())?;
        let ci = paired_bootstrap_ci(
            &sim_with.values,
            &sim_without.values,
            a.bootstrap_resamples,
            0.95,
            derive_seed(c.seed, "bootstrap"),
        )?;

        let abl_batch = eval.take(a.ablation_examples.min(eval.len()))?.all();
        let base = self.eval_distill_config("ablation");
        let curve = beta_ablation(&model, &abl_batch, &profile, &base, &a.betas)?;
        fs::write(dir.join("beta_ablation.csv"), curve.to_csv())?;

        let inversion = if a.inversion_steps > 0 {
            let first = sample.select(&[0]);
            let target = model.forward_to_tap(&first.pixels)?;
            let mask = masks
                .get(first.ids[0])
                .ok_or_else(|| Error::contract("evaluation masks do not cover the sample"))?;
            let mut res = BTreeMap::new();
            for (label, keep) in [("robust", Keep::Robust), ("nonrobust", Keep::NonRobust)] {
                let inv = invert_feature(
                    &model,
                    &target,
                    mask,
                    keep,
                    a.inversion_steps,
                    a.inversion_lr,
                    derive_seed(c.seed, "inversion"),
                    None,
                )?;
                res.insert(label.to_string(), inv.residuals.last().copied().unwrap_or(f64::NAN));
            }
            Some(res)
        } else {
            None
        };

        if a.export_features {
            let n = crate::analysis::export_features(&model, &eval, Some(&crps), &dir.join("features_with_crp.bin"))?;
            info!("exported {n} feature records");
        }

        let out = AnalysisArtifacts {
            gnr_without_crp: gn.without_crp.summary.clone(),
            gnr_with_crp: gn_with.summary.clone(),
            gnr_reduction: 1.0 - gn_with.mean() / gn.without_crp.mean(),
            similarity_without_crp: sim_without.summary.clone(),
            similarity_with_crp: sim_with.summary.clone(),
            similarity_difference_ci: ci,
            ablation: curve.clone(),
            robust_only_nonincreasing_pairs: monotone_pairs(&curve.robust_only, false),
            nonrobust_only_nondecreasing_pairs: monotone_pairs(&curve.nonrobust_only, true),
            inversion_residuals: inversion,
            crp_versions: crps.perturbations.values().map(|p| (p.class, p.param_version)).collect(),
        };
        fs::write(dir.join("analysis.json"), serde_json::to_vec_pretty(&out)?)?;
        Ok(())
    }
}

/// One accuracy measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub model: String,
    /// Input condition: `x`, `x+r` or `x+r^k`.
    pub condition: String,
    pub attack: String,
    pub examples: usize,
    pub accuracy: f64,
    /// White-box PGD accuracy with the same budget, for transfer rows.
    pub white_box_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackArtifacts {
    pub rows: Vec<AttackRow>,
    /// Adversarial model on `x`, `x + r` and `x + r^k` over the RP sample.
    pub perturbation_rows: Vec<AttackRow>,
    pub param_versions: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisArtifacts {
    pub gnr_without_crp: Summary,
    pub gnr_with_crp: Summary,
    /// `1 − mean(with) / mean(without)`.
    pub gnr_reduction: f64,
    pub similarity_without_crp: Summary,
    pub similarity_with_crp: Summary,
    /// 95% paired bootstrap interval of `mean(with) − mean(without)`.
    pub similarity_difference_ci: (f64, f64),
    pub ablation: AblationCurve,
    pub robust_only_nonincreasing_pairs: usize,
    pub nonrobust_only_nondecreasing_pairs: usize,
    pub inversion_residuals: Option<BTreeMap<String, f64>>,
    pub crp_versions: BTreeMap<usize, u64>,
}

/// Sha-256 over every file below `dir` (relative path and contents), in
/// sorted order.
fn dir_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    fn walk(base: &Path, d: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(d)? {
            let p = e?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != DONE_FILE) {
                out.push(p.strip_prefix(base).expect("below base").to_path_buf());
            }
        }
        Ok(())
    }
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = fs::read(dir.join(&f))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Serialize, Deserialize)]
struct ProgressState {
    epoch: usize,
    history: Vec<EpochRecord>,
    velocity: Vec<(Vec<usize>, String)>,
}

fn save_progress(dir: &Path, model: &SplitClassifier, state: &TrainState, opt: &Sgd) -> Result<()> {
    let e = state.epoch - 1;
    save_checkpoint(model, &dir.join(format!("epoch-{e}.ckpt")))?;
    if let Some(b) = &state.bank {
        save_bank(b, &dir.join(format!("bank-{e}.json")))?;
    }
    if let Some(c) = &state.crps {
        save_crps(c, &dir.join(format!("crps-{e}.json")))?;
    }
    let p = ProgressState {
        epoch: e,
        history: state.history.clone(),
        velocity: opt.velocity().iter().map(|t| (t.shape().to_vec(), encode_f64(t.data()))).collect(),
    };
    // Written last: its presence marks the epoch as complete.
    fs::write(dir.join(format!("state-{e}.json")), serde_json::to_vec(&p)?)?;
    Ok(())
}

fn latest_progress(dir: &Path) -> Result<Option<usize>> {
    let mut best = None;
    for e in fs::read_dir(dir)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("state-").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(n) = n.parse::<usize>() {
                best = best.max(Some(n));
            }
        }
    }
    Ok(best)
}

fn load_progress(dir: &Path, epoch: usize) -> Result<Resume> {
    let p: ProgressState = serde_json::from_slice(&fs::read(dir.join(format!("state-{epoch}.json")))?)?;
    let velocity = p
        .velocity
        .into_iter()
        .map(|(shape, data)| Tensor::new(shape, decode_f64(&data)?))
        .collect::<Result<Vec<_>>>()?;
    let bank_path = dir.join(format!("bank-{epoch}.json"));
    let crps_path = dir.join(format!("crps-{epoch}.json"));
    Ok(Resume {
        start_epoch: p.epoch + 1,
        bank: if bank_path.exists() { Some(load_bank(&bank_path)?) } else { None },
        crps: if crps_path.exists() { Some(load_crps(&crps_path)?) } else { None },
        velocity: Some(velocity),
        history: p.history,
        bank_fresh: false,
    })
}

// ---- report ----

/// Verdict of one gradient-obfuscation check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityCheck {
    pub model: String,
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Machine-readable run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub config_hash: String,
    pub rows: Vec<AttackRow>,
    pub perturbation_rows: Vec<AttackRow>,
    pub sanity: Vec<SanityCheck>,
    pub analysis: Option<AnalysisArtifacts>,
    pub distribution_files: Vec<String>,
    pub param_versions: BTreeMap<String, u64>,
    pub crp_versions: BTreeMap<usize, u64>,
    pub finetune_history: Vec<EpochRecord>,
    pub stages: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn all_sane(&self) -> bool {
        self.sanity.iter().all(|s| s.pass)
    }
}

/// FGSM ≥ PGD and transfer ≥ white-box, per model, within `tol`.
pub fn sanity_checks(rows: &[AttackRow], tol: f64) -> Vec<SanityCheck> {
    let mut out = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    for m in models {
        let of = |prefix: &str| {
            rows.iter()
                .filter(|r| r.model == m && r.condition == "x" && r.attack.starts_with(prefix))
                .collect::<Vec<_>>()
        };
        for f in of("fgsm") {
            for p in of("pgd").into_iter().filter(|p| p.attack.contains("linf")) {
                out.push(SanityCheck {
                    model: m.into(),
                    check: format!("{} >= {}", f.attack, p.attack),
                    lhs: f.accuracy,
                    rhs: p.accuracy,
                    pass: f.accuracy >= p.accuracy - tol,
                });
            }
        }
        for t in of("transfer") {
            if let Some(w) = t.white_box_accuracy {
                out.push(SanityCheck {
                    model: m.into(),
                    check: format!("{} >= white-box", t.attack),
                    lhs: t.accuracy,
                    rhs: w,
                    pass: t.accuracy >= w - tol,
                });
            }
        }
    }
    out
}

/// Builds the report from cached artifacts and writes `report.txt` and
/// `report.json` into the run directory. Output depends only on artifacts,
/// so regeneration is byte-identical.
pub fn write_report(p: &Pipeline) -> Result<MetricsReport> {
    let cfg = p.config();
    let attack: AttackArtifacts = serde_json::from_slice(&fs::read(p.record(Stage::Attack)?.dir.join("rows.json"))?)?;
    let adir = &p.record(Stage::Analyze)?.dir;
    let analysis: AnalysisArtifacts = serde_json::from_slice(&fs::read(adir.join("analysis.json"))?)?;
    let history: Vec<EpochRecord> =
        serde_json::from_slice(&fs::read(p.record(Stage::Finetune)?.dir.join("history.json"))?)?;
    let dist_dir = p.run_dir().join("distributions");
    fs::create_dir_all(&dist_dir)?;
    let mut files = Vec::new();
    for f in [
        "gnr_without_crp.csv",
        "gnr_with_crp.csv",
        "similarity_without_crp.csv",
        "similarity_with_crp.csv",
        "beta_ablation.csv",
    ] {
        fs::copy(adir.join(f), dist_dir.join(f))?;
        files.push(format!("distributions/{f}"));
    }
    let report = MetricsReport {
        run_id: cfg.run_id(),
        config_hash: cfg.hash(),
        sanity: sanity_checks(&attack.rows, cfg.evaluation.sanity_tolerance),
        rows: attack.rows,
        perturbation_rows: attack.perturbation_rows,
        crp_versions: analysis.crp_versions.clone(),
        analysis: Some(analysis),
        distribution_files: files,
        param_versions: attack.param_versions,
        finetune_history: history,
        stages: p
            .records()
            .iter()
            .map(|(s, r)| (s.name().to_string(), r.key.clone()))
            .collect(),
    };
    fs::write(p.run_dir().join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    fs::write(p.run_dir().join("report.txt"), render_report(&report))?;
    Ok(report)
}

/// Human-readable rendering of a report.
pub fn render_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {}", r.run_id);
    let _ = writeln!(s, "config {}", r.config_hash);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:<8} {:<28} {:>8} {:>9}", "model", "input", "attack", "n", "accuracy");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<12} {:<8} {:<28} {:>8} {:>8.2}%",
            row.model,
            row.condition,
            row.attack,
            row.examples,
            100.0 * row.accuracy
        );
    }
    if !r.perturbation_rows.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "robust perturbations (attacks run on the perturbed inputs)");
        for row in &r.perturbation_rows {
            let _ = writeln!(
                s,
                "{:<12} {:<8} {:<28} {:>8} {:>8.2}%",
                row.model,
                row.condition,
                row.attack,
                row.examples,
                100.0 * row.accuracy
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "gradient-obfuscation checks");
    for c in &r.sanity {
        let _ = writeln!(
            s,
            "  {} {:<12} {} ({:.4} vs {:.4})",
            if c.pass { "PASS" } else { "FAIL" },
            c.model,
            c.check,
            c.lhs,
            c.rhs
        );
    }
    if let Some(a) = &r.analysis {
        let _ = writeln!(s);
        let _ = writeln!(s, "non-robust gradient norm");
        let _ = writeln!(
            s,
            "  without CRP mean {:.6} std {:.6}; with CRP mean {:.6} std {:.6}; reduction {:.1}%",
            a.gnr_without_crp.mean,
            a.gnr_without_crp.std,
            a.gnr_with_crp.mean,
            a.gnr_with_crp.std,
            100.0 * a.gnr_reduction
        );
        let _ = writeln!(s, "positive-pair cosine similarity");
        let _ = writeln!(
            s,
            "  without CRP mean {:.4} std {:.4}; with CRP mean {:.4} std {:.4}; 95% CI of difference [{:.4}, {:.4}]",
            a.similarity_without_crp.mean,
            a.similarity_without_crp.std,
            a.similarity_with_crp.mean,
            a.similarity_with_crp.std,
            a.similarity_difference_ci.0,
            a.similarity_difference_ci.1
        );
        let _ = writeln!(s, "beta ablation (robust-only, nonrobust-only, mean robust channels)");
        for i in 0..a.ablation.betas.len() {
            let _ = writeln!(
                s,
                "  beta {:<8} {:.4} {:.4} {:.2}",
                a.ablation.betas[i], a.ablation.robust_only[i], a.ablation.nonrobust_only[i], a.ablation.mean_robust_channels[i]
            );
        }
        if let Some(inv) = &a.inversion_residuals {
            for (k, v) in inv {
                let _ = writeln!(s, "  inversion residual {k}: {v:.6}");
            }
        }
    }
    if !r.finetune_history.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "fine-tuning");
        for h in &r.finetune_history {
            let _ = writeln!(
                s,
                "  epoch {:>3} lr {:.5} loss {:.5} proxy {:.5} refreshed {} distance evals {}",
                h.epoch,
                h.lr,
                h.train_loss,
                h.proxy_loss.unwrap_or(f64::NAN),
                h.refreshed,
                h.distance_evaluations
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "artifacts");
    for (k, v) in &r.stages {
        let _ = writeln!(s, "  {k:<9} {v}");
    }
    s
}
