//! Configuration-driven experiment runner.
//!
//! An [`ExperimentConfig`] names two (or more) generated domains, a method,
//! training hyperparameters, and evaluation attacks. [`run_experiment`]
//! executes the staged pipeline — data, teacher, optional robust
//! pretraining, method training, checkpoint selection, evaluation — and
//! persists a [`RunManifest`] plus its artifacts under a directory named by
//! the config hash and the seed, which makes reruns idempotent per
//! `(config, seed)`. [`sweep`] repeats that over a grid of one
//! hyperparameter, and [`emit_plots`] turns manifests into SVG+CSV figures.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{derive_seed, BoxBounds, Norm, PerturbationBudget};
use crate::data::{DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::eval::{evaluate, select_checkpoint, EvalReport, LipschitzSearch, SelectionPolicy};
use crate::model::{Head, MlpScorer};
use crate::plot::{write_line_plot, Series};
use crate::synth::{make_two_moons_shift, ShiftSpec};
use crate::train::{
    pretrain_robust, train_standard_at, train_tarot, train_teacher_mdd_state, MetricsRecord,
    TarotConfig, TrainState,
};

/// Environment variable consulted for the output root when neither a CLI
/// flag nor the config file provides one.
pub const OUT_ROOT_ENV: &str = "TAROT_OUT";

/// Which trainer a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Robust adaptation: teacher pseudo-labels plus the adversarial
    /// disparity block.
    Tarot,
    /// Pseudo-label adversarial training — [`Method::Tarot`] with `alpha=0`.
    Pl,
    /// The clean minimax teacher itself, as a non-robust baseline.
    Mdd,
    /// Supervised adversarial training on labeled target data (oracle
    /// ceiling; ignores the source domain).
    At,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Tarot => "tarot",
            Method::Pl => "pl",
            Method::Mdd => "mdd",
            Method::At => "at",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tarot" => Ok(Method::Tarot),
            "pl" => Ok(Method::Pl),
            "mdd" => Ok(Method::Mdd),
            "at" => Ok(Method::At),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected tarot, pl, mdd, or at)"
            ))),
        }
    }
}

/// Parsed form of a dataset spec string such as
/// `two_moons:rot=40,noise=0.1,n=400`. Omitted keys take the defaults shown
/// by [`GeneratorSpec::default`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub rotation_deg: f64,
    pub noise_sd: f64,
    pub n: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { rotation_deg: 0.0, noise_sd: 0.1, n: 400 }
    }
}

fn split_spec(spec: &str) -> (String, Vec<(String, String)>) {
    let spec = spec.trim();
    let (family, rest) = match spec.split_once(':') {
        Some((f, r)) => (f, r),
        None => (spec, ""),
    };
    let pairs = rest
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| match p.split_once('=') {
            Some((k, v)) => (k.trim().to_string(), v.trim().to_string()),
            None => (p.trim().to_string(), String::new()),
        })
        .collect();
    (family.trim().to_string(), pairs)
}

/// Parses a dataset spec string. Only the `two_moons` family exists; its
/// keys are `rot` (degrees), `noise` (jitter standard deviation), and `n`
/// (points per draw).
pub fn parse_dataset_spec(spec: &str) -> Result<GeneratorSpec> {
    let (family, pairs) = split_spec(spec);
    if family != "two_moons" {
        return Err(Error::InvalidConfig(format!(
            "unknown dataset family `{family}` in `{spec}` (expected two_moons)"
        )));
    }
    let mut g = GeneratorSpec::default();
    for (k, v) in pairs {
        match k.as_str() {
            "rot" => {
                g.rotation_deg = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad rot value `{v}`")))?
            }
            "noise" => {
                g.noise_sd = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad noise value `{v}`")))?
            }
            "n" => {
                g.n = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad n value `{v}`")))?
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown dataset key `{other}` in `{spec}`"
                )))
            }
        }
    }
    Ok(g)
}

/// Materializes one domain from its spec string: the two-moons cloud rotated
/// by the spec's angle, jittered with the given seed, labeled (labels on
/// target/unseen domains are consumed only by evaluation and metrics).
pub fn realize_domain(
    spec: &str,
    tag: DomainTag,
    role: &str,
    seed: u64,
) -> Result<DomainDataset> {
    let g = parse_dataset_spec(spec)?;
    let shift = ShiftSpec {
        n_per_domain: g.n,
        rotation_deg: g.rotation_deg,
        noise_sd: g.noise_sd,
        seed,
    };
    let (_, rotated) = make_two_moons_shift(&shift)?;
    DomainDataset::new(format!("{spec}#{role}"), tag, rotated.inputs, rotated.labels)
}

/// Parses an evaluation attack spec such as
/// `pgd:eps=0.0627,steps=20,step=auto,rs=1` into a named budget. `step=auto`
/// means a quarter of epsilon; `rs` toggles the random start.
pub fn parse_attack_spec(spec: &str, dim: usize) -> Result<(String, PerturbationBudget)> {
    let (family, pairs) = split_spec(spec);
    if family != "pgd" {
        return Err(Error::InvalidConfig(format!(
            "unknown attack family `{family}` in `{spec}` (expected pgd)"
        )));
    }
    let mut eps: Option<f64> = None;
    let mut steps: usize = 20;
    let mut step: Option<f64> = None;
    let mut rs = true;
    for (k, v) in pairs {
        match k.as_str() {
            "eps" => {
                eps = Some(
                    v.parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad eps value `{v}`")))?,
                )
            }
            "steps" => {
                steps = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad steps value `{v}`")))?
            }
            "step" => {
                step = if v == "auto" {
                    None
                } else {
                    Some(
                        v.parse().map_err(|_| {
                            Error::InvalidConfig(format!("bad step value `{v}`"))
                        })?,
                    )
                }
            }
            "rs" => {
                rs = match v.as_str() {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    other => {
                        return Err(Error::InvalidConfig(format!("bad rs value `{other}`")))
                    }
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown attack key `{other}` in `{spec}`"
                )))
            }
        }
    }
    let eps = eps
        .ok_or_else(|| Error::InvalidConfig(format!("attack spec `{spec}` is missing eps")))?;
    let step = step.unwrap_or(if eps > 0.0 { eps / 4.0 } else { 0.0 });
    let budget = PerturbationBudget::new(
        eps,
        Norm::LInf,
        step,
        steps,
        rs,
        Some(BoxBounds::unit(dim)),
    )?;
    Ok((spec.trim().to_string(), budget))
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_teacher_alpha() -> f64 {
    1.0
}

/// Optimizer constants of the teacher-refinement recipe: a pretrained model
/// is nudged, not retrained, so the rates are fixed well below typical
/// training rates and the trunk moves slower still.
const TEACHER_REFINE_ETA: f64 = 0.005;
const TEACHER_PSI_LR_SCALE: f64 = 0.1;

/// Everything a run needs, loadable from JSON. The per-run seed (from
/// `seeds`) drives data generation, initialization, attacks, and evaluation;
/// it overrides `train.seed`. An empty `eval_attacks` list resolves to one
/// PGD-20 attack at the training radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Dataset spec for the labeled source domain.
    pub source: String,
    /// Dataset spec for the adaptation target domain.
    pub target: String,
    /// Extra domains evaluated but never trained on.
    #[serde(default)]
    pub unseen: Vec<String>,
    pub method: Method,
    pub train: TarotConfig,
    /// Discrepancy trade-off used when training the pseudo-label teacher for
    /// `tarot`/`pl`. Kept separate from `train.alpha` so sweeping the student
    /// trade-off leaves the teacher fixed.
    #[serde(default = "default_teacher_alpha")]
    pub teacher_alpha: f64,
    /// Epoch budget for the preparatory stages (teacher, robust pretraining);
    /// `None` means `train.epochs`. Letting these differ keeps the teacher
    /// and the pretrained trunk fully trained while the adaptation budget is
    /// varied.
    #[serde(default)]
    pub prep_epochs: Option<usize>,
    /// Robust-pretrain the feature extractor on the source before adapting
    /// (only meaningful for `tarot`/`pl`).
    #[serde(default)]
    pub robust_pretrain: bool,
    /// Pretraining radius; `None` means the training attack radius.
    #[serde(default)]
    pub pretrain_epsilon: Option<f64>,
    #[serde(default)]
    pub eval_attacks: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output root; overridable by a CLI flag or the `TAROT_OUT` variable.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        parse_dataset_spec(&self.source)?;
        parse_dataset_spec(&self.target)?;
        for u in &self.unseen {
            parse_dataset_spec(u)?;
        }
        self.train.validate()?;
        for a in &self.eval_attacks {
            parse_attack_spec(a, 2)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds list is empty".into()));
        }
        if !self.teacher_alpha.is_finite() || self.teacher_alpha < 0.0 {
            return Err(Error::InvalidConfig("teacher_alpha must be finite and >= 0".into()));
        }
        if self.prep_epochs == Some(0) {
            return Err(Error::InvalidConfig("prep_epochs must be at least 1".into()));
        }
        if self.robust_pretrain && !matches!(self.method, Method::Tarot | Method::Pl) {
            return Err(Error::InvalidConfig(
                "robust_pretrain applies only to the tarot and pl methods".into(),
            ));
        }
        if let Some(e) = self.pretrain_epsilon {
            if !e.is_finite() || e < 0.0 {
                return Err(Error::InvalidConfig(
                    "pretrain_epsilon must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Fills derivable fields (currently: a default evaluation attack at the
    /// training radius) and validates. The resolved form is what gets
    /// hashed, echoed into manifests, and persisted next to run outputs.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        if c.eval_attacks.is_empty() {
            let eps = c.train.attack.epsilon;
            c.eval_attacks = vec![format!("pgd:eps={eps},steps=20,step=auto,rs=1")];
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_pretty(path, self)
    }
}

/// A ready-to-edit two-moons adaptation config: source at 0°, target at 40°,
/// one unseen domain at 60°, a 16/255 L∞ budget, three seeds.
pub fn default_config() -> ExperimentConfig {
    let eps = 16.0 / 255.0;
    let attack =
        PerturbationBudget::new(eps, Norm::LInf, eps / 4.0, 10, true, Some(BoxBounds::unit(2)))
            .expect("default budget is valid");
    ExperimentConfig {
        name: default_name(),
        source: "two_moons:rot=0,noise=0.1,n=400".into(),
        target: "two_moons:rot=40,noise=0.1,n=400".into(),
        unseen: vec!["two_moons:rot=60,noise=0.1,n=400".into()],
        method: Method::Tarot,
        train: TarotConfig::new(attack, 0),
        teacher_alpha: default_teacher_alpha(),
        prep_epochs: None,
        robust_pretrain: false,
        pretrain_epsilon: None,
        eval_attacks: vec![],
        seeds: default_seeds(),
        out_dir: None,
    }
}

/// Hash of the canonical JSON serialization of the resolved config, with the
/// output location and the seed list blanked first: where results are
/// written and how many seeds get launched do not change what one run
/// computes. Field order is fixed by the struct, and JSON floats use
/// shortest-roundtrip formatting, so the hash is stable across platforms.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let mut c = config.clone();
    c.out_dir = None;
    c.seeds = Vec::new();
    let json = serde_json::to_string(&c)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Where run outputs go: CLI flag, then the config's `out_dir`, then the
/// `TAROT_OUT` environment variable, then `./tarot-out`.
pub fn resolve_out_root(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &config.out_dir {
        return p.clone();
    }
    if let Some(v) = std::env::var_os(OUT_ROOT_ENV) {
        return PathBuf::from(v);
    }
    PathBuf::from("tarot-out")
}

/// Record of one completed run. `config` is the fully resolved config; the
/// recorded `config_hash` must match a recomputation from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// Seed actually handed to the trainer (derived from `seed`).
    pub train_seed: u64,
    pub created_unix: u64,
    pub config: ExperimentConfig,
    pub selection: SelectionPolicy,
    pub selected_epoch: usize,
    pub metrics: Vec<MetricsRecord>,
    /// Evaluation per domain: keys `source`, `target`, `unseen:<i>`.
    pub reports: BTreeMap<String, EvalReport>,
    /// Artifact files, relative to the manifest's directory.
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    /// Recomputes the config hash from the embedded config and checks it
    /// against the recorded one.
    pub fn verify_hash(&self) -> Result<()> {
        let fresh = config_hash(&self.config)?;
        if fresh != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "manifest hash mismatch: recorded {} but the stored config hashes to {}",
                self.config_hash, fresh
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_pretty(path, self)
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_metrics_jsonl(path: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Marker file written into a run directory when a stage fails; partial
/// outputs are left in place next to it.
pub const FAILED_MARKER: &str = "failed";

fn fail_stage<T>(stage: &'static str, dir: &Path, result: Result<T>) -> Result<T> {
    match result {
        Ok(v) => Ok(v),
        Err(e) => {
            let err = Error::Stage { stage, source: Box::new(e) };
            let _ = fs::write(dir.join(FAILED_MARKER), format!("{err}\n"));
            Err(err)
        }
    }
}

/// Directory for one `(config, seed)` run under the output root.
pub fn run_dir(out_root: &Path, config_hash: &str, method: Method, seed: u64) -> PathBuf {
    out_root
        .join("runs")
        .join(format!("{}-{}-s{}", method.as_str(), &config_hash[..12], seed))
}

struct RealizedData {
    source_train: DomainDataset,
    target_train: DomainDataset,
    source_eval: DomainDataset,
    target_eval: DomainDataset,
    unseen_evals: Vec<DomainDataset>,
}

fn realize_all(config: &ExperimentConfig, seed: u64) -> Result<RealizedData> {
    let s = |k: u64| derive_seed(seed, &[k]);
    let mut unseen_evals = Vec::with_capacity(config.unseen.len());
    for (i, spec) in config.unseen.iter().enumerate() {
        unseen_evals.push(realize_domain(spec, DomainTag::Unseen, "eval", s(30 + i as u64))?);
    }
    Ok(RealizedData {
        source_train: realize_domain(&config.source, DomainTag::Source, "train", s(10))?,
        target_train: realize_domain(&config.target, DomainTag::Target, "train", s(11))?,
        source_eval: realize_domain(&config.source, DomainTag::Source, "eval", s(20))?,
        target_eval: realize_domain(&config.target, DomainTag::Target, "eval", s(21))?,
        unseen_evals,
    })
}

/// The pseudo-label teacher recipe, shared by [`run_experiment`] and the
/// standalone teacher command: robust source pretraining at the pretraining
/// radius, then gentle clean-minimax refinement. The minimax cannot be
/// trained from scratch at this scale; starting from a robust pretrained
/// model and nudging it at tenth-scale rates preserves the pretrained
/// model's transfer while the discrepancy term adjusts it. Adaptation
/// methods (`tarot`/`pl`) get the fixed refinement rates and `teacher_alpha`
/// so that sweeping `train.*` moves only the student; the mdd baseline keeps
/// the configured optimizer so sweeps reach it.
pub fn train_teacher(
    config: &ExperimentConfig,
    source_train: &DomainDataset,
    target_train: &DomainDataset,
    seed: u64,
) -> Result<TrainState> {
    let mut tc = config.train.clone();
    if config.method != Method::Mdd {
        tc.alpha = config.teacher_alpha;
        tc.epochs = config.prep_epochs.unwrap_or(tc.epochs);
        tc.eta1 = TEACHER_REFINE_ETA;
        tc.eta2 = TEACHER_REFINE_ETA;
        tc.psi_lr_scale = TEACHER_PSI_LR_SCALE;
    }
    let mut ic = config.train.clone();
    ic.epochs = config.prep_epochs.unwrap_or(ic.epochs);
    ic.psi_lr_scale = 1.0;
    ic.seed = derive_seed(seed, &[4]);
    tc.seed = derive_seed(seed, &[1]);
    let eps_pre = config.pretrain_epsilon.unwrap_or(config.train.attack.epsilon);
    let init = pretrain_robust(source_train, eps_pre, &ic)?;
    train_teacher_mdd_state(source_train, target_train, Some(&init), &tc)
}

/// Runs the full staged pipeline for one seed and persists everything under
/// a hash-named directory. If a manifest from an identical `(config, seed)`
/// already exists, it is loaded and returned instead of recomputing (unless
/// `force` is set). On a stage error the directory keeps whatever was
/// already written, plus a [`FAILED_MARKER`] file naming the stage.
pub fn run_experiment(
    config: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    force: bool,
) -> Result<RunManifest> {
    let config = config.resolved()?;
    let hash = config_hash(&config)?;
    let dir = run_dir(out_root, &hash, config.method, seed);
    let manifest_path = dir.join("manifest.json");

    if !force && manifest_path.exists() {
        if let Ok(existing) = RunManifest::load(&manifest_path) {
            if existing.verify_hash().is_ok()
                && existing.config_hash == hash
                && existing.seed == seed
            {
                return Ok(existing);
            }
        }
        // Stale or damaged manifest: fall through and recompute.
    }
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join(FAILED_MARKER));

    let mut artifacts: BTreeMap<String, PathBuf> = BTreeMap::new();
    config.save(&dir.join("config.json"))?;
    artifacts.insert("config".into(), "config.json".into());

    let data = fail_stage("data", &dir, realize_all(&config, seed))?;

    // Teacher: a clean minimax run that supplies pseudo-labels (and is the
    // entire run for the mdd baseline). The minimax cannot be trained from
    // scratch at this scale — it starts from a robust source-pretrained
    // model and refines it gently (tenth-scale rates), which preserves the
    // pretrained model's transfer while the discrepancy term adjusts it.
    // Adaptation methods use the dedicated `teacher_alpha` and the fixed
    // refinement rates so that sweeping `train.*` moves only the student;
    // the mdd baseline keeps the configured optimizer so sweeps reach it.
    let teacher_state: Option<TrainState> = if config.method == Method::At {
        None
    } else {
        let st = fail_stage(
            "teacher",
            &dir,
            train_teacher(&config, &data.source_train, &data.target_train, seed),
        )?;
        st.model.save(&dir.join("teacher.json"), None)?;
        artifacts.insert("teacher".into(), "teacher.json".into());
        Some(st)
    };

    let init_params: Option<Vec<f64>> = if config.robust_pretrain {
        let mut pc = config.train.clone();
        pc.psi_lr_scale = 1.0;
        pc.epochs = config.prep_epochs.unwrap_or(pc.epochs);
        pc.seed = derive_seed(seed, &[2]);
        let eps_pre = config.pretrain_epsilon.unwrap_or(config.train.attack.epsilon);
        let init =
            fail_stage("pretrain", &dir, pretrain_robust(&data.source_train, eps_pre, &pc))?;
        write_json_pretty(&dir.join("pretrain_init.json"), &init)?;
        artifacts.insert("pretrain_init".into(), "pretrain_init.json".into());
        Some(init)
    } else {
        None
    };

    let train_seed = derive_seed(seed, &[3]);
    let mut rc = config.train.clone();
    rc.seed = train_seed;
    let state: TrainState = match config.method {
        Method::Tarot | Method::Pl => {
            let teacher = &teacher_state.as_ref().expect("teacher stage ran").model;
            let run = || {
                let mut rc = rc.clone();
                if config.method == Method::Pl {
                    rc.alpha = 0.0;
                }
                train_tarot(
                    &data.source_train,
                    &data.target_train,
                    teacher,
                    init_params.as_deref(),
                    &rc,
                )
            };
            fail_stage("train", &dir, run())?
        }
        Method::Mdd => teacher_state.clone().expect("teacher stage ran"),
        Method::At => fail_stage("train", &dir, train_standard_at(&data.target_train, &rc))?,
    };
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &state.metrics)?;
    artifacts.insert("metrics".into(), "metrics.jsonl".into());

    let selection = if state.metrics.iter().all(|m| m.target_robust_acc.is_some()) {
        SelectionPolicy::Pgd20Target
    } else {
        SelectionPolicy::Last
    };
    let (selected_epoch, model) = fail_stage("select", &dir, {
        select_checkpoint(&state.metrics, selection)
            .and_then(|e| state.model_at(e).map(|m| (e, m)))
    })?;
    model.save(&dir.join("model.json"), Some(selected_epoch))?;
    artifacts.insert("model".into(), "model.json".into());

    let reports = fail_stage(
        "eval",
        &dir,
        evaluate_domains(&model, &config, &data, seed),
    )?;

    let manifest = RunManifest {
        config_hash: hash,
        seed,
        train_seed,
        created_unix: now_unix(),
        config,
        selection,
        selected_epoch,
        metrics: state.metrics,
        reports,
        artifacts,
    };
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn evaluate_domains(
    model: &MlpScorer,
    config: &ExperimentConfig,
    data: &RealizedData,
    seed: u64,
) -> Result<BTreeMap<String, EvalReport>> {
    let dim = data.source_eval.dim();
    let mut attacks = Vec::with_capacity(config.eval_attacks.len());
    for spec in &config.eval_attacks {
        attacks.push(parse_attack_spec(spec, dim)?);
    }
    let lipschitz = if config.train.attack.epsilon > 0.0 {
        let mut s = LipschitzSearch::new(config.train.attack.epsilon)?;
        s.bounds = Some(BoxBounds::unit(dim));
        s.seed = derive_seed(seed, &[7]);
        Some(s)
    } else {
        None
    };
    let view = model.view(Head::Main);
    let mut reports = BTreeMap::new();
    let mut domains: Vec<(String, &DomainDataset)> = vec![
        ("source".into(), &data.source_eval),
        ("target".into(), &data.target_eval),
    ];
    for (i, ds) in data.unseen_evals.iter().enumerate() {
        domains.push((format!("unseen:{i}"), ds));
    }
    for (k, (key, ds)) in domains.into_iter().enumerate() {
        let report =
            evaluate(&view, ds, &attacks, lipschitz.as_ref(), derive_seed(seed, &[6, k as u64]))?;
        reports.insert(key, report);
    }
    Ok(reports)
}

/// Runs every seed in the config. Results come back in seed order.
pub fn run_config(
    config: &ExperimentConfig,
    out_root: &Path,
    force: bool,
) -> Result<Vec<RunManifest>> {
    let resolved = config.resolved()?;
    resolved.seeds.iter().map(|&s| run_experiment(&resolved, s, out_root, force)).collect()
}

/// Hyperparameters that can be swept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Epsilon,
    RobustPt,
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Epsilon => "epsilon",
            SweepParam::RobustPt => "robust_pt",
        }
    }

    /// The swept value as recorded in a manifest's resolved config.
    pub fn value_of(&self, config: &ExperimentConfig) -> f64 {
        match self {
            SweepParam::Alpha => config.train.alpha,
            SweepParam::Epsilon => config.train.attack.epsilon,
            SweepParam::RobustPt => {
                if config.robust_pretrain {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alpha" => Ok(SweepParam::Alpha),
            "epsilon" | "eps" => Ok(SweepParam::Epsilon),
            "robust_pt" | "robust-pt" => Ok(SweepParam::RobustPt),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep parameter `{other}` (expected alpha, epsilon, or robust_pt)"
            ))),
        }
    }
}

/// Returns the base config with one swept hyperparameter replaced. Sweeping
/// epsilon rebuilds the attack with a quarter-epsilon step and clears
/// auto-derived evaluation attacks so they re-resolve at the new radius.
pub fn apply_sweep_value(
    base: &ExperimentConfig,
    param: SweepParam,
    value: f64,
) -> Result<ExperimentConfig> {
    if !value.is_finite() {
        return Err(Error::InvalidConfig("swept value must be finite".into()));
    }
    let mut c = base.clone();
    match param {
        SweepParam::Alpha => c.train.alpha = value,
        SweepParam::Epsilon => {
            let a = &base.train.attack;
            c.train.attack = PerturbationBudget::new(
                value,
                a.norm,
                if value > 0.0 { value / 4.0 } else { 0.0 },
                a.num_steps,
                a.random_start,
                a.bounds.clone(),
            )?;
        }
        SweepParam::RobustPt => {
            c.robust_pretrain = match value {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                _ => {
                    return Err(Error::InvalidConfig(
                        "robust_pt sweep values must be 0 or 1".into(),
                    ))
                }
            };
        }
    }
    Ok(c)
}

/// Index of a finished sweep, written as `sweep.json` inside the sweep
/// directory so plotting can find the manifests later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepIndex {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub csv: PathBuf,
    pub manifest_paths: Vec<PathBuf>,
}

/// A sweep's outputs: where it lives, its index, and the manifests in
/// (value-major, seed-minor) order.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub index: SweepIndex,
    pub manifests: Vec<RunManifest>,
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One run per (value, seed), reusing completed runs, plus a summary CSV of
/// standard and robust accuracy per domain.
pub fn sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out_root: &Path,
    force: bool,
) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let base_hash = config_hash(&base.resolved()?)?;
    let dir = out_root.join("sweeps").join(format!("{}-{}", param.as_str(), &base_hash[..12]));
    fs::create_dir_all(&dir)?;

    let mut manifests = Vec::new();
    let mut manifest_paths = Vec::new();
    let mut csv = String::from(
        "param,value,seed,method,robust_pretrain,domain,attack,n_samples,standard_acc,robust_acc,lipschitz\n",
    );
    for &value in values {
        let cfg = apply_sweep_value(base, param, value)?.resolved()?;
        let hash = config_hash(&cfg)?;
        for &seed in &cfg.seeds {
            let manifest = run_experiment(&cfg, seed, out_root, force)?;
            let headline = cfg.eval_attacks.first().cloned().unwrap_or_default();
            for (domain, report) in &manifest.reports {
                let robust = report.robust_acc.get(&headline).copied();
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    param.as_str(),
                    value,
                    seed,
                    cfg.method.as_str(),
                    cfg.robust_pretrain,
                    domain,
                    headline.replace(',', ";"),
                    report.n_samples,
                    report.standard_acc,
                    csv_field(robust),
                    csv_field(report.lipschitz),
                ));
            }
            manifest_paths.push(run_dir(out_root, &hash, cfg.method, seed).join("manifest.json"));
            manifests.push(manifest);
        }
    }
    let csv_path = dir.join("summary.csv");
    fs::write(&csv_path, &csv)?;
    let index = SweepIndex {
        param,
        values: values.to_vec(),
        csv: csv_path,
        manifest_paths,
    };
    write_json_pretty(&dir.join("sweep.json"), &index)?;
    Ok(SweepOutcome { dir, index, manifests })
}

/// Median of a nonempty slice (average of the middle two for even lengths).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("median of an empty slice".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn series_label(config: &ExperimentConfig) -> String {
    if config.robust_pretrain {
        format!("{}+rpt", config.method.as_str())
    } else {
        config.method.as_str().to_string()
    }
}

/// Renders per-domain figures from run manifests: seed-median standard and
/// robust accuracy against the swept value, one series per method (and
/// pretraining flavor). Each SVG gets a sibling CSV carrying exactly the
/// plotted points. Empty input is a parameter error.
pub fn emit_plots(
    manifests: &[RunManifest],
    param: SweepParam,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if manifests.is_empty() {
        return Err(Error::InvalidConfig("no manifests to plot".into()));
    }
    let domains: BTreeSet<String> =
        manifests.iter().flat_map(|m| m.reports.keys().cloned()).collect();
    let mut written = Vec::new();
    for domain in &domains {
        for metric in ["standard", "robust"] {
            // label -> x -> seed values.
            let mut grouped: BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
            for m in manifests {
                let Some(report) = m.reports.get(domain) else { continue };
                let y = match metric {
                    "standard" => Some(report.standard_acc),
                    _ => {
                        let headline = m.config.eval_attacks.first();
                        headline.and_then(|h| report.robust_acc.get(h)).copied()
                    }
                };
                let Some(y) = y else { continue };
                let x = param.value_of(&m.config);
                grouped
                    .entry(series_label(&m.config))
                    .or_default()
                    .entry(x.to_bits())
                    .or_insert((x, Vec::new()))
                    .1
                    .push(y);
            }
            let mut series: Vec<Series> = Vec::new();
            for (label, points) in grouped {
                let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
                for (_, (x, ys)) in points {
                    pts.push((x, median(&ys)?));
                }
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                series.push(Series { label, points: pts });
            }
            if series.is_empty() {
                continue;
            }
            let stem = format!("{}_{}_vs_{}", domain.replace(':', "-"), metric, param.as_str());
            let path = out_dir.join(format!("{stem}.svg"));
            write_line_plot(
                &path,
                &format!("{domain}: {metric} accuracy vs {}", param.as_str()),
                param.as_str(),
                &format!("{metric} accuracy"),
                &series,
            )?;
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(Error::InvalidConfig(
            "manifests contain no plottable accuracy values".into(),
        ));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_spec_parses_and_defaults() {
        let g = parse_dataset_spec("two_moons:rot=40,noise=0.05,n=64").unwrap();
        assert_eq!(g, GeneratorSpec { rotation_deg: 40.0, noise_sd: 0.05, n: 64 });
        assert_eq!(parse_dataset_spec("two_moons").unwrap(), GeneratorSpec::default());
        let partial = parse_dataset_spec("two_moons:rot=15").unwrap();
        assert_eq!(partial.rotation_deg, 15.0);
        assert_eq!(partial.n, GeneratorSpec::default().n);
        assert!(parse_dataset_spec("two_moons:radius=3").is_err());
        assert!(parse_dataset_spec("gaussians:rot=0").is_err());
    }

    #[test]
    fn attack_spec_parses_with_auto_step() {
        let (name, b) = parse_attack_spec("pgd:eps=0.08,steps=5,step=auto,rs=0", 2).unwrap();
        assert_eq!(name, "pgd:eps=0.08,steps=5,step=auto,rs=0");
        assert_eq!(b.epsilon, 0.08);
        assert_eq!(b.num_steps, 5);
        assert_eq!(b.step_size, 0.02);
        assert!(!b.random_start);
        let (_, c) = parse_attack_spec("pgd:eps=0.1,step=0.05", 2).unwrap();
        assert_eq!(c.step_size, 0.05);
        assert_eq!(c.num_steps, 20);
        assert!(c.random_start);
        assert!(parse_attack_spec("pgd:steps=5", 2).is_err());
        assert!(parse_attack_spec("fgsm:eps=0.1", 2).is_err());
    }

    #[test]
    fn realized_domains_are_deterministic_and_rotated() {
        let a = realize_domain("two_moons:rot=30,n=40", DomainTag::Target, "train", 7).unwrap();
        let b = realize_domain("two_moons:rot=30,n=40", DomainTag::Target, "train", 7).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
        let c = realize_domain("two_moons:rot=0,n=40", DomainTag::Source, "train", 7).unwrap();
        assert_ne!(a.inputs, c.inputs);
        assert_eq!(a.len(), 40);
        assert!(a.labels.is_some());
    }

    #[test]
    fn hash_ignores_outputs_and_seeds_but_sees_science() {
        let base = default_config();
        let h0 = config_hash(&base).unwrap();
        let mut moved = base.clone();
        moved.out_dir = Some(PathBuf::from("/elsewhere"));
        moved.seeds = vec![9];
        assert_eq!(config_hash(&moved).unwrap(), h0);

        let mut different = base.clone();
        different.train.alpha = 0.25;
        assert_ne!(config_hash(&different).unwrap(), h0);

        let mut other_method = base;
        other_method.method = Method::Pl;
        assert_ne!(config_hash(&other_method).unwrap(), h0);
    }

    #[test]
    fn resolution_fills_a_pgd20_attack_at_the_training_radius() {
        let cfg = default_config();
        assert!(cfg.eval_attacks.is_empty());
        let resolved = cfg.resolved().unwrap();
        assert_eq!(resolved.eval_attacks.len(), 1);
        let (_, b) = parse_attack_spec(&resolved.eval_attacks[0], 2).unwrap();
        assert_eq!(b.epsilon, cfg.train.attack.epsilon);
        assert_eq!(b.num_steps, 20);
    }

    #[test]
    fn sweep_values_land_in_the_right_field() {
        let base = default_config();
        let a = apply_sweep_value(&base, SweepParam::Alpha, 0.05).unwrap();
        assert_eq!(a.train.alpha, 0.05);
        let e = apply_sweep_value(&base, SweepParam::Epsilon, 0.125).unwrap();
        assert_eq!(e.train.attack.epsilon, 0.125);
        assert_eq!(e.train.attack.step_size, 0.03125);
        let r = apply_sweep_value(&base, SweepParam::RobustPt, 1.0).unwrap();
        assert!(r.robust_pretrain);
        assert!(apply_sweep_value(&base, SweepParam::RobustPt, 0.5).is_err());
        assert_eq!(SweepParam::Epsilon.value_of(&e.resolved().unwrap()), 0.125);
    }

    #[test]
    fn method_and_param_names_round_trip() {
        for m in [Method::Tarot, Method::Pl, Method::Mdd, Method::At] {
            assert_eq!(Method::from_str(m.as_str()).unwrap(), m);
        }
        for p in [SweepParam::Alpha, SweepParam::Epsilon, SweepParam::RobustPt] {
            assert_eq!(SweepParam::from_str(p.as_str()).unwrap(), p);
        }
        assert!(Method::from_str("dann").is_err());
        assert!(SweepParam::from_str("gamma").is_err());
    }

    #[test]
    fn robust_pretrain_rejected_for_non_adaptation_methods() {
        let mut cfg = default_config();
        cfg.robust_pretrain = true;
        assert!(cfg.validate().is_ok());
        cfg.method = Method::At;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plotting_nothing_is_a_parameter_error() {
        let err = emit_plots(&[], SweepParam::Alpha, Path::new("/tmp/unused")).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn median_handles_odd_even_and_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }
}
