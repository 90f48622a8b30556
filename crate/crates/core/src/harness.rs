//! Experiment orchestration: declarative run configuration, seed substreams,
//! the collect → train → learn-sets → run → report pipeline, and metrics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{receding_horizon_run, ControlError, DecisionStatus, Controller, ControllerConfig, ControllerKind, TrajectoryLog};
use crate::lifting::{
    choose_bounds, extract_residuals, identity_model_on, one_step_rmse, rng_from, train_deep_edmd, BoundRule, KoopmanModel,
    LiftError, ModelJson, TrainConfig, TrainReport, BOUND_FLOOR,
};
use crate::platoon::{
    build_sequences, collect_data, emergency_profile, load_cycle_csv, AttackMode, CollectConfig, DataLog, LogMeta,
    OvmParams, PlatoonConfig, PlatoonError, ScenarioProfile, SignalBounds,
};
use crate::reach::{quantify_tightness, LearnedSetModel, ReachError, SetLearningConfig, TightnessReport};
use crate::setcalc::Zonotope;

/// Environment variable overriding the output directory of a config file.
pub const OUT_ENV: &str = "RNDDPC_OUT";

/// Tolerance of the closed-loop constraint check.
pub const CONSTRAINT_TOL: f64 = 1e-6;

/// A robust run whose feasible fraction is below this is infeasibility-dominated.
pub const FEASIBLE_MAJORITY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("configuration error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Platoon(#[from] PlatoonError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing artifact {0}; run the earlier stage first")]
    Missing(PathBuf),
    #[error("logs come from different platoon configurations ({0} vs {1})")]
    PlatoonMismatch(String, String),
    #[error("empty trajectory log")]
    EmptyLog,
}

impl HarnessError {
    /// Errors caused by the user's configuration rather than the computation.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Toml(_))
            || matches!(self, Self::Control(ControlError::Config(_)))
            || matches!(self, Self::Platoon(PlatoonError::Config(_)))
            || matches!(self, Self::Lift(LiftError::Config(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonSection {
    pub n: usize,
    pub t_s: f64,
    pub t_h: f64,
    /// Car-following law shared by every HDV.
    pub hdv: OvmParams,
    pub cav: OvmParams,
    pub bounds: SignalBounds,
}

impl Default for PlatoonSection {
    fn default() -> Self {
        let p = PlatoonConfig::new(3);
        Self {
            n: p.n,
            t_s: p.t_s,
            t_h: p.t_h,
            hdv: OvmParams::default(),
            cav: p.cav_ovm,
            bounds: p.bounds,
        }
    }
}

impl PlatoonSection {
    pub fn to_config(&self) -> PlatoonConfig {
        PlatoonConfig {
            n: self.n,
            t_s: self.t_s,
            hdv: vec![self.hdv; self.n.saturating_sub(1)],
            cav_ovm: self.cav,
            bounds: self.bounds,
            t_h: self.t_h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetsSection {
    /// Rule for the residual bounds of the error zonotopes.
    pub bound: BoundRule,
    pub learning: SetLearningConfig,
}

impl Default for SetsSection {
    fn default() -> Self {
        Self {
            bound: BoundRule::Uniform { value: 0.3 },
            learning: SetLearningConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Emergency,
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    /// `t,v` CSV for the cycle scenario.
    pub cycle_path: Option<PathBuf>,
    /// Length of the cycle excerpt in seconds; `0` keeps the whole cycle.
    pub excerpt_s: f64,
    pub attack: AttackMode,
    /// Label used in file names and reports; defaults to the kind plus the
    /// attack type when it is not random.
    pub label: Option<String>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Emergency,
            cycle_path: None,
            excerpt_s: 300.0,
            attack: AttackMode::Random { theta_max: 3.0 },
            label: None,
        }
    }
}

impl ScenarioSection {
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let base = match self.kind {
            ScenarioKind::Emergency => "emergency",
            ScenarioKind::Cycle => "cycle",
        };
        match self.attack {
            AttackMode::Random { .. } => base.to_string(),
            AttackMode::Delay { .. } => format!("{base}_delay"),
            AttackMode::None => format!("{base}_clean"),
        }
    }

    pub fn profile(&self, t_s: f64) -> Result<ScenarioProfile, HarnessError> {
        let mut p = match self.kind {
            ScenarioKind::Emergency => emergency_profile(t_s, self.attack),
            ScenarioKind::Cycle => {
                let path = self
                    .cycle_path
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("scenario.cycle_path is required for the cycle scenario".into()))?;
                let f = fs::File::open(path).map_err(io_err(path))?;
                let mut p = load_cycle_csv(f, t_s, self.attack)?;
                if self.excerpt_s > 0.0 {
                    let keep = ((self.excerpt_s / t_s).round() as usize).max(1);
                    p.v0.truncate(keep);
                }
                p
            }
        };
        p.name = self.label();
        Ok(p)
    }
}

/// Shared controller settings plus per-controller overrides, each a table
/// of `ControllerConfig` keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub base: toml::Table,
    pub overrides: BTreeMap<String, toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage draws from a named substream of it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub platoon: PlatoonSection,
    pub collect: CollectConfig,
    pub train: TrainConfig,
    pub sets: SetsSection,
    pub scenario: ScenarioSection,
    pub controllers: Vec<ControllerKind>,
    pub control: ControlSection,
    /// Closed-loop episodes per controller; episode `e` uses run substream `e`.
    pub episodes: usize,
    /// Worker threads for closed-loop runs.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            platoon: PlatoonSection::default(),
            collect: CollectConfig::default(),
            train: TrainConfig::default(),
            sets: SetsSection::default(),
            scenario: ScenarioSection::default(),
            controllers: ControllerKind::ALL.to_vec(),
            control: ControlSection::default(),
            episodes: 1,
            workers: 1,
        }
    }
}

fn merge_table(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge_table(dst, src),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    let s = serde_json::to_string(v).expect("configuration types serialize");
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed of substream `name`/`index` of the master seed.
pub fn substream_seed(master: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = toml::from_str(&s)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = &cfg.scenario.cycle_path {
            if p.is_relative() {
                cfg.scenario.cycle_path = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.platoon.n < 1 {
            return bad("platoon.n must be at least 1".into());
        }
        self.platoon.to_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.controllers.is_empty() {
            return bad("controllers must list at least one controller".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.scenario.kind == ScenarioKind::Cycle {
            match &self.scenario.cycle_path {
                None => return bad("scenario.cycle_path is required for the cycle scenario".into()),
                Some(p) if !p.is_file() => return bad(format!("cycle file {} does not exist", p.display())),
                _ => {}
            }
        }
        if let AttackMode::Random { theta_max } = self.scenario.attack {
            if theta_max > self.platoon.bounds.theta_max + 1e-12 {
                return bad(format!(
                    "attack amplitude {theta_max} exceeds platoon.bounds.theta_max {}",
                    self.platoon.bounds.theta_max
                ));
            }
        }
        for key in self.control.overrides.keys() {
            if ControllerKind::parse(key).is_none() {
                return bad(format!("control.overrides.{key}: unknown controller"));
            }
        }
        for &k in &self.controllers {
            self.controller_config(k)?;
        }
        Ok(())
    }

    /// Controller settings: kind defaults, signal bounds from the platoon,
    /// then `control.base`, then the kind's override table.
    pub fn controller_config(&self, kind: ControllerKind) -> Result<ControllerConfig, HarnessError> {
        let mut cfg = ControllerConfig::for_kind(kind);
        cfg.reach.eps_max = self.platoon.bounds.eps_max;
        cfg.reach.theta_max = self.platoon.bounds.theta_max;
        let mut table = toml::Table::try_from(&cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge_table(&mut table, &self.control.base);
        for (key, over) in &self.control.overrides {
            if ControllerKind::parse(key) == Some(kind) {
                merge_table(&mut table, over);
            }
        }
        let cfg: ControllerConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("control settings for {}: {e}", kind.name())))?;
        cfg.validate()
            .map_err(|e| HarnessError::Config(format!("control settings for {}: {e}", kind.name())))?;
        Ok(cfg)
    }

    /// Hash of every setting except the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hash_json(&c)
    }

    pub fn platoon_hash(&self) -> String {
        platoon_hash(&self.platoon.to_config())
    }

    /// Hash of the settings the offline artifacts depend on.
    pub fn offline_hash(&self) -> String {
        hash_json(&(self.seed, &self.platoon, &self.collect, &self.train, &self.sets))
    }

    pub fn collect_seed(&self) -> u64 {
        substream_seed(self.seed, "collect", 0)
    }

    pub fn train_seed(&self) -> u64 {
        substream_seed(self.seed, "train", 0)
    }

    pub fn run_seed(&self, episode: usize) -> u64 {
        substream_seed(self.seed, "run", episode as u64)
    }

    /// `--out` beats the environment variable, which beats the file.
    pub fn resolve_out_dir(&mut self, flag: Option<PathBuf>) {
        if let Some(p) = flag {
            self.out_dir = p;
        } else if let Some(p) = std::env::var_os(OUT_ENV) {
            self.out_dir = PathBuf::from(p);
        }
    }
}

pub fn platoon_hash(p: &PlatoonConfig) -> String {
    hash_json(p)
}

/// File names inside the output directory.
pub mod paths {
    pub const DATA: &str = "data.csv";
    pub const MODEL: &str = "model.json";
    pub const MODEL_IDENTITY: &str = "model_identity.json";
    pub const TRAIN_REPORT: &str = "train_report.json";
    pub const SETS: &str = "sets.json";
    pub const SETS_IDENTITY: &str = "sets_identity.json";
    pub const TIGHTNESS: &str = "tightness.csv";
    pub const TIGHTNESS_IDENTITY: &str = "tightness_identity.csv";
    pub const RUNS: &str = "runs";
    pub const REPORT_MD: &str = "report.md";
    pub const REPORT_CSV: &str = "report.csv";
    pub const OFFLINE_STAMP: &str = "offline.json";
}

/// Stamp attached to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub offline_hash: String,
    pub platoon_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    stamp: Stamp,
    model: ModelJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainReportFile {
    stamp: Stamp,
    report: TrainReport,
    test_rmse: f64,
    test_rmse_identity: f64,
}

pub fn collect_stage(cfg: &RunConfig) -> Result<DataLog, HarnessError> {
    let plant = cfg.platoon.to_config();
    let seed = cfg.collect_seed();
    let meta = LogMeta {
        n: plant.n,
        t_s: plant.t_s,
        seed,
        config_hash: cfg.config_hash(),
    };
    Ok(collect_data(&plant, &cfg.collect, &mut rng_from(seed), meta)?)
}

/// Trained model, identity-lift baseline fitted on the same training split,
/// and the training report.
pub struct TrainedModels {
    pub model: KoopmanModel,
    pub identity: KoopmanModel,
    pub report: TrainReport,
}

impl TrainedModels {
    pub fn test_rmse(&self, log: &DataLog) -> (f64, f64) {
        (
            one_step_rmse(&self.model, log, &self.report.test_indices),
            one_step_rmse(&self.identity, log, &self.report.test_indices),
        )
    }
}

pub fn train_stage(cfg: &RunConfig, log: &DataLog) -> Result<TrainedModels, HarnessError> {
    let (model, report) = train_deep_edmd(log, &cfg.train, &mut rng_from(cfg.train_seed()))?;
    let identity = identity_model_on(log, &report.train_indices)?;
    Ok(TrainedModels { model, identity, report })
}

/// Residual bounds, error zonotopes and model sets for one model over the whole log.
pub fn learn_sets_stage(
    cfg: &RunConfig,
    log: &DataLog,
    model: &KoopmanModel,
) -> Result<(LearnedSetModel, TightnessReport), HarnessError> {
    let seqs = build_sequences(log, |x| model.lift(x));
    let stats = extract_residuals(model, &seqs);
    let (s, r) = choose_bounds(&stats, cfg.sets.bound, BOUND_FLOOR)?;
    let z_sigma = Zonotope::from_box(DVector::zeros(s.len()), &s);
    let z_rho = Zonotope::from_box(DVector::zeros(r.len()), &r);
    let mut sm = crate::reach::learn_model_sets(&seqs, &z_sigma, &z_rho, &cfg.sets.learning)?;
    sm.provenance.model_hash = model.hash();
    let tight = quantify_tightness(&sm, &model.abhj(), &model.c)?;
    Ok((sm, tight))
}

/// Everything the closed loop needs from the offline stages.
pub struct Artifacts {
    pub model: KoopmanModel,
    pub identity: KoopmanModel,
    pub sets: LearnedSetModel,
    pub sets_identity: LearnedSetModel,
}

/// Offline stages without touching the disk.
pub fn prepare(cfg: &RunConfig) -> Result<(DataLog, TrainedModels, Artifacts, [TightnessReport; 2]), HarnessError> {
    let log = collect_stage(cfg)?;
    let tm = train_stage(cfg, &log)?;
    let (sets, t1) = learn_sets_stage(cfg, &log, &tm.model)?;
    let (sets_identity, t2) = learn_sets_stage(cfg, &log, &tm.identity)?;
    let art = Artifacts {
        model: tm.model.clone(),
        identity: tm.identity.clone(),
        sets,
        sets_identity,
    };
    Ok((log, tm, art, [t1, t2]))
}

pub fn build_controller(cfg: &RunConfig, kind: ControllerKind, art: &Artifacts) -> Result<Controller, HarnessError> {
    let c = cfg.controller_config(kind)?;
    let plant = cfg.platoon.to_config();
    Ok(match kind {
        ControllerKind::Rnddpc => Controller::robust(kind, art.model.encoder.clone(), art.sets.clone(), c, plant)?,
        ControllerKind::Zpc => Controller::robust(kind, art.identity.encoder.clone(), art.sets_identity.clone(), c, plant)?,
        ControllerKind::Kmpc => Controller::nominal(kind, art.model.clone(), c, plant)?,
        ControllerKind::Lmpc => Controller::nominal(kind, art.identity.clone(), c, plant)?,
        ControllerKind::AllHdv => Controller::all_hdv(c, plant)?,
    })
}

/// One closed-loop episode. A diverged simulation is returned as its
/// truncated log.
pub fn run_episode(cfg: &RunConfig, kind: ControllerKind, art: &Artifacts, episode: usize) -> Result<TrajectoryLog, HarnessError> {
    let scenario = cfg.scenario.profile(cfg.platoon.t_s)?;
    let mut ctrl = build_controller(cfg, kind, art)?;
    let seed = cfg.run_seed(episode);
    let mut log = match receding_horizon_run(&mut ctrl, &scenario, None, seed) {
        Ok(l) => l,
        Err(ControlError::Diverged { log, .. }) => *log,
        Err(e) => return Err(e.into()),
    };
    log.meta.config_hash = cfg.config_hash();
    log.meta.platoon_hash = cfg.platoon_hash();
    Ok(log)
}

/// Every requested controller × episode, spread over `cfg.workers` threads.
pub fn run_all(cfg: &RunConfig, art: &Artifacts) -> Result<Vec<TrajectoryLog>, HarnessError> {
    let jobs: Vec<(ControllerKind, usize)> = cfg
        .controllers
        .iter()
        .flat_map(|&k| (0..cfg.episodes).map(move |e| (k, e)))
        .collect();
    let workers = cfg.workers.min(jobs.len()).max(1);
    let mut out: Vec<Option<Result<TrajectoryLog, HarnessError>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = out.chunks_mut(jobs.len().div_ceil(workers)).collect();
        let mut start = 0;
        for chunk in chunks {
            let my = &jobs[start..start + chunk.len()];
            start += chunk.len();
            s.spawn(move || {
                for (slot, &(k, e)) in chunk.iter_mut().zip(my) {
                    *slot = Some(run_episode(cfg, k, art, e));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every job ran")).collect()
}

fn stamp(cfg: &RunConfig, seed: u64) -> Stamp {
    Stamp {
        config_hash: cfg.config_hash(),
        offline_hash: cfg.offline_hash(),
        platoon_hash: cfg.platoon_hash(),
        seed,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), HarnessError> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::Missing(path.to_path_buf()));
    }
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&s)?)
}

fn ensure_dir(p: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(p).map_err(io_err(p))
}

/// Disk-backed stages; each reads the previous stage's artifacts from `cfg.out_dir`.
pub struct Pipeline {
    pub cfg: RunConfig,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        Self { cfg }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    pub fn collect(&self) -> Result<DataLog, HarnessError> {
        ensure_dir(&self.cfg.out_dir)?;
        let st = self.path(paths::OFFLINE_STAMP);
        if st.exists() {
            fs::remove_file(&st).map_err(io_err(&st))?;
        }
        let log = collect_stage(&self.cfg)?;
        log.save(&self.path(paths::DATA))?;
        Ok(log)
    }

    pub fn load_data(&self) -> Result<DataLog, HarnessError> {
        let p = self.path(paths::DATA);
        if !p.exists() {
            return Err(HarnessError::Missing(p));
        }
        Ok(DataLog::load(&p)?)
    }

    pub fn train(&self) -> Result<TrainedModels, HarnessError> {
        let log = self.load_data()?;
        let tm = train_stage(&self.cfg, &log)?;
        let st = stamp(&self.cfg, self.cfg.train_seed());
        write_json(&self.path(paths::MODEL), &ModelFile { stamp: st.clone(), model: tm.model.to_json() })?;
        write_json(&self.path(paths::MODEL_IDENTITY), &ModelFile { stamp: st.clone(), model: tm.identity.to_json() })?;
        let (a, b) = tm.test_rmse(&log);
        write_json(
            &self.path(paths::TRAIN_REPORT),
            &TrainReportFile {
                stamp: st,
                report: tm.report.clone(),
                test_rmse: a,
                test_rmse_identity: b,
            },
        )?;
        Ok(tm)
    }

    fn load_model(&self, name: &str) -> Result<KoopmanModel, HarnessError> {
        let f: ModelFile = read_json(&self.path(name))?;
        Ok(KoopmanModel::from_json(&f.model)?)
    }

    pub fn learn_sets(&self) -> Result<[TightnessReport; 2], HarnessError> {
        let log = self.load_data()?;
        let mut out = Vec::new();
        for (m, s, t) in [
            (paths::MODEL, paths::SETS, paths::TIGHTNESS),
            (paths::MODEL_IDENTITY, paths::SETS_IDENTITY, paths::TIGHTNESS_IDENTITY),
        ] {
            let model = self.load_model(m)?;
            let (sm, tight) = learn_sets_stage(&self.cfg, &log, &model)?;
            sm.save(&self.path(s))?;
            let p = self.path(t);
            tight.write_csv(fs::File::create(&p).map_err(io_err(&p))?)?;
            out.push(tight);
        }
        write_json(&self.path(paths::OFFLINE_STAMP), &stamp(&self.cfg, self.cfg.seed))?;
        let [a, b]: [TightnessReport; 2] = out.try_into().map_err(|_| HarnessError::Config("two set models".into()))?;
        Ok([a, b])
    }

    /// Whether the offline artifacts on disk match the current settings.
    pub fn offline_current(&self) -> bool {
        read_json::<Stamp>(&self.path(paths::OFFLINE_STAMP)).is_ok_and(|s| s.offline_hash == self.cfg.offline_hash())
    }

    /// Run collect, train and learn-sets unless current artifacts exist.
    /// Returns whether the stages ran.
    pub fn ensure_offline(&self) -> Result<bool, HarnessError> {
        if self.offline_current() {
            return Ok(false);
        }
        self.collect()?;
        self.train()?;
        self.learn_sets()?;
        Ok(true)
    }

    pub fn load_artifacts(&self) -> Result<Artifacts, HarnessError> {
        let load_sets = |name: &str| {
            let p = self.path(name);
            if !p.exists() {
                return Err(HarnessError::Missing(p));
            }
            Ok(LearnedSetModel::load(&p)?)
        };
        Ok(Artifacts {
            model: self.load_model(paths::MODEL)?,
            identity: self.load_model(paths::MODEL_IDENTITY)?,
            sets: load_sets(paths::SETS)?,
            sets_identity: load_sets(paths::SETS_IDENTITY)?,
        })
    }

    /// Closed-loop runs; writes one log and one metrics file per run.
    pub fn run(&self) -> Result<Vec<(TrajectoryLog, Metrics)>, HarnessError> {
        let art = self.load_artifacts()?;
        let dir = self.path(paths::RUNS);
        ensure_dir(&dir)?;
        let logs = run_all(&self.cfg, &art)?;
        let mut out = Vec::with_capacity(logs.len());
        for (i, log) in logs.into_iter().enumerate() {
            let ep = i % self.cfg.episodes;
            let stem = format!("{}_{}_{}", log.meta.scenario, log.meta.controller, ep);
            log.save(&dir.join(format!("{stem}.csv")))?;
            let m = compute_metrics(&log)?;
            write_json(&dir.join(format!("{stem}.metrics.json")), &m)?;
            out.push((log, m));
        }
        Ok(out)
    }

    /// Aggregate every trajectory log under `runs/`.
    pub fn report(&self) -> Result<MetricsReport, HarnessError> {
        let dir = self.path(paths::RUNS);
        if !dir.is_dir() {
            return Err(HarnessError::Missing(dir));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        let logs = files.iter().map(|p| TrajectoryLog::load(p)).collect::<Result<Vec<_>, _>>()?;
        let rep = MetricsReport::from_logs(&logs)?;
        let md = self.path(paths::REPORT_MD);
        fs::write(&md, rep.to_markdown()).map_err(io_err(&md))?;
        let csv = self.path(paths::REPORT_CSV);
        rep.write_csv(fs::File::create(&csv).map_err(io_err(&csv))?)?;
        Ok(rep)
    }
}

/// Per-run performance and safety figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub controller: String,
    pub scenario: String,
    pub seed: u64,
    pub steps: usize,
    /// Mean absolute velocity tracking error over steps and vehicles.
    pub r_v: f64,
    /// Mean absolute spacing tracking error over steps and vehicles.
    pub r_s: f64,
    /// Mean stage cost.
    pub r_c: f64,
    /// Mean per-step solve time in ms.
    pub r_t: f64,
    pub r_v_vehicle: Vec<f64>,
    pub r_s_vehicle: Vec<f64>,
    pub feasible_fraction: f64,
    /// Share of feasible steps followed by a feasible step; `None` without
    /// any feasible step that has a successor.
    pub recursive_feasibility: Option<f64>,
    /// Optimized steps whose input or successor state left the constraint box.
    pub violations: usize,
    pub max_violation: f64,
}

/// Tracking errors against `r(k)`, stage cost with the logged weights,
/// feasibility ratios, and constraint checks of `u(k)` and `x(k+1)` against
/// the reference of step `k` for every step whose program was solved.
pub fn compute_metrics(log: &TrajectoryLog) -> Result<Metrics, HarnessError> {
    let k_n = log.len();
    if k_n == 0 {
        return Err(HarnessError::EmptyLog);
    }
    let n = log.meta.n.max(log.x[0].len() / 2);
    let q = DVector::from_vec(log.meta.state_weights.clone());
    let use_q = q.len() == 2 * n;
    let mut rv = vec![0.0; n];
    let mut rs = vec![0.0; n];
    let mut cost = 0.0;
    for k in 0..k_n {
        let e = &log.x[k] - &log.r[k];
        for i in 0..n {
            rs[i] += e[2 * i].abs();
            rv[i] += e[2 * i + 1].abs();
        }
        let qe: f64 = if use_q { e.component_mul(&e).dot(&q) } else { e.norm_squared() };
        cost += qe + log.meta.r_weight * log.u[k] * log.u[k];
    }
    let kf = k_n as f64;
    rv.iter_mut().chain(rs.iter_mut()).for_each(|v| *v /= kf);
    let feas = log.feasible.iter().filter(|f| **f).count();
    let (mut with_next, mut kept) = (0usize, 0usize);
    for k in 0..k_n.saturating_sub(1) {
        if log.feasible[k] {
            with_next += 1;
            kept += usize::from(log.feasible[k + 1]);
        }
    }
    let xt = log.meta.x_tilde_max;
    let mut violations = 0;
    let mut max_violation: f64 = 0.0;
    for k in 0..k_n {
        if log.status[k] != DecisionStatus::Optimal {
            continue;
        }
        let mut excess = log.u[k].abs() - log.meta.u_max;
        if k + 1 < k_n {
            let e = &log.x[k + 1] - &log.r[k];
            for (i, v) in e.iter().enumerate() {
                excess = excess.max(v.abs() - xt[i % 2]);
            }
        }
        if excess > CONSTRAINT_TOL {
            violations += 1;
            max_violation = max_violation.max(excess);
        }
    }
    Ok(Metrics {
        controller: log.meta.controller.clone(),
        scenario: log.meta.scenario.clone(),
        seed: log.meta.seed,
        steps: k_n,
        r_v: rv.iter().sum::<f64>() / n as f64,
        r_s: rs.iter().sum::<f64>() / n as f64,
        r_c: cost / kf,
        r_t: log.solve_ms.iter().sum::<f64>() / kf,
        r_v_vehicle: rv,
        r_s_vehicle: rs,
        feasible_fraction: feas as f64 / kf,
        recursive_feasibility: (with_next > 0).then(|| kept as f64 / with_next as f64),
        violations,
        max_violation,
    })
}

/// Mean figures of one controller on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub controller: String,
    pub scenario: String,
    pub runs: usize,
    pub r_v: f64,
    pub r_s: f64,
    pub r_c: f64,
    pub r_t: f64,
    pub r_v_vehicle: Vec<f64>,
    pub r_s_vehicle: Vec<f64>,
    pub feasible_fraction: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub platoon_hash: String,
    pub runs: Vec<Metrics>,
}

impl MetricsReport {
    /// Refuses logs whose platoon configurations differ.
    pub fn from_logs(logs: &[TrajectoryLog]) -> Result<Self, HarnessError> {
        let hash = logs.first().map(|l| l.meta.platoon_hash.clone()).unwrap_or_default();
        for l in logs {
            if l.meta.platoon_hash != hash {
                return Err(HarnessError::PlatoonMismatch(hash, l.meta.platoon_hash.clone()));
            }
        }
        Ok(Self {
            platoon_hash: hash,
            runs: logs.iter().map(compute_metrics).collect::<Result<_, _>>()?,
        })
    }

    /// One row per (controller, scenario), in order of first appearance.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for m in &self.runs {
            let k = (m.controller.clone(), m.scenario.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(c, s)| {
                let rs: Vec<&Metrics> = self.runs.iter().filter(|m| m.controller == c && m.scenario == s).collect();
                let cnt = rs.len() as f64;
                let mean = |f: &dyn Fn(&Metrics) -> f64| rs.iter().map(|m| f(m)).sum::<f64>() / cnt;
                let veh = |f: &dyn Fn(&Metrics) -> &Vec<f64>| {
                    let w = f(rs[0]).len();
                    (0..w).map(|i| rs.iter().map(|m| f(m).get(i).copied().unwrap_or(0.0)).sum::<f64>() / cnt).collect()
                };
                SummaryRow {
                    runs: rs.len(),
                    r_v: mean(&|m| m.r_v),
                    r_s: mean(&|m| m.r_s),
                    r_c: mean(&|m| m.r_c),
                    r_t: mean(&|m| m.r_t),
                    r_v_vehicle: veh(&|m| &m.r_v_vehicle),
                    r_s_vehicle: veh(&|m| &m.r_s_vehicle),
                    feasible_fraction: mean(&|m| m.feasible_fraction),
                    violations: rs.iter().map(|m| m.violations).sum(),
                    controller: c,
                    scenario: s,
                }
            })
            .collect()
    }

    pub fn row(&self, controller: &str, scenario: &str) -> Option<SummaryRow> {
        self.summary().into_iter().find(|r| r.controller == controller && r.scenario == scenario)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| controller | scenario | runs | R_v | R_s | R_c | R_t (ms) | feasible | violations |\n|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in self.summary() {
            s += &format!(
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.3} | {} |\n",
                r.controller, r.scenario, r.runs, r.r_v, r.r_s, r.r_c, r.r_t, r.feasible_fraction, r.violations
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut wr = csv::Writer::from_writer(w);
        let rows = self.summary();
        let nv = rows.iter().map(|r| r.r_v_vehicle.len()).max().unwrap_or(0);
        let mut header: Vec<String> = ["controller", "scenario", "runs", "r_v", "r_s", "r_c", "r_t", "feasible", "violations"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=nv).map(|i| format!("r_v_{i}")));
        header.extend((1..=nv).map(|i| format!("r_s_{i}")));
        wr.write_record(&header)?;
        for r in rows {
            let mut rec = vec![
                r.controller.clone(),
                r.scenario.clone(),
                r.runs.to_string(),
                r.r_v.to_string(),
                r.r_s.to_string(),
                r.r_c.to_string(),
                r.r_t.to_string(),
                r.feasible_fraction.to_string(),
                r.violations.to_string(),
            ];
            rec.extend((0..nv).map(|i| r.r_v_vehicle.get(i).map_or(String::new(), |v| v.to_string())));
            rec.extend((0..nv).map(|i| r.r_s_vehicle.get(i).map_or(String::new(), |v| v.to_string())));
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| HarnessError::Io {
            path: PathBuf::from("report.csv"),
            source: e,
        })?;
        Ok(())
    }

    /// True when a tube-based controller was infeasible on most steps.
    pub fn infeasibility_dominated(&self) -> bool {
        self.runs.iter().any(|m| run_infeasibility_dominated(m))
    }
}

pub fn run_infeasibility_dominated(m: &Metrics) -> bool {
    m.controller != ControllerKind::AllHdv.name() && m.feasible_fraction < FEASIBLE_MAJORITY
}

/// One check of the quick self-test suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast randomized self-checks of set calculus, gradients, controller
/// equivalence and metrics.
pub fn verify_suite(seed: u64) -> Vec<Check> {
    vec![
        check_zonotope_membership(seed),
        check_gradients(seed),
        check_degenerate_equivalence(seed),
        check_metrics(),
    ]
}

fn random_matrix(r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
    use rand::Rng;
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn check_zonotope_membership(seed: u64) -> Check {
    use rand::Rng;
    let mut rng = rng_from(substream_seed(seed, "verify-sets", 0));
    let mut bad = 0;
    let mut total = 0;
    for _ in 0..50 {
        let d = rng.random_range(1..=4);
        let g = rng.random_range(1..=6);
        let z = Zonotope::new(random_matrix(d, 1, &mut rng).column(0).into_owned(), random_matrix(d, g, &mut rng))
            .expect("shapes agree");
        let w = Zonotope::new(random_matrix(d, 1, &mut rng).column(0).into_owned(), random_matrix(d, g, &mut rng))
            .expect("shapes agree");
        let l = random_matrix(d, d, &mut rng);
        let sum = z.minkowski_sum(&w).expect("same dim");
        let mapped = z.linear_map(&l).expect("square map");
        let red = sum.reduce(1).expect("positive order");
        let hull = red.interval_hull();
        for _ in 0..20 {
            let b1 = random_matrix(g, 1, &mut rng).column(0).into_owned();
            let b2 = random_matrix(g, 1, &mut rng).column(0).into_owned();
            let p = z.sample(&b1).expect("len g") + w.sample(&b2).expect("len g");
            let q = &l * z.sample(&b1).expect("len g");
            total += 2;
            bad += usize::from(!hull.contains(&p, 1e-9));
            bad += usize::from(!mapped.interval_hull().contains(&q, 1e-9));
        }
    }
    Check {
        name: "zonotope sampled membership",
        passed: bad == 0,
        detail: format!("{bad} violations in {total} samples"),
    }
}

fn check_gradients(seed: u64) -> Check {
    use crate::lifting::{loss_and_grad, Batch, Encoder};
    let mut rng = rng_from(substream_seed(seed, "verify-grad", 0));
    let (n, nz, t) = (6, 12, 16);
    let enc = Encoder::he_uniform(n, &[8, nz - n], &mut rng);
    let lin = crate::lifting::LinearPart {
        a: random_matrix(nz, nz, &mut rng) * 0.3,
        b: random_matrix(nz, 1, &mut rng).column(0).into_owned(),
        h: random_matrix(nz, 1, &mut rng).column(0).into_owned(),
        j: random_matrix(nz, 1, &mut rng).column(0).into_owned(),
        c: random_matrix(n, nz, &mut rng),
    };
    let mut m = KoopmanModel::with_linear(enc, lin);
    let batch = Batch {
        x0: random_matrix(n, t, &mut rng),
        x1: random_matrix(n, t, &mut rng),
        u: random_matrix(1, t, &mut rng),
        e: random_matrix(1, t, &mut rng),
        f: random_matrix(1, t, &mut rng),
    };
    let alpha = [1.0, 10.0, 3.0, 1e-2];
    let g = loss_and_grad(&m, &batch, &alpha, true).1.expect("requested").flatten();
    let base = m.flatten();
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for i in (0..base.len()).step_by((base.len() / 60).max(1)) {
        let mut p = base.clone();
        p[i] += h;
        m.unflatten(&p);
        let lp = loss_and_grad(&m, &batch, &alpha, false).0.total();
        p[i] -= 2.0 * h;
        m.unflatten(&p);
        let lm = loss_and_grad(&m, &batch, &alpha, false).0.total();
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3));
    }
    Check {
        name: "loss gradient vs central differences",
        passed: worst <= 1e-4,
        detail: format!("worst relative error {worst:.2e}"),
    }
}

fn check_degenerate_equivalence(seed: u64) -> Check {
    use crate::control::{build_kmpc_qp, build_rnddpc_qp};
    use crate::lifting::Encoder;
    use crate::qp::solve_qp;
    use crate::reach::stacked_abhj;
    let mut rng = rng_from(substream_seed(seed, "verify-equiv", 0));
    let plant = PlatoonConfig::new(3);
    let n = plant.state_dim();
    let eps = 20.0;
    let r = crate::platoon::desired_state(eps, &plant).expect("valid platoon");
    let a = DMatrix::identity(n, n) + random_matrix(n, n, &mut rng) * 0.02;
    let lin = crate::lifting::LinearPart {
        b: random_matrix(n, 1, &mut rng).column(0).into_owned() * 0.05,
        h: (&r - &a * &r) / eps,
        j: DVector::zeros(n),
        c: DMatrix::identity(n, n),
        a,
    };
    let model = KoopmanModel::with_linear(Encoder::identity(n), lin.clone());
    let sm = LearnedSetModel::point(stacked_abhj(&lin), DMatrix::identity(n, n));
    let mut cfg = ControllerConfig::for_kind(ControllerKind::Rnddpc);
    cfg.reach.eps_max = 0.0;
    cfg.reach.theta_max = 0.0;
    cfg.tol_feas = 1e-9;
    cfg.tol_opt = 1e-9;
    cfg.max_iter = 50_000;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..10 {
        let x = &r + random_matrix(n, 1, &mut rng).column(0) * 2.0;
        let un = DVector::zeros(cfg.horizon);
        let res = (|| -> Result<f64, ControlError> {
            let (pk, _) = build_kmpc_qp(&model, &x, eps, &r, &cfg)?;
            let (pr, _, _) = build_rnddpc_qp(&sm, &model.encoder, &x, eps, &r, &un, &cfg)?;
            let sk = solve_qp(&pk, &cfg.qp_settings())?;
            let sr = solve_qp(&pr, &cfg.qp_settings())?;
            Ok((sk.y[0] - sr.y[0]).abs())
        })();
        match res {
            Ok(d) => worst = worst.max(d),
            Err(_) => failures += 1,
        }
    }
    Check {
        name: "degenerate robust program equals nominal",
        passed: failures == 0 && worst <= 1e-5,
        detail: format!("max first-input gap {worst:.2e}, {failures} solver failures"),
    }
}

fn check_metrics() -> Check {
    let mut log = TrajectoryLog::empty(crate::control::TrajectoryMeta {
        n: 2,
        state_weights: vec![1.0; 4],
        r_weight: 0.5,
        x_tilde_max: [7.0, 7.0],
        u_max: 5.0,
        ..Default::default()
    });
    for k in 0..4 {
        log.u.push(2.0);
        log.eps.push(20.0);
        log.theta.push(0.0);
        log.feasible.push(true);
        log.status.push(DecisionStatus::Optimal);
        log.solve_ms.push(k as f64);
        log.r.push(DVector::from_vec(vec![20.0, 20.0, 20.0, 20.0]));
        log.x.push(DVector::from_vec(vec![21.0, 19.0, 18.0, 21.0]));
    }
    match compute_metrics(&log) {
        Ok(m) => {
            let ok = (m.r_v - 1.0).abs() < 1e-12
                && (m.r_s - 1.5).abs() < 1e-12
                && (m.r_c - 9.0).abs() < 1e-12
                && (m.r_t - 1.5).abs() < 1e-12
                && m.violations == 0;
            Check {
                name: "metrics on a synthetic log",
                passed: ok,
                detail: format!("R_v {} R_s {} R_c {} R_t {}", m.r_v, m.r_s, m.r_c, m.r_t),
            }
        }
        Err(e) => Check {
            name: "metrics on a synthetic log",
            passed: false,
            detail: e.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_log(x: Vec<Vec<f64>>, r: Vec<f64>, u: Vec<f64>, feasible: Vec<bool>) -> TrajectoryLog {
        let n = r.len() / 2;
        let mut log = TrajectoryLog::empty(crate::control::TrajectoryMeta {
            n,
            state_weights: vec![1.0; 2 * n],
            r_weight: 0.1,
            x_tilde_max: [7.0, 7.0],
            u_max: 5.0,
            ..Default::default()
        });
        for (k, xk) in x.into_iter().enumerate() {
            log.x.push(DVector::from_vec(xk));
            log.r.push(DVector::from_vec(r.clone()));
            log.u.push(u[k]);
            log.eps.push(r[1]);
            log.theta.push(0.0);
            log.feasible.push(feasible[k]);
            log.status.push(if feasible[k] {
                DecisionStatus::Optimal
            } else {
                DecisionStatus::Infeasible
            });
            log.solve_ms.push(1.0);
        }
        log
    }

    #[test]
    fn perfect_tracking_has_zero_errors() {
        let r = vec![24.0, 20.0, 24.0, 20.0];
        let log = synthetic_log(vec![r.clone(); 5], r, vec![0.0; 5], vec![true; 5]);
        let m = compute_metrics(&log).unwrap();
        assert_eq!((m.r_v, m.r_s, m.r_c), (0.0, 0.0, 0.0));
        assert_eq!(m.recursive_feasibility, Some(1.0));
    }

    #[test]
    fn constant_velocity_error_gives_unit_rv() {
        let r = vec![24.0, 20.0, 24.0, 20.0];
        let x = vec![24.0, 21.0, 24.0, 19.0];
        let log = synthetic_log(vec![x; 3], r, vec![1.0; 3], vec![true; 3]);
        let m = compute_metrics(&log).unwrap();
        assert_eq!(m.r_v, 1.0);
        assert_eq!(m.r_s, 0.0);
        assert_eq!(m.r_v_vehicle, vec![1.0, 1.0]);
        // 2 unit errors + 0.1·1²
        assert!((m.r_c - 2.1).abs() < 1e-12);
        assert_eq!(m.r_t, 1.0);
    }

    #[test]
    fn hand_computed_mixed_errors() {
        let r = vec![10.0, 5.0];
        let xs = vec![vec![12.0, 5.5], vec![9.0, 4.0], vec![10.0, 5.0], vec![10.5, 7.0]];
        let log = synthetic_log(xs, r, vec![1.0, -2.0, 0.0, 3.0], vec![true, false, true, true]);
        let m = compute_metrics(&log).unwrap();
        assert!((m.r_s - (2.0 + 1.0 + 0.0 + 0.5) / 4.0).abs() < 1e-12);
        assert!((m.r_v - (0.5 + 1.0 + 0.0 + 2.0) / 4.0).abs() < 1e-12);
        let cost = (4.0 + 0.25 + 0.1) + (1.0 + 1.0 + 0.4) + 0.0 + (0.25 + 4.0 + 0.9);
        assert!((m.r_c - cost / 4.0).abs() < 1e-12);
        assert_eq!(m.feasible_fraction, 0.75);
        // feasible k=0 → k=1 infeasible; k=2 → k=3 feasible
        assert_eq!(m.recursive_feasibility, Some(0.5));
    }

    #[test]
    fn violations_only_count_feasible_steps() {
        let r = vec![10.0, 5.0];
        let xs = vec![vec![10.0, 5.0], vec![18.0, 5.0], vec![10.0, 5.0], vec![10.0, 5.0]];
        let log = synthetic_log(xs.clone(), r.clone(), vec![0.0, 0.0, 6.0, 0.0], vec![true, true, false, true]);
        let m = compute_metrics(&log).unwrap();
        // x(1) leaves the box after feasible k=0; u(2) is out of range but k=2 is infeasible
        assert_eq!(m.violations, 1);
        assert!((m.max_violation - 1.0).abs() < 1e-12);
        let log = synthetic_log(xs, r, vec![0.0; 4], vec![false, true, true, true]);
        assert_eq!(compute_metrics(&log).unwrap().violations, 0);
    }

    #[test]
    fn empty_log_is_rejected() {
        let log = TrajectoryLog::empty(Default::default());
        assert!(matches!(compute_metrics(&log), Err(HarnessError::EmptyLog)));
    }

    #[test]
    fn report_refuses_mixed_platoons() {
        let r = vec![10.0, 5.0];
        let mut a = synthetic_log(vec![r.clone()], r.clone(), vec![0.0], vec![true]);
        let mut b = a.clone();
        a.meta.platoon_hash = "aa".into();
        b.meta.platoon_hash = "bb".into();
        assert!(matches!(MetricsReport::from_logs(&[a.clone(), b]), Err(HarnessError::PlatoonMismatch(..))));
        let mut c = a.clone();
        c.meta.controller = "kmpc".into();
        a.meta.controller = "rnddpc".into();
        let rep = MetricsReport::from_logs(&[a, c]).unwrap();
        let md = rep.to_markdown();
        assert_eq!(md.lines().count(), 4);
        assert!(md.contains("| rnddpc |") && md.contains("| kmpc |"));
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        let a = substream_seed(7, "collect", 0);
        assert_eq!(a, substream_seed(7, "collect", 0));
        assert_ne!(a, substream_seed(7, "train", 0));
        assert_ne!(a, substream_seed(8, "collect", 0));
        assert_ne!(substream_seed(7, "run", 0), substream_seed(7, "run", 1));
    }

    #[test]
    fn dotted_keys_and_overrides_resolve() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 3
            platoon.n = 4
            collect.steps = 500
            train.epochs = 2
            sets.bound = { kind = "coverage", target = 0.99 }
            controllers = ["rnddpc", "all_hdv"]
            control.base.u_max = 4.0
            control.overrides.rnddpc.horizon = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.platoon.n, 4);
        assert_eq!(cfg.collect.steps, 500);
        assert_eq!(cfg.sets.bound, BoundRule::Coverage { target: 0.99 });
        let r = cfg.controller_config(ControllerKind::Rnddpc).unwrap();
        assert_eq!((r.horizon, r.u_max), (3, 4.0));
        let k = cfg.controller_config(ControllerKind::Kmpc).unwrap();
        assert_eq!((k.horizon, k.u_max), (10, 4.0));
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for s in [
            "no_such_key = 1",
            "platoon.n = 0",
            "controllers = []",
            "control.overrides.foo.horizon = 2",
            "control.base.horizon = 0",
            "control.base.bogus = 1",
            "collect.bogus = 1",
            "scenario.kind = \"cycle\"",
            "scenario.kind = \"cycle\"\nscenario.cycle_path = \"/definitely/missing.csv\"",
        ] {
            let e = RunConfig::from_toml_str(s).unwrap_err();
            assert!(e.is_config(), "{s}: {e}");
        }
    }

    #[test]
    fn config_hash_ignores_output_directory() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.platoon_hash(), b.platoon_hash());
    }

    #[test]
    fn scenario_labels_follow_attack() {
        let mut s = ScenarioSection::default();
        assert_eq!(s.label(), "emergency");
        s.attack = AttackMode::Delay { max_tau: 6 };
        assert_eq!(s.label(), "emergency_delay");
        assert_eq!(s.profile(0.05).unwrap().name, "emergency_delay");
    }

    #[test]
    fn verify_suite_passes() {
        for c in verify_suite(0) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
