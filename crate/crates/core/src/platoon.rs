//! Mixed platoon simulator: one CAV followed by `n-1` OVM-driven HDVs behind
//! a head vehicle whose velocity is an exogenous input.
//!
//! State layout is `[s_1, v_1, …, s_n, v_n]` with the CAV first.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlatoonError {
    #[error("reference velocity {0} outside (0, {1})")]
    Reference(f64, f64),
    #[error("non-finite state at step {0}")]
    NonFinite(usize),
    #[error("cycle file row {row}: {msg}")]
    Cycle { row: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OvmParams {
    pub k1: f64,
    pub k2: f64,
    pub v_max: f64,
    pub s_max: f64,
    pub s_min: f64,
}

impl Default for OvmParams {
    fn default() -> Self {
        Self {
            k1: 0.6,
            k2: 0.9,
            v_max: 38.0,
            s_max: 35.0,
            s_min: 5.0,
        }
    }
}

pub fn ovm_desired_velocity(s: f64, p: &OvmParams) -> f64 {
    if s <= p.s_min {
        0.0
    } else if s >= p.s_max {
        p.v_max
    } else {
        0.5 * p.v_max * (1.0 - (PI * (s - p.s_min) / (p.s_max - p.s_min)).cos())
    }
}

pub fn ovm_accel(s: f64, v: f64, v_prev: f64, p: &OvmParams) -> f64 {
    p.k1 * (ovm_desired_velocity(s, p) - v) + p.k2 * (v_prev - v)
}

/// Amplitude bounds of head-velocity deviation, attack and noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalBounds {
    pub eps_max: f64,
    pub theta_max: f64,
    pub omega_max: f64,
}

impl Default for SignalBounds {
    fn default() -> Self {
        Self {
            eps_max: 2.0,
            theta_max: 3.0,
            omega_max: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonConfig {
    pub n: usize,
    pub t_s: f64,
    /// Car-following parameters for vehicles 2..n.
    pub hdv: Vec<OvmParams>,
    /// OVM law used by the CAV during data collection and as backup input.
    pub cav_ovm: OvmParams,
    pub bounds: SignalBounds,
    pub t_h: f64,
}

impl PlatoonConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            t_s: 0.05,
            hdv: vec![OvmParams::default(); n.saturating_sub(1)],
            cav_ovm: OvmParams::default(),
            bounds: SignalBounds::default(),
            t_h: 1.2,
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    pub fn validate(&self) -> Result<(), PlatoonError> {
        if self.n < 2 {
            return Err(PlatoonError::Config(format!("platoon needs n >= 2, got {}", self.n)));
        }
        if self.hdv.len() != self.n - 1 {
            return Err(PlatoonError::Config(format!(
                "{} HDV parameter sets for {} HDVs",
                self.hdv.len(),
                self.n - 1
            )));
        }
        if !(self.t_s > 0.0) {
            return Err(PlatoonError::Config("sampling time must be positive".into()));
        }
        let b = &self.bounds;
        if b.eps_max < 0.0 || b.theta_max < 0.0 || b.omega_max < 0.0 {
            return Err(PlatoonError::Config("signal bounds must be nonnegative".into()));
        }
        for p in self.hdv.iter().chain(std::iter::once(&self.cav_ovm)) {
            if !(p.s_min < p.s_max) || !(p.v_max > 0.0) || p.k1 < 0.0 || p.k2 < 0.0 {
                return Err(PlatoonError::Config("invalid OVM parameters".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonState {
    pub x: DVector<f64>,
    /// Head-vehicle velocity applied on the most recent step.
    pub v0: f64,
}

impl PlatoonState {
    pub fn spacing(&self, i: usize) -> f64 {
        self.x[2 * i]
    }

    pub fn velocity(&self, i: usize) -> f64 {
        self.x[2 * i + 1]
    }
}

/// One sampling period of the true nonlinear dynamics.
pub fn step_platoon(
    cfg: &PlatoonConfig,
    state: &PlatoonState,
    u_cav: f64,
    eps: f64,
    attack: f64,
    noise: &DVector<f64>,
) -> PlatoonState {
    let x = &state.x;
    let ts = cfg.t_s;
    let mut next = x.clone();
    for i in 0..cfg.n {
        let (s, v) = (x[2 * i], x[2 * i + 1]);
        let v_prev = if i == 0 { eps } else { x[2 * i - 1] };
        let accel = if i == 0 {
            u_cav + attack
        } else {
            ovm_accel(s, v, v_prev, &cfg.hdv[i - 1])
        };
        next[2 * i] = s + ts * (v_prev - v);
        next[2 * i + 1] = v + ts * accel;
    }
    next += noise;
    for i in 0..cfg.n {
        next[2 * i + 1] = next[2 * i + 1].max(0.0);
    }
    PlatoonState { x: next, v0: eps }
}

/// Equilibrium reference for head velocity `v_star`.
pub fn desired_state(v_star: f64, cfg: &PlatoonConfig) -> Result<DVector<f64>, PlatoonError> {
    let vmax = cfg.hdv.first().map_or(cfg.cav_ovm.v_max, |p| p.v_max);
    if !(v_star > 0.0 && v_star < vmax) || cfg.hdv.iter().any(|p| v_star >= p.v_max) {
        return Err(PlatoonError::Reference(v_star, vmax));
    }
    let mut r = DVector::zeros(cfg.state_dim());
    r[0] = cfg.t_h * v_star + cfg.cav_ovm.s_min;
    r[1] = v_star;
    for (j, p) in cfg.hdv.iter().enumerate() {
        let i = j + 1;
        r[2 * i] = p.s_min + (p.s_max - p.s_min) / PI * (1.0 - 2.0 * v_star / p.v_max).acos();
        r[2 * i + 1] = v_star;
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackMode {
    None,
    Random { theta_max: f64 },
    Delay { max_tau: usize },
}

/// Attack source for one episode; delay mode fixes its lag at construction.
#[derive(Debug, Clone)]
pub struct AttackGenerator {
    mode: AttackMode,
    tau: usize,
}

impl AttackGenerator {
    pub fn new(mode: AttackMode, rng: &mut ChaCha8Rng) -> Self {
        let tau = match mode {
            AttackMode::Delay { max_tau } => rng.random_range(1..=max_tau.max(1)),
            _ => 0,
        };
        Self { mode, tau }
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// `u_history` ends with the input applied at the current step.
    pub fn next(&self, u_history: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        attack_signal(self.mode, self.tau, u_history, rng)
    }
}

/// Attack value for the current step. Delay mode returns `u(k-τ) - u(k)` and
/// zero while fewer than `τ` past inputs exist.
pub fn attack_signal(mode: AttackMode, tau: usize, u_history: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    match mode {
        AttackMode::None => 0.0,
        AttackMode::Random { theta_max } => {
            if theta_max > 0.0 {
                rng.random_range(-theta_max..=theta_max)
            } else {
                0.0
            }
        }
        AttackMode::Delay { .. } => {
            let k = u_history.len();
            if k == 0 || k <= tau {
                0.0
            } else {
                u_history[k - 1 - tau] - u_history[k - 1]
            }
        }
    }
}

pub fn uniform_noise(dim: usize, amp: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    if amp > 0.0 {
        DVector::from_fn(dim, |_, _| rng.random_range(-amp..=amp))
    } else {
        DVector::zeros(dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub steps: usize,
    pub v_star: f64,
    pub eps_range: (f64, f64),
    pub attack_max: f64,
    pub noise_max: f64,
    /// Starting state; `None` starts from the reference for `v_star`.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    /// Half-width of a uniform dither added to the pre-controller input.
    #[serde(default)]
    pub input_dither: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            v_star: 19.0,
            eps_range: (17.0, 21.0),
            attack_max: 2.0,
            noise_max: 0.03,
            initial_state: None,
            input_dither: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub n: usize,
    pub t_s: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Recorded excitation run: inputs and states for columns `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataLog {
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
    pub theta: Vec<f64>,
    pub x: DMatrix<f64>,
    pub meta: LogMeta,
}

impl DataLog {
    /// Number of transitions `T`.
    pub fn transitions(&self) -> usize {
        self.u.len().saturating_sub(1)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PlatoonError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["u".to_string(), "eps".into(), "theta".into()];
        header.extend((1..=self.x.nrows()).map(|i| format!("x_{i}")));
        wr.write_record(&header)?;
        for k in 0..self.u.len() {
            let mut row = vec![self.u[k].to_string(), self.eps[k].to_string(), self.theta[k].to_string()];
            row.extend(self.x.column(k).iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, meta: LogMeta) -> Result<Self, PlatoonError> {
        let mut rd = csv::Reader::from_reader(r);
        let width = rd.headers()?.len();
        if width < 5 {
            return Err(PlatoonError::Log("expected columns u,eps,theta,x_1..".into()));
        }
        let (mut u, mut eps, mut theta, mut cols) = (vec![], vec![], vec![], vec![]);
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| PlatoonError::Log(e.to_string()))?;
            u.push(vals[0]);
            eps.push(vals[1]);
            theta.push(vals[2]);
            cols.push(DVector::from_vec(vals[3..].to_vec()));
        }
        if cols.is_empty() {
            return Err(PlatoonError::Log("empty log".into()));
        }
        Ok(Self {
            u,
            eps,
            theta,
            x: DMatrix::from_columns(&cols),
            meta,
        })
    }

    pub fn save(&self, csv_path: &Path) -> Result<(), PlatoonError> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        let sidecar = csv_path.with_extension("json");
        std::fs::write(sidecar, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self, PlatoonError> {
        let meta: LogMeta = serde_json::from_str(&std::fs::read_to_string(csv_path.with_extension("json"))?)?;
        Self::read_csv(std::fs::File::open(csv_path)?, meta)
    }
}

/// Closed-loop excitation run with the OVM as CAV pre-controller and uniform
/// head-velocity, attack and noise signals.
pub fn collect_data(
    cfg: &PlatoonConfig,
    cc: &CollectConfig,
    rng: &mut ChaCha8Rng,
    meta: LogMeta,
) -> Result<DataLog, PlatoonError> {
    cfg.validate()?;
    let t = cc.steps.max(1);
    let x0 = match &cc.initial_state {
        Some(v) if v.len() == cfg.state_dim() => DVector::from_vec(v.clone()),
        Some(v) => {
            return Err(PlatoonError::Config(format!(
                "initial state has {} entries, expected {}",
                v.len(),
                cfg.state_dim()
            )))
        }
        None => desired_state(cc.v_star, cfg)?,
    };
    let mut state = PlatoonState { x: x0, v0: cc.v_star };
    let mut u = Vec::with_capacity(t + 1);
    let mut eps = Vec::with_capacity(t + 1);
    let mut theta = Vec::with_capacity(t + 1);
    let mut cols = Vec::with_capacity(t + 1);
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    for k in 0..=t {
        let e = draw(rng, cc.eps_range.0, cc.eps_range.1);
        let th = draw(rng, -cc.attack_max, cc.attack_max);
        let mut uk = ovm_accel(state.spacing(0), state.velocity(0), e, &cfg.cav_ovm);
        if cc.input_dither > 0.0 {
            uk += rng.random_range(-cc.input_dither..=cc.input_dither);
        }
        u.push(uk);
        eps.push(e);
        theta.push(th);
        cols.push(state.x.clone());
        if k == t {
            break;
        }
        let w = uniform_noise(cfg.state_dim(), cc.noise_max, rng);
        state = step_platoon(cfg, &state, uk, e, th, &w);
        if !state.x.iter().all(|v| v.is_finite()) {
            return Err(PlatoonError::NonFinite(k + 1));
        }
    }
    Ok(DataLog {
        u,
        eps,
        theta,
        x: DMatrix::from_columns(&cols),
        meta,
    })
}

/// Shifted data matrices; every block has `T` columns.
#[derive(Debug, Clone)]
pub struct Sequences {
    pub u_minus: DMatrix<f64>,
    pub e_minus: DMatrix<f64>,
    pub f_minus: DMatrix<f64>,
    pub x_minus: DMatrix<f64>,
    pub x_plus: DMatrix<f64>,
    pub z_minus: DMatrix<f64>,
    pub z_plus: DMatrix<f64>,
}

impl Sequences {
    pub fn len(&self) -> usize {
        self.x_minus.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[Z_-; U_-; E_-; F_-]`.
    pub fn regressor(&self) -> DMatrix<f64> {
        let nz = self.z_minus.nrows();
        let t = self.len();
        let mut r = DMatrix::zeros(nz + 3, t);
        r.rows_mut(0, nz).copy_from(&self.z_minus);
        r.rows_mut(nz, 1).copy_from(&self.u_minus);
        r.rows_mut(nz + 1, 1).copy_from(&self.e_minus);
        r.rows_mut(nz + 2, 1).copy_from(&self.f_minus);
        r
    }

    /// Keep columns with the given indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| m.select_columns(idx.iter());
        Self {
            u_minus: pick(&self.u_minus),
            e_minus: pick(&self.e_minus),
            f_minus: pick(&self.f_minus),
            x_minus: pick(&self.x_minus),
            x_plus: pick(&self.x_plus),
            z_minus: pick(&self.z_minus),
            z_plus: pick(&self.z_plus),
        }
    }
}

pub fn build_sequences(log: &DataLog, lift: impl Fn(&DVector<f64>) -> DVector<f64>) -> Sequences {
    let t = log.transitions();
    let row = |v: &[f64]| DMatrix::from_row_slice(1, t, &v[..t]);
    let x_minus = log.x.columns(0, t).into_owned();
    let x_plus = log.x.columns(1, t).into_owned();
    let z_all: Vec<DVector<f64>> = log.x.column_iter().map(|c| lift(&c.into_owned())).collect();
    let z_minus = DMatrix::from_columns(&z_all[..t]);
    let z_plus = DMatrix::from_columns(&z_all[1..]);
    Sequences {
        u_minus: row(&log.u),
        e_minus: row(&log.eps),
        f_minus: row(&log.theta),
        x_minus,
        x_plus,
        z_minus,
        z_plus,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioProfile {
    pub name: String,
    pub t_s: f64,
    /// Head-vehicle velocity per step.
    pub v0: Vec<f64>,
    pub attack: AttackMode,
}

impl ScenarioProfile {
    pub fn steps(&self) -> usize {
        self.v0.len()
    }

    pub fn duration(&self) -> f64 {
        self.v0.len() as f64 * self.t_s
    }
}

/// Time (s) at which the head vehicle starts braking in the emergency profile.
pub const EMERGENCY_BRAKE_ONSET: f64 = 5.0;

/// Cruise at 20 m/s, brake at −5 m/s² to 5 m/s, hold 5 s, accelerate at
/// 5 m/s² back to 20 m/s; 30 s in total.
pub fn emergency_profile(t_s: f64, attack: AttackMode) -> ScenarioProfile {
    let steps = (30.0 / t_s).ceil() as usize;
    let (t0, t1, t2, t3) = (
        EMERGENCY_BRAKE_ONSET,
        EMERGENCY_BRAKE_ONSET + 3.0,
        EMERGENCY_BRAKE_ONSET + 8.0,
        EMERGENCY_BRAKE_ONSET + 11.0,
    );
    let v0 = (0..steps)
        .map(|k| {
            let t = k as f64 * t_s;
            if t < t0 {
                20.0
            } else if t < t1 {
                20.0 - 5.0 * (t - t0)
            } else if t < t2 {
                5.0
            } else if t < t3 {
                5.0 + 5.0 * (t - t2)
            } else {
                20.0
            }
        })
        .collect();
    ScenarioProfile {
        name: "emergency".into(),
        t_s,
        v0,
        attack,
    }
}

/// Driving cycle from a `t,v` CSV, linearly resampled onto the `t_s` grid.
pub fn load_cycle_csv<R: Read>(r: R, t_s: f64, attack: AttackMode) -> Result<ScenarioProfile, PlatoonError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
    let mut rows = rd.records();
    let header = match rows.next() {
        None => return Err(PlatoonError::Cycle { row: 0, msg: "empty file".into() }),
        Some(h) => h?,
    };
    if header.len() != 2 || &header[0] != "t" || &header[1] != "v" {
        return Err(PlatoonError::Cycle {
            row: 1,
            msg: "expected header `t,v` (time in s, velocity in m/s)".into(),
        });
    }
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (i, rec) in rows.enumerate() {
        let row = i + 2;
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| PlatoonError::Cycle { row, msg: format!("not a number: {s:?}") })
        };
        if rec.len() != 2 {
            return Err(PlatoonError::Cycle { row, msg: "expected two fields".into() });
        }
        let (t, v) = (parse(&rec[0])?, parse(&rec[1])?);
        if !t.is_finite() || !v.is_finite() {
            return Err(PlatoonError::Cycle { row, msg: "non-finite value".into() });
        }
        if v < 0.0 {
            return Err(PlatoonError::Cycle { row, msg: format!("negative velocity {v}") });
        }
        if let Some(&(tp, _)) = pts.last() {
            if t <= tp {
                return Err(PlatoonError::Cycle { row, msg: format!("time {t} not after {tp}") });
            }
        }
        pts.push((t, v));
    }
    if pts.is_empty() {
        return Err(PlatoonError::Cycle { row: 1, msg: "no data rows".into() });
    }
    let (t_first, t_last) = (pts[0].0, pts[pts.len() - 1].0);
    let count = ((t_last - t_first) / t_s + 1e-9).floor() as usize + 1;
    let mut seg = 0;
    let v0 = (0..count)
        .map(|k| {
            let t = t_first + k as f64 * t_s;
            while seg + 1 < pts.len() - 1 && pts[seg + 1].0 <= t {
                seg += 1;
            }
            if pts.len() == 1 {
                return pts[0].1;
            }
            let ((ta, va), (tb, vb)) = (pts[seg], pts[seg + 1]);
            let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            va + w * (vb - va)
        })
        .collect();
    Ok(ScenarioProfile {
        name: "cycle".into(),
        t_s,
        v0,
        attack,
    })
}
