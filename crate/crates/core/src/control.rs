//! Receding-horizon controllers for the mixed platoon: the robust tube
//! controller over a learned set model (lifted or identity lifted), nominal
//! lifted-linear MPC (lifted or identity lifted), and the all-human reference
//! policy.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifting::{rng_from, Encoder, KoopmanModel};
use crate::platoon::{
    desired_state, ovm_accel, step_platoon, uniform_noise, AttackGenerator, PlatoonConfig, PlatoonError,
    PlatoonState, ScenarioProfile,
};
use crate::qp::{solve_qp_from, QpError, QpProblem, QpSettings, QpStatus};
use crate::reach::{LearnedSetModel, ReachError, ReachParams, SymbolicReachTube, TubeBuilder};
use crate::setcalc::IntervalBox;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Platoon(#[from] PlatoonError),
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("simulator diverged at step {step}")]
    Diverged { step: usize, log: Box<TrajectoryLog> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Rnddpc,
    Kmpc,
    Lmpc,
    Zpc,
    AllHdv,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [Self::Rnddpc, Self::Kmpc, Self::Lmpc, Self::Zpc, Self::AllHdv];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rnddpc => "rnddpc",
            Self::Kmpc => "kmpc",
            Self::Lmpc => "lmpc",
            Self::Zpc => "zpc",
            Self::AllHdv => "all_hdv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s || (s == "all-hdv" && *k == Self::AllHdv))
    }

    /// Uses a learned set model and a reachable tube.
    pub fn is_robust(self) -> bool {
        matches!(self, Self::Rnddpc | Self::Zpc)
    }

    /// Runs on an identity-lifted model.
    pub fn is_linear(self) -> bool {
        matches!(self, Self::Lmpc | Self::Zpc)
    }
}

/// Input applied when the controller has no feasible solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupRule {
    /// CAV OVM acceleration clamped to the input bound.
    Ovm,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub rho_s: f64,
    pub rho_v: f64,
    /// Per-vehicle decay of the state weights along the platoon.
    pub xi: f64,
    pub r_weight: f64,
    /// Spacing and velocity deviation bounds `[s, v]`.
    pub x_tilde_max: [f64; 2],
    pub u_max: f64,
    pub backup: BackupRule,
    pub reach: ReachParams,
    /// Quadratic weight on the input-deviation slacks of the robust program.
    pub slack_weight: f64,
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            rho_s: 1.0,
            rho_v: 1.0,
            xi: 0.6,
            r_weight: 0.1,
            x_tilde_max: [7.0, 7.0],
            u_max: 5.0,
            backup: BackupRule::Ovm,
            reach: ReachParams::default(),
            slack_weight: 1e-8,
            tol_feas: 1e-6,
            tol_opt: 1e-6,
            max_iter: 10_000,
        }
    }
}

impl ControllerConfig {
    /// Defaults with the horizon used for `kind` (5 for tube controllers,
    /// 10 for nominal MPC).
    pub fn for_kind(kind: ControllerKind) -> Self {
        Self {
            horizon: if kind.is_robust() { 5 } else { 10 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.horizon == 0 {
            return Err(ControlError::Config("horizon must be at least 1".into()));
        }
        if self.rho_s < 0.0 || self.rho_v < 0.0 || self.r_weight < 0.0 || self.slack_weight < 0.0 {
            return Err(ControlError::Config("weights must be nonnegative".into()));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(ControlError::Config(format!("decay {} not in (0, 1]", self.xi)));
        }
        if !(self.x_tilde_max.iter().all(|v| *v > 0.0) && self.u_max > 0.0) {
            return Err(ControlError::Config("constraint bounds must be positive".into()));
        }
        if self.reach.eps_max < 0.0 || self.reach.theta_max < 0.0 {
            return Err(ControlError::Config("signal bounds must be nonnegative".into()));
        }
        Ok(())
    }

    /// Diagonal of `Q`: `ξ^(i-1)·diag(ρ_s, ρ_v)` for vehicle `i`.
    pub fn state_weights(&self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |i, _| {
            let w = if i % 2 == 0 { self.rho_s } else { self.rho_v };
            w * self.xi.powi((i / 2) as i32)
        })
    }

    /// Per-component deviation bound.
    pub fn state_radius(&self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |i, _| self.x_tilde_max[i % 2])
    }

    pub fn qp_settings(&self) -> QpSettings {
        QpSettings {
            tol_feas: self.tol_feas,
            tol_opt: self.tol_opt,
            max_iter: self.max_iter,
            ..QpSettings::default()
        }
    }

    /// `‖x − r‖²_Q + R·u²`.
    pub fn stage_cost(&self, x: &DVector<f64>, r: &DVector<f64>, u: f64) -> f64 {
        let q = self.state_weights(x.len());
        let e = x - r;
        e.component_mul(&e).dot(&q) + self.r_weight * u * u
    }
}

/// Variable and row bookkeeping of a controller QP. Variables are stacked as
/// `[u(0..N); states(1..N); slacks(0..N)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpLayout {
    pub horizon: usize,
    /// Size of one predicted-state block (lifted for nominal MPC).
    pub state_block: usize,
    pub n_aux: usize,
    pub rows_eq: usize,
    /// Tube bounds inside the state constraint set.
    pub rows_tube: usize,
    /// Predicted states inside the tube bounds, or inside the constraint set.
    pub rows_state: usize,
    pub rows_input: usize,
    pub rows_slack: usize,
}

impl QpLayout {
    pub fn num_vars(&self) -> usize {
        self.horizon * (1 + self.state_block) + self.n_aux
    }

    pub fn rows_in(&self) -> usize {
        self.rows_tube + self.rows_state + self.rows_input + self.rows_slack
    }

    pub fn state_offset(&self, i: usize) -> usize {
        self.horizon + i * self.state_block
    }

    pub fn aux_offset(&self) -> usize {
        self.horizon * (1 + self.state_block)
    }

    /// Warm start for the next step: every per-step block moves one step
    /// earlier and the last block is repeated.
    pub fn shift(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon;
        let mut out = y.clone();
        let src = |i: usize| (i + 1).min(n - 1);
        for i in 0..n {
            out[i] = y[src(i)];
            let (a, b) = (self.state_offset(i), self.state_offset(src(i)));
            for r in 0..self.state_block {
                out[a + r] = y[b + r];
            }
        }
        if self.n_aux == n {
            let o = self.aux_offset();
            for i in 0..n {
                out[o + i] = y[o + src(i)];
            }
        }
        out
    }
}

fn check_len(what: &str, v: &DVector<f64>, want: usize) -> Result<(), ControlError> {
    if v.len() != want {
        return Err(ControlError::Shape(format!("{what} has {} entries, expected {want}", v.len())));
    }
    Ok(())
}

fn input_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i}")).collect()
}

/// Nominal lifted-linear MPC: `z(i+1) = A z(i) + B u(i) + H ε(k)` with zero
/// attack, `x = C z`, box state and input constraints.
pub fn build_kmpc_qp(
    m: &KoopmanModel,
    x_k: &DVector<f64>,
    eps_k: f64,
    r: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(QpProblem, QpLayout), ControlError> {
    cfg.validate()?;
    let d = m.state_dim();
    check_len("state", x_k, d)?;
    check_len("reference", r, d)?;
    let nz = m.lifted_dim();
    let n = cfg.horizon;
    let lay = QpLayout {
        horizon: n,
        state_block: nz,
        n_aux: 0,
        rows_eq: n * nz,
        rows_tube: 0,
        rows_state: 2 * d * n,
        rows_input: 2 * n,
        rows_slack: 0,
    };
    let nv = lay.num_vars();
    let z0 = m.lift(x_k);
    let q = DMatrix::from_diagonal(&cfg.state_weights(d));
    let ctqc = m.c.transpose() * &q * &m.c;
    let ctqr = m.c.transpose() * (&q * r);
    let mut p = DMatrix::zeros(nv, nv);
    let mut qv = DVector::zeros(nv);
    for i in 0..n {
        p[(i, i)] = 2.0 * cfg.r_weight;
        let o = lay.state_offset(i);
        p.view_mut((o, o), (nz, nz)).copy_from(&(&ctqc * 2.0));
        qv.rows_mut(o, nz).copy_from(&(&ctqr * -2.0));
    }
    let mut prob = QpProblem::new(p, qv);
    prob.constant = n as f64 * r.dot(&(&q * r));

    let mut a_eq = DMatrix::zeros(lay.rows_eq, nv);
    let mut b_eq = DVector::zeros(lay.rows_eq);
    let hz = &m.h * eps_k;
    for i in 0..n {
        let row = i * nz;
        a_eq.view_mut((row, lay.state_offset(i)), (nz, nz)).fill_with_identity();
        for rr in 0..nz {
            a_eq[(row + rr, i)] = -m.b[rr];
        }
        if i == 0 {
            b_eq.rows_mut(row, nz).copy_from(&(&m.a * &z0 + &hz));
        } else {
            a_eq.view_mut((row, lay.state_offset(i - 1)), (nz, nz)).copy_from(&(-&m.a));
            b_eq.rows_mut(row, nz).copy_from(&hz);
        }
    }

    let xr = cfg.state_radius(d);
    let mut a_in = DMatrix::zeros(lay.rows_in(), nv);
    let mut b_in = DVector::zeros(lay.rows_in());
    for i in 0..n {
        let o = lay.state_offset(i);
        let row = 2 * d * i;
        a_in.view_mut((row, o), (d, nz)).copy_from(&m.c);
        a_in.view_mut((row + d, o), (d, nz)).copy_from(&(-&m.c));
        b_in.rows_mut(row, d).copy_from(&(r + &xr));
        b_in.rows_mut(row + d, d).copy_from(&(-(r - &xr)));
    }
    fill_input_rows(&mut a_in, &mut b_in, lay.rows_state, n, cfg.u_max);

    let mut names = input_names(n);
    for i in 0..n {
        names.extend((0..nz).map(|j| format!("z{}_{j}", i + 1)));
    }
    prob.names = names;
    Ok((prob.with_eq(a_eq, b_eq).with_ineq(a_in, b_in), lay))
}

/// Nominal MPC on an identity-lifted model.
pub fn build_lmpc_qp(
    m: &KoopmanModel,
    x_k: &DVector<f64>,
    eps_k: f64,
    r: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(QpProblem, QpLayout), ControlError> {
    require_identity(&m.encoder)?;
    build_kmpc_qp(m, x_k, eps_k, r, cfg)
}

fn require_identity(enc: &Encoder) -> Result<(), ControlError> {
    if !enc.layers.is_empty() {
        return Err(ControlError::Config("linear controllers need an identity-lifted model".into()));
    }
    Ok(())
}

fn fill_input_rows(a_in: &mut DMatrix<f64>, b_in: &mut DVector<f64>, row: usize, n: usize, u_max: f64) {
    for i in 0..n {
        a_in[(row + 2 * i, i)] = 1.0;
        a_in[(row + 2 * i + 1, i)] = -1.0;
        b_in[row + 2 * i] = u_max;
        b_in[row + 2 * i + 1] = u_max;
    }
}

/// Robust program over a symbolic tube. Predicted states float inside the
/// tube's interval hull, whose bounds must lie in the state constraint set;
/// the slacks `w ≥ |u − ū|` carry the input dependence of the tube radius.
pub fn build_rnddpc_qp_from_tube(
    tube: &SymbolicReachTube,
    r: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(QpProblem, QpLayout), ControlError> {
    cfg.validate()?;
    let n = tube.horizon();
    if n != cfg.horizon {
        return Err(ControlError::Shape(format!("tube horizon {n}, configured {}", cfg.horizon)));
    }
    let d = r.len();
    if let Some(s) = tube.steps.iter().find(|s| s.bound.center.len() != d) {
        return Err(ControlError::Shape(format!("tube state dimension {}, reference {d}", s.bound.center.len())));
    }
    let lay = QpLayout {
        horizon: n,
        state_block: d,
        n_aux: n,
        rows_eq: 0,
        rows_tube: 2 * d * n,
        rows_state: 2 * d * n,
        rows_input: 2 * n,
        rows_slack: 2 * n,
    };
    let nv = lay.num_vars();
    let wo = lay.aux_offset();
    let qd = cfg.state_weights(d);
    let mut p = DMatrix::zeros(nv, nv);
    let mut qv = DVector::zeros(nv);
    for i in 0..n {
        p[(i, i)] = 2.0 * cfg.r_weight;
        p[(wo + i, wo + i)] = 2.0 * cfg.slack_weight;
        let o = lay.state_offset(i);
        for j in 0..d {
            p[(o + j, o + j)] = 2.0 * qd[j];
            qv[o + j] = -2.0 * qd[j] * r[j];
        }
    }
    let mut prob = QpProblem::new(p, qv);
    prob.constant = n as f64 * r.component_mul(r).dot(&qd);

    let xr = cfg.state_radius(d);
    let ubar = &tube.u_nominal;
    let mut a_in = DMatrix::zeros(lay.rows_in(), nv);
    let mut b_in = DVector::zeros(lay.rows_in());
    for (i, step) in tube.steps.iter().enumerate() {
        let hb = &step.bound;
        let c_eff = &hb.center - &hb.center_u * ubar;
        let o = lay.state_offset(i);
        let (rt, rs) = (2 * d * i, lay.rows_tube + 2 * d * i);
        for j in 0..d {
            for t in 0..n {
                let cu = hb.center_u[(j, t)];
                let rw = hb.radius_w[(j, t)];
                a_in[(rt + j, t)] = cu;
                a_in[(rt + j, wo + t)] = rw;
                a_in[(rt + d + j, t)] = -cu;
                a_in[(rt + d + j, wo + t)] = rw;
                a_in[(rs + j, t)] = -cu;
                a_in[(rs + j, wo + t)] = -rw;
                a_in[(rs + d + j, t)] = cu;
                a_in[(rs + d + j, wo + t)] = -rw;
            }
            b_in[rt + j] = r[j] + xr[j] - c_eff[j] - hb.radius[j];
            b_in[rt + d + j] = xr[j] - r[j] + c_eff[j] - hb.radius[j];
            a_in[(rs + j, o + j)] = 1.0;
            b_in[rs + j] = c_eff[j] + hb.radius[j];
            a_in[(rs + d + j, o + j)] = -1.0;
            b_in[rs + d + j] = hb.radius[j] - c_eff[j];
        }
    }
    let ri = lay.rows_tube + lay.rows_state;
    fill_input_rows(&mut a_in, &mut b_in, ri, n, cfg.u_max);
    let rw0 = ri + lay.rows_input;
    for i in 0..n {
        a_in[(rw0 + 2 * i, i)] = 1.0;
        a_in[(rw0 + 2 * i, wo + i)] = -1.0;
        b_in[rw0 + 2 * i] = ubar[i];
        a_in[(rw0 + 2 * i + 1, i)] = -1.0;
        a_in[(rw0 + 2 * i + 1, wo + i)] = -1.0;
        b_in[rw0 + 2 * i + 1] = -ubar[i];
    }

    let mut names = input_names(n);
    for i in 0..n {
        names.extend((0..d).map(|j| format!("x{}_{j}", i + 1)));
    }
    names.extend((0..n).map(|i| format!("w{i}")));
    prob.names = names;
    Ok((prob.with_ineq(a_in, b_in), lay))
}

/// Tube from the lifted measurement, then the robust program.
#[allow(clippy::too_many_arguments)]
pub fn build_rnddpc_qp(
    sm: &LearnedSetModel,
    enc: &Encoder,
    x_k: &DVector<f64>,
    eps_k: f64,
    r: &DVector<f64>,
    u_nominal: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(QpProblem, QpLayout, SymbolicReachTube), ControlError> {
    check_len("state", x_k, enc.input)?;
    check_len("nominal input", u_nominal, cfg.horizon)?;
    let tube = TubeBuilder::new(sm).build(sm, &enc.lift(x_k), eps_k, u_nominal, &cfg.reach)?;
    let (p, lay) = build_rnddpc_qp_from_tube(&tube, r, cfg)?;
    Ok((p, lay, tube))
}

/// Robust program on an identity-lifted set model.
#[allow(clippy::too_many_arguments)]
pub fn build_zpc_qp(
    sm: &LearnedSetModel,
    enc: &Encoder,
    x_k: &DVector<f64>,
    eps_k: f64,
    r: &DVector<f64>,
    u_nominal: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<(QpProblem, QpLayout, SymbolicReachTube), ControlError> {
    require_identity(enc)?;
    build_rnddpc_qp(sm, enc, x_k, eps_k, r, u_nominal, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionStatus {
    Optimal,
    Infeasible,
    MaxIter,
    /// Some tube radius already exceeds the constraint radius at `u = ū`.
    TubeTooWide,
    /// Fixed policy, no optimization.
    Policy,
}

impl DecisionStatus {
    pub fn feasible(self) -> bool {
        matches!(self, Self::Optimal | Self::Policy)
    }

    pub const ALL: [DecisionStatus; 5] = [Self::Optimal, Self::Infeasible, Self::MaxIter, Self::TubeTooWide, Self::Policy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Optimal => "optimal",
            Self::Infeasible => "infeasible",
            Self::MaxIter => "max_iter",
            Self::TubeTooWide => "tube_too_wide",
            Self::Policy => "policy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct ControlDecision {
    pub u: DVector<f64>,
    /// Predicted states `x(1..N|k)`; empty without a solution.
    pub x_pred: Vec<DVector<f64>>,
    /// Tube interval hulls at the returned inputs (robust controllers only).
    pub bounds: Vec<IntervalBox>,
    pub status: DecisionStatus,
    pub objective: f64,
    pub iterations: usize,
    /// Lift, tube, build and solve time.
    pub solve_ms: f64,
}

enum Engine {
    Robust {
        encoder: Encoder,
        sets: LearnedSetModel,
        builder: TubeBuilder,
    },
    Nominal {
        model: KoopmanModel,
    },
    Policy,
}

/// One controller instance with its warm-start memory.
pub struct Controller {
    kind: ControllerKind,
    cfg: ControllerConfig,
    plant: PlatoonConfig,
    engine: Engine,
    u_warm: Option<DVector<f64>>,
    y_warm: Option<DVector<f64>>,
}

impl Controller {
    /// Tube controller; `ZPC` requires an identity encoder.
    pub fn robust(
        kind: ControllerKind,
        encoder: Encoder,
        sets: LearnedSetModel,
        cfg: ControllerConfig,
        plant: PlatoonConfig,
    ) -> Result<Self, ControlError> {
        if !kind.is_robust() {
            return Err(ControlError::Config(format!("{} is not a tube controller", kind.name())));
        }
        if kind == ControllerKind::Zpc {
            require_identity(&encoder)?;
        }
        if sets.lifted_dim() != encoder.lifted_dim() || sets.state_dim() != plant.state_dim() {
            return Err(ControlError::Shape(format!(
                "set model is {}→{}, encoder lifts {}→{}",
                sets.lifted_dim(),
                sets.state_dim(),
                encoder.input,
                encoder.lifted_dim()
            )));
        }
        Self::new(kind, cfg, plant, Engine::Robust {
            builder: TubeBuilder::new(&sets),
            encoder,
            sets,
        })
    }

    /// Nominal MPC; `LMPC` requires an identity encoder.
    pub fn nominal(
        kind: ControllerKind,
        model: KoopmanModel,
        cfg: ControllerConfig,
        plant: PlatoonConfig,
    ) -> Result<Self, ControlError> {
        if !matches!(kind, ControllerKind::Kmpc | ControllerKind::Lmpc) {
            return Err(ControlError::Config(format!("{} is not a nominal controller", kind.name())));
        }
        if kind == ControllerKind::Lmpc {
            require_identity(&model.encoder)?;
        }
        if model.state_dim() != plant.state_dim() {
            return Err(ControlError::Shape(format!(
                "model state dimension {}, platoon {}",
                model.state_dim(),
                plant.state_dim()
            )));
        }
        Self::new(kind, cfg, plant, Engine::Nominal { model })
    }

    pub fn all_hdv(cfg: ControllerConfig, plant: PlatoonConfig) -> Result<Self, ControlError> {
        Self::new(ControllerKind::AllHdv, cfg, plant, Engine::Policy)
    }

    fn new(kind: ControllerKind, cfg: ControllerConfig, plant: PlatoonConfig, engine: Engine) -> Result<Self, ControlError> {
        cfg.validate()?;
        plant.validate()?;
        Ok(Self {
            kind,
            cfg,
            plant,
            engine,
            u_warm: None,
            y_warm: None,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn plant(&self) -> &PlatoonConfig {
        &self.plant
    }

    /// Forget the warm start.
    pub fn reset(&mut self) {
        self.u_warm = None;
        self.y_warm = None;
    }

    /// Input applied when no feasible solution exists.
    pub fn backup_input(&self, x: &DVector<f64>, eps: f64) -> f64 {
        match self.cfg.backup {
            BackupRule::Ovm => ovm_accel(x[0], x[1], eps, &self.plant.cav_ovm).clamp(-self.cfg.u_max, self.cfg.u_max),
            BackupRule::Zero => 0.0,
        }
    }

    fn nominal_inputs(&self) -> DVector<f64> {
        self.u_warm.clone().unwrap_or_else(|| DVector::zeros(self.cfg.horizon))
    }

    /// Solve the controller problem at measured state `x` and head velocity
    /// `eps` with reference `desired_state(eps)`.
    pub fn decide(&mut self, x: &DVector<f64>, eps: f64) -> Result<ControlDecision, ControlError> {
        check_len("state", x, self.plant.state_dim())?;
        let r = desired_state(eps, &self.plant)?;
        let start = Instant::now();
        let n = self.cfg.horizon;
        let (prob, lay, tube) = match &self.engine {
            Engine::Policy => {
                let u = ovm_accel(x[0], x[1], eps, &self.plant.cav_ovm);
                return Ok(ControlDecision {
                    u: DVector::from_element(n, u),
                    x_pred: Vec::new(),
                    bounds: Vec::new(),
                    status: DecisionStatus::Policy,
                    objective: 0.0,
                    iterations: 0,
                    solve_ms: start.elapsed().as_secs_f64() * 1e3,
                });
            }
            Engine::Nominal { model } => {
                let (p, l) = build_kmpc_qp(model, x, eps, &r, &self.cfg)?;
                (p, l, None)
            }
            Engine::Robust { encoder, sets, builder } => {
                let ubar = self.nominal_inputs();
                let tube = builder.build(sets, &encoder.lift(x), eps, &ubar, &self.cfg.reach)?;
                let xr = self.cfg.state_radius(x.len());
                let too_wide = tube
                    .steps
                    .iter()
                    .any(|s| s.bound.radius.iter().zip(xr.iter()).any(|(a, b)| !(a <= b)));
                if too_wide {
                    let bounds = (0..n).map(|i| tube.hull_at(i, &ubar)).collect();
                    self.shift_warm(None);
                    return Ok(ControlDecision {
                        u: ubar,
                        x_pred: Vec::new(),
                        bounds,
                        status: DecisionStatus::TubeTooWide,
                        objective: f64::INFINITY,
                        iterations: 0,
                        solve_ms: start.elapsed().as_secs_f64() * 1e3,
                    });
                }
                let (p, l) = build_rnddpc_qp_from_tube(&tube, &r, &self.cfg)?;
                (p, l, Some(tube))
            }
        };
        let y0 = self.y_warm.as_ref().filter(|y| y.len() == lay.num_vars());
        let sol = solve_qp_from(&prob, &self.cfg.qp_settings(), y0)?;
        let status = match sol.status {
            QpStatus::Optimal => DecisionStatus::Optimal,
            QpStatus::Infeasible => DecisionStatus::Infeasible,
            QpStatus::MaxIter => DecisionStatus::MaxIter,
        };
        let u = sol.y.rows(0, n).into_owned();
        let x_pred = match (&self.engine, status) {
            (_, s) if s != DecisionStatus::Optimal => Vec::new(),
            (Engine::Nominal { model }, _) => (0..n)
                .map(|i| &model.c * sol.y.rows(lay.state_offset(i), lay.state_block))
                .collect(),
            _ => (0..n).map(|i| sol.y.rows(lay.state_offset(i), lay.state_block).into_owned()).collect(),
        };
        let bounds = tube.as_ref().map_or_else(Vec::new, |t| (0..n).map(|i| t.hull_at(i, &u)).collect());
        if status == DecisionStatus::Optimal {
            self.u_warm = Some(u.clone());
            self.y_warm = Some(sol.y.clone());
            self.shift_warm(Some(&lay));
        } else {
            self.shift_warm(None);
        }
        Ok(ControlDecision {
            u,
            x_pred,
            bounds,
            status,
            objective: sol.objective,
            iterations: sol.iterations,
            solve_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn shift_warm(&mut self, lay: Option<&QpLayout>) {
        if let Some(u) = &self.u_warm {
            let n = u.len();
            self.u_warm = Some(DVector::from_fn(n, |i, _| u[(i + 1).min(n - 1)]));
        }
        match (lay, &self.y_warm) {
            (Some(l), Some(y)) => self.y_warm = Some(l.shift(y)),
            (None, _) => self.y_warm = None,
            _ => {}
        }
    }

    /// Decide and return the input actually applied.
    pub fn step(&mut self, x: &DVector<f64>, eps: f64) -> Result<(f64, ControlDecision), ControlError> {
        let d = self.decide(x, eps)?;
        let u = if d.status.feasible() { d.u[0] } else { self.backup_input(x, eps) };
        Ok((u, d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityException {
    /// Feasible at `k`, not at `k + 1`.
    pub k: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub controller: String,
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub platoon_hash: String,
    pub n: usize,
    pub t_s: f64,
    pub horizon: usize,
    pub x_tilde_max: [f64; 2],
    pub u_max: f64,
    pub state_weights: Vec<f64>,
    pub r_weight: f64,
    /// Delay of a time-delay attack, zero otherwise.
    pub tau: usize,
    pub exceptions: Vec<FeasibilityException>,
}

/// Closed-loop record, one entry per step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
    pub theta: Vec<f64>,
    pub feasible: Vec<bool>,
    pub status: Vec<DecisionStatus>,
    pub solve_ms: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub r: Vec<DVector<f64>>,
    pub meta: TrajectoryMeta,
}

impl TrajectoryLog {
    pub fn empty(meta: TrajectoryMeta) -> Self {
        Self {
            u: vec![],
            eps: vec![],
            theta: vec![],
            feasible: vec![],
            status: vec![],
            solve_ms: vec![],
            x: vec![],
            r: vec![],
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Steps `k` feasible at `k` and infeasible at `k + 1`.
    pub fn feasibility_exceptions(&self) -> Vec<FeasibilityException> {
        self.feasible
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] && !w[1])
            .map(|(k, _)| FeasibilityException {
                k,
                x: self.x[k + 1].iter().copied().collect(),
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ControlError> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.x.first().map_or(0, |x| x.len());
        let mut header: Vec<String> = ["k", "t", "u", "eps", "theta", "feasible", "status", "solve_ms"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.extend((1..=d).map(|i| format!("r_{i}")));
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![
                k.to_string(),
                (k as f64 * self.meta.t_s).to_string(),
                self.u[k].to_string(),
                self.eps[k].to_string(),
                self.theta[k].to_string(),
                (self.feasible[k] as u8).to_string(),
                self.status[k].name().to_string(),
                self.solve_ms[k].to_string(),
            ];
            row.extend(self.x[k].iter().map(|v| v.to_string()));
            row.extend(self.r[k].iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Rows written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: std::io::Read>(r: R, meta: TrajectoryMeta) -> Result<Self, ControlError> {
        let mut rd = csv::Reader::from_reader(r);
        let width = rd.headers()?.len();
        if width < 10 || (width - 8) % 2 != 0 {
            return Err(ControlError::Shape(format!("trajectory CSV has {width} columns")));
        }
        let d = (width - 8) / 2;
        let mut log = Self::empty(meta);
        for rec in rd.records() {
            let rec = rec?;
            let status = DecisionStatus::parse(rec[6].trim())
                .ok_or_else(|| ControlError::Shape(format!("unknown status {:?}", &rec[6])))?;
            let vals: Vec<f64> = rec
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 6)
                .map(|(_, s)| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| ControlError::Shape(e.to_string()))?;
            log.u.push(vals[2]);
            log.eps.push(vals[3]);
            log.theta.push(vals[4]);
            log.feasible.push(vals[5] != 0.0);
            log.status.push(status);
            log.solve_ms.push(vals[6]);
            log.x.push(DVector::from_column_slice(&vals[7..7 + d]));
            log.r.push(DVector::from_column_slice(&vals[7 + d..]));
        }
        Ok(log)
    }

    /// CSV at `csv_path`, metadata in the `.json` sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<(), ControlError> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self, ControlError> {
        let meta: TrajectoryMeta = serde_json::from_str(&std::fs::read_to_string(csv_path.with_extension("json"))?)?;
        Self::read_csv(std::fs::File::open(csv_path)?, meta)
    }
}

/// Closed-loop run on the true simulator: measure, decide, apply the first
/// input (or the backup input), advance with live attack and noise.
/// Starts from `initial` or the reference for the first head velocity.
pub fn receding_horizon_run(
    ctrl: &mut Controller,
    scenario: &ScenarioProfile,
    initial: Option<&DVector<f64>>,
    seed: u64,
) -> Result<TrajectoryLog, ControlError> {
    let plant = ctrl.plant().clone();
    if (scenario.t_s - plant.t_s).abs() > 1e-12 {
        return Err(ControlError::Config(format!(
            "scenario sampled at {} s, platoon at {} s",
            scenario.t_s, plant.t_s
        )));
    }
    let first = *scenario
        .v0
        .first()
        .ok_or_else(|| ControlError::Config("empty scenario".into()))?;
    let x0 = match initial {
        Some(x) => {
            check_len("initial state", x, plant.state_dim())?;
            x.clone()
        }
        None => desired_state(first, &plant)?,
    };
    let mut rng = rng_from(seed);
    let attack = AttackGenerator::new(scenario.attack, &mut rng);
    let cfg = ctrl.config().clone();
    let meta = TrajectoryMeta {
        controller: ctrl.kind().name().into(),
        scenario: scenario.name.clone(),
        seed,
        n: plant.n,
        t_s: plant.t_s,
        horizon: cfg.horizon,
        x_tilde_max: cfg.x_tilde_max,
        u_max: cfg.u_max,
        state_weights: cfg.state_weights(plant.state_dim()).iter().copied().collect(),
        r_weight: cfg.r_weight,
        tau: attack.tau(),
        ..Default::default()
    };
    let mut log = TrajectoryLog::empty(meta);
    ctrl.reset();
    let mut state = PlatoonState { x: x0, v0: first };
    for (k, &eps) in scenario.v0.iter().enumerate() {
        let (u, dec) = ctrl.step(&state.x, eps)?;
        log.u.push(u);
        let theta = attack.next(&log.u, &mut rng);
        let w = uniform_noise(plant.state_dim(), plant.bounds.omega_max, &mut rng);
        log.eps.push(eps);
        log.theta.push(theta);
        log.feasible.push(dec.status.feasible());
        log.status.push(dec.status);
        log.solve_ms.push(dec.solve_ms);
        log.r.push(desired_state(eps, &plant)?);
        log.x.push(state.x.clone());
        state = step_platoon(&plant, &state, u, eps, theta, &w);
        if !state.x.iter().all(|v| v.is_finite()) {
            log.meta.exceptions = log.feasibility_exceptions();
            return Err(ControlError::Diverged { step: k + 1, log: Box::new(log) });
        }
    }
    log.meta.exceptions = log.feasibility_exceptions();
    Ok(log)
}
