//! Data-driven model sets and reachable-set propagation in the lifted space.
//!
//! The learned set model brackets `[A B H J]` and `C` by matrix zonotopes.
//! [`reach_step`] propagates one concrete step; [`symbolic_tube`] builds the
//! whole horizon with every center and generator affine in the input
//! deviation `δ = u − ū` and a slack `w ≥ |δ|`. Reduction choices are made
//! at the nominal sequence `ū`, and every boxed or merged radius is bounded
//! by `a + b·w` with `b ≥ 0`, so the tube is exact at `δ = 0` and an outer
//! bound elsewhere.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifting::{hex_digest, pseudo_inverse, LiftError, LinearPart, PINV_CUTOFF};
use crate::platoon::Sequences;
use crate::setcalc::{
    rows_of, select_largest, BoxBasis, IntervalBox, MatrixZonotope, MatrixZonotopeJson, SetError, Zonotope, ZonotopeJson,
};

#[derive(Debug, Error)]
pub enum ReachError {
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least one column")]
    NoColumns,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Matrix zonotope `d × T` whose generator `(i, k)` (index `i·T + k`) places
/// error generator `i` in column `k`. Zero generators are pruned.
pub fn build_error_matzono(z_err: &Zonotope, t: usize) -> Result<MatrixZonotope, ReachError> {
    if t == 0 {
        return Err(ReachError::NoColumns);
    }
    let d = z_err.dim();
    let mut center = DMatrix::zeros(d, t);
    for mut col in center.column_iter_mut() {
        col.copy_from(z_err.center());
    }
    let mut gens = Vec::new();
    for g in z_err.generators().column_iter() {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        for k in 0..t {
            let mut m = DMatrix::zeros(d, t);
            m.set_column(k, &g);
            gens.push(m);
        }
    }
    Ok(MatrixZonotope::new(center, gens)?)
}

/// `(Y − 𝓜_err)·P` for the error matzono of `z_err` tiled over `P.nrows()`
/// columns, built without forming the `d × T` generators: generator `(i, k)`
/// is `−g_i · P[k, :]`.
fn error_times(y_times_p: DMatrix<f64>, z_err: &Zonotope, p: &DMatrix<f64>) -> Result<MatrixZonotope, ReachError> {
    let t = p.nrows();
    let center_err: DMatrix<f64> = {
        let mut ones = RowDVector::zeros(t);
        ones.fill(1.0);
        z_err.center() * (ones * p)
    };
    let mut gens = Vec::new();
    for g in z_err.generators().column_iter() {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        for k in 0..t {
            let row = p.row(k);
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            gens.push(-(&g * row));
        }
    }
    Ok(MatrixZonotope::new(y_times_p - center_err, gens)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetProvenance {
    pub data_hash: String,
    pub model_hash: String,
    pub t_set: usize,
    pub max_gens_abhj: usize,
    pub max_gens_c: usize,
    pub basis: BoxBasis,
}

/// Learned model sets: `[A B H J] ∈ 𝓜_ABHJ`, `C ∈ 𝓜_C`, lifted error in
/// `𝓩_σ`, projection error in `𝓩_ϱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedSetModel {
    pub m_abhj: MatrixZonotope,
    pub m_c: MatrixZonotope,
    pub z_sigma: Zonotope,
    pub z_rho: Zonotope,
    pub provenance: SetProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedSetJson {
    pub m_abhj: MatrixZonotopeJson,
    pub m_c: MatrixZonotopeJson,
    pub z_sigma: ZonotopeJson,
    pub z_rho: ZonotopeJson,
    pub provenance: SetProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetLearningConfig {
    /// Columns used for set learning (evenly spaced over the data).
    pub t_set: usize,
    /// Generator budget for `𝓜_ABHJ`; `None` means `5·rows`. The effective
    /// budget is never below `rows·cols`.
    pub max_gens_abhj: Option<usize>,
    pub max_gens_c: Option<usize>,
    pub basis: BoxBasis,
}

impl Default for SetLearningConfig {
    fn default() -> Self {
        Self {
            t_set: 2000,
            max_gens_abhj: None,
            max_gens_c: None,
            basis: BoxBasis::Principal,
        }
    }
}

/// `t_set` evenly spaced indices out of `t` (all of them when `t ≤ t_set`).
pub fn subsample_indices(t: usize, t_set: usize) -> Vec<usize> {
    if t_set == 0 || t <= t_set {
        return (0..t).collect();
    }
    (0..t_set).map(|k| k * t / t_set).collect()
}

impl LearnedSetModel {
    pub fn lifted_dim(&self) -> usize {
        self.m_abhj.shape().0
    }

    pub fn state_dim(&self) -> usize {
        self.m_c.shape().0
    }

    /// Same set model with every uncertainty collapsed to its center.
    pub fn point(abhj: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        let (nz, n) = (abhj.nrows(), c.nrows());
        Self {
            m_abhj: MatrixZonotope::point(abhj),
            m_c: MatrixZonotope::point(c),
            z_sigma: Zonotope::point(DVector::zeros(nz)),
            z_rho: Zonotope::point(DVector::zeros(n)),
            provenance: SetProvenance {
                data_hash: String::new(),
                model_hash: String::new(),
                t_set: 0,
                max_gens_abhj: 0,
                max_gens_c: 0,
                basis: BoxBasis::Principal,
            },
        }
    }

    pub fn to_json(&self) -> LearnedSetJson {
        LearnedSetJson {
            m_abhj: self.m_abhj.to_json(),
            m_c: self.m_c.to_json(),
            z_sigma: self.z_sigma.to_json(),
            z_rho: self.z_rho.to_json(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_json(js: &LearnedSetJson) -> Result<Self, ReachError> {
        let m = Self {
            m_abhj: MatrixZonotope::from_json(&js.m_abhj)?,
            m_c: MatrixZonotope::from_json(&js.m_c)?,
            z_sigma: Zonotope::from_json(&js.z_sigma)?,
            z_rho: Zonotope::from_json(&js.z_rho)?,
            provenance: js.provenance.clone(),
        };
        let (nz, cols) = m.m_abhj.shape();
        let (n, ccols) = m.m_c.shape();
        if cols != nz + 3 || ccols != nz || m.z_sigma.dim() != nz || m.z_rho.dim() != n {
            return Err(ReachError::Shape("inconsistent learned set shapes".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReachError> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReachError> {
        Self::from_json(&serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Data-consistent model sets from lifted data:
/// `𝓜_ABHJ = (Z₊ − 𝓜_σ)·pinv([Z₋;U₋;E₋;F₋])`, `𝓜_C = (X₊ − 𝓜_ϱ)·pinv(Z₊)`,
/// each reduced to its budget.
pub fn learn_model_sets(
    seqs: &Sequences,
    z_sigma: &Zonotope,
    z_rho: &Zonotope,
    cfg: &SetLearningConfig,
) -> Result<LearnedSetModel, ReachError> {
    let nz = seqs.z_minus.nrows();
    let n = seqs.x_plus.nrows();
    if z_sigma.dim() != nz || z_rho.dim() != n {
        return Err(ReachError::Shape(format!(
            "error zonotopes have dims {}/{}, expected {nz}/{n}",
            z_sigma.dim(),
            z_rho.dim()
        )));
    }
    if seqs.is_empty() {
        return Err(ReachError::NoColumns);
    }
    let idx = subsample_indices(seqs.len(), cfg.t_set);
    let s = seqs.select(&idx);
    let t = s.len();
    if t < nz + 3 {
        return Err(LiftError::TooFewColumns {
            block: "regressor [Z-; U-; E-; F-]",
            need: nz + 3,
            got: t,
        }
        .into());
    }
    let p_reg = pseudo_inverse(&s.regressor(), PINV_CUTOFF, "regressor [Z-; U-; E-; F-]")?;
    let p_z = pseudo_inverse(&s.z_plus, PINV_CUTOFF, "Z+")?;
    let m_abhj = error_times(&s.z_plus * &p_reg, z_sigma, &p_reg)?;
    let m_c = error_times(&s.x_plus * &p_z, z_rho, &p_z)?;
    let budget = |configured: Option<usize>, (r, c): (usize, usize)| configured.unwrap_or(5 * r).max(r * c);
    let ga = budget(cfg.max_gens_abhj, m_abhj.shape());
    let gc = budget(cfg.max_gens_c, m_c.shape());
    Ok(LearnedSetModel {
        m_abhj: m_abhj.reduce_with(ga, cfg.basis)?,
        m_c: m_c.reduce_with(gc, cfg.basis)?,
        z_sigma: z_sigma.clone(),
        z_rho: z_rho.clone(),
        provenance: SetProvenance {
            data_hash: hex_digest(format!("{:?}", s.x_plus.as_slice()).as_bytes()),
            model_hash: String::new(),
            t_set: t,
            max_gens_abhj: ga,
            max_gens_c: gc,
            basis: cfg.basis,
        },
    })
}

/// Bounded-signal parameters of one reach step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachParams {
    pub eps_max: f64,
    pub theta_max: f64,
    /// Zonotope order kept for the lifted set after every step.
    pub order: usize,
}

impl Default for ReachParams {
    fn default() -> Self {
        Self {
            eps_max: 2.0,
            theta_max: 3.0,
            order: 10,
        }
    }
}

fn scalar_zono(center: f64, radius: f64) -> Zonotope {
    if radius > 0.0 {
        Zonotope::from_box(DVector::from_element(1, center), &DVector::from_element(1, radius))
    } else {
        Zonotope::point(DVector::from_element(1, center))
    }
}

/// One numeric step: `Rz⁺ = reduce(merge(𝓜_ABHJ(Rz × u × 𝓩_ε × 𝓩_ϑ) ⊕ 𝓩_σ))`,
/// `Rx⁺ = merge(𝓜_C Rz⁺ ⊕ 𝓩_ϱ)`.
pub fn reach_step(
    sm: &LearnedSetModel,
    rz: &Zonotope,
    u: f64,
    eps_center: f64,
    p: &ReachParams,
) -> Result<(Zonotope, Zonotope), ReachError> {
    let zin = rz
        .cartesian_product(&Zonotope::point(DVector::from_element(1, u)))
        .cartesian_product(&scalar_zono(eps_center, p.eps_max))
        .cartesian_product(&scalar_zono(0.0, p.theta_max));
    let next = sm
        .m_abhj
        .map(&zin)?
        .minkowski_sum(&sm.z_sigma)?
        .merge_axis_aligned()
        .reduce(p.order)?;
    let rx = sm.m_c.map(&next)?.minkowski_sum(&sm.z_rho)?.merge_axis_aligned();
    Ok((next, rx))
}

/// Zonotope whose center and generators are affine in `(δ, w)`, `δ, w ∈ R^N`:
/// center `c + Cu·δ`, generator `j` equal to `g_j + D_j·[δ; w]` where `D_j`
/// occupies columns `2N·j .. 2N·(j+1)` of `coef`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineZonotope {
    pub center: DVector<f64>,
    pub center_u: DMatrix<f64>,
    pub gens: DMatrix<f64>,
    pub coef: DMatrix<f64>,
    pub horizon: usize,
}

/// Interval hull bound `c + Cu·δ ± (r + Rw·w)`, valid whenever `|δ| ≤ w`.
#[derive(Debug, Clone, PartialEq)]
pub struct HullBound {
    pub center: DVector<f64>,
    pub center_u: DMatrix<f64>,
    pub radius: DVector<f64>,
    pub radius_w: DMatrix<f64>,
}

impl HullBound {
    pub fn evaluate(&self, du: &DVector<f64>, w: &DVector<f64>) -> IntervalBox {
        let c = &self.center + &self.center_u * du;
        let r = &self.radius + &self.radius_w * w;
        IntervalBox {
            lower: &c - &r,
            upper: &c + &r,
        }
    }
}

impl AffineZonotope {
    pub fn point(center: DVector<f64>, horizon: usize) -> Self {
        let d = center.len();
        Self {
            center,
            center_u: DMatrix::zeros(d, horizon),
            gens: DMatrix::zeros(d, 0),
            coef: DMatrix::zeros(d, 0),
            horizon,
        }
    }

    pub fn constant(z: &Zonotope, horizon: usize) -> Self {
        let d = z.dim();
        Self {
            center: z.center().clone(),
            center_u: DMatrix::zeros(d, horizon),
            gens: z.generators().clone(),
            coef: DMatrix::zeros(d, 2 * horizon * z.num_generators()),
            horizon,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn num_generators(&self) -> usize {
        self.gens.ncols()
    }

    /// Concrete zonotope at input deviation `du` and slack `w`.
    pub fn evaluate(&self, du: &DVector<f64>, w: &DVector<f64>) -> Zonotope {
        let n2 = 2 * self.horizon;
        let mut dw = DVector::zeros(n2);
        dw.rows_mut(0, self.horizon).copy_from(du);
        dw.rows_mut(self.horizon, self.horizon).copy_from(w);
        let mut gens = self.gens.clone();
        for j in 0..self.num_generators() {
            let d = self.coef.columns(n2 * j, n2) * &dw;
            let mut col = gens.column_mut(j);
            col += d;
        }
        Zonotope::new(&self.center + &self.center_u * du, gens).expect("consistent shapes")
    }

    pub fn hull_bound(&self) -> HullBound {
        let d = self.dim();
        let n = self.horizon;
        let mut radius = DVector::zeros(d);
        let mut radius_w = DMatrix::zeros(d, n);
        for j in 0..self.num_generators() {
            for r in 0..d {
                radius[r] += self.gens[(r, j)].abs();
            }
            accumulate_abs_coef(&self.coef.columns(2 * n * j, 2 * n), &mut radius_w, n);
        }
        HullBound {
            center: self.center.clone(),
            center_u: self.center_u.clone(),
            radius,
            radius_w,
        }
    }
}

/// `acc[r, l] += |D[r, l]| + |D[r, N + l]|` for one generator block `D`.
fn accumulate_abs_coef<S>(block: &nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::Dyn, S>, acc: &mut DMatrix<f64>, n: usize)
where
    S: nalgebra::storage::Storage<f64, nalgebra::Dyn, nalgebra::Dyn>,
{
    for l in 0..n {
        for r in 0..acc.nrows() {
            acc[(r, l)] += block[(r, l)].abs() + block[(r, n + l)].abs();
        }
    }
}

/// Generators of a matrix zonotope split into those supported on a single
/// row (`e_r·v`) and the rest.
#[derive(Debug, Clone)]
struct MapPlan {
    rows: Vec<usize>,
    v: DMatrix<f64>,
    /// Index of every generator: `Ok(k)` is row `k` of `v`, `Err(j)` a dense one.
    order: Vec<Result<usize, usize>>,
}

impl MapPlan {
    fn new(m: &MatrixZonotope) -> Self {
        let (r, c) = m.shape();
        let mut rows = Vec::new();
        let mut vs: Vec<RowDVector<f64>> = Vec::new();
        let mut order = Vec::new();
        for (j, g) in m.generators().iter().enumerate() {
            let support: Vec<usize> = (0..r).filter(|&i| g.row(i).iter().any(|v| *v != 0.0)).collect();
            if support.len() <= 1 {
                order.push(Ok(rows.len()));
                rows.push(support.first().copied().unwrap_or(0));
                vs.push(g.row(support.first().copied().unwrap_or(0)).into_owned());
            } else {
                order.push(Err(j));
            }
        }
        let v = if vs.is_empty() { DMatrix::zeros(0, c) } else { DMatrix::from_rows(&vs) };
        Self { rows, v, order }
    }
}

/// Symbolic counterpart of `merge(𝓜·zin ⊕ add)` with the same generator order
/// as the numeric pipeline.
fn affine_map(m: &MatrixZonotope, plan: &MapPlan, zin: &AffineZonotope, add: &Zonotope) -> AffineZonotope {
    let n = zin.horizon;
    let n2 = 2 * n;
    let d = m.shape().0;
    let gz = zin.num_generators();
    let cm = m.center();
    let mut axis_a = DVector::zeros(d);
    let mut axis_b = DMatrix::zeros(d, n);
    let mut dense_g: Vec<DVector<f64>> = Vec::new();
    let mut dense_c: Vec<DMatrix<f64>> = Vec::new();

    let mut push = |g: DVector<f64>, c: DMatrix<f64>, axis_a: &mut DVector<f64>, axis_b: &mut DMatrix<f64>| {
        let rows: Vec<usize> =
            (0..d).filter(|&r| g[r] != 0.0 || c.row(r).iter().any(|v| *v != 0.0)).collect();
        match rows.len() {
            0 => {}
            1 => {
                let r = rows[0];
                axis_a[r] += g[r].abs();
                for l in 0..n {
                    axis_b[(r, l)] += c[(r, l)].abs() + c[(r, n + l)].abs();
                }
            }
            _ => {
                dense_g.push(g);
                dense_c.push(c);
            }
        }
    };

    // C·g_i
    let g1 = cm * &zin.gens;
    let c1 = cm * &zin.coef;
    for i in 0..gz {
        push(g1.column(i).into_owned(), c1.columns(n2 * i, n2).into_owned(), &mut axis_a, &mut axis_b);
    }
    // single-row generators: every G_j·c and G_j·g_i lands on one axis
    if plan.v.nrows() > 0 {
        let vc = &plan.v * &zin.center;
        let vcu = &plan.v * &zin.center_u;
        let vg = &plan.v * &zin.gens;
        let vcoef = &plan.v * &zin.coef;
        for (k, &r) in plan.rows.iter().enumerate() {
            axis_a[r] += vc[k].abs();
            for l in 0..n {
                axis_b[(r, l)] += vcu[(k, l)].abs();
            }
            for i in 0..gz {
                axis_a[r] += vg[(k, i)].abs();
                for l in 0..n {
                    axis_b[(r, l)] += vcoef[(k, n2 * i + l)].abs() + vcoef[(k, n2 * i + n + l)].abs();
                }
            }
        }
    }
    // dense generators, G_j·c for all j then G_j·g_i (j outer)
    let dense_js: Vec<usize> = plan.order.iter().filter_map(|o| o.err()).collect();
    for &j in &dense_js {
        let g = &m.generators()[j];
        let mut c = DMatrix::zeros(d, n2);
        c.columns_mut(0, n).copy_from(&(g * &zin.center_u));
        push(g * &zin.center, c, &mut axis_a, &mut axis_b);
    }
    for &j in &dense_js {
        let g = &m.generators()[j];
        let gg = g * &zin.gens;
        let gc = g * &zin.coef;
        for i in 0..gz {
            push(gg.column(i).into_owned(), gc.columns(n2 * i, n2).into_owned(), &mut axis_a, &mut axis_b);
        }
    }
    for g in add.generators().column_iter() {
        push(g.into_owned(), DMatrix::zeros(d, n2), &mut axis_a, &mut axis_b);
    }

    let total = dense_g.len() + d;
    let mut gens = DMatrix::zeros(d, total);
    let mut coef = DMatrix::zeros(d, n2 * total);
    for (j, (g, c)) in dense_g.iter().zip(&dense_c).enumerate() {
        gens.set_column(j, g);
        coef.columns_mut(n2 * j, n2).copy_from(c);
    }
    let base = dense_g.len();
    for r in 0..d {
        gens[(r, base + r)] = axis_a[r];
        for l in 0..n {
            coef[(r, n2 * (base + r) + n + l)] = axis_b[(r, l)];
        }
    }
    AffineZonotope {
        center: cm * &zin.center + add.center(),
        center_u: cm * &zin.center_u,
        gens,
        coef,
        horizon: n,
    }
}

/// Symbolic counterpart of [`Zonotope::reduce`], selecting at `δ = 0`.
fn affine_reduce(z: &AffineZonotope, order: usize) -> Result<AffineZonotope, ReachError> {
    if order == 0 {
        return Err(SetError::Order.into());
    }
    let d = z.dim();
    let n = z.horizon;
    let n2 = 2 * n;
    if z.num_generators() <= order * d {
        return Ok(z.clone());
    }
    let norms: Vec<f64> = z.gens.column_iter().map(|g| g.norm()).collect();
    let keep = select_largest(&norms, (order - 1) * d);
    let mut kept = vec![false; norms.len()];
    for &k in &keep {
        kept[k] = true;
    }
    let mut a = DVector::zeros(d);
    let mut b = DMatrix::zeros(d, n);
    for j in (0..norms.len()).filter(|j| !kept[*j]) {
        for r in 0..d {
            a[r] += z.gens[(r, j)].abs();
        }
        accumulate_abs_coef(&z.coef.columns(n2 * j, n2), &mut b, n);
    }
    let total = keep.len() + d;
    let mut gens = DMatrix::zeros(d, total);
    let mut coef = DMatrix::zeros(d, n2 * total);
    for (slot, &k) in keep.iter().enumerate() {
        gens.set_column(slot, &z.gens.column(k));
        coef.columns_mut(n2 * slot, n2).copy_from(&z.coef.columns(n2 * k, n2));
    }
    for r in 0..d {
        let slot = keep.len() + r;
        gens[(r, slot)] = a[r];
        for l in 0..n {
            coef[(r, n2 * slot + n + l)] = b[(r, l)];
        }
    }
    Ok(AffineZonotope {
        center: z.center.clone(),
        center_u: z.center_u.clone(),
        gens,
        coef,
        horizon: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeStep {
    /// Lifted set after reduction.
    pub rz: AffineZonotope,
    /// Projected state set.
    pub rx: AffineZonotope,
    pub bound: HullBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicReachTube {
    pub u_nominal: DVector<f64>,
    pub eps_center: f64,
    pub steps: Vec<TubeStep>,
}

impl SymbolicReachTube {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// State interval hull at step `i+1` for input sequence `u`, using the
    /// tightest admissible slack `w = |u − ū|`.
    pub fn hull_at(&self, i: usize, u: &DVector<f64>) -> IntervalBox {
        let du = u - &self.u_nominal;
        let w = du.abs();
        self.steps[i].bound.evaluate(&du, &w)
    }
}

/// Precomputed structure for repeated tube construction with one set model.
#[derive(Debug, Clone)]
pub struct TubeBuilder {
    plan_abhj: MapPlan,
    plan_c: MapPlan,
}

impl TubeBuilder {
    pub fn new(sm: &LearnedSetModel) -> Self {
        Self {
            plan_abhj: MapPlan::new(&sm.m_abhj),
            plan_c: MapPlan::new(&sm.m_c),
        }
    }

    /// Tube over `u_nominal.len()` steps from the point `z0`, with the head
    /// velocity zonotope `⟨eps_center, eps_max⟩` held over the horizon.
    pub fn build(
        &self,
        sm: &LearnedSetModel,
        z0: &DVector<f64>,
        eps_center: f64,
        u_nominal: &DVector<f64>,
        p: &ReachParams,
    ) -> Result<SymbolicReachTube, ReachError> {
        let n = u_nominal.len();
        if n == 0 {
            return Err(ReachError::Horizon);
        }
        let nz = sm.lifted_dim();
        if z0.len() != nz {
            return Err(ReachError::Shape(format!("lifted state has {} entries, expected {nz}", z0.len())));
        }
        let m = nz + 3;
        let n2 = 2 * n;
        let mut rz = AffineZonotope::point(z0.clone(), n);
        let mut steps = Vec::with_capacity(n);
        let signal_gens: Vec<(usize, f64)> = [(nz + 1, p.eps_max), (nz + 2, p.theta_max)]
            .into_iter()
            .filter(|(_, r)| *r > 0.0)
            .collect();
        for i in 0..n {
            let gz = rz.num_generators();
            let gin = gz + signal_gens.len();
            let mut center = DVector::zeros(m);
            center.rows_mut(0, nz).copy_from(&rz.center);
            center[nz] = u_nominal[i];
            center[nz + 1] = eps_center;
            let mut center_u = DMatrix::zeros(m, n);
            center_u.rows_mut(0, nz).copy_from(&rz.center_u);
            center_u[(nz, i)] = 1.0;
            let mut gens = DMatrix::zeros(m, gin);
            gens.view_mut((0, 0), (nz, gz)).copy_from(&rz.gens);
            for (s, &(row, r)) in signal_gens.iter().enumerate() {
                gens[(row, gz + s)] = r;
            }
            let mut coef = DMatrix::zeros(m, n2 * gin);
            coef.view_mut((0, 0), (nz, n2 * gz)).copy_from(&rz.coef);
            let zin = AffineZonotope {
                center,
                center_u,
                gens,
                coef,
                horizon: n,
            };
            let next = affine_reduce(&affine_map(&sm.m_abhj, &self.plan_abhj, &zin, &sm.z_sigma), p.order)?;
            let rx = affine_map(&sm.m_c, &self.plan_c, &next, &sm.z_rho);
            let bound = rx.hull_bound();
            steps.push(TubeStep { rz: next.clone(), rx, bound });
            rz = next;
        }
        Ok(SymbolicReachTube {
            u_nominal: u_nominal.clone(),
            eps_center,
            steps,
        })
    }
}

/// One-shot tube construction (see [`TubeBuilder`] for repeated use).
pub fn symbolic_tube(
    sm: &LearnedSetModel,
    z0: &DVector<f64>,
    eps_center: f64,
    u_nominal: &DVector<f64>,
    p: &ReachParams,
) -> Result<SymbolicReachTube, ReachError> {
    TubeBuilder::new(sm).build(sm, z0, eps_center, u_nominal, p)
}

/// Element-wise deviation of each set's interval hull from a nominal model.
#[derive(Debug, Clone, PartialEq)]
pub struct TightnessReport {
    pub abhj_sup: DMatrix<f64>,
    pub abhj_inf: DMatrix<f64>,
    pub c_sup: DMatrix<f64>,
    pub c_inf: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightnessSummary {
    pub abhj_sup_max: f64,
    pub abhj_inf_min: f64,
    pub c_sup_max: f64,
    pub c_inf_min: f64,
}

impl TightnessReport {
    pub fn summary(&self) -> TightnessSummary {
        TightnessSummary {
            abhj_sup_max: self.abhj_sup.max(),
            abhj_inf_min: self.abhj_inf.min(),
            c_sup_max: self.c_sup.max(),
            c_inf_min: self.c_inf.min(),
        }
    }

    /// Valid over-approximation sign pattern (`e_sup ≥ 0`, `e_inf ≤ 0`).
    pub fn signs_ok(&self) -> bool {
        self.abhj_sup.iter().chain(self.c_sup.iter()).all(|v| *v >= 0.0)
            && self.abhj_inf.iter().chain(self.c_inf.iter()).all(|v| *v <= 0.0)
    }

    /// Long-format CSV: `matrix,bound,row,col,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ReachError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["matrix", "bound", "row", "col", "value"])?;
        for (name, bound, m) in [
            ("abhj", "sup", &self.abhj_sup),
            ("abhj", "inf", &self.abhj_inf),
            ("c", "sup", &self.c_sup),
            ("c", "inf", &self.c_inf),
        ] {
            for (i, row) in rows_of(m).iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    wr.write_record([name.to_string(), bound.to_string(), i.to_string(), j.to_string(), format!("{v:e}")])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn quantify_tightness(sm: &LearnedSetModel, abhj: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<TightnessReport, ReachError> {
    if abhj.shape() != sm.m_abhj.shape() || c.shape() != sm.m_c.shape() {
        return Err(ReachError::Shape("nominal matrices do not match the set shapes".into()));
    }
    let (al, ah) = sm.m_abhj.interval_hull();
    let (cl, ch) = sm.m_c.interval_hull();
    Ok(TightnessReport {
        abhj_sup: ah - abhj,
        abhj_inf: al - abhj,
        c_sup: ch - c,
        c_inf: cl - c,
    })
}

/// `[A B H J]` of a linear part, for tightness against the least-squares fit.
pub fn stacked_abhj(lin: &LinearPart) -> DMatrix<f64> {
    let nz = lin.a.nrows();
    let mut m = DMatrix::zeros(nz, nz + 3);
    m.columns_mut(0, nz).copy_from(&lin.a);
    m.set_column(nz, &lin.b);
    m.set_column(nz + 1, &lin.h);
    m.set_column(nz + 2, &lin.j);
    m
}
