//! Lifted linear models: the encoder `z = [x; g(x)]`, least-squares EDMD,
//! deep-EDMD training and residual bound extraction.

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::platoon::{DataLog, Sequences};
use crate::setcalc::{matrix_from_rows, rows_of};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("{block} is rank deficient (σ_min/σ_max = {ratio:e})")]
    Rank { block: &'static str, ratio: f64 },
    #[error("need at least {need} columns for {block}, got {got}")]
    TooFewColumns { block: &'static str, need: usize, got: usize },
    #[error("non-finite loss at epoch {0}")]
    Diverged(usize),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no residuals to summarize")]
    EmptyStats,
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const PINV_CUTOFF: f64 = 1e-10;

/// SVD pseudo-inverse; rejects matrices whose smallest singular value falls
/// below `cutoff` relative to the largest (full rank required).
pub fn pseudo_inverse(m: &DMatrix<f64>, cutoff: f64, block: &'static str) -> Result<DMatrix<f64>, LiftError> {
    let (r, c) = m.shape();
    let k = r.min(c);
    if k == 0 {
        return Err(LiftError::Rank { block, ratio: 0.0 });
    }
    let svd = SVD::new(m.clone(), true, true);
    let s = &svd.singular_values;
    let smax = s.max();
    let smin = s.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(ratio >= cutoff) {
        return Err(LiftError::Rank { block, ratio });
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut vs = vt.transpose();
    for j in 0..k {
        let inv = 1.0 / s[j];
        vs.column_mut(j).scale_mut(inv);
    }
    Ok(vs * u.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Feed-forward network `g`, ReLU after every layer but the last, applied to
/// the standardized input `(x - shift) / scale`. An encoder without layers is
/// the identity lift.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub input: usize,
    pub shift: DVector<f64>,
    pub scale: DVector<f64>,
    pub layers: Vec<Layer>,
}

impl Encoder {
    pub fn identity(input: usize) -> Self {
        Self {
            input,
            shift: DVector::zeros(input),
            scale: DVector::from_element(input, 1.0),
            layers: Vec::new(),
        }
    }

    /// Per-component mean and standard deviation of the columns of `x`
    /// (deviation floored at 1e-6).
    pub fn standardize_from(mut self, x: &DMatrix<f64>) -> Self {
        let k = x.ncols().max(1) as f64;
        self.shift = x.column_mean();
        self.scale = DVector::from_fn(self.input, |i, _| {
            let m = self.shift[i];
            (x.row(i).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k).sqrt().max(1e-6)
        });
        self
    }

    fn normalized(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        for mut col in a.column_iter_mut() {
            col -= &self.shift;
            col.component_div_assign(&self.scale);
        }
        a
    }

    /// He-uniform weights (`U[±sqrt(6/fan_in)]`), zero biases.
    pub fn he_uniform(input: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for &w in widths {
            let lim = (6.0 / fan_in as f64).sqrt();
            layers.push(Layer {
                w: DMatrix::from_fn(w, fan_in, |_, _| rng.random_range(-lim..lim)),
                b: DVector::zeros(w),
            });
            fan_in = w;
        }
        Self {
            input,
            shift: DVector::zeros(input),
            scale: DVector::from_element(input, 1.0),
            layers,
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn lifted_dim(&self) -> usize {
        self.input + self.output_width()
    }

    pub fn lift(&self, x: &DVector<f64>) -> DVector<f64> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.lift_batch(&xm).as_slice())
    }

    /// Lift every column of `x`.
    pub fn lift_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let g = self.features(x);
        let mut z = DMatrix::zeros(self.lifted_dim(), x.ncols());
        z.rows_mut(0, self.input).copy_from(x);
        if let Some(g) = g {
            z.rows_mut(self.input, g.nrows()).copy_from(&g);
        }
        z
    }

    fn features(&self, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        if self.layers.is_empty() {
            return None;
        }
        let mut a = self.normalized(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = &layer.w * &a;
            for mut col in h.column_iter_mut() {
                col += &layer.b;
            }
            if l < last {
                h.apply(|v| *v = v.max(0.0));
            }
            a = h;
        }
        Some(a)
    }

    /// Forward pass keeping every layer's output (post-activation).
    fn forward_cache(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![self.normalized(x)];
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = &layer.w * acts.last().expect("nonempty");
            for mut col in h.column_iter_mut() {
                col += &layer.b;
            }
            if l < last {
                h.apply(|v| *v = v.max(0.0));
            }
            acts.push(h);
        }
        acts
    }

    /// Accumulate parameter gradients given `dg`, the loss gradient w.r.t.
    /// the network output for each column.
    fn backward(&self, acts: &[DMatrix<f64>], dg: DMatrix<f64>, grads: &mut [Layer]) {
        let mut delta = dg;
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                // ReLU mask from this layer's output
                let out = &acts[l + 1];
                delta.zip_apply(out, |d, o| {
                    if o <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            let a_prev = &acts[l];
            grads[l].w += &delta * a_prev.transpose();
            for col in delta.column_iter() {
                grads[l].b += col;
            }
            if l > 0 {
                delta = self.layers[l].w.transpose() * &delta;
            }
        }
    }

    fn weight_sq_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.w.norm_squared()).sum()
    }
}

/// `z⁺ = A z + B u + H ε + J ϑ`, `x⁺ = C z⁺`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub encoder: Encoder,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub h: DVector<f64>,
    pub j: DVector<f64>,
    pub c: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPart {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub h: DVector<f64>,
    pub j: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl KoopmanModel {
    pub fn state_dim(&self) -> usize {
        self.encoder.input
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn lift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.encoder.lift(x)
    }

    pub fn forward_predict(&self, z: &DVector<f64>, u: f64, eps: f64, theta: f64) -> (DVector<f64>, DVector<f64>) {
        let zn = &self.a * z + &self.b * u + &self.h * eps + &self.j * theta;
        let xn = &self.c * &zn;
        (zn, xn)
    }

    /// `[A B H J]` as one `n_z × (n_z+3)` matrix.
    pub fn abhj(&self) -> DMatrix<f64> {
        let nz = self.lifted_dim();
        let mut m = DMatrix::zeros(nz, nz + 3);
        m.columns_mut(0, nz).copy_from(&self.a);
        m.set_column(nz, &self.b);
        m.set_column(nz + 1, &self.h);
        m.set_column(nz + 2, &self.j);
        m
    }

    pub fn with_linear(encoder: Encoder, lin: LinearPart) -> Self {
        Self {
            encoder,
            a: lin.a,
            b: lin.b,
            h: lin.h,
            j: lin.j,
            c: lin.c,
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.clone().visit_mut(|s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|s| s.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visit every parameter block in a fixed order.
    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for l in &mut self.encoder.layers {
            f(l.w.as_mut_slice());
            f(l.b.as_mut_slice());
        }
        f(self.a.as_mut_slice());
        f(self.b.as_mut_slice());
        f(self.h.as_mut_slice());
        f(self.j.as_mut_slice());
        f(self.c.as_mut_slice());
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().visit_mut(|s| out.extend_from_slice(s));
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(|s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
    }

    pub fn to_json(&self) -> ModelJson {
        ModelJson {
            n_state: self.state_dim(),
            n_lifted: self.lifted_dim(),
            input_shift: self.encoder.shift.iter().copied().collect(),
            input_scale: self.encoder.scale.iter().copied().collect(),
            encoder: self
                .encoder
                .layers
                .iter()
                .map(|l| LayerJson {
                    w: rows_of(&l.w),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
            a: rows_of(&self.a),
            b: self.b.iter().copied().collect(),
            h: self.h.iter().copied().collect(),
            j: self.j.iter().copied().collect(),
            c: rows_of(&self.c),
        }
    }

    pub fn from_json(js: &ModelJson) -> Result<Self, LiftError> {
        let bad = |e: crate::setcalc::SetError| LiftError::Malformed(e.to_string());
        let mut layers = Vec::new();
        let mut fan_in = js.n_state;
        for l in &js.encoder {
            let w = matrix_from_rows(&l.w, [l.b.len(), fan_in]).map_err(bad)?;
            fan_in = l.b.len();
            layers.push(Layer {
                w,
                b: DVector::from_vec(l.b.clone()),
            });
        }
        let nz = js.n_lifted;
        let vec = |v: &Vec<f64>, what: &str| {
            if v.len() == nz {
                Ok(DVector::from_vec(v.clone()))
            } else {
                Err(LiftError::Malformed(format!("{what} has {} entries", v.len())))
            }
        };
        if js.input_shift.len() != js.n_state || js.input_scale.len() != js.n_state {
            return Err(LiftError::Malformed("input standardization has wrong length".into()));
        }
        let m = Self {
            encoder: Encoder {
                input: js.n_state,
                shift: DVector::from_vec(js.input_shift.clone()),
                scale: DVector::from_vec(js.input_scale.clone()),
                layers,
            },
            a: matrix_from_rows(&js.a, [nz, nz]).map_err(bad)?,
            b: vec(&js.b, "B")?,
            h: vec(&js.h, "H")?,
            j: vec(&js.j, "J")?,
            c: matrix_from_rows(&js.c, [js.n_state, nz]).map_err(bad)?,
        };
        if m.encoder.lifted_dim() != nz {
            return Err(LiftError::Malformed("encoder width does not match lifted dimension".into()));
        }
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_json()).expect("model serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex_digest(self.to_json_string().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub n_state: usize,
    pub n_lifted: usize,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub encoder: Vec<LayerJson>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
    pub j: Vec<f64>,
    pub c: Vec<Vec<f64>>,
}

/// Least-squares fit of `[A B H J]` and `C` from lifted sequences.
pub fn edmd_least_squares(seqs: &Sequences) -> Result<LinearPart, LiftError> {
    let nz = seqs.z_minus.nrows();
    let t = seqs.len();
    if t < nz + 3 {
        return Err(LiftError::TooFewColumns {
            block: "regressor [Z-; U-; E-; F-]",
            need: nz + 3,
            got: t,
        });
    }
    let reg = seqs.regressor();
    let abhj = &seqs.z_plus * pseudo_inverse(&reg, PINV_CUTOFF, "regressor [Z-; U-; E-; F-]")?;
    let c = &seqs.x_plus * pseudo_inverse(&seqs.z_plus, PINV_CUTOFF, "Z+")?;
    Ok(LinearPart {
        a: abhj.columns(0, nz).into_owned(),
        b: abhj.column(nz).into_owned(),
        h: abhj.column(nz + 1).into_owned(),
        j: abhj.column(nz + 2).into_owned(),
        c,
    })
}

/// Identity-lift model fitted by EDMD (plain linear system identification).
pub fn identity_model(seqs_x: &Sequences) -> Result<KoopmanModel, LiftError> {
    let lin = edmd_least_squares(seqs_x)?;
    Ok(KoopmanModel::with_linear(Encoder::identity(seqs_x.x_minus.nrows()), lin))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    /// Lifted dimension; `None` means `4·n`.
    pub n_lifted: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: [f64; 4],
    pub epochs: usize,
    pub patience: usize,
    pub split: [f64; 3],
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub refit: Refit,
}

/// Post-training least-squares refit on the training split, keeping the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refit {
    /// Keep the jointly trained matrices.
    None,
    /// Refit `C = X₊·pinv(Z₊)` only.
    Decoder,
    /// Refit `[A B H J]` and `C`.
    Linear,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32, 64, 32],
            n_lifted: None,
            batch_size: 128,
            learning_rate: 1e-3,
            alpha: [1.0, 10.0, 3.0, 1e-4],
            epochs: 200,
            patience: 20,
            split: [0.7, 0.2, 0.1],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            refit: Refit::Linear,
        }
    }
}

impl TrainConfig {
    pub fn lifted_dim(&self, n_state: usize) -> usize {
        self.n_lifted.unwrap_or(2 * n_state)
    }

    fn validate(&self, n_state: usize) -> Result<(), LiftError> {
        if self.alpha.iter().any(|a| *a < 0.0) {
            return Err(LiftError::Config("loss weights must be nonnegative".into()));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|s| *s < 0.0) {
            return Err(LiftError::Config("split ratios must be nonnegative and sum to 1".into()));
        }
        if self.lifted_dim(n_state) <= n_state {
            return Err(LiftError::Config("lifted dimension must exceed the state dimension".into()));
        }
        if self.batch_size == 0 {
            return Err(LiftError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One mini-batch of transitions, one column per sample.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x0: DMatrix<f64>,
    pub x1: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl Batch {
    pub fn from_log(log: &DataLog, idx: &[usize]) -> Self {
        let x0 = log.x.select_columns(idx.iter());
        let x1 = log.x.select_columns(idx.iter().map(|k| k + 1).collect::<Vec<_>>().iter());
        let row = |v: &[f64]| DMatrix::from_row_slice(1, idx.len(), &idx.iter().map(|&k| v[k]).collect::<Vec<_>>());
        Self {
            x0,
            x1,
            u: row(&log.u),
            e: row(&log.eps),
            f: row(&log.theta),
        }
    }

    pub fn len(&self) -> usize {
        self.x0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Individual loss terms, each already multiplied by its weight.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub prediction: f64,
    pub linear: f64,
    pub reconstruction: f64,
    pub regularization: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.prediction + self.linear + self.reconstruction + self.regularization
    }
}

/// Weighted training loss (per-sample mean of squared norms) and, when
/// requested, its gradient with respect to every model parameter.
pub fn loss_and_grad(m: &KoopmanModel, batch: &Batch, alpha: &[f64; 4], want_grad: bool) -> (LossTerms, Option<KoopmanModel>) {
    let bs = batch.len() as f64;
    let n = m.state_dim();
    let acts0 = m.encoder.forward_cache(&batch.x0);
    let acts1 = m.encoder.forward_cache(&batch.x1);
    let stack = |x: &DMatrix<f64>, acts: &[DMatrix<f64>]| {
        let mut z = DMatrix::zeros(m.lifted_dim(), x.ncols());
        z.rows_mut(0, n).copy_from(x);
        if acts.len() > 1 {
            let g = acts.last().expect("nonempty");
            z.rows_mut(n, g.nrows()).copy_from(g);
        }
        z
    };
    let z0 = stack(&batch.x0, &acts0);
    let z1 = stack(&batch.x1, &acts1);
    let zp = &m.a * &z0 + &m.b * &batch.u + &m.h * &batch.e + &m.j * &batch.f;
    let xp = &m.c * &zp;
    let rp = &xp - &batch.x1;
    let rl = &zp - &z1;
    let rr = &batch.x1 - &m.c * &z1;
    let terms = LossTerms {
        prediction: alpha[0] * rp.norm_squared() / bs,
        linear: alpha[1] * rl.norm_squared() / bs,
        reconstruction: alpha[2] * rr.norm_squared() / bs,
        regularization: alpha[3] * m.encoder.weight_sq_norm(),
    };
    if !want_grad {
        return (terms, None);
    }
    let mut g = m.zeros_like();
    let d_xp = rp * (2.0 * alpha[0] / bs);
    let d_rr = rr * (2.0 * alpha[2] / bs);
    g.c = &d_xp * zp.transpose() - &d_rr * z1.transpose();
    let mut d_zp = m.c.transpose() * &d_xp;
    let d_rl = rl * (2.0 * alpha[1] / bs);
    d_zp += &d_rl;
    let d_z1 = -d_rl - m.c.transpose() * &d_rr;
    g.a = &d_zp * z0.transpose();
    g.b = &d_zp * batch.u.transpose().column(0);
    g.h = &d_zp * batch.e.transpose().column(0);
    g.j = &d_zp * batch.f.transpose().column(0);
    let d_z0 = m.a.transpose() * &d_zp;
    let width = m.encoder.output_width();
    if width > 0 {
        let mut layer_grads = std::mem::take(&mut g.encoder.layers);
        m.encoder
            .backward(&acts0, d_z0.rows(n, width).into_owned(), &mut layer_grads);
        m.encoder
            .backward(&acts1, d_z1.rows(n, width).into_owned(), &mut layer_grads);
        for (lg, l) in layer_grads.iter_mut().zip(&m.encoder.layers) {
            lg.w += &l.w * (2.0 * alpha[3]);
        }
        g.encoder.layers = layer_grads;
    }
    (terms, Some(g))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-split loss before the first update and after each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
}

/// Seeded shuffle of transition indices into train/validation/test.
pub fn split_indices(t: usize, split: [f64; 3], rng: &mut ChaCha8Rng) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let n_train = (split[0] * t as f64).round() as usize;
    let n_val = ((split[1] * t as f64).round() as usize).min(t - n_train.min(t));
    let test = idx.split_off((n_train + n_val).min(t));
    let val = idx.split_off(n_train.min(idx.len()));
    [idx, val, test]
}

/// Lift sequences restricted to a subset of transitions.
fn sequences_for(log: &DataLog, enc: &Encoder, idx: &[usize]) -> Sequences {
    let b = Batch::from_log(log, idx);
    Sequences {
        u_minus: b.u.clone(),
        e_minus: b.e.clone(),
        f_minus: b.f.clone(),
        z_minus: enc.lift_batch(&b.x0),
        z_plus: enc.lift_batch(&b.x1),
        x_minus: b.x0,
        x_plus: b.x1,
    }
}

/// Deep-EDMD training by Adam. Linear blocks start from the least-squares
/// fit on the initial encoder's features; the best-validation model is kept.
pub fn train_deep_edmd(log: &DataLog, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(KoopmanModel, TrainReport), LiftError> {
    let n = log.x.nrows();
    cfg.validate(n)?;
    let nz = cfg.lifted_dim(n);
    let [train, val, test] = split_indices(log.transitions(), cfg.split, rng);
    if train.is_empty() {
        return Err(LiftError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(LiftError::EmptySplit("validation"));
    }
    let mut widths = cfg.hidden.clone();
    widths.push(nz - n);
    let encoder = Encoder::he_uniform(n, &widths, rng).standardize_from(&Batch::from_log(log, &train).x0);
    let lin = match edmd_least_squares(&sequences_for(log, &encoder, &train)) {
        Ok(l) => l,
        Err(_) => {
            let mut c = DMatrix::zeros(n, nz);
            c.view_mut((0, 0), (n, n)).fill_with_identity();
            LinearPart {
                a: DMatrix::identity(nz, nz),
                b: DVector::zeros(nz),
                h: DVector::zeros(nz),
                j: DVector::zeros(nz),
                c,
            }
        }
    };
    let mut model = KoopmanModel::with_linear(encoder, lin);
    let train_batch = Batch::from_log(log, &train);
    let val_batch = Batch::from_log(log, &val);
    let eval = |m: &KoopmanModel, b: &Batch| loss_and_grad(m, b, &cfg.alpha, false).0.total();

    let mut report = TrainReport {
        test_indices: test,
        train_indices: train.clone(),
        ..Default::default()
    };
    report.train_loss.push(eval(&model, &train_batch));
    let mut best = model.clone();
    let mut best_val = eval(&model, &val_batch);
    report.val_loss.push(best_val);
    let mut flat = model.flatten();
    let mut adam = Adam::new(flat.len(), cfg);
    let mut since_best = 0;
    let mut order = train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = Batch::from_log(log, chunk);
            let (terms, grad) = loss_and_grad(&model, &b, &cfg.alpha, true);
            if !terms.total().is_finite() {
                return Err(LiftError::Diverged(epoch));
            }
            adam.step(&mut flat, &grad.expect("gradient requested").flatten());
            model.unflatten(&flat);
        }
        let tl = eval(&model, &train_batch);
        let vl = eval(&model, &val_batch);
        if !tl.is_finite() || !vl.is_finite() {
            return Err(LiftError::Diverged(epoch));
        }
        report.train_loss.push(tl);
        report.val_loss.push(vl);
        report.epochs_run = epoch;
        if vl < best_val {
            best_val = vl;
            best = model.clone();
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    match cfg.refit {
        Refit::None => {}
        Refit::Decoder => {
            let seqs = sequences_for(log, &best.encoder, &train);
            best.c = &seqs.x_plus * pseudo_inverse(&seqs.z_plus, PINV_CUTOFF, "Z+")?;
        }
        Refit::Linear => best = refit_linear(&best, log, &train)?,
    }
    Ok((best, report))
}

/// Least-squares refit of every linear block on the given transitions,
/// keeping the encoder.
pub fn refit_linear(m: &KoopmanModel, log: &DataLog, idx: &[usize]) -> Result<KoopmanModel, LiftError> {
    let lin = edmd_least_squares(&sequences_for(log, &m.encoder, idx))?;
    Ok(KoopmanModel::with_linear(m.encoder.clone(), lin))
}

/// Identity-lift EDMD restricted to the given transitions.
pub fn identity_model_on(log: &DataLog, idx: &[usize]) -> Result<KoopmanModel, LiftError> {
    let enc = Encoder::identity(log.x.nrows());
    let lin = edmd_least_squares(&sequences_for(log, &enc, idx))?;
    Ok(KoopmanModel::with_linear(enc, lin))
}

/// Root-mean-square one-step state prediction error over the given transitions.
pub fn one_step_rmse(m: &KoopmanModel, log: &DataLog, idx: &[usize]) -> f64 {
    let b = Batch::from_log(log, idx);
    let z0 = m.encoder.lift_batch(&b.x0);
    let zp = &m.a * &z0 + &m.b * &b.u + &m.h * &b.e + &m.j * &b.f;
    let xp = &m.c * zp;
    ((xp - &b.x1).norm_squared() / (b.x1.nrows() * b.len()) as f64).sqrt()
}

/// Per-transition model errors: `σ(k) = z(k+1) − A z(k) − B u − H ε − J ϑ`,
/// `ϱ(k) = x(k+1) − C z(k+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub sigma: DMatrix<f64>,
    pub rho: DMatrix<f64>,
}

impl ResidualStats {
    pub fn len(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of transitions whose every component lies within the bounds.
    pub fn coverage(&self, sigma_max: &DVector<f64>, rho_max: &DVector<f64>) -> (f64, f64) {
        let frac = |m: &DMatrix<f64>, b: &DVector<f64>| {
            if m.ncols() == 0 {
                return 0.0;
            }
            let inside = m
                .column_iter()
                .filter(|c| c.iter().zip(b.iter()).all(|(v, r)| v.abs() <= *r))
                .count();
            inside as f64 / m.ncols() as f64
        };
        (frac(&self.sigma, sigma_max), frac(&self.rho, rho_max))
    }

    /// Per-component symmetric quantile of `|residual|`.
    pub fn quantiles(&self, q: f64) -> (DVector<f64>, DVector<f64>) {
        (quantile_rows(&self.sigma, q), quantile_rows(&self.rho, q))
    }
}

fn quantile_rows(m: &DMatrix<f64>, q: f64) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| {
        let mut v: Vec<f64> = m.row(i).iter().map(|x| x.abs()).collect();
        v.sort_by(f64::total_cmp);
        let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[k - 1]
    })
}

pub fn extract_residuals(m: &KoopmanModel, seqs: &Sequences) -> ResidualStats {
    let zp = &m.a * &seqs.z_minus + &m.b * &seqs.u_minus + &m.h * &seqs.e_minus + &m.j * &seqs.f_minus;
    ResidualStats {
        sigma: &seqs.z_plus - zp,
        rho: &seqs.x_plus - &m.c * &seqs.z_plus,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundRule {
    /// Per-component empirical coverage target in (0, 1].
    Coverage { target: f64 },
    /// One bound for every component.
    Uniform { value: f64 },
}

pub const BOUND_FLOOR: f64 = 1e-6;

pub fn choose_bounds(stats: &ResidualStats, rule: BoundRule, floor: f64) -> Result<(DVector<f64>, DVector<f64>), LiftError> {
    let (ns, nr) = (stats.sigma.nrows(), stats.rho.nrows());
    match rule {
        BoundRule::Uniform { value } => {
            if !(value > 0.0) {
                return Err(LiftError::Config("uniform bound must be positive".into()));
            }
            Ok((DVector::from_element(ns, value), DVector::from_element(nr, value)))
        }
        BoundRule::Coverage { target } => {
            if !(target > 0.0 && target <= 1.0) {
                return Err(LiftError::Config(format!("coverage target {target} not in (0, 1]")));
            }
            if stats.is_empty() {
                return Err(LiftError::EmptyStats);
            }
            let (s, r) = stats.quantiles(target);
            Ok((s.map(|v| v.max(floor)), r.map(|v| v.max(floor))))
        }
    }
}

/// Convenience: a fresh seeded stream for tests and tools.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platoon::{build_sequences, collect_data, CollectConfig, LogMeta, PlatoonConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_model(rng: &mut ChaCha8Rng, n: usize, nz: usize, hidden: &[usize]) -> KoopmanModel {
        let mut widths = hidden.to_vec();
        widths.push(nz - n);
        let mut enc = Encoder::he_uniform(n, &widths, rng);
        for l in &mut enc.layers {
            l.b = DVector::from_fn(l.b.len(), |_, _| rng.random_range(-0.3..0.3));
        }
        let mut r = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-0.5..0.5));
        KoopmanModel {
            encoder: enc,
            a: r(nz, nz),
            b: r(nz, 1).column(0).into_owned(),
            h: r(nz, 1).column(0).into_owned(),
            j: r(nz, 1).column(0).into_owned(),
            c: r(n, nz),
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Batch {
        let mut r = |r: usize| DMatrix::from_fn(r, b, |_, _| rng.random_range(-2.0..2.0));
        Batch {
            x0: r(n),
            x1: r(n),
            u: r(1),
            e: r(1),
            f: r(1),
        }
    }

    /// Synthetic lifted-linear data: `z = [x; x₀²]` style features are not
    /// needed; a linear system with identity lift suffices.
    fn linear_log(t: usize, noise: f64, seed: u64) -> (DataLog, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = rng_from(seed);
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.05, 0.8]);
        let bhj = DMatrix::from_row_slice(2, 3, &[0.5, 0.2, -0.1, 0.3, 0.0, 0.4]);
        let mut x = DVector::from_vec(vec![1.0, -1.0]);
        let (mut u, mut e, mut f, mut cols) = (vec![], vec![], vec![], vec![]);
        for _ in 0..=t {
            let uk: f64 = rng.random_range(-1.0..1.0);
            let ek: f64 = rng.random_range(-1.0..1.0);
            let fk: f64 = rng.random_range(-1.0..1.0);
            u.push(uk);
            e.push(ek);
            f.push(fk);
            cols.push(x.clone());
            let w = DVector::from_fn(2, |_, _| if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 });
            x = &a * &x + &bhj * DVector::from_vec(vec![uk, ek, fk]) + w;
        }
        let log = DataLog {
            u,
            eps: e,
            theta: f,
            x: DMatrix::from_columns(&cols),
            meta: LogMeta::default(),
        };
        (log, a, bhj)
    }

    #[test]
    fn lift_passes_state_through() {
        let mut rng = rng_from(1);
        let m = small_model(&mut rng, 6, 12, &[8, 8]);
        let x = DVector::from_fn(6, |_, _| rng.random_range(-10.0..10.0));
        let z = m.lift(&x);
        assert_eq!(z.len(), 12);
        assert_eq!(z.rows(0, 6), x);
        assert_eq!(m.lift(&x), z);
    }

    #[test]
    fn zero_weight_encoder_outputs_bias() {
        let mut rng = rng_from(2);
        let mut enc = Encoder::he_uniform(4, &[5, 3], &mut rng);
        for l in &mut enc.layers {
            l.w.fill(0.0);
        }
        enc.layers[1].b = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let a = enc.lift(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let b = enc.lift(&DVector::from_vec(vec![-5.0, 0.0, 9.0, 1.0]));
        assert_eq!(a.rows(4, 3), b.rows(4, 3));
        assert_eq!(a[5], -0.2);
    }

    #[test]
    fn forward_predict_cases() {
        let nz = 4;
        let m = KoopmanModel {
            encoder: Encoder::identity(4),
            a: DMatrix::identity(nz, nz),
            b: DVector::zeros(nz),
            h: DVector::zeros(nz),
            j: DVector::zeros(nz),
            c: DMatrix::identity(4, 4),
        };
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.forward_predict(&z, 3.0, 1.0, 2.0).0, z);
        let mut rng = rng_from(3);
        let m = small_model(&mut rng, 3, 6, &[4]);
        let z = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let p0 = m.forward_predict(&z, 0.0, 0.5, 0.1).0;
        let p1 = m.forward_predict(&z, 1.0, 0.5, 0.1).0;
        let p2 = m.forward_predict(&z, 2.0, 0.5, 0.1).0;
        assert!((&p2 - &p0 - (&p1 - &p0) * 2.0).amax() < 1e-12);
    }

    #[test]
    fn edmd_recovers_noise_free_system() {
        let (log, a, bhj) = linear_log(200, 0.0, 4);
        let seqs = build_sequences(&log, |x| x.clone());
        let lin = edmd_least_squares(&seqs).unwrap();
        assert!((&lin.a - &a).amax() < 1e-8);
        assert!((&lin.b - bhj.column(0)).amax() < 1e-8);
        assert!((&lin.h - bhj.column(1)).amax() < 1e-8);
        assert!((&lin.j - bhj.column(2)).amax() < 1e-8);
        assert!((&lin.c - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn edmd_residual_orthogonal_to_regressor() {
        let (log, _, _) = linear_log(300, 0.05, 5);
        let seqs = build_sequences(&log, |x| x.clone());
        let lin = edmd_least_squares(&seqs).unwrap();
        let m = KoopmanModel::with_linear(Encoder::identity(2), lin);
        let st = extract_residuals(&m, &seqs);
        let ortho = &st.sigma * seqs.regressor().transpose();
        assert!(ortho.amax() < 1e-9, "{ortho}");
    }

    #[test]
    fn edmd_rank_errors() {
        let (log, _, _) = linear_log(4, 0.0, 6);
        let seqs = build_sequences(&log, |x| x.clone());
        assert!(matches!(edmd_least_squares(&seqs), Err(LiftError::TooFewColumns { .. })));
        let (mut log, _, _) = linear_log(50, 0.0, 6);
        log.theta.iter_mut().for_each(|v| *v = 0.0);
        let seqs = build_sequences(&log, |x| x.clone());
        assert!(matches!(edmd_least_squares(&seqs), Err(LiftError::Rank { .. })));
    }

    #[test]
    fn identity_edmd_error_shrinks_with_noise() {
        let mut errs = Vec::new();
        for noise in [0.1, 0.01, 0.001] {
            let (log, a, _) = linear_log(2000, noise, 7);
            let lin = edmd_least_squares(&build_sequences(&log, |x| x.clone())).unwrap();
            errs.push((&lin.a - &a).amax());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn exact_data_has_zero_residuals() {
        let (log, _, _) = linear_log(100, 0.0, 8);
        let seqs = build_sequences(&log, |x| x.clone());
        let m = identity_model(&seqs).unwrap();
        let st = extract_residuals(&m, &seqs);
        assert_eq!(st.len(), 100);
        assert!(st.sigma.amax() < 1e-10 && st.rho.amax() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from(9);
        let m = small_model(&mut rng, 3, 8, &[5, 4]);
        let batch = random_batch(&mut rng, 3, 7);
        let alpha = [1.0, 10.0, 3.0, 0.01];
        let (_, g) = loss_and_grad(&m, &batch, &alpha, true);
        let g = g.unwrap().flatten();
        let p0 = m.flatten();
        let mut mm = m.clone();
        for k in 0..p0.len() {
            let h = 1e-6;
            let mut p = p0.clone();
            p[k] += h;
            mm.unflatten(&p);
            let fp = loss_and_grad(&mm, &batch, &alpha, false).0.total();
            p[k] -= 2.0 * h;
            mm.unflatten(&p);
            let fm = loss_and_grad(&mm, &batch, &alpha, false).0.total();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: fd {fd} vs analytic {}", g[k]);
        }
    }

    #[test]
    fn model_json_round_trip_and_hash() {
        let mut rng = rng_from(10);
        let m = small_model(&mut rng, 3, 6, &[4]);
        let s = m.to_json_string();
        let back = KoopmanModel::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
        assert_eq!(m.hash().len(), 64);
    }

    #[test]
    fn bounds_selection() {
        let stats = ResidualStats {
            sigma: DMatrix::from_row_slice(2, 4, &[0.1, -0.4, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0]),
            rho: DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 3.0, -4.0]),
        };
        let (s, r) = choose_bounds(&stats, BoundRule::Coverage { target: 1.0 }, BOUND_FLOOR).unwrap();
        assert_eq!(s, DVector::from_vec(vec![0.4, BOUND_FLOOR]));
        assert_eq!(r[0], 4.0);
        let (s, _) = choose_bounds(&stats, BoundRule::Coverage { target: 0.5 }, BOUND_FLOOR).unwrap();
        assert_eq!(s[0], 0.2);
        let (s, r) = choose_bounds(&stats, BoundRule::Uniform { value: 0.3 }, BOUND_FLOOR).unwrap();
        assert!(s.iter().chain(r.iter()).all(|v| *v == 0.3));
        assert!(choose_bounds(&stats, BoundRule::Coverage { target: 0.0 }, BOUND_FLOOR).is_err());
        let empty = ResidualStats {
            sigma: DMatrix::zeros(2, 0),
            rho: DMatrix::zeros(1, 0),
        };
        assert!(matches!(
            choose_bounds(&empty, BoundRule::Coverage { target: 0.9 }, BOUND_FLOOR),
            Err(LiftError::EmptyStats)
        ));
    }

    #[test]
    fn short_training_descends_and_is_reproducible() {
        let cfg = PlatoonConfig::new(3);
        let cc = CollectConfig { steps: 600, ..Default::default() };
        let log = collect_data(&cfg, &cc, &mut rng_from(11), LogMeta::default()).unwrap();
        let tc = TrainConfig {
            hidden: vec![16, 16],
            epochs: 60,
            ..Default::default()
        };
        let (m1, r1) = train_deep_edmd(&log, &tc, &mut rng_from(12)).unwrap();
        let (m2, _) = train_deep_edmd(&log, &tc, &mut rng_from(12)).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.lifted_dim(), 12);
        assert_eq!(m1.encoder.output_width(), 6);
        assert!(r1.train_loss.last().unwrap() < &r1.train_loss[0], "{:?}", r1.train_loss);
    }

    #[test]
    fn default_widths_follow_state_dimension() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lifted_dim(6), 12);
        assert_eq!(tc.lifted_dim(8), 16);
        assert_eq!(tc.hidden, vec![32, 32, 64, 32]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn lift_prefix_is_identity(seed in 0u64..1000) {
            let mut rng = rng_from(seed);
            let m = small_model(&mut rng, 4, 9, &[6]);
            let x = DVector::from_fn(4, |_, _| rng.random_range(-50.0..50.0));
            prop_assert_eq!(m.lift(&x).rows(0, 4).into_owned(), x);
        }

        #[test]
        fn pinv_is_left_inverse_for_tall_full_rank(seed in 0u64..1000, r in 2usize..6) {
            let mut rng = rng_from(seed);
            let m = DMatrix::from_fn(r, r + 5, |_, _| rng.random_range(-1.0..1.0));
            let p = pseudo_inverse(&m, PINV_CUTOFF, "test").unwrap();
            prop_assert!((&m * &p - DMatrix::<f64>::identity(r, r)).amax() < 1e-9);
        }
    }
}
