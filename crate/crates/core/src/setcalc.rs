//! Zonotope, interval and matrix-zonotope arithmetic.
//!
//! Generators are stored as the columns of a `d × γ` matrix. Every operation
//! emits generators in a fixed order so serialized sets round-trip exactly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("coefficient {index} = {value} lies outside [-1, 1]")]
    Coefficient { index: usize, value: f64 },
    #[error("reduction order must be at least 1")]
    Order,
    #[error("malformed set data: {0}")]
    Malformed(String),
}

fn shape(r: usize, c: usize) -> String {
    format!("{r}x{c}")
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl IntervalBox {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }

    pub fn radius(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }
}

/// `{c + G β : β ∈ [-1, 1]^γ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Zonotope {
    center: DVector<f64>,
    generators: DMatrix<f64>,
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Result<Self, SetError> {
        if generators.nrows() != center.len() && generators.ncols() > 0 {
            return Err(SetError::Dimension {
                op: "zonotope",
                expected: format!("{} rows", center.len()),
                found: format!("{} rows", generators.nrows()),
            });
        }
        let d = center.len();
        let g = if generators.ncols() == 0 {
            DMatrix::zeros(d, 0)
        } else {
            generators
        };
        Ok(Self {
            center,
            generators: g,
        })
    }

    pub fn from_generator_list(center: DVector<f64>, gens: &[DVector<f64>]) -> Result<Self, SetError> {
        let d = center.len();
        if let Some(bad) = gens.iter().find(|g| g.len() != d) {
            return Err(SetError::Dimension {
                op: "zonotope",
                expected: d.to_string(),
                found: bad.len().to_string(),
            });
        }
        let g = if gens.is_empty() {
            DMatrix::zeros(d, 0)
        } else {
            DMatrix::from_columns(gens)
        };
        Ok(Self {
            center,
            generators: g,
        })
    }

    pub fn point(center: DVector<f64>) -> Self {
        let d = center.len();
        Self {
            center,
            generators: DMatrix::zeros(d, 0),
        }
    }

    /// Box `center ± radius` with one axis-aligned generator per coordinate.
    pub fn from_box(center: DVector<f64>, radius: &DVector<f64>) -> Self {
        let generators = DMatrix::from_diagonal(radius);
        Self { center, generators }
    }

    /// Box with one generator per coordinate whose radius is nonzero.
    pub fn from_box_sparse(center: DVector<f64>, radius: &DVector<f64>) -> Self {
        let cols: Vec<DVector<f64>> = radius
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != 0.0)
            .map(|(i, r)| {
                let mut v = DVector::zeros(radius.len());
                v[i] = *r;
                v
            })
            .collect();
        Self::from_generator_list(center, &cols).expect("dimensions agree by construction")
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn num_generators(&self) -> usize {
        self.generators.ncols()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn generator(&self, i: usize) -> DVector<f64> {
        self.generators.column(i).into_owned()
    }

    pub fn linear_map(&self, l: &DMatrix<f64>) -> Result<Self, SetError> {
        if l.ncols() != self.dim() {
            return Err(SetError::Dimension {
                op: "linear_map",
                expected: shape(l.nrows(), self.dim()),
                found: shape(l.nrows(), l.ncols()),
            });
        }
        Ok(Self {
            center: l * &self.center,
            generators: l * &self.generators,
        })
    }

    pub fn minkowski_sum(&self, other: &Self) -> Result<Self, SetError> {
        if other.dim() != self.dim() {
            return Err(SetError::Dimension {
                op: "minkowski_sum",
                expected: self.dim().to_string(),
                found: other.dim().to_string(),
            });
        }
        let d = self.dim();
        let (g1, g2) = (self.num_generators(), other.num_generators());
        let mut gens = DMatrix::zeros(d, g1 + g2);
        gens.columns_mut(0, g1).copy_from(&self.generators);
        gens.columns_mut(g1, g2).copy_from(&other.generators);
        Ok(Self {
            center: &self.center + &other.center,
            generators: gens,
        })
    }

    pub fn cartesian_product(&self, other: &Self) -> Self {
        let (d1, d2) = (self.dim(), other.dim());
        let (g1, g2) = (self.num_generators(), other.num_generators());
        let mut center = DVector::zeros(d1 + d2);
        center.rows_mut(0, d1).copy_from(&self.center);
        center.rows_mut(d1, d2).copy_from(&other.center);
        let mut gens = DMatrix::zeros(d1 + d2, g1 + g2);
        gens.view_mut((0, 0), (d1, g1)).copy_from(&self.generators);
        gens.view_mut((d1, g1), (d2, g2)).copy_from(&other.generators);
        Self {
            center,
            generators: gens,
        }
    }

    /// Per-axis radius `Σ |g_i|`.
    pub fn hull_radius(&self) -> DVector<f64> {
        let mut r = DVector::zeros(self.dim());
        for g in self.generators.column_iter() {
            for (ri, gi) in r.iter_mut().zip(g.iter()) {
                *ri += gi.abs();
            }
        }
        r
    }

    pub fn interval_hull(&self) -> IntervalBox {
        let r = self.hull_radius();
        IntervalBox {
            lower: &self.center - &r,
            upper: &self.center + &r,
        }
    }

    pub fn sample(&self, beta: &DVector<f64>) -> Result<DVector<f64>, SetError> {
        if beta.len() != self.num_generators() {
            return Err(SetError::Dimension {
                op: "sample",
                expected: self.num_generators().to_string(),
                found: beta.len().to_string(),
            });
        }
        if let Some((index, value)) = beta.iter().enumerate().find(|(_, b)| b.abs() > 1.0 || b.is_nan()) {
            return Err(SetError::Coefficient { index, value: *value });
        }
        Ok(&self.center + &self.generators * beta)
    }

    /// Exact simplification: every generator with at most one nonzero entry
    /// is folded into a single generator per axis. Remaining generators keep
    /// their order; the `d` axis generators (zero radius included) follow.
    pub fn merge_axis_aligned(&self) -> Self {
        let d = self.dim();
        let mut radius = DVector::zeros(d);
        let mut dense = Vec::new();
        for (j, g) in self.generators.column_iter().enumerate() {
            let mut nz = g.iter().enumerate().filter(|(_, v)| **v != 0.0);
            match (nz.next(), nz.next()) {
                (None, _) => {}
                (Some((i, v)), None) => radius[i] += v.abs(),
                _ => dense.push(j),
            }
        }
        let mut gens = DMatrix::zeros(d, dense.len() + d);
        for (slot, &j) in dense.iter().enumerate() {
            gens.set_column(slot, &self.generators.column(j));
        }
        for i in 0..d {
            gens[(i, dense.len() + i)] = radius[i];
        }
        Self {
            center: self.center.clone(),
            generators: gens,
        }
    }

    /// Order reduction: keep the `(order-1)·d` longest generators verbatim (in
    /// their original relative order) and box the remainder into `d`
    /// axis-aligned generators appended at the end.
    pub fn reduce(&self, max_order: usize) -> Result<Self, SetError> {
        if max_order == 0 {
            return Err(SetError::Order);
        }
        let d = self.dim();
        let budget = max_order * d;
        if self.num_generators() <= budget {
            return Ok(self.clone());
        }
        let norms: Vec<f64> = self.generators.column_iter().map(|g| g.norm()).collect();
        let keep = select_largest(&norms, (max_order - 1) * d);
        let mut kept_flags = vec![false; norms.len()];
        for &k in &keep {
            kept_flags[k] = true;
        }
        let mut radius = DVector::zeros(d);
        for (j, g) in self.generators.column_iter().enumerate() {
            if !kept_flags[j] {
                for (ri, gi) in radius.iter_mut().zip(g.iter()) {
                    *ri += gi.abs();
                }
            }
        }
        let mut gens = DMatrix::zeros(d, keep.len() + d);
        for (slot, &k) in keep.iter().enumerate() {
            gens.set_column(slot, &self.generators.column(k));
        }
        for i in 0..d {
            gens[(i, keep.len() + i)] = radius[i];
        }
        Ok(Self {
            center: self.center.clone(),
            generators: gens,
        })
    }

    pub fn to_json(&self) -> ZonotopeJson {
        ZonotopeJson {
            dim: self.dim(),
            center: self.center.iter().copied().collect(),
            generators: self
                .generators
                .column_iter()
                .map(|g| g.iter().copied().collect())
                .collect(),
        }
    }

    pub fn from_json(j: &ZonotopeJson) -> Result<Self, SetError> {
        if j.center.len() != j.dim {
            return Err(SetError::Malformed(format!(
                "center has {} entries, dim is {}",
                j.center.len(),
                j.dim
            )));
        }
        let gens: Vec<DVector<f64>> = j.generators.iter().map(|g| DVector::from_vec(g.clone())).collect();
        Self::from_generator_list(DVector::from_vec(j.center.clone()), &gens)
    }
}

/// Indices of the `k` largest entries, ties broken by lower index, returned in
/// ascending index order.
pub(crate) fn select_largest(values: &[f64], k: usize) -> Vec<usize> {
    if k >= values.len() {
        return (0..values.len()).collect();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = idx[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// `{C + Σ β_j G_j : β ∈ [-1, 1]^γ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixZonotope {
    center: DMatrix<f64>,
    generators: Vec<DMatrix<f64>>,
}

impl MatrixZonotope {
    pub fn new(center: DMatrix<f64>, generators: Vec<DMatrix<f64>>) -> Result<Self, SetError> {
        if let Some(bad) = generators.iter().find(|g| g.shape() != center.shape()) {
            return Err(SetError::Dimension {
                op: "matrix_zonotope",
                expected: shape(center.nrows(), center.ncols()),
                found: shape(bad.nrows(), bad.ncols()),
            });
        }
        Ok(Self { center, generators })
    }

    pub fn point(center: DMatrix<f64>) -> Self {
        Self {
            center,
            generators: Vec::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.center.shape()
    }

    pub fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    pub fn generators(&self) -> &[DMatrix<f64>] {
        &self.generators
    }

    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn sample(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>, SetError> {
        if beta.len() != self.num_generators() {
            return Err(SetError::Dimension {
                op: "matrix_sample",
                expected: self.num_generators().to_string(),
                found: beta.len().to_string(),
            });
        }
        if let Some((index, value)) = beta.iter().enumerate().find(|(_, b)| b.abs() > 1.0 || b.is_nan()) {
            return Err(SetError::Coefficient { index, value: *value });
        }
        let mut m = self.center.clone();
        for (g, b) in self.generators.iter().zip(beta.iter()) {
            m += g * *b;
        }
        Ok(m)
    }

    /// Element-wise interval hull as `(lower, upper)` matrices.
    pub fn interval_hull(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut r = DMatrix::zeros(self.center.nrows(), self.center.ncols());
        for g in &self.generators {
            r += g.abs();
        }
        (&self.center - &r, &self.center + &r)
    }

    /// Image of a zonotope under every matrix in the set. Generator order:
    /// `C·g_i` for all i, then `G_j·c` for all j, then `G_j·g_i` (j outer).
    pub fn map(&self, z: &Zonotope) -> Result<Zonotope, SetError> {
        if self.center.ncols() != z.dim() {
            return Err(SetError::Dimension {
                op: "matzono_map",
                expected: format!("{} columns", z.dim()),
                found: format!("{} columns", self.center.ncols()),
            });
        }
        let n = self.center.nrows();
        let gz = z.num_generators();
        let gm = self.num_generators();
        let total = gz + gm + gm * gz;
        let mut gens = DMatrix::zeros(n, total);
        gens.columns_mut(0, gz).copy_from(&(&self.center * &z.generators));
        let mut cg = DMatrix::zeros(z.dim(), 1 + gz);
        cg.set_column(0, &z.center);
        cg.columns_mut(1, gz).copy_from(&z.generators);
        for (j, g) in self.generators.iter().enumerate() {
            let prod = g * &cg;
            gens.set_column(gz + j, &prod.column(0));
            gens.columns_mut(gz + gm + j * gz, gz).copy_from(&prod.columns(1, gz));
        }
        Ok(Zonotope {
            center: &self.center * &z.center,
            generators: gens,
        })
    }

    /// Order reduction in vectorized form: the largest generators by Frobenius
    /// norm are kept verbatim and the rest are boxed along the principal axes
    /// of the boxed family, computed separately for each group of entries
    /// that share generator support (so row-structured sets stay row-structured). A box needs up to `rows·cols` generators, so the
    /// result holds `max(max_gens, rank of boxed family)` at most.
    pub fn reduce(&self, max_gens: usize) -> Result<Self, SetError> {
        self.reduce_with(max_gens, BoxBasis::Principal)
    }

    pub fn reduce_with(&self, max_gens: usize, basis: BoxBasis) -> Result<Self, SetError> {
        if max_gens == 0 {
            return Err(SetError::Order);
        }
        if self.num_generators() <= max_gens {
            return Ok(self.clone());
        }
        let (n, m) = self.shape();
        let dim = n * m;
        let norms: Vec<f64> = self.generators.iter().map(|g| g.norm()).collect();
        let keep_count = max_gens.saturating_sub(dim);
        let keep = select_largest(&norms, keep_count);
        let mut kept_flags = vec![false; norms.len()];
        for &k in &keep {
            kept_flags[k] = true;
        }
        let boxed: Vec<&DMatrix<f64>> = self
            .generators
            .iter()
            .enumerate()
            .filter(|(j, _)| !kept_flags[*j])
            .map(|(_, g)| g)
            .collect();
        let mut out: Vec<DMatrix<f64>> = keep.iter().map(|&k| self.generators[k].clone()).collect();
        match basis {
            BoxBasis::Axis => {
                let mut r = DMatrix::zeros(n, m);
                for g in &boxed {
                    r += g.abs();
                }
                for j in 0..m {
                    for i in 0..n {
                        if r[(i, j)] != 0.0 {
                            let mut e = DMatrix::zeros(n, m);
                            e[(i, j)] = r[(i, j)];
                            out.push(e);
                        }
                    }
                }
            }
            BoxBasis::Principal => {
                let mut gv = DMatrix::zeros(dim, boxed.len());
                for (k, g) in boxed.iter().enumerate() {
                    gv.set_column(k, &DVector::from_column_slice(g.as_slice()));
                }
                for block in support_blocks(&gv) {
                    let sub = gv.select_rows(block.iter());
                    let eig = SymmetricEigen::new(&sub * sub.transpose());
                    let mut order: Vec<usize> = (0..block.len()).collect();
                    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
                    for &l in &order {
                        let p = eig.eigenvectors.column(l);
                        let radius: f64 = (p.transpose() * &sub).iter().map(|v| v.abs()).sum();
                        if radius > 0.0 {
                            let mut e = DMatrix::zeros(n, m);
                            for (q, &idx) in block.iter().enumerate() {
                                e.as_mut_slice()[idx] = p[q] * radius;
                            }
                            out.push(e);
                        }
                    }
                }
            }
        }
        Ok(Self {
            center: self.center.clone(),
            generators: out,
        })
    }

    pub fn to_json(&self) -> MatrixZonotopeJson {
        MatrixZonotopeJson {
            shape: [self.center.nrows(), self.center.ncols()],
            center: rows_of(&self.center),
            generators: self.generators.iter().map(rows_of).collect(),
        }
    }

    pub fn from_json(j: &MatrixZonotopeJson) -> Result<Self, SetError> {
        let center = matrix_from_rows(&j.center, j.shape)?;
        let gens = j
            .generators
            .iter()
            .map(|g| matrix_from_rows(g, j.shape))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(center, gens)
    }
}

/// Partition of the coordinates (rows of `gv`) into connected groups, where
/// two coordinates are linked when some column is nonzero in both. Groups are
/// ordered by smallest member; coordinates never touched are dropped.
fn support_blocks(gv: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let dim = gv.nrows();
    let mut parent: Vec<usize> = (0..dim).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut used = vec![false; dim];
    for col in gv.column_iter() {
        let mut first = None;
        for (i, v) in col.iter().enumerate() {
            if *v != 0.0 {
                used[i] = true;
                match first {
                    None => first = Some(i),
                    Some(f) => {
                        let (a, b) = (find(&mut parent, f), find(&mut parent, i));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut root_of = vec![usize::MAX; dim];
    for i in 0..dim {
        if !used[i] {
            continue;
        }
        let r = find(&mut parent, i);
        if root_of[r] == usize::MAX {
            root_of[r] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[root_of[r]].push(i);
    }
    blocks
}

/// Coordinate frame used when boxing matrix-zonotope generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxBasis {
    Axis,
    Principal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonotopeJson {
    pub dim: usize,
    pub center: Vec<f64>,
    pub generators: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixZonotopeJson {
    pub shape: [usize; 2],
    pub center: Vec<Vec<f64>>,
    pub generators: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], shape: [usize; 2]) -> Result<DMatrix<f64>, SetError> {
    if rows.len() != shape[0] || rows.iter().any(|r| r.len() != shape[1]) {
        return Err(SetError::Malformed(format!(
            "expected {}x{} row-major matrix",
            shape[0], shape[1]
        )));
    }
    Ok(DMatrix::from_fn(shape[0], shape[1], |i, j| rows[i][j]))
}
