//! Dense numerical core: thin SVD, PCA, orthonormal bases and projectors,
//! principal-angle similarity, weighted ridge regression, and fit metrics.

use base64::Engine as _;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Relative cutoff below which singular values count as zero.
pub const RANK_TOL: f64 = 1e-10;

pub struct Svd {
    /// n×m, m = min(rows, cols).
    pub u: DMatrix<f64>,
    /// Non-increasing.
    pub s: DVector<f64>,
    /// cols×m.
    pub v: DMatrix<f64>,
}

/// Thin SVD with singular values sorted in non-increasing order.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<Svd> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Err(Error::InvalidInput("SVD of an empty matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in SVD input".into()));
    }
    let fm = faer::Mat::<f64>::from_fn(r, c, |i, j| m[(i, j)]);
    let svd = fm
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let k = r.min(c);
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| fs[b].total_cmp(&fs[a]));
    let u = DMatrix::from_fn(r, k, |i, j| fu[(i, order[j])]);
    let v = DMatrix::from_fn(c, k, |i, j| fv[(i, order[j])]);
    let s = DVector::from_fn(k, |j, _| fs[order[j]]);
    Ok(Svd { u, s, v })
}

fn numerical_rank(s: &DVector<f64>) -> usize {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v >= RANK_TOL * smax).count()
}

/// Flips `v` so its largest-magnitude entry is positive. Ties go to the
/// first index.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// k×D, rows orthonormal.
    pub components: DMatrix<f64>,
    /// Per-component sample variance, non-increasing.
    pub explained_variance: DVector<f64>,
    /// Sum of all per-feature sample variances.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn fit(rows: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, d) = rows.shape();
        if k == 0 || k > d {
            return Err(Error::InvalidInput(format!(
                "PCA dimension {k} must lie in 1..={d}"
            )));
        }
        if n <= k {
            return Err(Error::InvalidInput(format!(
                "PCA with {k} components needs more than {k} rows, got {n}"
            )));
        }
        let mean = rows.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| rows[(i, j)] - mean[j]);
        let svd = thin_svd(&centered)?;
        let rank = numerical_rank(&svd.s);
        if rank < k {
            return Err(Error::RankDeficient { needed: k, rank });
        }
        let mut components = DMatrix::zeros(k, d);
        for c in 0..k {
            let mut v: Vec<f64> = svd.v.column(c).iter().copied().collect();
            fix_sign(&mut v);
            components.row_mut(c).copy_from_slice(&v);
        }
        let denom = (n - 1) as f64;
        let explained_variance = DVector::from_fn(k, |c, _| svd.s[c] * svd.s[c] / denom);
        let total_variance = svd.s.iter().map(|s| s * s).sum::<f64>() / denom;
        Ok(Self {
            mean,
            components,
            explained_variance,
            total_variance,
        })
    }

    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn explained_ratio(&self) -> DVector<f64> {
        if self.total_variance == 0.0 {
            return DVector::zeros(self.k());
        }
        &self.explained_variance / self.total_variance
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(self.dim(), x.len())?;
        Ok(&self.components * (x - &self.mean))
    }

    pub fn lift(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(self.k(), z.len())?;
        Ok(self.components.tr_mul(z) + &self.mean)
    }

    /// Maps a direction in component coordinates to ambient space (no mean).
    pub fn lift_direction(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(self.k(), z.len())?;
        Ok(self.components.tr_mul(z))
    }

    /// Row-wise projection of an n×D matrix to n×k.
    pub fn project_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_dim(self.dim(), rows.ncols())?;
        let mut centered = rows.clone();
        for mut r in centered.row_iter_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v -= self.mean[j];
            }
        }
        Ok(centered * self.components.transpose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Probe,
    Random,
    PcaCot,
    PcaNodes,
    Full,
    None,
    Planted,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Probe => "probe",
            Self::Random => "random",
            Self::PcaCot => "pca-cot",
            Self::PcaNodes => "pca-nodes",
            Self::Full => "full",
            Self::None => "none",
            Self::Planted => "planted",
        };
        f.write_str(s)
    }
}

/// Column-orthonormal D×r matrix. Only [`Basis::none`] has rank 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    matrix: DMatrix<f64>,
    provenance: Provenance,
}

impl Basis {
    /// Wraps a matrix already known to be column-orthonormal.
    pub fn from_orthonormal(matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        let gram = matrix.tr_mul(&matrix);
        let err = (&gram - DMatrix::identity(gram.nrows(), gram.ncols())).amax();
        if err > 1e-6 {
            return Err(Error::Numerical(format!(
                "basis columns are not orthonormal (max Gram error {err:.2e})"
            )));
        }
        Ok(Self { matrix, provenance })
    }

    pub fn none(dim: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(dim, 0),
            provenance: Provenance::None,
        }
    }

    pub fn full(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            provenance: Provenance::Full,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn rank(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Orthogonal projection `H Hᵀ x`.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim(self.dim(), x.len())?;
        Ok(&self.matrix * self.matrix.tr_mul(x))
    }
}

/// Orthonormal basis of the column span via SVD. Directions with singular
/// value below `RANK_TOL · σ_max` are dropped; the kept rank is
/// `Basis::rank`.
pub fn orthonormalize(cols: &DMatrix<f64>, provenance: Provenance) -> Result<Basis> {
    if cols.ncols() == 0 {
        return Err(Error::InvalidInput("no columns to orthonormalize".into()));
    }
    let svd = thin_svd(cols)?;
    let rank = numerical_rank(&svd.s);
    if rank == 0 {
        return Err(Error::RankDeficient { needed: 1, rank: 0 });
    }
    let mut m = DMatrix::zeros(cols.nrows(), rank);
    for c in 0..rank {
        let mut v: Vec<f64> = svd.u.column(c).iter().copied().collect();
        fix_sign(&mut v);
        m.column_mut(c).copy_from_slice(&v);
    }
    Ok(Basis {
        matrix: m,
        provenance,
    })
}

/// `x − H(Hᵀx)`.
pub fn ablate_vector(x: &DVector<f64>, h: &Basis) -> Result<DVector<f64>> {
    Ok(x - h.project(x)?)
}

/// Row-wise ablation of an n×D matrix.
pub fn ablate_rows(rows: &DMatrix<f64>, h: &Basis) -> Result<DMatrix<f64>> {
    ensure_dim(h.dim(), rows.ncols())?;
    if h.rank() == 0 {
        return Ok(rows.clone());
    }
    let coef = rows * &h.matrix;
    Ok(rows - coef * h.matrix.transpose())
}

/// Mean of the cosines of the principal angles between two subspaces.
pub fn subspace_similarity(a: &Basis, b: &Basis) -> Result<f64> {
    ensure_dim(a.dim(), b.dim())?;
    let m = a.rank().min(b.rank());
    if m == 0 {
        return Err(Error::InvalidInput(
            "similarity is undefined for a rank-0 basis".into(),
        ));
    }
    let s = principal_cosines(a, b)?;
    Ok(s.iter().take(m).sum::<f64>() / m as f64)
}

/// Cosines of principal angles, non-increasing, clamped to [0, 1].
pub fn principal_cosines(a: &Basis, b: &Basis) -> Result<Vec<f64>> {
    ensure_dim(a.dim(), b.dim())?;
    let prod = a.matrix.tr_mul(&b.matrix);
    let mut s: Vec<f64> = prod
        .singular_values()
        .iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub w: DVector<f64>,
    pub b: f64,
}

impl RidgeFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.w + DVector::from_element(x.nrows(), self.b)
    }
}

/// Minimizes `Σ wᵢ (w·xᵢ + b − yᵢ)² + λ‖w‖²` with an unpenalized intercept.
///
/// Sample weights are rescaled to mean 1 first, so only their relative sizes
/// matter and `λ` keeps the same meaning for any weight scale.
pub fn ridge_solve(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    weights: Option<&DVector<f64>>,
) -> Result<RidgeFit> {
    let (n, d) = x.shape();
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("ridge lambda must be > 0, got {lambda}")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("ridge regression with no rows".into()));
    }
    ensure_dim(n, y.len())?;
    let wts = normalized_weights(n, weights)?;
    let xbar = DVector::from_fn(d, |j, _| (0..n).map(|i| wts[i] * x[(i, j)]).sum::<f64>() / n as f64);
    let ybar = (0..n).map(|i| wts[i] * y[i]).sum::<f64>() / n as f64;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut xc = DVector::<f64>::zeros(d);
    for i in 0..n {
        for j in 0..d {
            xc[j] = x[(i, j)] - xbar[j];
        }
        let yc = y[i] - ybar;
        a.ger(wts[i], &xc, &xc, 1.0);
        rhs.axpy(wts[i] * yc, &xc, 1.0);
    }
    for j in 0..d {
        a[(j, j)] += lambda;
    }
    let w = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge normal equations are not positive definite".into()))?
        .solve(&rhs);
    let b = ybar - w.dot(&xbar);
    Ok(RidgeFit { w, b })
}

fn normalized_weights(n: usize, weights: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    match weights {
        None => Ok(DVector::from_element(n, 1.0)),
        Some(w) => {
            ensure_dim(n, w.len())?;
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
            }
            let mean = w.sum() / n as f64;
            if mean <= 0.0 {
                return Err(Error::InvalidInput("weights sum to zero".into()));
            }
            Ok(w / mean)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub pearson: f64,
    /// False when either side is constant; `pearson` is then reported as 0.
    pub pearson_defined: bool,
    pub n: usize,
}

/// Weighted mean squared error and unweighted Pearson correlation.
pub fn metrics(pred: &[f64], target: &[f64], weights: Option<&[f64]>) -> Result<Metrics> {
    ensure_dim(target.len(), pred.len())?;
    let n = pred.len();
    if n == 0 {
        return Err(Error::InvalidInput("metrics over zero samples".into()));
    }
    let mse = match weights {
        Some(w) => {
            ensure_dim(n, w.len())?;
            let tw: f64 = w.iter().sum();
            if tw <= 0.0 {
                return Err(Error::InvalidInput("weights sum to zero".into()));
            }
            pred.iter()
                .zip(target)
                .zip(w)
                .map(|((p, t), w)| w * (p - t) * (p - t))
                .sum::<f64>()
                / tw
        }
        None => pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64,
    };
    let (pearson, defined) = pearson(pred, target);
    Ok(Metrics {
        mse,
        pearson,
        pearson_defined: defined,
        n,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len();
    if n < 2 {
        return (0.0, false);
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale_a = ma.abs().max(1.0);
    let scale_b = mb.abs().max(1.0);
    let tol = 1e-24 * n as f64;
    if saa <= tol * scale_a * scale_a || sbb <= tol * scale_b * scale_b {
        return (0.0, false);
    }
    ((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0), true)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a.norm() * b.norm();
    if d == 0.0 {
        0.0
    } else {
        a.dot(b) / d
    }
}

/// Matrix persisted as `{shape, data}` with `data` the base64 of its
/// row-major little-endian f64 entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMatrix {
    pub shape: [usize; 2],
    pub data: String,
}

impl From<&DMatrix<f64>> for StoredMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut bytes = Vec::with_capacity(r * c * 8);
        for i in 0..r {
            for j in 0..c {
                bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        Self {
            shape: [r, c],
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }
}

impl StoredMatrix {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::DataIntegrity(format!("matrix payload is not base64: {e}")))?;
        let [r, c] = self.shape;
        if bytes.len() != r * c * 8 {
            return Err(Error::DataIntegrity(format!(
                "matrix payload has {} bytes, shape {r}x{c} needs {}",
                bytes.len(),
                r * c * 8
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(DMatrix::from_row_slice(r, c, &vals))
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self::from(&DMatrix::from_column_slice(1, v.len(), v.as_slice()))
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        let m = self.to_matrix()?;
        Ok(DVector::from_iterator(m.len(), m.transpose().iter().copied()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFile {
    #[serde(flatten)]
    pub matrix: StoredMatrix,
    pub provenance: Provenance,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl BasisFile {
    pub fn new(basis: &Basis, metadata: serde_json::Value) -> Self {
        Self {
            matrix: StoredMatrix::from(basis.matrix()),
            provenance: basis.provenance(),
            metadata,
        }
    }

    pub fn to_basis(&self) -> Result<Basis> {
        let m = self.matrix.to_matrix()?;
        if m.ncols() == 0 {
            return Ok(Basis::none(m.nrows()));
        }
        Basis::from_orthonormal(m, self.provenance)
            .map_err(|e| Error::DataIntegrity(format!("stored basis: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaFile {
    pub mean: StoredMatrix,
    pub components: StoredMatrix,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl PcaFile {
    pub fn new(m: &PcaModel, metadata: serde_json::Value) -> Self {
        Self {
            mean: StoredMatrix::from_vector(&m.mean),
            components: StoredMatrix::from(&m.components),
            explained_variance: m.explained_variance.iter().copied().collect(),
            total_variance: m.total_variance,
            metadata,
        }
    }

    pub fn to_model(&self) -> Result<PcaModel> {
        let mean = self.mean.to_vector()?;
        let components = self.components.to_matrix()?;
        ensure_dim(mean.len(), components.ncols())?;
        ensure_dim(components.nrows(), self.explained_variance.len())?;
        Ok(PcaModel {
            mean,
            components,
            explained_variance: DVector::from_vec(self.explained_variance.clone()),
            total_variance: self.total_variance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn plane_data_explains_everything() {
        let rows = DMatrix::from_fn(20, 3, |i, j| {
            let (a, b) = ((i as f64).sin(), (i as f64 * 0.7).cos());
            [a + b, a - b, 2.0 * a][j]
        });
        let p = PcaModel::fit(&rows, 2).unwrap();
        assert_abs_diff_eq!(p.explained_ratio().sum(), 1.0, epsilon = 1e-9);
        assert!(matches!(
            PcaModel::fit(&rows, 3),
            Err(Error::RankDeficient { needed: 3, rank: 2 })
        ));
    }

    #[test]
    fn project_lift() {
        let rows = DMatrix::from_fn(30, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 + j as f64);
        let p = PcaModel::fit(&rows, 2).unwrap();
        assert_abs_diff_eq!(p.project(&p.mean).unwrap().norm(), 0.0, epsilon = 1e-12);
        let x = p.lift(&DVector::from_vec(vec![1.5, -0.5])).unwrap();
        assert_abs_diff_eq!(p.lift(&p.project(&x).unwrap()).unwrap(), x, epsilon = 1e-9);
        assert!(p.project(&DVector::zeros(3)).is_err());
        let gram = &p.components * p.components.transpose();
        assert_abs_diff_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-9);
        for c in 0..2 {
            let r = p.components.row(c);
            let big = r.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn duplicated_column_drops_rank() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 1.0, 0.0, 0.0, 3.0]);
        assert_eq!(orthonormalize(&m, Provenance::Random).unwrap().rank(), 2);
        assert!(orthonormalize(&DMatrix::zeros(3, 2), Provenance::Random).is_err());
    }

    #[test]
    fn ablation_basics() {
        let e1 = Basis::from_orthonormal(DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]), Provenance::Random).unwrap();
        let x = DVector::from_vec(vec![3.0, 4.0, 5.0]);
        assert_eq!(ablate_vector(&x, &e1).unwrap(), DVector::from_vec(vec![0.0, 4.0, 5.0]));
        assert_eq!(ablate_vector(&x, &Basis::full(3)).unwrap(), DVector::zeros(3));
        assert_eq!(ablate_vector(&x, &Basis::none(3)).unwrap(), x);
    }

    #[test]
    fn similarity_45_degrees() {
        let a = Basis::from_orthonormal(
            DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            Provenance::Random,
        )
        .unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = Basis::from_orthonormal(
            DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, h, h]),
            Provenance::Random,
        )
        .unwrap();
        assert_abs_diff_eq!(subspace_similarity(&a, &b).unwrap(), (1.0 + h) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(subspace_similarity(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let c = Basis::from_orthonormal(DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]), Provenance::Random).unwrap();
        assert_abs_diff_eq!(subspace_similarity(&a, &c).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ridge_one_dimensional_closed_form() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = ridge_solve(&x, &y, 0.01, None).unwrap();
        // Centered x and y are both [-1, 0, 1].
        assert_abs_diff_eq!(fit.w[0], 2.0 / 2.01, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.b, 2.0 - 2.0 * 2.0 / 2.01, epsilon = 1e-12);
        assert!(ridge_solve(&x, &y, 0.0, None).is_err());
    }

    #[test]
    fn ridge_weight_scale_invariant() {
        let x = DMatrix::from_fn(8, 2, |i, j| ((i * 3 + j * 5) % 7) as f64);
        let y = DVector::from_fn(8, |i, _| (i as f64).sqrt());
        let w = DVector::from_fn(8, |i, _| 1.0 + i as f64);
        let a = ridge_solve(&x, &y, 0.01, Some(&w)).unwrap();
        let b = ridge_solve(&x, &y, 0.01, Some(&(&w * 2.0))).unwrap();
        assert_abs_diff_eq!(a.w, b.w, epsilon = 1e-9);
        assert_abs_diff_eq!(a.b, b.b, epsilon = 1e-9);
    }

    #[test]
    fn ridge_recovers_exact_linear() {
        let x = DMatrix::from_fn(10, 3, |i, j| ((i * 7 + j * 13) % 10) as f64 - 4.5 + (i * j) as f64 * 0.1);
        let w = DVector::from_vec(vec![0.5, -2.0, 1.25]);
        let y = &x * &w + DVector::from_element(10, 3.0);
        let fit = ridge_solve(&x, &y, 1e-12, None).unwrap();
        assert_abs_diff_eq!(fit.w, w, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.b, 3.0, epsilon = 1e-6);
    }

    #[test]
    fn metric_examples() {
        let t = [1.0, 2.0, 4.0, 8.0];
        let m = metrics(&t, &t, None).unwrap();
        assert_eq!((m.mse, m.pearson, m.pearson_defined), (0.0, 1.0, true));
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(metrics(&neg, &t, None).unwrap().pearson, -1.0, epsilon = 1e-12);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        let m = metrics(&shifted, &t, None).unwrap();
        assert_abs_diff_eq!(m.mse, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m.pearson, 1.0, epsilon = 1e-12);
        let m = metrics(&[1.0; 4], &t, None).unwrap();
        assert!(!m.pearson_defined && m.pearson == 0.0);
        assert!(metrics(&t[..3], &t, None).is_err());
    }

    #[test]
    fn stored_matrix_round_trip() {
        let m = DMatrix::from_fn(3, 4, |i, j| (i as f64 + 0.1) * (j as f64 - 1.7));
        let s = StoredMatrix::from(&m);
        assert_eq!(s.to_matrix().unwrap(), m);
        let v = DVector::from_vec(vec![1.0, -2.5, 3.25]);
        assert_eq!(StoredMatrix::from_vector(&v).to_vector().unwrap(), v);
        let bad = StoredMatrix { shape: [2, 2], data: s.data };
        assert!(bad.to_matrix().is_err());
    }
}
