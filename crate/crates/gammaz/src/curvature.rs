//! Curvature-dimension extraction from the assembled remainder forms.
//!
//! After the complete squares are split off, each decomposition leaves a
//! quadratic form in the gradient. Bounding that form below against
//! `Gamma1 + Gamma1^z` yields the constant `kappa` of the CD(kappa, d)
//! condition. This module sums the active remainder forms, rewrites them in
//! the frame coordinates `U = (a^T grad f, z^T grad f)`, extracts `kappa`
//! pointwise, and scans boxes into reports.

use std::error::Error;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::expr::{DomainError, Expression};
use crate::fields::Structure;
use crate::gamma::Weight;
use crate::real::Real;
use crate::tensor::{
    assemble, decomposition_residual, spectral_norm, AssembledPoint, Basis, Direction,
    LambdaSolution, Mode, QuadraticForm,
};

/// Relative cutoff below which a singular value of `W = [a^T; z^T]` counts
/// as zero, and the frame as row-deficient.
const RANK_CUTOFF: f64 = 1e-9;

/// Residual threshold used by scan summaries for "the Lambda system holds
/// here": the fraction of points whose symmetric defect stays below this.
pub const LAMBDA_RESIDUAL_TOL: f64 = 1e-8;

/// Failures specific to curvature extraction.
#[derive(Clone, Debug)]
pub enum CurvatureError {
    /// Field or expression evaluation failed at the point.
    Domain(DomainError),
    /// The stacked frame `W = [a^T; z^T]` lost row rank at the point, so no
    /// U-coordinate form exists there.
    RankDeficient { sigma_min: f64, sigma_max: f64 },
    /// A scan grid was inconsistent with itself or with the structure.
    Grid(String),
}

impl fmt::Display for CurvatureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurvatureError::Domain(e) => write!(f, "{e}"),
            CurvatureError::RankDeficient { sigma_min, sigma_max } => write!(
                f,
                "frame rows are rank deficient (sigma_min {sigma_min:.3e} vs sigma_max {sigma_max:.3e})"
            ),
            CurvatureError::Grid(msg) => write!(f, "invalid scan grid: {msg}"),
        }
    }
}

impl Error for CurvatureError {}

impl From<DomainError> for CurvatureError {
    fn from(e: DomainError) -> Self {
        CurvatureError::Domain(e)
    }
}

/// A quadratic form rewritten in the frame coordinates
/// `U = (a^T grad f, z^T grad f)`.
#[derive(Clone, Debug)]
pub struct UForm<R: Real> {
    /// Symmetric `(n + m) x (n + m)` coefficient matrix.
    pub matrix: DMatrix<R>,
    /// `‖M - W^T A W‖` in operator norm; zero when the form is supported on
    /// the row space of the frame.
    pub residual: R,
}

/// Sum of every remainder form active in `mode`, as a form in the gradient.
///
/// Horizontal mode keeps only the `a`-remainder; z modes add the
/// `z`-remainder; generalized mode adds the weight term; `drift` adds the
/// first-order corrections of the tilted generator.
pub fn total_ricci<R: Real>(
    structure: &Structure,
    x: &[R],
    mode: Mode,
    drift: bool,
    weight: &Weight,
) -> Result<QuadraticForm<R>, DomainError> {
    let ap = assemble(structure, x)?;
    let lam = ap.solve_lambda(mode);
    ricci_sum(&ap, &lam, structure, x, mode, drift, weight)
}

fn ricci_sum<R: Real>(
    ap: &AssembledPoint<R>,
    lam: &LambdaSolution<R>,
    structure: &Structure,
    x: &[R],
    mode: Mode,
    drift: bool,
    weight: &Weight,
) -> Result<QuadraticForm<R>, DomainError> {
    let with_z = mode != Mode::Horizontal && ap.m_z() > 0;
    let mut total = ap.ricci_a(lam);
    if with_z {
        total = total.add(&ap.ricci_z());
    }
    if mode == Mode::Generalized && ap.m_z() > 0 {
        let logw = weight.log_jet(structure, x, 1)?;
        total = total.add(&ap.ricci_psi_with(&logw));
    }
    if drift {
        total = total.add(&ap.drift_correction(Direction::A));
        if with_z {
            total = total.add(&ap.drift_correction(Direction::Z));
        }
    }
    Ok(total)
}

/// Rewrites a gradient-basis form as `W^T A W` with `W = [a^T; z^T]` by
/// least squares, reporting the unexplained remainder.
///
/// Errors with `RankDeficient` when `W` loses row rank at `x` (cutoff
/// `1e-9 sigma_max`); `kappa_at` then falls back to the pencil value.
pub fn to_u_form<R: Real>(
    structure: &Structure,
    x: &[R],
    m: &QuadraticForm<R>,
) -> Result<UForm<R>, CurvatureError> {
    assert_eq!(m.basis(), Basis::Gradient, "U-form conversion starts from the gradient basis");
    assert_eq!(m.dim(), structure.dim(), "form dimension must match the structure");
    let w = stacked_frame(structure, x)?;
    let rows = w.nrows();
    let svd = w.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(R::zero(), |acc, &s| acc.max(s));
    let sigma_min = svd.singular_values.iter().fold(sigma_max, |acc, &s| acc.min(s));
    let cutoff = sigma_max * R::of(RANK_CUTOFF);
    if rows > w.ncols() || sigma_min <= cutoff {
        return Err(CurvatureError::RankDeficient {
            sigma_min: num_traits::cast(sigma_min).unwrap_or(f64::NAN),
            sigma_max: num_traits::cast(sigma_max).unwrap_or(f64::NAN),
        });
    }
    let pinv = svd.pseudo_inverse(cutoff).expect("SVD of the frame was requested");
    let raw = pinv.transpose() * m.matrix() * &pinv;
    let a = QuadraticForm::symmetrized(raw, Basis::U);
    let residual = spectral_norm(&(m.matrix() - w.transpose() * a.matrix() * &w));
    Ok(UForm { matrix: a.matrix().clone(), residual })
}

/// `[a^T; z^T]` at `x`: one row per frame column, `n + m` rows in all.
fn stacked_frame<R: Real>(structure: &Structure, x: &[R]) -> Result<DMatrix<R>, DomainError> {
    let at = structure.a_matrix(x)?.transpose();
    let zt = structure.z_matrix(x)?.transpose();
    let d = structure.dim();
    let mut w = DMatrix::zeros(at.nrows() + zt.nrows(), d);
    w.view_mut((0, 0), (at.nrows(), d)).copy_from(&at);
    w.view_mut((at.nrows(), 0), (zt.nrows(), d)).copy_from(&zt);
    Ok(w)
}

/// Everything `scan` records about one point.
#[derive(Clone, Debug)]
pub struct KappaPoint<R: Real> {
    /// Largest constant with `total_ricci >= kappa (Gamma1 + Gamma1^z)`.
    pub kappa: R,
    /// Symmetric-defect norm of the Lambda solve behind the remainder forms.
    pub lambda_residual: R,
    /// U-form factorization residual; zero on the pencil fallback path.
    pub factorization_residual: R,
    /// True when the frame lost row rank and the pencil fallback produced
    /// `kappa`.
    pub rank_fallback: bool,
}

/// Lower CD constant at one point, with the residuals that certify it.
pub fn kappa_detail<R: Real>(
    structure: &Structure,
    x: &[R],
    mode: Mode,
    drift: bool,
    weight: &Weight,
) -> Result<KappaPoint<R>, DomainError> {
    let ap = assemble(structure, x)?;
    let lam = ap.solve_lambda(mode);
    let total = ricci_sum(&ap, &lam, structure, x, mode, drift, weight)?;
    match to_u_form(structure, x, &total) {
        Ok(u) => Ok(KappaPoint {
            kappa: min_eigenvalue(&u.matrix),
            lambda_residual: lam.residual,
            factorization_residual: u.residual,
            rank_fallback: false,
        }),
        Err(CurvatureError::RankDeficient { .. }) => {
            let gram = &ap.gram_a + &ap.gram_z;
            Ok(KappaPoint {
                kappa: pencil_kappa(total.matrix(), &gram),
                lambda_residual: lam.residual,
                factorization_residual: R::zero(),
                rank_fallback: true,
            })
        }
        Err(CurvatureError::Domain(e)) => Err(e),
        Err(CurvatureError::Grid(msg)) => unreachable!("no grid in pointwise kappa: {msg}"),
    }
}

/// Largest `kappa` with `total_ricci >= kappa (Gamma1 + Gamma1^z)` at `x`.
pub fn kappa_at<R: Real>(
    structure: &Structure,
    x: &[R],
    mode: Mode,
    drift: bool,
    weight: &Weight,
) -> Result<R, DomainError> {
    Ok(kappa_detail(structure, x, mode, drift, weight)?.kappa)
}

/// Smallest generalized eigenvalue of `(m, gram)` on the range of `gram`,
/// or negative infinity when `m` takes a negative value on its kernel.
fn pencil_kappa<R: Real>(m: &DMatrix<R>, gram: &DMatrix<R>) -> R {
    let eig = SymmetricEigen::new(gram.clone());
    let lam_max = eig.eigenvalues.iter().fold(R::zero(), |acc, &v| acc.max(v));
    // gram = W^T W, so the rank cutoff on singular values squares.
    let cutoff = lam_max * R::of(RANK_CUTOFF * RANK_CUTOFF);
    let d = gram.nrows();
    let range: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    let kernel: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] <= cutoff).collect();
    if !kernel.is_empty() {
        let k = from_columns(&eig.eigenvectors, &kernel);
        let mk = k.transpose() * m * &k;
        let floor = -R::of(1e-9) * (R::one() + spectral_norm(m));
        if min_eigenvalue(&mk) < floor {
            return R::of(f64::NEG_INFINITY);
        }
    }
    if range.is_empty() {
        return R::zero();
    }
    // Orthonormal eigenvectors diagonalize gram, so the congruence that
    // whitens it is a per-column scaling by 1/sqrt(eigenvalue).
    let mut v = from_columns(&eig.eigenvectors, &range);
    for (j, &i) in range.iter().enumerate() {
        let s = R::one() / eig.eigenvalues[i].sqrt();
        v.column_mut(j).scale_mut(s);
    }
    min_eigenvalue(&(v.transpose() * m * &v))
}

fn from_columns<R: Real>(m: &DMatrix<R>, cols: &[usize]) -> DMatrix<R> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, j| m[(r, cols[j])])
}

fn min_eigenvalue<R: Real>(m: &DMatrix<R>) -> R {
    let sym = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        (m[(r, c)] + m[(c, r)]) / R::of(2.0)
    });
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(R::of(f64::INFINITY), |acc, &v| acc.min(v))
}

/// Dimension candidates for the CD(kappa, d) report.
///
/// The trace argument over the diagonal squares gives `1/d_diag`; counting
/// every complete square in the Hessian-square expansion gives `1/d_all`.
/// The two disagree already for the Grushin plane, so both are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdDimension {
    /// Number of nonvanishing diagonal rows `(i, i)` of Q.
    pub d_diag: usize,
    /// Number of nonvanishing rows of Q, plus those of P in z modes.
    pub d_all: usize,
}

/// Counts the complete squares available at `x` for the mode solved in
/// `lam`. Rows vanishing at the point (relative to the largest row) do not
/// count.
pub fn cd_dimension<R: Real>(
    structure: &Structure,
    x: &[R],
    lam: &LambdaSolution<R>,
) -> Result<CdDimension, DomainError> {
    let ap = assemble(structure, x)?;
    let n = ap.n_a();
    let q_norms: Vec<R> = row_norms(&ap.q);
    let p_norms: Vec<R> = if lam.mode != Mode::Horizontal { row_norms(&ap.p) } else { Vec::new() };
    let largest = q_norms
        .iter()
        .chain(p_norms.iter())
        .fold(R::zero(), |acc, &v| acc.max(v));
    let cutoff = largest * R::of(1e-12);
    let live = |v: &R| *v > cutoff;
    let d_diag = (0..n).filter(|&i| live(&q_norms[i * n + i])).count();
    let d_all = q_norms.iter().filter(|v| live(v)).count()
        + p_norms.iter().filter(|v| live(v)).count();
    Ok(CdDimension { d_diag, d_all })
}

fn row_norms<R: Real>(m: &DMatrix<R>) -> Vec<R> {
    (0..m.nrows()).map(|r| m.row(r).iter().fold(R::zero(), |acc, &v| acc + v * v).sqrt()).collect()
}

/// Axis-aligned box sampled on a regular grid, `resolution[i]` points per
/// axis (endpoints included; a single point sits at the midpoint).
#[derive(Clone, Debug)]
pub struct BoxGrid<R: Real> {
    lo: Vec<R>,
    hi: Vec<R>,
    resolution: Vec<usize>,
}

impl<R: Real> BoxGrid<R> {
    pub fn new(lo: Vec<R>, hi: Vec<R>, resolution: Vec<usize>) -> Result<Self, CurvatureError> {
        if lo.len() != hi.len() || lo.len() != resolution.len() {
            return Err(CurvatureError::Grid(format!(
                "axis counts disagree: {} lows, {} highs, {} resolutions",
                lo.len(),
                hi.len(),
                resolution.len()
            )));
        }
        if lo.is_empty() {
            return Err(CurvatureError::Grid("grid needs at least one axis".into()));
        }
        for i in 0..lo.len() {
            if !(lo[i] <= hi[i]) {
                return Err(CurvatureError::Grid(format!("axis {i} has lo > hi")));
            }
            if resolution[i] == 0 {
                return Err(CurvatureError::Grid(format!("axis {i} has zero resolution")));
            }
        }
        Ok(BoxGrid { lo, hi, resolution })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn axis_value(&self, axis: usize, index: usize) -> R {
        let n = self.resolution[axis];
        if n == 1 {
            return (self.lo[axis] + self.hi[axis]) / R::of(2.0);
        }
        let t = R::of(index as f64) / R::of((n - 1) as f64);
        self.lo[axis] + (self.hi[axis] - self.lo[axis]) * t
    }

    /// All grid points in row-major order (last axis fastest).
    pub fn points(&self) -> Vec<Vec<R>> {
        let mut out = Vec::with_capacity(self.len());
        let mut index = vec![0usize; self.dim()];
        loop {
            out.push((0..self.dim()).map(|a| self.axis_value(a, index[a])).collect());
            let mut axis = self.dim();
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                index[axis] += 1;
                if index[axis] < self.resolution[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
    }
}

impl<R: Real> fmt::Display for BoxGrid<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.dim() {
            if i > 0 {
                write!(f, " x ")?;
            }
            write!(f, "[{}, {}]", self.lo[i], self.hi[i])?;
        }
        write!(f, " @ ")?;
        for (i, r) in self.resolution.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

/// One scanned grid point.
#[derive(Clone, Debug)]
pub struct PointRecord<R: Real> {
    pub x: Vec<R>,
    pub kappa: R,
    pub lambda_residual: R,
    pub factorization_residual: R,
    /// Worst decomposition residual over the spot-check functions; zero
    /// when no spot checks ran.
    pub decomposition_spotcheck: R,
    pub rank_fallback: bool,
}

/// Aggregates of a scan.
#[derive(Clone, Debug)]
pub struct ScanSummary<R: Real> {
    /// Minimum kappa over the recorded points; infinite when all points
    /// were skipped.
    pub min_kappa: R,
    /// Grid point attaining the minimum; empty when all points skipped.
    pub argmin: Vec<R>,
    /// Fraction of recorded points with `lambda_residual <=` the module
    /// tolerance.
    pub lambda_ok_fraction: f64,
}

/// Result of scanning a box: one record per admissible grid point.
#[derive(Clone, Debug)]
pub struct CurvatureReport<R: Real> {
    pub mode: Mode,
    pub grid: BoxGrid<R>,
    pub records: Vec<PointRecord<R>>,
    /// Points where evaluation raised a domain error, with the message.
    pub skipped: Vec<(Vec<R>, String)>,
    pub summary: ScanSummary<R>,
    /// The residual threshold behind `lambda_ok_fraction`.
    pub lambda_tolerance: f64,
}

/// Scans `grid`, recording kappa and residuals per point and spot-checking
/// the decomposition with `spotcheck_fns` random polynomials per point.
/// Points that raise a domain error are skipped, never fatal.
pub fn scan<R: Real>(
    structure: &Structure,
    grid: &BoxGrid<R>,
    mode: Mode,
    drift: bool,
    weight: &Weight,
    spotcheck_fns: usize,
) -> Result<CurvatureReport<R>, CurvatureError> {
    if grid.dim() != structure.dim() {
        return Err(CurvatureError::Grid(format!(
            "grid has {} axes but the structure has {} variables",
            grid.dim(),
            structure.dim()
        )));
    }
    let vars: Vec<&str> = structure.variables().iter().map(|s| s.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca2_cd00);
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for x in grid.points() {
        match scan_point(structure, &x, mode, drift, weight, spotcheck_fns, &vars, &mut rng) {
            Ok(rec) => records.push(rec),
            Err(e) => skipped.push((x, e.to_string())),
        }
    }
    let mut min_kappa = R::of(f64::INFINITY);
    let mut argmin = Vec::new();
    let mut lambda_ok = 0usize;
    for rec in &records {
        if rec.kappa < min_kappa {
            min_kappa = rec.kappa;
            argmin = rec.x.clone();
        }
        if rec.lambda_residual <= R::of(LAMBDA_RESIDUAL_TOL) {
            lambda_ok += 1;
        }
    }
    let lambda_ok_fraction =
        if records.is_empty() { 0.0 } else { lambda_ok as f64 / records.len() as f64 };
    Ok(CurvatureReport {
        mode,
        grid: grid.clone(),
        records,
        skipped,
        summary: ScanSummary { min_kappa, argmin, lambda_ok_fraction },
        lambda_tolerance: LAMBDA_RESIDUAL_TOL,
    })
}

#[allow(clippy::too_many_arguments)]
fn scan_point<R: Real>(
    structure: &Structure,
    x: &[R],
    mode: Mode,
    drift: bool,
    weight: &Weight,
    spotcheck_fns: usize,
    vars: &[&str],
    rng: &mut ChaCha8Rng,
) -> Result<PointRecord<R>, DomainError> {
    let detail = kappa_detail(structure, x, mode, drift, weight)?;
    let mut worst = R::zero();
    for _ in 0..spotcheck_fns {
        let f = random_polynomial(vars, 4, rng);
        let check = decomposition_residual(structure, &f, x, mode, drift, weight)?;
        worst = worst.max(check.residual);
    }
    Ok(PointRecord {
        x: x.to_vec(),
        kappa: detail.kappa,
        lambda_residual: detail.lambda_residual,
        factorization_residual: detail.factorization_residual,
        decomposition_spotcheck: worst,
        rank_fallback: detail.rank_fallback,
    })
}

/// Random polynomial over `vars` of total degree at most `degree`, with
/// coefficients in `[-2, 2]`. Built as source text so it exercises the
/// same path as user input.
pub fn random_polynomial(vars: &[&str], degree: usize, rng: &mut impl Rng) -> Expression {
    assert!(!vars.is_empty(), "polynomial needs at least one variable");
    let terms = rng.gen_range(4..=8);
    let mut source = String::new();
    for t in 0..terms {
        let coeff: f64 = rng.gen_range(-2.0..2.0);
        if t > 0 {
            source.push_str(" + ");
        }
        source.push_str(&format!("({coeff})"));
        let total = rng.gen_range(0..=degree);
        let mut powers = vec![0usize; vars.len()];
        for _ in 0..total {
            powers[rng.gen_range(0..vars.len())] += 1;
        }
        for (v, &p) in vars.iter().zip(powers.iter()) {
            match p {
                0 => {}
                1 => source.push_str(&format!("*{v}")),
                _ => source.push_str(&format!("*{v}^{p}")),
            }
        }
    }
    Expression::parse(&source, vars).expect("generated polynomial source parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::builtin;
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn se2_u_form_at_origin() {
        // At the origin the quadratic potential has a critical point, the
        // remainder is purely geometric, and the minimum-norm Lambda gauge
        // leaves the U-form diagonal: diag(1 - beta^2, 1, 1/2).
        let s = builtin("se2", &params(&[("beta", 0.1)])).unwrap();
        let x = [0.0f64, 0.0, 0.0];
        let total = total_ricci(&s, &x, Mode::Generalized, true, &Weight::VolEff).unwrap();
        let u = to_u_form(&s, &x, &total).unwrap();
        let beta: f64 = 0.1;
        let want = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0 - beta * beta,
                0.0,
                0.0,
                0.0,
                1.0,
                0.0,
                0.0,
                0.0,
                0.5,
            ],
        );
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (u.matrix[(r, c)] - want[(r, c)]).abs() < 1e-9,
                    "A[{r}{c}] = {} want {}",
                    u.matrix[(r, c)],
                    want[(r, c)]
                );
            }
        }
        assert!(u.residual < 1e-10, "factorization residual {}", u.residual);
        let kappa = kappa_at(&s, &x, Mode::Generalized, true, &Weight::VolEff).unwrap();
        assert!((kappa - 0.5).abs() < 1e-9, "kappa {kappa}");
    }

    #[test]
    fn grushin_u_form_and_kappa() {
        for (k, x0) in [(1.0, 1.0), (1.0, 0.7), (2.0, 0.8), (3.0, 1.3)] {
            let s = builtin("grushin", &params(&[("k", k)])).unwrap();
            let x = [x0, 0.3];
            let total = total_ricci(&s, &x, Mode::Horizontal, false, &Weight::Vol).unwrap();
            let u = to_u_form(&s, &x, &total).unwrap();
            let want_kappa = -(2.0 * k * k + k) / (x0 * x0);
            assert!((u.matrix[(0, 0)] - (-k * k / (x0 * x0))).abs() < 1e-9);
            assert!((u.matrix[(1, 1)] - want_kappa).abs() < 1e-9 * want_kappa.abs());
            assert!(u.matrix[(0, 1)].abs() < 1e-9);
            assert!(u.residual < 1e-9);
            let kappa = kappa_at(&s, &x, Mode::Horizontal, false, &Weight::Vol).unwrap();
            assert!(
                (kappa - want_kappa).abs() <= 1e-10 * want_kappa.abs(),
                "kappa {kappa} want {want_kappa}"
            );
        }
    }

    #[test]
    fn euclidean_flat() {
        let s = builtin("euclidean", &params(&[("dim", 3.0)])).unwrap();
        let x = [0.4f64, -1.0, 2.0];
        let total = total_ricci(&s, &x, Mode::Horizontal, false, &Weight::Vol).unwrap();
        assert!(spectral_norm(total.matrix()) < 1e-14);
        let u = to_u_form(&s, &x, &total).unwrap();
        assert!(spectral_norm(&u.matrix) < 1e-14);
        assert_eq!(kappa_at(&s, &x, Mode::Horizontal, false, &Weight::Vol).unwrap(), 0.0);
    }

    #[test]
    fn pencil_agrees_at_full_rank_points() {
        let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
        let x = [0.3f64, -0.2, 0.5];
        let total = total_ricci(&s, &x, Mode::ZPlain, false, &Weight::Vol).unwrap();
        let u = to_u_form(&s, &x, &total).unwrap();
        let ap = assemble(&s, &x).unwrap();
        let gram = &ap.gram_a + &ap.gram_z;
        let via_pencil = pencil_kappa(total.matrix(), &gram);
        let via_u = min_eigenvalue(&u.matrix);
        assert!(
            (via_pencil - via_u).abs() < 1e-9 * (1.0 + via_u.abs()),
            "pencil {via_pencil} vs U {via_u}"
        );
    }

    #[test]
    fn langevin_kappa_frozen() {
        let s = builtin("langevin_const", &BTreeMap::new()).unwrap();
        let x = [0.7f64, -0.4];
        let kappa = kappa_at(&s, &x, Mode::Generalized, true, &Weight::VolEff).unwrap();
        let want = 2.0 - 2.0f64.sqrt() / 2.0;
        assert!((kappa - want).abs() < 1e-10, "kappa {kappa} want {want}");
    }

    #[test]
    fn rank_fallback_reports_pencil_value() {
        // The Grushin frame collapses on the y-axis: a = [e_x, 0] there.
        let s = builtin("grushin", &params(&[("k", 2.0)])).unwrap();
        let x = [0.0f64, 0.4];
        let total = total_ricci(&s, &x, Mode::Horizontal, false, &Weight::Vol).unwrap();
        match to_u_form(&s, &x, &total) {
            Err(CurvatureError::RankDeficient { .. }) => {}
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        let detail = kappa_detail(&s, &x, Mode::Horizontal, false, &Weight::Vol).unwrap();
        assert!(detail.rank_fallback);
        assert!(detail.kappa.is_finite());
    }

    #[test]
    fn cd_dimension_counts_squares() {
        let s = builtin("grushin", &params(&[("k", 1.0)])).unwrap();
        let ap = assemble(&s, &[1.0f64, 0.0]).unwrap();
        let lam = ap.solve_lambda(Mode::Horizontal);
        let d = cd_dimension(&s, &[1.0f64, 0.0], &lam).unwrap();
        assert_eq!(d, CdDimension { d_diag: 2, d_all: 4 });

        let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
        let ap = assemble(&s, &[0.3f64, 0.1, -0.2]).unwrap();
        let lam = ap.solve_lambda(Mode::Horizontal);
        let d = cd_dimension(&s, &[0.3f64, 0.1, -0.2], &lam).unwrap();
        assert_eq!(d.d_diag, 2);

        let s = builtin("euclidean", &params(&[("dim", 3.0)])).unwrap();
        let ap = assemble(&s, &[0.0f64, 0.0, 0.0]).unwrap();
        let lam = ap.solve_lambda(Mode::Horizontal);
        let d = cd_dimension(&s, &[0.0f64, 0.0, 0.0], &lam).unwrap();
        assert_eq!(d, CdDimension { d_diag: 3, d_all: 9 });
    }

    #[test]
    fn grushin_scan_tracks_closed_form() {
        let s = builtin("grushin", &params(&[("k", 1.0)])).unwrap();
        let grid = BoxGrid::new(vec![0.5f64, 0.0], vec![2.0, 1.0], vec![6, 3]).unwrap();
        let report = scan(&s, &grid, Mode::Horizontal, false, &Weight::Vol, 1).unwrap();
        assert!(report.skipped.is_empty());
        assert_eq!(report.records.len(), 18);
        let mut seen_min = f64::INFINITY;
        for rec in &report.records {
            let want = -3.0 / (rec.x[0] * rec.x[0]);
            assert!((rec.kappa - want).abs() < 1e-8 * want.abs(), "at {:?}", rec.x);
            assert!(rec.lambda_residual < LAMBDA_RESIDUAL_TOL);
            assert!(rec.factorization_residual < 1e-9);
            assert!(rec.decomposition_spotcheck < 1e-7);
            seen_min = seen_min.min(rec.kappa);
        }
        assert_eq!(report.summary.min_kappa, seen_min);
        assert!((report.summary.min_kappa - (-3.0 / 0.25)).abs() < 1e-8 * 12.0);
        assert_eq!(report.summary.argmin[0], 0.5);
        assert_eq!(report.summary.lambda_ok_fraction, 1.0);
    }

    #[test]
    fn se2_scan_stays_positive_near_origin() {
        let s = builtin("se2", &params(&[("beta", 0.1)])).unwrap();
        let grid = BoxGrid::new(vec![-0.1f64; 3], vec![0.1; 3], vec![3, 3, 3]).unwrap();
        let report = scan(&s, &grid, Mode::Generalized, true, &Weight::VolEff, 0).unwrap();
        assert!(report.skipped.is_empty());
        assert!(report.summary.min_kappa > 0.4, "min kappa {}", report.summary.min_kappa);
    }

    #[test]
    fn scan_skips_domain_errors() {
        let s = builtin("su2", &BTreeMap::new()).unwrap();
        // theta = 0 sits outside the chart: cot(theta) and log sin(theta)
        // both blow up, and the scan must record, not abort.
        let grid =
            BoxGrid::new(vec![0.0f64, 0.0, 0.0], vec![1.2, 0.5, 0.5], vec![3, 2, 2]).unwrap();
        let report = scan(&s, &grid, Mode::Horizontal, false, &Weight::Vol, 0).unwrap();
        assert!(!report.skipped.is_empty());
        assert!(!report.records.is_empty());
        for (x, _) in &report.skipped {
            assert_eq!(x[0], 0.0);
        }
    }

    #[test]
    fn random_polynomial_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let f = random_polynomial(&["x", "y"], 4, &mut rng);
            let j = f.eval_jet(&[0.3f64, -0.8], 3).unwrap();
            assert!(j.value().is_finite());
        }
    }
}
