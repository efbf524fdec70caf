//! Conservative finite-volume Fokker-Planck flow on a periodic box with
//! entropy/Fisher diagnostics.
//!
//! The integrated equation is the gradient-flow normalization
//! `d rho/dt = div(rho aa^T grad log(rho/rho*))` with stationary density
//! `rho* ~ Vol e^{-V}` computed by midpoint quadrature. Face fluxes carry
//! the geometric mean of the adjacent cells, which keeps `rho*` exactly
//! stationary and preserves positivity under the CFL bound; coefficient
//! fields are evaluated at face centers. All functionals are midpoint
//! quadratures with centered-difference gradients of `log(rho/rho*)`.

use std::error::Error;
use std::fmt;

use crate::expr::{DomainError, Expression};
use crate::fields::Structure;
use crate::gamma::GammaContext;
use crate::real::Real;

/// Cells with smaller density contribute `log(1e-300)` to the entropy and
/// are counted in [`Functionals::floored`]; transient undershoot is a
/// scheme artifact, not a model error.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug)]
pub enum FpeError {
    /// Grid construction or shape mismatch.
    Grid(String),
    /// A structure field failed to evaluate on the grid.
    Domain(DomainError),
    /// Requested time step exceeds the stability bound.
    CflViolation { dt: f64, bound: f64 },
    /// The update produced a non-finite value; the last valid state is kept.
    NonFinite { step: usize, time: f64 },
}

impl fmt::Display for FpeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FpeError::Grid(msg) => write!(f, "grid error: {msg}"),
            FpeError::Domain(e) => write!(f, "{e}"),
            FpeError::CflViolation { dt, bound } => {
                write!(f, "dt = {dt:e} exceeds the CFL bound {bound:e}")
            }
            FpeError::NonFinite { step, time } => {
                write!(f, "non-finite density after step {step} (t = {time:e})")
            }
        }
    }
}

impl Error for FpeError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            FpeError::Domain(e) => Some(e),
            _ => None,
        }
    }
}

impl From<DomainError> for FpeError {
    fn from(e: DomainError) -> Self {
        FpeError::Domain(e)
    }
}

fn lossy<R: Real>(x: R) -> f64 {
    num_traits::cast(x).unwrap_or(f64::NAN)
}

/// Uniform periodic box of cells, up to three axes. Cell `i` along an axis
/// covers `[lo + i h, lo + (i+1) h)` with its center at `lo + (i + 1/2) h`.
#[derive(Clone, Debug)]
pub struct Grid<R: Real> {
    lo: Vec<R>,
    hi: Vec<R>,
    n: Vec<usize>,
    h: Vec<R>,
    periodic: Vec<bool>,
    cell_vol: R,
    len: usize,
}

impl<R: Real> Grid<R> {
    /// At least 8 cells per axis so centered stencils stay meaningful.
    pub fn new(lo: Vec<R>, hi: Vec<R>, n: Vec<usize>) -> Result<Self, FpeError> {
        let d = lo.len();
        if d == 0 || d > 3 {
            return Err(FpeError::Grid(format!("dimension must be 1..=3, got {d}")));
        }
        if hi.len() != d || n.len() != d {
            return Err(FpeError::Grid("lo, hi, and cell counts must agree in length".into()));
        }
        let mut h = Vec::with_capacity(d);
        let mut cell_vol = R::one();
        let mut len = 1usize;
        for k in 0..d {
            if n[k] < 8 {
                return Err(FpeError::Grid(format!("axis {k} has {} cells, need >= 8", n[k])));
            }
            if hi[k] <= lo[k] {
                return Err(FpeError::Grid(format!("axis {k} has empty extent")));
            }
            let hk = (hi[k] - lo[k]) / R::of(n[k] as f64);
            cell_vol *= hk;
            h.push(hk);
            len = len.checked_mul(n[k]).ok_or_else(|| FpeError::Grid("grid too large".into()))?;
        }
        if !(cell_vol > R::zero()) {
            return Err(FpeError::Grid("cell volume must be positive".into()));
        }
        Ok(Grid { lo, hi, n, h, periodic: vec![true; d], cell_vol, len })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cell_counts(&self) -> &[usize] {
        &self.n
    }

    pub fn spacing(&self) -> &[R] {
        &self.h
    }

    pub fn extent(&self) -> (&[R], &[R]) {
        (&self.lo, &self.hi)
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn cell_volume(&self) -> R {
        self.cell_vol
    }

    /// Multi-index of a flat cell id; first axis fastest.
    fn unravel(&self, flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        let mut rest = flat;
        for k in 0..self.dim() {
            idx[k] = rest % self.n[k];
            rest /= self.n[k];
        }
        idx
    }

    fn ravel(&self, idx: &[usize; 3]) -> usize {
        let mut flat = 0usize;
        for k in (0..self.dim()).rev() {
            flat = flat * self.n[k] + idx[k];
        }
        flat
    }

    /// Flat id of the periodic neighbor one cell along `axis`.
    fn neighbor(&self, idx: &[usize; 3], axis: usize, step: isize) -> usize {
        let mut m = *idx;
        let nk = self.n[axis] as isize;
        m[axis] = (((idx[axis] as isize + step) % nk + nk) % nk) as usize;
        self.ravel(&m)
    }

    pub fn center(&self, flat: usize) -> Vec<R> {
        let idx = self.unravel(flat);
        (0..self.dim())
            .map(|k| self.lo[k] + self.h[k] * R::of(idx[k] as f64 + 0.5))
            .collect()
    }
}

/// Nonnegative cell densities over a grid.
#[derive(Clone, Debug)]
pub struct DensityField<R: Real> {
    grid: Grid<R>,
    values: Vec<R>,
}

impl<R: Real> DensityField<R> {
    pub fn new(grid: Grid<R>, values: Vec<R>) -> Result<Self, FpeError> {
        if values.len() != grid.len() {
            return Err(FpeError::Grid(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < R::zero()) {
            return Err(FpeError::Grid("density values must be finite and >= 0".into()));
        }
        Ok(DensityField { grid, values })
    }

    /// Evaluate a nonnegative expression at the cell centers.
    pub fn from_expression(grid: Grid<R>, f: &Expression) -> Result<Self, FpeError> {
        let mut values = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            let x = grid.center(flat);
            values.push(f.eval_jet(&x, 0)?.value());
        }
        DensityField::new(grid, values)
    }

    pub fn grid(&self) -> &Grid<R> {
        &self.grid
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn mass(&self) -> R {
        self.values.iter().copied().sum::<R>() * self.grid.cell_vol
    }

    /// Same shape, scaled to unit mass.
    pub fn normalized(&self) -> Result<Self, FpeError> {
        let m = self.mass();
        if !(m > R::zero()) {
            return Err(FpeError::Grid("cannot normalize a massless density".into()));
        }
        let values = self.values.iter().map(|v| *v / m).collect();
        Ok(DensityField { grid: self.grid.clone(), values })
    }
}

/// Midpoint quadratures of the dissipation functionals at one instant.
#[derive(Clone, Copy, Debug)]
pub struct Functionals<R: Real> {
    pub mass: R,
    /// Relative entropy `D = int rho log(rho/rho*)`.
    pub entropy: R,
    /// `int |a^T grad log(rho/rho*)|^2 rho`.
    pub fisher_a: R,
    /// `int |z^T grad log(rho/rho*)|^2 rho`.
    pub fisher_z: R,
    /// `fisher_a + fisher_z`.
    pub fisher_az: R,
    /// Cells whose density sat at the logarithm floor.
    pub floored: usize,
}

/// Sampled functionals along a run; times strictly increasing.
#[derive(Clone, Debug)]
pub struct TimeSeries<R: Real> {
    times: Vec<R>,
    samples: Vec<Functionals<R>>,
    truncated: bool,
}

impl<R: Real> TimeSeries<R> {
    fn new() -> Self {
        TimeSeries { times: Vec::new(), samples: Vec::new(), truncated: false }
    }

    fn push(&mut self, t: R, f: Functionals<R>) {
        if let Some(last) = self.times.last() {
            assert!(t > *last, "sample times must increase");
        }
        self.times.push(t);
        self.samples.push(f);
    }

    pub fn times(&self) -> &[R] {
        &self.times
    }

    pub fn samples(&self) -> &[Functionals<R>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// True when the run aborted on a non-finite update and the series is
    /// the valid prefix.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// CSV with 17-significant-digit floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mass,entropy,fisher_a,fisher_z,fisher_az\n");
        for (t, s) in self.times.iter().zip(&self.samples) {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                t, s.mass, s.entropy, s.fisher_a, s.fisher_z, s.fisher_az
            ));
        }
        out
    }
}

/// Density proportional to `Vol e^{-V}` at the cell centers, normalized to
/// unit mass by midpoint quadrature.
pub fn steady_state<R: Real>(
    structure: &Structure,
    grid: &Grid<R>,
) -> Result<DensityField<R>, FpeError> {
    let mut values = Vec::with_capacity(grid.len());
    for flat in 0..grid.len() {
        let x = grid.center(flat);
        let lv = structure.log_vol_expr().eval_jet(&x, 0)?.value();
        let v = structure.potential_expr().eval_jet(&x, 0)?.value();
        let w = (lv - v).exp();
        if !w.is_finite() {
            return Err(FpeError::Domain(DomainError {
                what: "steady-state weight is not finite".into(),
                subexpression: "Vol * exp(-V)".into(),
                point: format!("{x:?}"),
            }));
        }
        values.push(w);
    }
    DensityField::new(grid.clone(), values)?.normalized()
}

/// One structure frozen onto one grid: the stationary density, the
/// diffusion rows at face centers, the frames at cell centers, and the CFL
/// bound. Build once, step many times.
pub struct Simulator<R: Real> {
    grid: Grid<R>,
    rho_star: Vec<R>,
    /// Per axis `d`: row `d` of `aa^T` at the face between cell `i` and its
    /// `+e_d` neighbor, flattened as `[cell * dim + component]`.
    face_rows: Vec<Vec<R>>,
    /// `a` at cell centers, flattened `[cell * dim * n_a]`, row-major.
    center_a: Vec<R>,
    /// `z` at cell centers, flattened `[cell * dim * m_z]`, row-major.
    center_z: Vec<R>,
    n_a: usize,
    m_z: usize,
    cfl: R,
}

impl<R: Real> Simulator<R> {
    pub fn new(structure: &Structure, grid: &Grid<R>) -> Result<Self, FpeError> {
        if structure.dim() != grid.dim() {
            return Err(FpeError::Grid(format!(
                "structure has {} variables, grid has {} axes",
                structure.dim(),
                grid.dim()
            )));
        }
        let d = grid.dim();
        let rho_star = steady_state(structure, grid)?.values.clone();

        let mut max_eig = R::zero();
        let mut face_rows = Vec::with_capacity(d);
        for axis in 0..d {
            let mut rows = vec![R::zero(); grid.len() * d];
            for flat in 0..grid.len() {
                let mut x = grid.center(flat);
                x[axis] += grid.h[axis] * R::of(0.5);
                let a = structure.a_matrix(&x)?;
                let m = &a * a.transpose();
                for c in 0..d {
                    rows[flat * d + c] = m[(axis, c)];
                }
                // Gershgorin bound on the largest eigenvalue; cheap and safe
                // for the CFL estimate.
                for r in 0..d {
                    let mut s = R::zero();
                    for c in 0..d {
                        s += m[(r, c)].abs();
                    }
                    max_eig = max_eig.max(s);
                }
            }
            face_rows.push(rows);
        }

        let n_a = structure.n_a();
        let m_z = structure.m_z();
        let mut center_a = vec![R::zero(); grid.len() * d * n_a];
        let mut center_z = vec![R::zero(); grid.len() * d * m_z];
        for flat in 0..grid.len() {
            let x = grid.center(flat);
            let a = structure.a_matrix(&x)?;
            for r in 0..d {
                for c in 0..n_a {
                    center_a[(flat * d + r) * n_a + c] = a[(r, c)];
                }
            }
            if m_z > 0 {
                let z = structure.z_matrix(&x)?;
                for r in 0..d {
                    for c in 0..m_z {
                        center_z[(flat * d + r) * m_z + c] = z[(r, c)];
                    }
                }
            }
        }

        let h_min = grid.h.iter().copied().fold(grid.h[0], |a, b| a.min(b));
        let cfl = if max_eig > R::zero() {
            R::of(0.25) * h_min * h_min / max_eig
        } else {
            R::of(f64::INFINITY)
        };
        Ok(Simulator {
            grid: grid.clone(),
            rho_star,
            face_rows,
            center_a,
            center_z,
            n_a,
            m_z,
            cfl,
        })
    }

    pub fn grid(&self) -> &Grid<R> {
        &self.grid
    }

    /// Largest stable explicit step: `0.25 h_min^2 / max-eig(aa^T)`.
    pub fn cfl_bound(&self) -> R {
        self.cfl
    }

    pub fn steady(&self) -> DensityField<R> {
        DensityField { grid: self.grid.clone(), values: self.rho_star.clone() }
    }

    fn log_ratio(&self, rho: &[R], floored: &mut usize) -> Vec<R> {
        let floor = R::of(LOG_FLOOR);
        rho.iter()
            .zip(&self.rho_star)
            .map(|(r, s)| {
                let r = if *r < floor {
                    *floored += 1;
                    floor
                } else {
                    *r
                };
                (r / *s).ln()
            })
            .collect()
    }

    /// One conservative explicit Euler step; fluxes telescope, so mass is
    /// conserved exactly up to rounding.
    fn step_values(&self, rho: &[R], dt: R) -> Vec<R> {
        let d = self.grid.dim();
        let mut floored = 0usize;
        let w = self.log_ratio(rho, &mut floored);
        let two = R::of(2.0);
        let half = R::of(0.5);

        // flux[axis][cell] = flux through the +e_axis face of the cell.
        let mut flux = vec![vec![R::zero(); self.grid.len()]; d];
        for flat in 0..self.grid.len() {
            let idx = self.grid.unravel(flat);
            for axis in 0..d {
                let j = self.grid.neighbor(&idx, axis, 1);
                let prod = rho[flat].max(R::zero()) * rho[j].max(R::zero());
                if prod == R::zero() {
                    continue;
                }
                let rho_face = prod.sqrt();
                let rows = &self.face_rows[axis];
                let mut grad_dot = R::zero();
                for c in 0..d {
                    let coeff = rows[flat * d + c];
                    if coeff == R::zero() {
                        continue;
                    }
                    let dw = if c == axis {
                        (w[j] - w[flat]) / self.grid.h[axis]
                    } else {
                        // Tangential derivative at the face: mean of the
                        // centered differences in the two adjacent cells.
                        let jdx = self.grid.unravel(j);
                        let ip = self.grid.neighbor(&idx, c, 1);
                        let im = self.grid.neighbor(&idx, c, -1);
                        let jp = self.grid.neighbor(&jdx, c, 1);
                        let jm = self.grid.neighbor(&jdx, c, -1);
                        let hh = two * self.grid.h[c];
                        half * ((w[ip] - w[im]) / hh + (w[jp] - w[jm]) / hh)
                    };
                    grad_dot += coeff * dw;
                }
                flux[axis][flat] = rho_face * grad_dot;
            }
        }

        let mut out = vec![R::zero(); self.grid.len()];
        for flat in 0..self.grid.len() {
            let idx = self.grid.unravel(flat);
            let mut div = R::zero();
            for axis in 0..d {
                let minus = self.grid.neighbor(&idx, axis, -1);
                div += (flux[axis][flat] - flux[axis][minus]) / self.grid.h[axis];
            }
            out[flat] = rho[flat] + dt * div;
        }
        out
    }

    pub fn step(&self, rho: &DensityField<R>, dt: R) -> Result<DensityField<R>, FpeError> {
        if rho.grid.len() != self.grid.len() || rho.grid.n != self.grid.n {
            return Err(FpeError::Grid("density grid does not match the simulator grid".into()));
        }
        if !(dt > R::zero()) || dt > self.cfl * (R::one() + R::of(1e-12)) {
            return Err(FpeError::CflViolation { dt: lossy(dt), bound: lossy(self.cfl) });
        }
        let values = self.step_values(&rho.values, dt);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FpeError::NonFinite { step: 1, time: lossy(dt) });
        }
        Ok(DensityField { grid: self.grid.clone(), values })
    }

    /// Quadratures of mass, relative entropy, and the Fisher functionals.
    pub fn functionals(&self, rho: &DensityField<R>) -> Functionals<R> {
        let d = self.grid.dim();
        let mut floored = 0usize;
        let w = self.log_ratio(&rho.values, &mut floored);
        let two = R::of(2.0);

        let mut mass = R::zero();
        let mut entropy = R::zero();
        let mut fisher_a = R::zero();
        let mut fisher_z = R::zero();
        let mut grad = [R::zero(); 3];
        for flat in 0..self.grid.len() {
            let r = rho.values[flat];
            mass += r;
            entropy += r * w[flat];
            let idx = self.grid.unravel(flat);
            for axis in 0..d {
                let p = self.grid.neighbor(&idx, axis, 1);
                let m = self.grid.neighbor(&idx, axis, -1);
                grad[axis] = (w[p] - w[m]) / (two * self.grid.h[axis]);
            }
            let mut qa = R::zero();
            for c in 0..self.n_a {
                let mut dot = R::zero();
                for r_i in 0..d {
                    dot += self.center_a[(flat * d + r_i) * self.n_a + c] * grad[r_i];
                }
                qa += dot * dot;
            }
            fisher_a += r * qa;
            let mut qz = R::zero();
            for c in 0..self.m_z {
                let mut dot = R::zero();
                for r_i in 0..d {
                    dot += self.center_z[(flat * d + r_i) * self.m_z + c] * grad[r_i];
                }
                qz += dot * dot;
            }
            fisher_z += r * qz;
        }
        let vol = self.grid.cell_vol;
        Functionals {
            mass: mass * vol,
            entropy: entropy * vol,
            fisher_a: fisher_a * vol,
            fisher_z: fisher_z * vol,
            fisher_az: (fisher_a + fisher_z) * vol,
            floored,
        }
    }
}

/// One explicit step of the gradient flow. Builds the face coefficients
/// from scratch; use [`Simulator`] directly to amortize that over a run.
pub fn step<R: Real>(
    rho: &DensityField<R>,
    structure: &Structure,
    dt: R,
) -> Result<DensityField<R>, FpeError> {
    Simulator::new(structure, &rho.grid)?.step(rho, dt)
}

/// Mass, relative entropy, and Fisher quadratures of one density.
pub fn functionals<R: Real>(
    rho: &DensityField<R>,
    structure: &Structure,
) -> Result<Functionals<R>, FpeError> {
    Ok(Simulator::new(structure, &rho.grid)?.functionals(rho))
}

/// March to `t_end`, sampling every `sample_every` steps (and at both ends).
/// A non-finite update truncates the series at the last valid state.
pub fn simulate<R: Real>(
    structure: &Structure,
    rho0: &DensityField<R>,
    t_end: R,
    dt: R,
    sample_every: usize,
) -> Result<TimeSeries<R>, FpeError> {
    if !(t_end > R::zero()) {
        return Err(FpeError::Grid("simulation horizon must be positive".into()));
    }
    let sim = Simulator::new(structure, &rho0.grid)?;
    if !(dt > R::zero()) || dt > sim.cfl * (R::one() + R::of(1e-12)) {
        return Err(FpeError::CflViolation { dt: lossy(dt), bound: lossy(sim.cfl) });
    }
    let every = sample_every.max(1);
    let steps = lossy((t_end / dt).ceil()) as usize;

    let mut series = TimeSeries::new();
    series.push(R::zero(), sim.functionals(rho0));
    let mut state = rho0.values.clone();
    for step_i in 1..=steps {
        let next = sim.step_values(&state, dt);
        if next.iter().any(|v| !v.is_finite()) {
            series.truncated = true;
            break;
        }
        state = next;
        if step_i % every == 0 || step_i == steps {
            let field = DensityField { grid: sim.grid.clone(), values: state.clone() };
            series.push(dt * R::of(step_i as f64), sim.functionals(&field));
        }
    }
    Ok(series)
}

/// Which sampled functional a decay fit reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayField {
    Entropy,
    FisherA,
    FisherZ,
    FisherAz,
}

impl<R: Real> Functionals<R> {
    fn get(&self, field: DecayField) -> R {
        match field {
            DecayField::Entropy => self.entropy,
            DecayField::FisherA => self.fisher_a,
            DecayField::FisherZ => self.fisher_z,
            DecayField::FisherAz => self.fisher_az,
        }
    }
}

/// Exponential rate from the least-squares slope of `log(field)` against
/// time over the second half of the samples (the post-transient window).
/// Nonpositive samples are skipped; fewer than two usable points give 0.
pub fn fit_decay<R: Real>(series: &TimeSeries<R>, field: DecayField) -> R {
    let start = series.len() / 2;
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for i in start..series.len() {
        let y = series.samples[i].get(field);
        if y > R::zero() {
            ts.push(series.times[i]);
            ys.push(y.ln());
        }
    }
    let m = R::of(ts.len() as f64);
    if ts.len() < 2 {
        return R::zero();
    }
    let tbar = ts.iter().copied().sum::<R>() / m;
    let ybar = ys.iter().copied().sum::<R>() / m;
    let mut num = R::zero();
    let mut den = R::zero();
    for (t, y) in ts.iter().zip(&ys) {
        num += (*t - tbar) * (*y - ybar);
        den += (*t - tbar) * (*t - tbar);
    }
    if den == R::zero() {
        return R::zero();
    }
    -(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZlsiVerdict {
    Holds,
    Fails,
    /// `kappa <= 0`: the inequality is vacuous and is not evaluated.
    NotApplicable,
}

/// One evaluation of `D <= (I_a + I_z) / (2 kappa)`.
#[derive(Clone, Copy, Debug)]
pub struct ZlsiCheck<R: Real> {
    pub lhs: R,
    pub rhs: R,
    /// `rhs - lhs`; quadrature noise makes tiny negatives possible.
    pub margin: R,
    pub verdict: ZlsiVerdict,
}

/// Quadrature check of the z-log-Sobolev inequality at curvature `kappa`.
pub fn check_zlsi<R: Real>(
    rho: &DensityField<R>,
    structure: &Structure,
    kappa: R,
) -> Result<ZlsiCheck<R>, FpeError> {
    let f = functionals(rho, structure)?;
    if !(kappa > R::zero()) {
        return Ok(ZlsiCheck {
            lhs: f.entropy,
            rhs: R::zero(),
            margin: R::zero(),
            verdict: ZlsiVerdict::NotApplicable,
        });
    }
    let rhs = (f.fisher_a + f.fisher_z) / (R::of(2.0) * kappa);
    let margin = rhs - f.entropy;
    Ok(ZlsiCheck {
        lhs: f.entropy,
        rhs,
        margin,
        verdict: if margin >= R::zero() { ZlsiVerdict::Holds } else { ZlsiVerdict::Fails },
    })
}

/// Two quadratures of the weak commutator identity.
#[derive(Clone, Copy, Debug)]
pub struct WeakIdentity<R: Real> {
    /// `int [Gamma_1(h, Gamma_1^z(h,h)) - Gamma_1^z(h, Gamma_1(h,h))] g rho`.
    pub lhs: R,
    /// Same pairing of the weighted-divergence form of the commutator.
    pub rhs: R,
    /// `|lhs - rhs| / (1 + |lhs|)`.
    pub gap: R,
}

/// Midpoint quadrature of both sides of the weak commutator identity, with
/// every integrand evaluated by exact jets and `rho` supplied analytically.
/// The identity couples the sides through integration by parts, so it needs
/// the periodic box (boundary terms must vanish) and the pairing `g = e^h`;
/// the gap then measures pure quadrature error, O(h^2).
pub fn weak_identity_check<R: Real>(
    structure: &Structure,
    h: &Expression,
    g: &Expression,
    rho: &Expression,
    grid: &Grid<R>,
) -> Result<WeakIdentity<R>, FpeError> {
    if structure.dim() != grid.dim() {
        return Err(FpeError::Grid(format!(
            "structure has {} variables, grid has {} axes",
            structure.dim(),
            grid.dim()
        )));
    }
    let mut lhs = R::zero();
    let mut rhs = R::zero();
    for flat in 0..grid.len() {
        let x = grid.center(flat);
        let ctx = GammaContext::new(structure, &x)?;
        let jh = h.eval_jet(&x, 3)?;
        let gv = g.eval_jet(&x, 0)?.value();
        let rv = rho.eval_jet(&x, 1)?;
        let weight = gv * rv.value();

        let g1z = ctx.gamma1_z_jet(&jh, &jh);
        let g1 = ctx.gamma1_jet(&jh, &jh);
        let li = ctx.gamma1_value(&jh, &g1z) - ctx.gamma1_z_value(&jh, &g1);
        lhs += li * weight;

        let log_rho = rv.ln().map_err(|e| {
            FpeError::Domain(DomainError {
                what: e.what,
                subexpression: rho.source().to_string(),
                point: format!("{x:?}"),
            })
        })?;
        rhs += ctx.div_correction_value(&jh, &log_rho) * weight;
    }
    lhs *= grid.cell_vol;
    rhs *= grid.cell_vol;
    let gap = (lhs - rhs).abs() / (R::one() + lhs.abs());
    Ok(WeakIdentity { lhs, rhs, gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::builtin;
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn torus(dim: usize, n: usize) -> Grid<f64> {
        Grid::new(
            vec![-std::f64::consts::PI; dim],
            vec![std::f64::consts::PI; dim],
            vec![n; dim],
        )
        .unwrap()
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(Grid::new(vec![0.0], vec![1.0], vec![4]).is_err());
        assert!(Grid::new(vec![0.0, 0.0], vec![1.0], vec![8, 8]).is_err());
        assert!(Grid::new(vec![0.0], vec![0.0], vec![8]).is_err());
        assert!(Grid::new(vec![0.0; 4], vec![1.0; 4], vec![8; 4]).is_err());
        let g: Grid<f64> = Grid::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![8, 16]).unwrap();
        assert_eq!(g.len(), 128);
        assert!((g.cell_volume() - (1.0 / 8.0) * (2.0 / 16.0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_steady_state_for_flat_structure() {
        let s = builtin("euclidean", &params(&[("dim", 2.0)])).unwrap();
        let grid = torus(2, 8);
        let rho = steady_state(&s, &grid).unwrap();
        let expect = 1.0 / (grid.cell_volume() * grid.len() as f64);
        for v in rho.values() {
            assert!((v - expect).abs() < 1e-15);
        }
        assert!((rho.mass() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn steady_state_is_step_fixed_point() {
        let s = builtin("langevin_const", &params(&[])).unwrap();
        let grid = torus(2, 16);
        let rho = steady_state(&s, &grid).unwrap();
        let sim = Simulator::new(&s, &grid).unwrap();
        let dt = sim.cfl_bound();
        let next = sim.step(&rho, dt).unwrap();
        for (a, b) in rho.values().iter().zip(next.values()) {
            assert!((a - b).abs() <= 1e-13, "steady state moved: {a} -> {b}");
        }
    }

    #[test]
    fn step_conserves_mass_and_entropy_decreases() {
        let s = builtin("langevin_const", &params(&[])).unwrap();
        let grid = torus(2, 16);
        let tilt = Expression::parse("exp(-(v^2/2 + x^2/2)) * (1 + cos(v)/2)", &["x", "v"])
            .unwrap();
        let rho = DensityField::from_expression(grid.clone(), &tilt)
            .unwrap()
            .normalized()
            .unwrap();
        let sim = Simulator::new(&s, &grid).unwrap();
        let dt = sim.cfl_bound() * 0.5;
        let mut state = rho.clone();
        let mut last_entropy = sim.functionals(&state).entropy;
        for step_i in 0..20 {
            state = sim.step(&state, dt).unwrap();
            let f = sim.functionals(&state);
            assert!((f.mass - 1.0).abs() <= 1e-12, "mass drifted to {}", f.mass);
            assert!(
                f.entropy <= last_entropy + 1e-12,
                "entropy rose at step {step_i}: {last_entropy} -> {}",
                f.entropy
            );
            last_entropy = f.entropy;
            assert!(state.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let s = builtin("euclidean", &params(&[("dim", 1.0)])).unwrap();
        let grid = torus(1, 8);
        let sim = Simulator::new(&s, &grid).unwrap();
        let rho = steady_state(&s, &grid).unwrap();
        let err = sim.step(&rho, sim.cfl_bound() * 4.0).unwrap_err();
        assert!(matches!(err, FpeError::CflViolation { .. }), "got {err}");
    }

    #[test]
    fn functionals_on_steady_state_vanish() {
        let s = builtin("langevin_const", &params(&[])).unwrap();
        let grid = torus(2, 16);
        let rho = steady_state(&s, &grid).unwrap();
        let f = functionals(&rho, &s).unwrap();
        assert!((f.mass - 1.0).abs() < 1e-12);
        assert!(f.entropy.abs() < 1e-13);
        assert!(f.fisher_a.abs() < 1e-20);
        assert!(f.fisher_z.abs() < 1e-20);
        assert_eq!(f.floored, 0);
    }

    #[test]
    fn entropy_and_fisher_match_fine_quadrature() {
        // 1-D torus, rho ~ 1 + cos(x)/2 against a uniform steady state:
        // D and I_a have closed quadrature values computed with 1e6 points.
        let s = builtin("euclidean", &params(&[("dim", 1.0)])).unwrap();
        let grid = Grid::new(
            vec![-std::f64::consts::PI],
            vec![std::f64::consts::PI],
            vec![512],
        )
        .unwrap();
        let f = Expression::parse("1 + cos(x1)/2", &["x1"]).unwrap();
        let rho = DensityField::from_expression(grid, &f).unwrap().normalized().unwrap();
        let got = functionals(&rho, &s).unwrap();

        let n = 1_000_000usize;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let norm = 2.0 * std::f64::consts::PI;
        let mut d_ref = 0.0f64;
        let mut ia_ref = 0.0f64;
        for i in 0..n {
            let x = -std::f64::consts::PI + (i as f64 + 0.5) * h;
            let raw = 1.0 + 0.5 * x.cos();
            let rho_x = raw / norm;
            let rho_star = 1.0 / norm;
            d_ref += rho_x * (rho_x / rho_star).ln() * h;
            let dlog = -0.5 * x.sin() / raw;
            ia_ref += rho_x * dlog * dlog * h;
        }
        assert!(
            (got.entropy - d_ref).abs() <= 1e-4 * d_ref.abs(),
            "entropy {} vs reference {d_ref}",
            got.entropy
        );
        assert!(
            (got.fisher_a - ia_ref).abs() <= 1e-4 * ia_ref.abs(),
            "fisher {} vs reference {ia_ref}",
            got.fisher_a
        );
    }

    #[test]
    fn simulate_from_steady_state_is_flat() {
        let s = builtin("langevin_const", &params(&[])).unwrap();
        let grid = torus(2, 16);
        let rho = steady_state(&s, &grid).unwrap();
        let sim = Simulator::new(&s, &grid).unwrap();
        let series = simulate(&s, &rho, sim.cfl_bound() * 20.0, sim.cfl_bound(), 5).unwrap();
        assert!(!series.truncated());
        assert!(series.len() >= 3);
        for f in series.samples() {
            assert!(f.entropy.abs() < 1e-13);
            assert!(f.fisher_az.abs() < 1e-18);
        }
        let csv = series.to_csv();
        assert!(csv.starts_with("t,mass,entropy,fisher_a,fisher_z,fisher_az\n"));
        assert_eq!(csv.lines().count(), series.len() + 1);
    }

    #[test]
    fn fit_decay_recovers_synthetic_rate() {
        let mut series = TimeSeries::<f64>::new();
        for i in 0..40 {
            let t = i as f64 * 0.05;
            let y = (-3.0 * t).exp();
            series.push(
                t + 1e-12,
                Functionals {
                    mass: 1.0,
                    entropy: y,
                    fisher_a: y,
                    fisher_z: y,
                    fisher_az: y,
                    floored: 0,
                },
            );
        }
        let rate = fit_decay(&series, DecayField::FisherAz);
        assert!((rate - 3.0).abs() < 1e-6, "rate {rate}");

        let mut flat = TimeSeries::<f64>::new();
        for i in 0..10 {
            flat.push(
                i as f64 + 1.0,
                Functionals {
                    mass: 1.0,
                    entropy: 0.25,
                    fisher_a: 0.25,
                    fisher_z: 0.25,
                    fisher_az: 0.25,
                    floored: 0,
                },
            );
        }
        assert_eq!(fit_decay(&flat, DecayField::Entropy), 0.0);
    }

    #[test]
    fn zlsi_refuses_nonpositive_kappa() {
        let s = builtin("langevin_const", &params(&[])).unwrap();
        let grid = torus(2, 8);
        let rho = steady_state(&s, &grid).unwrap();
        let check = check_zlsi(&rho, &s, -1.0).unwrap();
        assert_eq!(check.verdict, ZlsiVerdict::NotApplicable);
        let ok = check_zlsi(&rho, &s, 1.0).unwrap();
        assert_eq!(ok.verdict, ZlsiVerdict::Holds);
        assert!(ok.lhs.abs() < 1e-12);
    }

    #[test]
    fn weak_identity_trivial_for_constant_frames() {
        // Constant a and z: every derivative factor in both integrands is
        // zero, so the quadratures vanish identically.
        let s = builtin("langevin_const", &params(&[])).unwrap();
        let grid = torus(2, 8);
        let h = Expression::parse("sin(x) + cos(v)", &["x", "v"]).unwrap();
        let g = Expression::parse("exp(sin(x) + cos(v))", &["x", "v"]).unwrap();
        let rho = Expression::parse("(1 + cos(x)/2) * (1 + cos(v)/2)", &["x", "v"]).unwrap();
        let w = weak_identity_check(&s, &h, &g, &rho, &grid).unwrap();
        assert!(w.lhs.abs() < 1e-14, "lhs {}", w.lhs);
        assert!(w.rhs.abs() < 1e-14, "rhs {}", w.rhs);
    }

    #[test]
    fn weak_identity_refines_on_heisenberg() {
        let s = builtin("heisenberg", &BTreeMap::new()).unwrap();
        let vars = ["x1", "x2", "x3"];
        let h = Expression::parse("sin(x1) + cos(x2)*sin(x3)", &vars).unwrap();
        let g = Expression::parse("exp(sin(x1) + cos(x2)*sin(x3))", &vars).unwrap();
        let rho = Expression::parse(
            "(1 + cos(x1))^2 * (1 + cos(x2))^2 * (1 + cos(x3))^2",
            &vars,
        )
        .unwrap();
        let coarse = weak_identity_check(&s, &h, &g, &rho, &torus(3, 16)).unwrap();
        let fine = weak_identity_check(&s, &h, &g, &rho, &torus(3, 32)).unwrap();
        assert!(fine.gap < coarse.gap, "gap did not shrink: {} -> {}", coarse.gap, fine.gap);
        let order = (coarse.gap / fine.gap).log2();
        assert!(order >= 1.8, "refinement order {order}");
    }
}
