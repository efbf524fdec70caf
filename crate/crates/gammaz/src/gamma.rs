//! Pointwise evaluators for the Gamma operators of a degenerate diffusion.
//!
//! Every quantity here is computed directly from jets of the structure
//! fields: the generator is applied by explicit index contraction and the
//! iterated operators by nesting jet arithmetic. Nothing is taken from the
//! assembled tensors in [`crate::tensor`], so the two modules give
//! independent values for both sides of the decomposition identities.

use crate::expr::{DomainError, Expression};
use crate::fields::{FieldJets, Structure};
use crate::jet::Jet;
use crate::real::Real;
use crate::tensor::{Basis, QuadraticForm};

/// Weight entering the divergence corrections, stored through its logarithm.
///
/// The generalized operators depend on a positive weight only through
/// `grad log` of it, so all variants produce a jet of the log-weight.
pub enum Weight<'a> {
    /// The bare volume weight of the structure.
    Vol,
    /// Volume tilted by the potential, `vol * exp(-V)`. This is the weight
    /// under which the drift decomposition closes.
    VolEff,
    /// A caller-supplied log-weight over the structure's variables.
    Custom(&'a Expression),
}

impl Weight<'_> {
    /// Jet of the log-weight at `x`.
    pub fn log_jet<R: Real>(
        &self,
        structure: &Structure,
        x: &[R],
        order: usize,
    ) -> Result<Jet<R>, DomainError> {
        match self {
            Weight::Vol => structure.log_vol_expr().eval_jet(x, order),
            Weight::VolEff => structure.log_vol_eff_jet(x, order),
            Weight::Custom(w) => {
                if w.variables() != structure.variables() {
                    return Err(DomainError {
                        what: "log-weight must use the structure's variables".into(),
                        subexpression: w.source().to_string(),
                        point: String::new(),
                    });
                }
                w.eval_jet(x, order)
            }
        }
    }
}

/// Jets of all structure fields at one point, with the operator evaluations
/// that contract them. Construct once per point, reuse for many functions.
pub struct GammaContext<'a, R: Real> {
    structure: &'a Structure,
    point: Vec<R>,
    fields: FieldJets<R>,
}

impl<'a, R: Real> GammaContext<'a, R> {
    pub fn new(structure: &'a Structure, x: &[R]) -> Result<Self, DomainError> {
        Ok(GammaContext {
            structure,
            point: x.to_vec(),
            fields: structure.field_jets(x, 2)?,
        })
    }

    pub fn structure(&self) -> &Structure {
        self.structure
    }

    pub fn point(&self) -> &[R] {
        &self.point
    }

    pub fn fields(&self) -> &FieldJets<R> {
        &self.fields
    }

    /// Entry `a^T[k][khat]`, i.e. row `khat`, column `k` of `a`.
    fn at(&self, k: usize, khat: usize) -> &Jet<R> {
        &self.fields.a[khat][k]
    }

    /// Entry `z^T[k][khat]`.
    fn zt(&self, k: usize, khat: usize) -> &Jet<R> {
        &self.fields.z[khat][k]
    }

    /// Components of `a^T grad f` as jets one order below `f`.
    fn a_grad_jets(&self, f: &Jet<R>) -> Vec<Jet<R>> {
        let d = self.structure.dim();
        let order = (f.order() - 1).min(2);
        (0..self.structure.n_a())
            .map(|k| {
                let mut acc = Jet::constant(d, order, R::zero());
                for khat in 0..d {
                    acc = acc.add(&self.at(k, khat).mul(&f.extract_partial(khat)));
                }
                acc
            })
            .collect()
    }

    fn z_grad_jets(&self, f: &Jet<R>) -> Vec<Jet<R>> {
        let d = self.structure.dim();
        let order = (f.order() - 1).min(2);
        (0..self.structure.m_z())
            .map(|k| {
                let mut acc = Jet::constant(d, order, R::zero());
                for khat in 0..d {
                    acc = acc.add(&self.zt(k, khat).mul(&f.extract_partial(khat)));
                }
                acc
            })
            .collect()
    }

    fn a_grad_values(&self, f: &Jet<R>) -> Vec<R> {
        let d = self.structure.dim();
        (0..self.structure.n_a())
            .map(|k| (0..d).map(|khat| self.at(k, khat).value() * f.d1(khat)).sum())
            .collect()
    }

    fn z_grad_values(&self, f: &Jet<R>) -> Vec<R> {
        let d = self.structure.dim();
        (0..self.structure.m_z())
            .map(|k| (0..d).map(|khat| self.zt(k, khat).value() * f.d1(khat)).sum())
            .collect()
    }

    /// The generator at the point, on an order-2 (or higher) jet. With
    /// `drift` the first-order part `2 b . grad` is included.
    pub fn apply_l_value(&self, h: &Jet<R>, drift: bool) -> R {
        assert!(h.order() >= 2, "generator needs an order-2 jet");
        let d = self.structure.dim();
        let mut out = R::zero();
        for k in 0..self.structure.n_a() {
            for khat in 0..d {
                let akh = self.at(k, khat);
                for kp in 0..d {
                    let akp = self.at(k, kp);
                    out += akh.value() * akp.value() * h.d2(khat, kp)
                        + akh.value() * akp.d1(khat) * h.d1(kp);
                }
            }
        }
        if drift {
            for khat in 0..d {
                out += R::of(2.0) * self.fields.b[khat].value() * h.d1(khat);
            }
        }
        out
    }

    /// Jet of the generator applied to `h`: an order-3 input yields an
    /// order-1 output (the field jets cap the order at 1 as well).
    pub fn apply_l_jet(&self, h: &Jet<R>, drift: bool) -> Jet<R> {
        assert!(h.order() >= 3, "generator jet needs an order-3 jet");
        let d = self.structure.dim();
        let mut out = Jet::constant(d, (h.order() - 2).min(1), R::zero());
        for k in 0..self.structure.n_a() {
            for khat in 0..d {
                let akh = self.at(k, khat);
                let h_khat = h.extract_partial(khat);
                for kp in 0..d {
                    let akp = self.at(k, kp);
                    out = out.add(&akh.mul(akp).mul(&h_khat.extract_partial(kp)));
                    out = out.add(&akh.mul(&akp.extract_partial(khat)).mul(&h.extract_partial(kp)));
                }
            }
        }
        if drift {
            for khat in 0..d {
                let term = self.fields.b[khat].mul(&h.extract_partial(khat));
                out = out.add(&term.scale(R::of(2.0)));
            }
        }
        out
    }

    /// `Gamma_1(f, g) = <a^T grad f, a^T grad g>` at the point.
    pub fn gamma1_value(&self, f: &Jet<R>, g: &Jet<R>) -> R {
        self.a_grad_values(f)
            .iter()
            .zip(self.a_grad_values(g))
            .map(|(&u, v)| u * v)
            .sum()
    }

    /// `Gamma_1^z(f, g) = <z^T grad f, z^T grad g>` at the point.
    pub fn gamma1_z_value(&self, f: &Jet<R>, g: &Jet<R>) -> R {
        self.z_grad_values(f)
            .iter()
            .zip(self.z_grad_values(g))
            .map(|(&u, v)| u * v)
            .sum()
    }

    /// Jet of `Gamma_1(f, g)`, two usable orders below the inputs.
    pub fn gamma1_jet(&self, f: &Jet<R>, g: &Jet<R>) -> Jet<R> {
        let d = self.structure.dim();
        let order = (f.order().min(g.order()) - 1).min(2);
        let fa = self.a_grad_jets(f);
        let ga = self.a_grad_jets(g);
        let mut acc = Jet::constant(d, order, R::zero());
        for (u, v) in fa.iter().zip(&ga) {
            acc = acc.add(&u.mul(v));
        }
        acc
    }

    /// Jet of `Gamma_1^z(f, g)`.
    pub fn gamma1_z_jet(&self, f: &Jet<R>, g: &Jet<R>) -> Jet<R> {
        let d = self.structure.dim();
        let order = (f.order().min(g.order()) - 1).min(2);
        let fz = self.z_grad_jets(f);
        let gz = self.z_grad_jets(g);
        let mut acc = Jet::constant(d, order, R::zero());
        for (u, v) in fz.iter().zip(&gz) {
            acc = acc.add(&u.mul(v));
        }
        acc
    }

    /// `Gamma_2(f, f) = 1/2 L Gamma_1(f, f) - Gamma_1(L f, f)`, with the
    /// drifted generator in both slots when `drift` is set.
    pub fn gamma2_value(&self, f: &Jet<R>, drift: bool) -> R {
        assert!(f.order() >= 3, "Gamma_2 needs an order-3 jet");
        let g1 = self.gamma1_jet(f, f);
        let lf = self.apply_l_jet(f, drift);
        R::of(0.5) * self.apply_l_value(&g1, drift) - self.gamma1_value(&lf, f)
    }

    /// `Gamma_2^z(f, f) = 1/2 L Gamma_1^z(f, f) - Gamma_1^z(L f, f)`.
    pub fn gamma2_z_value(&self, f: &Jet<R>, drift: bool) -> R {
        assert!(f.order() >= 3, "Gamma_2^z needs an order-3 jet");
        let g1z = self.gamma1_z_jet(f, f);
        let lf = self.apply_l_jet(f, drift);
        R::of(0.5) * self.apply_l_value(&g1z, drift) - self.gamma1_z_value(&lf, f)
    }

    /// Flux vector of the divergence-form operator: per coordinate the jet
    /// of `sum_k a[.][k] (a^T grad h)_k`, whose coordinate divergence is
    /// `Delta_P h = div(a a^T grad h)`.
    fn flux_jets(&self, h: &Jet<R>) -> Vec<Jet<R>> {
        let d = self.structure.dim();
        let comps = self.a_grad_jets(h);
        let order = (h.order() - 1).min(2);
        (0..d)
            .map(|ih| {
                let mut acc = Jet::constant(d, order, R::zero());
                for (k, comp) in comps.iter().enumerate() {
                    acc = acc.add(&self.at(k, ih).mul(comp));
                }
                acc
            })
            .collect()
    }

    /// `Delta_P h = div(a a^T grad h)` at the point (order-2 jets suffice).
    pub fn apply_div_value(&self, h: &Jet<R>) -> R {
        assert!(h.order() >= 2, "divergence-form operator needs an order-2 jet");
        self.flux_jets(h)
            .iter()
            .enumerate()
            .map(|(ih, w)| w.d1(ih))
            .sum()
    }

    /// Jet of `Delta_P h`; an order-3 input yields an order-1 jet.
    pub fn apply_div_jet(&self, h: &Jet<R>) -> Jet<R> {
        assert!(h.order() >= 3, "divergence-form jet needs an order-3 jet");
        let d = self.structure.dim();
        let fluxes = self.flux_jets(h);
        let mut out = Jet::constant(d, 1, R::zero());
        for (ih, w) in fluxes.iter().enumerate() {
            out = out.add(&w.extract_partial(ih));
        }
        out
    }

    /// Iterated form of the divergence-form operator: `1/2 Delta_P Gamma_1
    /// - Gamma_1(Delta_P f, f)`. Agrees with `Gamma_2` exactly when the
    /// frame columns are divergence-free; in general the two differ by
    /// first-order terms in `a (x) grad a`, and it is this variant whose
    /// gap against the composition form is the Bochner correction.
    pub fn gamma2_a_value(&self, f: &Jet<R>) -> R {
        assert!(f.order() >= 3, "Gamma_2a needs an order-3 jet");
        let g1 = self.gamma1_jet(f, f);
        let lf = self.apply_div_jet(f);
        R::of(0.5) * self.apply_div_value(&g1) - self.gamma1_value(&lf, f)
    }

    /// `(a^T grad) o (a^T grad h)` contracted at the point: the horizontal
    /// composition `sum_i sum_ihat a^T[i][ihat] d_ihat (a^T grad h)_i`.
    fn a_circ_value(&self, h: &Jet<R>) -> R {
        let d = self.structure.dim();
        let comps = self.a_grad_jets(h);
        let mut out = R::zero();
        for (i, comp) in comps.iter().enumerate() {
            for ihat in 0..d {
                out += self.at(i, ihat).value() * comp.d1(ihat);
            }
        }
        out
    }

    /// Jet of `(a^T grad) o (a^T grad f)`, order 1 for an order-3 input.
    fn a_circ_jet(&self, f: &Jet<R>) -> Jet<R> {
        let d = self.structure.dim();
        let comps = self.a_grad_jets(f);
        let mut out = Jet::constant(d, (f.order() - 2).min(1), R::zero());
        for (i, comp) in comps.iter().enumerate() {
            for ihat in 0..d {
                out = out.add(&self.at(i, ihat).mul(&comp.extract_partial(ihat)));
            }
        }
        out
    }

    /// Horizontal iterated form built from compositions instead of the
    /// generator: `1/2 (a^T grad) o (a^T grad Gamma_1) - <a^T grad ((a^T
    /// grad) o (a^T grad f)), a^T grad f>`. Differs from the
    /// divergence-form variant [`Self::gamma2_a_value`] by the Bochner form
    /// of [`Self::bochner_form`].
    pub fn gamma2_h_value(&self, f: &Jet<R>) -> R {
        assert!(f.order() >= 3, "horizontal Gamma_2 needs an order-3 jet");
        let g1 = self.gamma1_jet(f, f);
        let hcomp = self.a_circ_jet(f);
        R::of(0.5) * self.a_circ_value(&g1) - self.gamma1_value(&hcomp, f)
    }

    /// Components `<grad f, d_khat(a a^T) grad f>` for each coordinate, as
    /// order-1 jets (the vector the z-weighted divergence acts on).
    fn grad_gram_jets(&self, rows: &[Vec<Jet<R>>], f: &Jet<R>) -> Vec<Jet<R>> {
        let d = self.structure.dim();
        let width = rows.len();
        let order = (f.order() - 1).min(1);
        // Gram entries (a a^T)_{ij} as order-2 jets.
        let mut gram = vec![Vec::with_capacity(d); d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = Jet::constant(d, 2, R::zero());
                for k in 0..width {
                    acc = acc.add(&rows[k][i].mul(&rows[k][j]));
                }
                gram[i].push(acc);
            }
        }
        let partials: Vec<Jet<R>> = (0..d).map(|i| f.extract_partial(i)).collect();
        (0..d)
            .map(|khat| {
                let mut acc = Jet::constant(d, order, R::zero());
                for i in 0..d {
                    for j in 0..d {
                        let term = partials[i].mul(&gram[i][j].extract_partial(khat)).mul(&partials[j]);
                        acc = acc.add(&term);
                    }
                }
                acc
            })
            .collect()
    }

    /// Weighted divergence `div(gram . field) + <grad logw, gram . field>`
    /// where `gram` rows are frame columns (so `gram` means `rows rows^T`).
    fn weighted_div(&self, rows: &[Vec<Jet<R>>], field: &[Jet<R>], logw: &Jet<R>) -> R {
        let d = self.structure.dim();
        let width = rows.len();
        let mut out = R::zero();
        for i in 0..d {
            let mut vi = Jet::constant(d, 1, R::zero());
            for j in 0..d {
                let mut gram_ij = Jet::constant(d, 1, R::zero());
                for k in 0..width {
                    gram_ij = gram_ij.add(&rows[k][i].mul(&rows[k][j]));
                }
                vi = vi.add(&gram_ij.mul(&field[j]));
            }
            out += vi.d1(i) + logw.d1(i) * vi.value();
        }
        out
    }

    /// The divergence correction `div_z^Psi(Gamma_{grad(aa^T)}(f, f)) -
    /// div_a^Psi(Gamma_{grad(zz^T)}(f, f))` for the log-weight jet `logw`.
    pub fn div_correction_value(&self, f: &Jet<R>, logw: &Jet<R>) -> R {
        assert!(f.order() >= 2, "divergence correction needs an order-2 jet");
        assert!(logw.order() >= 1, "log-weight jet must carry first derivatives");
        let d = self.structure.dim();
        // Columns of a (and z) as jet rows: entry [k][i] = a^T[k][i].
        let a_rows: Vec<Vec<Jet<R>>> = (0..self.structure.n_a())
            .map(|k| (0..d).map(|i| self.at(k, i).clone()).collect())
            .collect();
        let z_rows: Vec<Vec<Jet<R>>> = (0..self.structure.m_z())
            .map(|k| (0..d).map(|i| self.zt(k, i).clone()).collect())
            .collect();
        let f_a = self.grad_gram_jets(&a_rows, f);
        let f_z = self.grad_gram_jets(&z_rows, f);
        self.weighted_div(&z_rows, &f_a, logw) - self.weighted_div(&a_rows, &f_z, logw)
    }

    /// `Gamma_2^{z,Psi}(f, f)`: the plain z-form plus the divergence
    /// correction for the weight whose log-jet is `logw`.
    pub fn gamma2_z_psi_value(&self, f: &Jet<R>, logw: &Jet<R>, drift: bool) -> R {
        self.gamma2_z_value(f, drift) + self.div_correction_value(f, logw)
    }

    /// The Bochner mismatch `Gamma_{2,a} - Gamma_{2,H}` as a quadratic form
    /// in `grad f`: the Hessian of the log-volume of the structure. Zero for
    /// flat and group-linear frames.
    pub fn bochner_form(&self) -> QuadraticForm<R> {
        let d = self.structure.dim();
        let n = self.structure.n_a();
        let av = |k: usize, khat: usize| self.at(k, khat).value();
        let ad = |k: usize, khat: usize, j: usize| self.at(k, khat).d1(j);
        let ad2 = |k: usize, khat: usize, j1: usize, j2: usize| self.at(k, khat).d2(j1, j2);

        // B[l][k] = sum_{j'} a^T[l][j'] sum_i d^2_{i j'} a^T[k][i].
        let mut b = vec![vec![R::zero(); n]; n];
        for l in 0..n {
            for k in 0..n {
                for jp in 0..d {
                    let mut inner = R::zero();
                    for i in 0..d {
                        inner += ad2(k, i, i, jp);
                    }
                    b[l][k] += av(l, jp) * inner;
                }
            }
        }
        // First piece: -<B a^T grad f, a^T grad f> as a form in grad f.
        let mut m = nalgebra::DMatrix::zeros(d, d);
        for l in 0..n {
            for k in 0..n {
                for ihat in 0..d {
                    for jhat in 0..d {
                        m[(ihat, jhat)] -= av(l, ihat) * b[l][k] * av(k, jhat);
                    }
                }
            }
        }
        // Column divergences div_k = sum_ihat d_ihat a_{ihat k}.
        let divk: Vec<R> = (0..n)
            .map(|k| (0..d).map(|ihat| ad(k, ihat, ihat)).sum())
            .collect();
        // Second piece: sum_l (a^T grad f)_l sum_k div_k [ a^T[k][.] d a^T[l]
        // - a^T[l][.] d a^T[k] ] paired against grad f.
        for l in 0..n {
            for k in 0..n {
                for jhat in 0..d {
                    // coefficient of f_jhat inside the bracket, times div_k
                    for khat in 0..d {
                        let w = divk[k] * (av(k, khat) * ad(l, jhat, khat) - av(l, khat) * ad(k, jhat, khat));
                        for ihat in 0..d {
                            m[(ihat, jhat)] += av(l, ihat) * w;
                        }
                    }
                }
            }
        }
        QuadraticForm::symmetrized(m, Basis::Gradient)
    }
}

/// `L f` (or the drifted generator) at `x`.
pub fn apply_l<R: Real>(
    structure: &Structure,
    f: &Expression,
    x: &[R],
    drift: bool,
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 2)?;
    Ok(ctx.apply_l_value(&fj, drift))
}

/// `Gamma_1(f, g)` at `x`.
pub fn gamma1<R: Real>(
    structure: &Structure,
    f: &Expression,
    g: &Expression,
    x: &[R],
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 1)?;
    let gj = g.eval_jet(x, 1)?;
    Ok(ctx.gamma1_value(&fj, &gj))
}

/// `Gamma_1^z(f, g)` at `x`.
pub fn gamma1_z<R: Real>(
    structure: &Structure,
    f: &Expression,
    g: &Expression,
    x: &[R],
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 1)?;
    let gj = g.eval_jet(x, 1)?;
    Ok(ctx.gamma1_z_value(&fj, &gj))
}

/// `Gamma_2(f, f)` at `x` through the commutator definition.
pub fn gamma2_direct<R: Real>(
    structure: &Structure,
    f: &Expression,
    x: &[R],
    drift: bool,
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 3)?;
    Ok(ctx.gamma2_value(&fj, drift))
}

/// `Gamma_2^z(f, f)` at `x`.
pub fn gamma2_z_direct<R: Real>(
    structure: &Structure,
    f: &Expression,
    x: &[R],
    drift: bool,
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 3)?;
    Ok(ctx.gamma2_z_value(&fj, drift))
}

/// Divergence-form iterated operator `Gamma_{2,a}(f, f)` at `x`.
pub fn gamma2_a<R: Real>(
    structure: &Structure,
    f: &Expression,
    x: &[R],
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 3)?;
    Ok(ctx.gamma2_a_value(&fj))
}

/// Horizontal `Gamma_{2,H}(f, f)` at `x` (composition convention).
pub fn gamma2_h<R: Real>(
    structure: &Structure,
    f: &Expression,
    x: &[R],
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 3)?;
    Ok(ctx.gamma2_h_value(&fj))
}

/// The divergence correction term of the generalized z-form.
pub fn div_correction<R: Real>(
    structure: &Structure,
    f: &Expression,
    x: &[R],
    weight: &Weight,
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 2)?;
    let logw = weight.log_jet(structure, x, 1)?;
    Ok(ctx.div_correction_value(&fj, &logw))
}

/// `Gamma_2^{z,Psi}(f, f)` at `x`.
pub fn gamma2_z_psi<R: Real>(
    structure: &Structure,
    f: &Expression,
    x: &[R],
    weight: &Weight,
    drift: bool,
) -> Result<R, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    let fj = f.eval_jet(x, 3)?;
    let logw = weight.log_jet(structure, x, 1)?;
    Ok(ctx.gamma2_z_psi_value(&fj, &logw, drift))
}

/// Quadratic form with `Gamma_2 - Gamma_{2,H} = <M grad f, grad f>`.
pub fn bochner_correction<R: Real>(
    structure: &Structure,
    x: &[R],
) -> Result<QuadraticForm<R>, DomainError> {
    let ctx = GammaContext::new(structure, x)?;
    Ok(ctx.bochner_form())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::builtin;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::collections::BTreeMap;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    fn expr(structure: &Structure, text: &str) -> Expression {
        let vars: Vec<&str> = structure.variables().iter().map(|s| s.as_str()).collect();
        Expression::parse(text, &vars).unwrap()
    }

    #[test]
    fn heisenberg_gamma1_frozen() {
        let s = builtin("heisenberg", &params(&[])).unwrap();
        let f = expr(&s, "x3");
        for &(x1, x2, x3) in &[(0.3, -0.7, 0.2), (1.1, 0.4, -0.5)] {
            let got: f64 = gamma1(&s, &f, &f, &[x1, x2, x3]).unwrap();
            assert_relative_eq!(got, (x1 * x1 + x2 * x2) / 4.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn grushin_generator_frozen() {
        let s = builtin("grushin", &params(&[("k", 1.0)])).unwrap();
        let fx2 = expr(&s, "x^2");
        let fy2 = expr(&s, "y^2");
        let x = [0.7, -0.3];
        let lx2: f64 = apply_l(&s, &fx2, &x, false).unwrap();
        let ly2: f64 = apply_l(&s, &fy2, &x, false).unwrap();
        assert_relative_eq!(lx2, 2.0, max_relative = 1e-13);
        assert_relative_eq!(ly2, 2.0 * x[0] * x[0], max_relative = 1e-13);
        let fy = expr(&s, "y");
        let g1: f64 = gamma1(&s, &fy, &fy, &x).unwrap();
        assert_relative_eq!(g1, x[0].powi(2), max_relative = 1e-13);
    }

    #[test]
    fn euclidean_gamma2_frozen() {
        let s = builtin("euclidean", &params(&[])).unwrap();
        let f = expr(&s, "x1^2 + x2^2");
        let got: f64 = gamma2_direct(&s, &f, &[0.4, -1.2], false).unwrap();
        assert_relative_eq!(got, 8.0, max_relative = 1e-13);
    }

    #[test]
    fn product_rule_via_generator() {
        // Gamma_1(f, g) = 1/2 (L(fg) - f Lg - g Lf), checked on su2.
        let s = builtin("su2", &params(&[])).unwrap();
        let f = expr(&s, "sin(theta) * phi + psi^2");
        let g = expr(&s, "cos(phi) + theta * psi");
        let x = [0.9_f64, 0.4, -0.6];
        let ctx = GammaContext::new(&s, &x).unwrap();
        let fj = f.eval_jet(&x, 2).unwrap();
        let gj = g.eval_jet(&x, 2).unwrap();
        let prod = fj.mul(&gj);
        let lhs = ctx.gamma1_value(&fj, &gj);
        let rhs = 0.5
            * (ctx.apply_l_value(&prod, false)
                - fj.value() * ctx.apply_l_value(&gj, false)
                - gj.value() * ctx.apply_l_value(&fj, false));
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn zero_drift_matches_plain_generator() {
        let s = builtin("heisenberg", &params(&[])).unwrap();
        let f = expr(&s, "x1^2 * x2 + sin(x3)");
        let x = [0.5_f64, -0.8, 0.3];
        let plain: f64 = gamma2_direct(&s, &f, &x, false).unwrap();
        let drifted: f64 = gamma2_direct(&s, &f, &x, true).unwrap();
        assert_eq!(plain.to_bits(), drifted.to_bits());
    }

    #[test]
    fn bochner_zero_for_linear_frames() {
        for name in ["euclidean", "heisenberg"] {
            let s = builtin(name, &params(&[])).unwrap();
            let x: Vec<f64> = (0..s.dim()).map(|i| 0.3 + 0.2 * i as f64).collect();
            let form = bochner_correction::<f64>(&s, &x).unwrap();
            for v in form.matrix().iter() {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn bochner_closes_su2_gap() {
        let s = builtin("su2", &params(&[])).unwrap();
        let fs = ["theta^2 * phi", "sin(phi) + psi * theta", "cos(theta) * psi^2"];
        let x = [1.1_f64, 0.7, -0.4];
        let form = bochner_correction::<f64>(&s, &x).unwrap();
        for text in fs {
            let f = expr(&s, text);
            let fj = f.eval_jet(&x, 3).unwrap();
            let grad = nalgebra::DVector::from_iterator(3, (0..3).map(|i| fj.d1(i)));
            let div_form: f64 = gamma2_a(&s, &f, &x).unwrap();
            let viah: f64 = gamma2_h(&s, &f, &x).unwrap();
            assert_relative_eq!(div_form - viah, form.evaluate(&grad), max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma2_a_matches_gamma2_when_columns_divergence_free() {
        // The generator and the divergence-form operator coincide whenever
        // a (x) grad a vanishes, which holds for these frames.
        for (name, ps, x) in [
            ("heisenberg", vec![], vec![0.4_f64, -0.2, 0.9]),
            ("grushin", vec![("k", 2.0)], vec![0.7, 0.1]),
            ("langevin_var", vec![("gamma", 0.8), ("omega", 1.2)], vec![0.5, -0.3]),
        ] {
            let s = builtin(name, &params(&ps)).unwrap();
            let texts = ["0.3 * @0^2 * @1", "sin(@0) + @1^2"];
            for t in texts {
                let vars = s.variables();
                let text = t.replace("@0", &vars[0]).replace("@1", &vars[1]);
                let f = expr(&s, &text);
                let a: f64 = gamma2_a(&s, &f, &x).unwrap();
                let l: f64 = gamma2_direct(&s, &f, &x, false).unwrap();
                assert_relative_eq!(a, l, max_relative = 1e-11, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn div_correction_vanishes_without_z() {
        let s = builtin("grushin", &params(&[("k", 2.0)])).unwrap();
        let f = expr(&s, "x^2 * y + y^3");
        let got: f64 = div_correction(&s, &f, &[0.8, 0.5], &Weight::Vol).unwrap();
        assert_abs_diff_eq!(got, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn custom_weight_must_share_variables() {
        let s = builtin("heisenberg", &params(&[])).unwrap();
        let w = Expression::parse("u^2", &["u"]).unwrap();
        let err = Weight::Custom(&w).log_jet::<f64>(&s, &[0.1, 0.2, 0.3], 1).unwrap_err();
        assert!(err.what.contains("variables"));
    }
}
