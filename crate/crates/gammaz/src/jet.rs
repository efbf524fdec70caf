//! Truncated Taylor (jet) arithmetic up to order 3.
//!
//! A [`Jet`] stores the value and all partial derivatives of a scalar field
//! at a point, up to the requested order. Symmetric derivative tensors are
//! stored once per index multiset, so permuted access is bit-identical by
//! construction.

use crate::real::Real;
use std::fmt;

/// Packed index for the symmetric second-derivative table, `i <= j`.
#[inline]
fn pack2(i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    j * (j + 1) / 2 + i
}

/// Packed index for the symmetric third-derivative table, `i <= j <= k`.
#[inline]
fn pack3(i: usize, j: usize, k: usize) -> usize {
    debug_assert!(i <= j && j <= k);
    k * (k + 1) * (k + 2) / 6 + j * (j + 1) / 2 + i
}

fn sort2(mut i: usize, mut j: usize) -> (usize, usize) {
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    (i, j)
}

fn sort3(i: usize, j: usize, k: usize) -> (usize, usize, usize) {
    let mut t = [i, j, k];
    t.sort_unstable();
    (t[0], t[1], t[2])
}

/// Arithmetic failure inside jet evaluation (division by zero, log/sqrt of a
/// nonpositive argument, fractional power of a nonpositive base).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainError {
    pub what: String,
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "domain error: {}", self.what)
    }
}

impl std::error::Error for DomainError {}

fn domain<T>(what: impl Into<String>) -> Result<T, DomainError> {
    Err(DomainError { what: what.into() })
}

/// Value plus exact partial derivatives up to `order` (0..=3) in `dim`
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet<R: Real> {
    dim: usize,
    order: usize,
    v: R,
    d1: Vec<R>,
    d2: Vec<R>,
    d3: Vec<R>,
}

impl<R: Real> Jet<R> {
    /// Jet of a constant field.
    pub fn constant(dim: usize, order: usize, v: R) -> Self {
        assert!(order <= 3, "jet order capped at 3");
        let n2 = if order >= 2 { dim * (dim + 1) / 2 } else { 0 };
        let n3 = if order >= 3 { dim * (dim + 1) * (dim + 2) / 6 } else { 0 };
        Jet {
            dim,
            order,
            v,
            d1: vec![R::zero(); if order >= 1 { dim } else { 0 }],
            d2: vec![R::zero(); n2],
            d3: vec![R::zero(); n3],
        }
    }

    /// Jet of the coordinate function `x_k` at value `v`.
    pub fn coordinate(dim: usize, order: usize, k: usize, v: R) -> Self {
        assert!(k < dim);
        let mut j = Self::constant(dim, order, v);
        if order >= 1 {
            j.d1[k] = R::one();
        }
        j
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn value(&self) -> R {
        self.v
    }

    /// First partial with respect to `x_i`.
    pub fn d1(&self, i: usize) -> R {
        assert!(self.order >= 1);
        self.d1[i]
    }

    /// Second partial, symmetric in the index pair.
    pub fn d2(&self, i: usize, j: usize) -> R {
        assert!(self.order >= 2);
        let (i, j) = sort2(i, j);
        self.d2[pack2(i, j)]
    }

    /// Third partial, symmetric under all index permutations.
    pub fn d3(&self, i: usize, j: usize, k: usize) -> R {
        assert!(self.order >= 3);
        let (i, j, k) = sort3(i, j, k);
        self.d3[pack3(i, j, k)]
    }

    pub fn gradient(&self) -> Vec<R> {
        assert!(self.order >= 1);
        self.d1.clone()
    }

    /// Jet of the partial derivative field `x -> (d f / d x_k)(x)`, one order
    /// lower than `self`. This is how higher operators (L, Gamma) are
    /// composed from a single deep jet of the input.
    pub fn extract_partial(&self, k: usize) -> Jet<R> {
        assert!(self.order >= 1, "cannot lower an order-0 jet");
        let mut out = Jet::constant(self.dim, self.order - 1, self.d1[k]);
        if out.order >= 1 {
            for i in 0..self.dim {
                out.d1[i] = self.d2(i, k);
            }
        }
        if out.order >= 2 {
            for j in 0..self.dim {
                for i in 0..=j {
                    out.d2[pack2(i, j)] = self.d3(i, j, k);
                }
            }
        }
        out
    }

    /// Truncate to a lower order (cheap view used when mixing jets of
    /// different depths).
    pub fn truncated(&self, order: usize) -> Jet<R> {
        assert!(order <= self.order);
        let mut out = Self::constant(self.dim, order, self.v);
        if order >= 1 {
            out.d1.copy_from_slice(&self.d1[..]);
        }
        if order >= 2 {
            out.d2.copy_from_slice(&self.d2[..]);
        }
        if order >= 3 {
            out.d3.copy_from_slice(&self.d3[..]);
        }
        out
    }

    fn zip(&self, rhs: &Jet<R>, f: impl Fn(R, R) -> R) -> Jet<R> {
        assert_eq!(self.dim, rhs.dim, "jet dimension mismatch");
        let order = self.order.min(rhs.order);
        let mut out = Jet::constant(self.dim, order, f(self.v, rhs.v));
        for i in 0..out.d1.len() {
            out.d1[i] = f(self.d1[i], rhs.d1[i]);
        }
        for i in 0..out.d2.len() {
            out.d2[i] = f(self.d2[i], rhs.d2[i]);
        }
        for i in 0..out.d3.len() {
            out.d3[i] = f(self.d3[i], rhs.d3[i]);
        }
        out
    }

    pub fn add(&self, rhs: &Jet<R>) -> Jet<R> {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Jet<R>) -> Jet<R> {
        self.zip(rhs, |a, b| a - b)
    }

    pub fn neg(&self) -> Jet<R> {
        self.scale(-R::one())
    }

    pub fn scale(&self, c: R) -> Jet<R> {
        let mut out = self.clone();
        out.v *= c;
        out.d1.iter_mut().for_each(|x| *x *= c);
        out.d2.iter_mut().for_each(|x| *x *= c);
        out.d3.iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Leibniz product, exact to the common stored order.
    pub fn mul(&self, rhs: &Jet<R>) -> Jet<R> {
        assert_eq!(self.dim, rhs.dim, "jet dimension mismatch");
        let order = self.order.min(rhs.order);
        let (f, g) = (self, rhs);
        let mut out = Jet::constant(self.dim, order, f.v * g.v);
        if order >= 1 {
            for i in 0..self.dim {
                out.d1[i] = f.d1[i] * g.v + f.v * g.d1[i];
            }
        }
        if order >= 2 {
            for j in 0..self.dim {
                for i in 0..=j {
                    out.d2[pack2(i, j)] = f.d2(i, j) * g.v
                        + f.d1[i] * g.d1[j]
                        + f.d1[j] * g.d1[i]
                        + f.v * g.d2(i, j);
                }
            }
        }
        if order >= 3 {
            for k in 0..self.dim {
                for j in 0..=k {
                    for i in 0..=j {
                        out.d3[pack3(i, j, k)] = f.d3(i, j, k) * g.v
                            + f.d2(i, j) * g.d1[k]
                            + f.d2(i, k) * g.d1[j]
                            + f.d2(j, k) * g.d1[i]
                            + f.d1[i] * g.d2(j, k)
                            + f.d1[j] * g.d2(i, k)
                            + f.d1[k] * g.d2(i, j)
                            + f.v * g.d3(i, j, k);
                    }
                }
            }
        }
        out
    }

    pub fn div(&self, rhs: &Jet<R>) -> Result<Jet<R>, DomainError> {
        if rhs.v == R::zero() {
            return domain("division by zero");
        }
        Ok(self.mul(&rhs.recip()?))
    }

    fn recip(&self) -> Result<Jet<R>, DomainError> {
        if self.v == R::zero() {
            return domain("division by zero");
        }
        let u = self.v;
        let iu = R::one() / u;
        let two = R::of(2.0);
        let six = R::of(6.0);
        Ok(self.compose([iu, -iu * iu, two * iu * iu * iu, -six * iu * iu * iu * iu]))
    }

    /// Faà di Bruno to order 3 for a scalar function with derivatives
    /// `c = [phi(u), phi'(u), phi''(u), phi'''(u)]` at `u = self.value()`.
    pub fn compose(&self, c: [R; 4]) -> Jet<R> {
        let u = self;
        let mut out = Jet::constant(self.dim, self.order, c[0]);
        if self.order >= 1 {
            for i in 0..self.dim {
                out.d1[i] = c[1] * u.d1[i];
            }
        }
        if self.order >= 2 {
            for j in 0..self.dim {
                for i in 0..=j {
                    out.d2[pack2(i, j)] = c[1] * u.d2(i, j) + c[2] * u.d1[i] * u.d1[j];
                }
            }
        }
        if self.order >= 3 {
            for k in 0..self.dim {
                for j in 0..=k {
                    for i in 0..=j {
                        out.d3[pack3(i, j, k)] = c[1] * u.d3(i, j, k)
                            + c[2]
                                * (u.d1[i] * u.d2(j, k)
                                    + u.d1[j] * u.d2(i, k)
                                    + u.d1[k] * u.d2(i, j))
                            + c[3] * u.d1[i] * u.d1[j] * u.d1[k];
                    }
                }
            }
        }
        out
    }

    pub fn sin(&self) -> Jet<R> {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.compose([s, c, -s, -c])
    }

    pub fn cos(&self) -> Jet<R> {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.compose([c, -s, -c, s])
    }

    pub fn tan(&self) -> Jet<R> {
        let t = self.v.tan();
        let s = R::one() + t * t; // sec^2
        let two = R::of(2.0);
        let four = R::of(4.0);
        // tan''' = d/du (2 t s) = 2 s^2 + 4 t^2 s
        self.compose([t, s, two * t * s, two * s * s + four * t * t * s])
    }

    pub fn exp(&self) -> Jet<R> {
        let e = self.v.exp();
        self.compose([e, e, e, e])
    }

    pub fn ln(&self) -> Result<Jet<R>, DomainError> {
        if self.v <= R::zero() {
            return domain(format!("log of nonpositive value {}", self.v));
        }
        let iu = R::one() / self.v;
        let two = R::of(2.0);
        Ok(self.compose([self.v.ln(), iu, -iu * iu, two * iu * iu * iu]))
    }

    pub fn sqrt(&self) -> Result<Jet<R>, DomainError> {
        if self.v < R::zero() {
            return domain(format!("sqrt of negative value {}", self.v));
        }
        if self.v == R::zero() && self.order >= 1 {
            return domain("sqrt derivative at zero");
        }
        let s = self.v.sqrt();
        let half = R::of(0.5);
        let c1 = half / s;
        let c2 = -half * c1 / self.v;
        let c3 = -R::of(1.5) * c2 / self.v;
        Ok(self.compose([s, c1, c2, c3]))
    }

    pub fn sinh(&self) -> Jet<R> {
        let (s, c) = (self.v.sinh(), self.v.cosh());
        self.compose([s, c, s, c])
    }

    pub fn cosh(&self) -> Jet<R> {
        let (s, c) = (self.v.sinh(), self.v.cosh());
        self.compose([c, s, c, s])
    }

    pub fn tanh(&self) -> Jet<R> {
        let t = self.v.tanh();
        let s = R::one() - t * t; // sech^2
        let two = R::of(2.0);
        let four = R::of(4.0);
        // tanh''' = d/du (-2 t s) = -2 s^2 + 4 t^2 s
        self.compose([t, s, -two * t * s, -two * s * s + four * t * t * s])
    }

    /// Integer power, valid for nonpositive bases; negative exponents require
    /// a nonzero base.
    pub fn powi(&self, n: i64) -> Result<Jet<R>, DomainError> {
        if n < 0 && self.v == R::zero() {
            return domain("negative power of zero");
        }
        let mut c = [R::zero(); 4];
        for (r, slot) in c.iter_mut().enumerate() {
            let r = r as i64;
            // falling factorial n (n-1) ... (n-r+1)
            let mut coeff = R::one();
            for s in 0..r {
                coeff *= R::of((n - s) as f64);
            }
            if coeff == R::zero() {
                *slot = R::zero();
            } else {
                *slot = coeff * int_pow(self.v, n - r);
            }
        }
        Ok(self.compose(c))
    }

    /// Real power through `exp(b log u)`; requires a positive base.
    pub fn powf(&self, b: R) -> Result<Jet<R>, DomainError> {
        if self.v <= R::zero() {
            return domain(format!("fractional power of nonpositive base {}", self.v));
        }
        let u = self.v;
        let p = (b * u.ln()).exp();
        let c1 = b * p / u;
        let c2 = b * (b - R::one()) * p / (u * u);
        let c3 = b * (b - R::one()) * (b - R::of(2.0)) * p / (u * u * u);
        Ok(self.compose([p, c1, c2, c3]))
    }
}

fn int_pow<R: Real>(base: R, mut e: i64) -> R {
    if e == 0 {
        return R::one();
    }
    let inv = e < 0;
    e = e.abs();
    let mut acc = R::one();
    let mut b = base;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    if inv {
        R::one() / acc
    } else {
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_is_exact() {
        // f = x^2 y, g = sin(x) + y at (0.3, -1.2), order 3
        let x = Jet::<f64>::coordinate(2, 3, 0, 0.3);
        let y = Jet::<f64>::coordinate(2, 3, 1, -1.2);
        let f = x.mul(&x).mul(&y);
        let g = x.sin().add(&y);
        let fg = f.mul(&g);
        // compare a third derivative against the hand expansion
        let d = fg.d3(0, 0, 1); // d^3/dx^2 dy of x^2 y (sin x + y)
        // fg = x^2 y sin x + x^2 y^2
        // d/dy: x^2 sin x + 2 x^2 y ; d^2/dx dy: 2x sin x + x^2 cos x + 4 x y
        // d^3/dx^2 dy: 2 sin x + 4x cos x - x^2 sin x + 4 y
        let expect = 2.0 * 0.3f64.sin() + 4.0 * 0.3 * 0.3f64.cos()
            - 0.09 * 0.3f64.sin()
            + 4.0 * (-1.2);
        assert!((d - expect).abs() < 1e-13);
    }

    #[test]
    fn extract_partial_lowers_order() {
        let x = Jet::<f64>::coordinate(2, 3, 0, 0.5);
        let y = Jet::<f64>::coordinate(2, 3, 1, 2.0);
        let f = x.mul(&y).mul(&y); // x y^2
        let fx = f.extract_partial(0); // y^2, order 2
        assert_eq!(fx.order(), 2);
        assert!((fx.value() - 4.0).abs() < 1e-15);
        assert!((fx.d1(1) - 4.0).abs() < 1e-15);
        assert!((fx.d2(1, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn tan_derivatives_match_sin_over_cos() {
        let x = Jet::<f64>::coordinate(1, 3, 0, 0.4);
        let direct = x.tan();
        let ratio = x.sin().div(&x.cos()).unwrap();
        for (a, b) in [
            (direct.value(), ratio.value()),
            (direct.d1(0), ratio.d1(0)),
            (direct.d2(0, 0), ratio.d2(0, 0)),
            (direct.d3(0, 0, 0), ratio.d3(0, 0, 0)),
        ] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn integer_power_at_negative_base() {
        let x = Jet::<f64>::coordinate(1, 3, 0, -1.5);
        let p = x.powi(3).unwrap();
        assert!((p.value() + 3.375).abs() < 1e-15);
        assert!((p.d1(0) - 3.0 * 2.25).abs() < 1e-15);
        assert!((p.d2(0, 0) - 6.0 * -1.5).abs() < 1e-15);
        assert!((p.d3(0, 0, 0) - 6.0).abs() < 1e-15);
    }
}
