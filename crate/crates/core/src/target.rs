//! Target distributions, mass matrices and the Hamiltonian.
//!
//! A target is described by its potential `U = -log density` and gradient.
//! All downstream weight computations work with `-H`, never with `exp(-H)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// A point `(q, p)` of phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub q: Vector,
    pub p: Vector,
}

impl PhasePoint {
    pub fn new(q: Vector, p: Vector) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: p.len(),
            });
        }
        Ok(Self { q, p })
    }

    pub fn from_slices(q: &[f64], p: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(q), Vector::from_column_slice(p))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Negates the momentum.
    pub fn flip(&self) -> Self {
        Self {
            q: self.q.clone(),
            p: -&self.p,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// User-supplied potential.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, q: &Vector) -> f64;
    fn gradient(&self, q: &Vector) -> Vector;
}

#[derive(Clone)]
enum Family {
    Flat,
    StandardGaussian,
    Gaussian { precision: Matrix },
    PerturbedGaussian { precision: Matrix, a5: f64 },
    DoubleWell,
    Custom(Arc<dyn Potential>),
}

/// Tail-growth class of a potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthClass {
    General,
    /// Polynomial growth of order `m` in `(1, 2]`.
    H6 { m: f64 },
    /// Quadratic form plus a perturbation with sub-quadratic growth.
    H7,
    /// Same perturbation bounds as `H7`, used for plain HMC results.
    H8,
}

/// Constants attached to a growth class; absent entries are unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    /// `|grad U(q)| <= m1 (1 + |q|^{m-1})`.
    pub m1: Option<f64>,
    /// `grad U(q)^T q >= a1 |q|^m - a2`.
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    /// Perturbation bound.
    pub a5: Option<f64>,
    /// Perturbation growth exponent.
    pub rho: Option<f64>,
}

#[derive(Clone)]
pub struct Target {
    name: String,
    dim: usize,
    family: Family,
    lipschitz_l1: Option<f64>,
    growth: GrowthClass,
    constants: GrowthConstants,
}

impl fmt::Debug for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Target")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lipschitz_l1", &self.lipschitz_l1)
            .field("growth", &self.growth)
            .finish()
    }
}

/// Serializable description of a built-in target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub dim: usize,
    /// Row-major precision matrix; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    /// Perturbation strength for `perturbed_gaussian`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a5: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    StandardGaussian,
    Gaussian,
    PerturbedGaussian,
    DoubleWell,
    Flat,
}

impl TargetSpec {
    pub fn build(&self) -> Result<Target> {
        builtin_target(self)
    }
}

/// Builds one of the built-in targets.
pub fn builtin_target(spec: &TargetSpec) -> Result<Target> {
    if spec.dim == 0 {
        return Err(invalid("target.dim", "must be positive"));
    }
    let precision = || -> Result<Matrix> {
        match &spec.sigma {
            None => Ok(Matrix::identity(spec.dim, spec.dim)),
            Some(values) => {
                if values.len() != spec.dim * spec.dim {
                    return Err(invalid(
                        "target.sigma",
                        format!("expected {} entries, got {}", spec.dim * spec.dim, values.len()),
                    ));
                }
                Ok(Matrix::from_row_slice(spec.dim, spec.dim, values))
            }
        }
    };
    match spec.kind {
        TargetKind::StandardGaussian => Ok(Target::standard_gaussian(spec.dim)),
        TargetKind::Gaussian => Target::gaussian(precision()?),
        TargetKind::PerturbedGaussian => {
            let a5 = spec.a5.ok_or(Error::MissingConstant("target.a5"))?;
            Target::perturbed_gaussian(precision()?, a5)
        }
        TargetKind::DoubleWell => {
            if spec.dim != 1 {
                return Err(invalid("target.dim", "double_well is one-dimensional"));
            }
            Ok(Target::double_well())
        }
        TargetKind::Flat => Ok(Target::flat(spec.dim)),
    }
}

fn check_spd(m: &Matrix) -> Result<SymmetricEigen<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite);
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(eig)
}

impl Target {
    /// `U(q) = |q|^2 / 2`.
    pub fn standard_gaussian(dim: usize) -> Self {
        Self {
            name: "standard_gaussian".into(),
            dim,
            family: Family::StandardGaussian,
            lipschitz_l1: Some(1.0),
            growth: GrowthClass::H6 { m: 2.0 },
            constants: GrowthConstants {
                m1: Some(1.0),
                a1: Some(1.0),
                a2: Some(0.0),
                ..Default::default()
            },
        }
    }

    /// `U(q) = q^T Σ q / 2` for an SPD precision matrix `Σ`.
    pub fn gaussian(precision: Matrix) -> Result<Self> {
        let eig = check_spd(&precision)?;
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        Ok(Self {
            name: "gaussian".into(),
            dim: precision.nrows(),
            family: Family::Gaussian { precision },
            lipschitz_l1: Some(lmax),
            growth: GrowthClass::H6 { m: 2.0 },
            constants: GrowthConstants {
                m1: Some(lmax),
                a1: Some(lmin),
                a2: Some(0.0),
                ..Default::default()
            },
        })
    }

    /// `U(q) = q^T Σ q / 2 + a5 Σ_i log cosh(q_i)`.
    pub fn perturbed_gaussian(precision: Matrix, a5: f64) -> Result<Self> {
        if !(a5 >= 0.0 && a5.is_finite()) {
            return Err(invalid("target.a5", "must be finite and nonnegative"));
        }
        let eig = check_spd(&precision)?;
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        Ok(Self {
            name: "perturbed_gaussian".into(),
            dim: precision.nrows(),
            family: Family::PerturbedGaussian { precision, a5 },
            lipschitz_l1: Some(lmax + a5),
            growth: GrowthClass::H8,
            constants: GrowthConstants {
                m1: Some(lmax + a5),
                a1: Some(lmin),
                a2: Some(0.0),
                a5: Some(a5),
                rho: Some(1.0),
            },
        })
    }

    /// One-dimensional `U(q) = q^4/4 - q^2/2`; its gradient is not globally
    /// Lipschitz.
    pub fn double_well() -> Self {
        Self {
            name: "double_well".into(),
            dim: 1,
            family: Family::DoubleWell,
            lipschitz_l1: None,
            growth: GrowthClass::General,
            constants: GrowthConstants::default(),
        }
    }

    /// `U ≡ 0`. Not normalizable; useful for exercising the dynamics.
    pub fn flat(dim: usize) -> Self {
        Self {
            name: "flat".into(),
            dim,
            family: Family::Flat,
            lipschitz_l1: Some(0.0),
            growth: GrowthClass::General,
            constants: GrowthConstants::default(),
        }
    }

    pub fn custom(
        name: impl Into<String>,
        potential: Arc<dyn Potential>,
        lipschitz_l1: Option<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            dim: potential.dim(),
            family: Family::Custom(potential),
            lipschitz_l1,
            growth: GrowthClass::General,
            constants: GrowthConstants::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz_l1(&self) -> Option<f64> {
        self.lipschitz_l1
    }

    pub fn growth_class(&self) -> GrowthClass {
        self.growth
    }

    pub fn constants(&self) -> GrowthConstants {
        self.constants
    }

    /// Precision matrix of the quadratic part, for the Gaussian families.
    pub fn precision(&self) -> Option<Matrix> {
        match &self.family {
            Family::StandardGaussian => Some(Matrix::identity(self.dim, self.dim)),
            Family::Gaussian { precision } | Family::PerturbedGaussian { precision, .. } => {
                Some(precision.clone())
            }
            _ => None,
        }
    }

    /// True when `U` is exactly a quadratic form.
    pub fn is_gaussian(&self) -> bool {
        matches!(
            self.family,
            Family::StandardGaussian | Family::Gaussian { .. }
        )
    }

    pub fn potential(&self, q: &Vector) -> f64 {
        debug_assert_eq!(q.len(), self.dim);
        match &self.family {
            Family::Flat => 0.0,
            Family::StandardGaussian => 0.5 * q.norm_squared(),
            Family::Gaussian { precision } => 0.5 * q.dot(&(precision * q)),
            Family::PerturbedGaussian { precision, a5 } => {
                0.5 * q.dot(&(precision * q)) + a5 * q.iter().map(|&x| log_cosh(x)).sum::<f64>()
            }
            Family::DoubleWell => {
                let x2 = q[0] * q[0];
                0.25 * x2 * x2 - 0.5 * x2
            }
            Family::Custom(p) => p.value(q),
        }
    }

    pub fn gradient(&self, q: &Vector) -> Vector {
        debug_assert_eq!(q.len(), self.dim);
        match &self.family {
            Family::Flat => Vector::zeros(self.dim),
            Family::StandardGaussian => q.clone(),
            Family::Gaussian { precision } => precision * q,
            Family::PerturbedGaussian { precision, a5 } => {
                let mut g = precision * q;
                for (gi, &qi) in g.iter_mut().zip(q.iter()) {
                    *gi += a5 * qi.tanh();
                }
                g
            }
            Family::DoubleWell => Vector::from_element(1, q[0] * q[0] * q[0] - q[0]),
            Family::Custom(p) => p.gradient(q),
        }
    }

    /// Lipschitz constant of `q ↦ M⁻¹∇U(q)`, when it can be derived.
    pub fn lipschitz_for(&self, mass: &MassMatrix) -> Option<f64> {
        if mass.is_identity() {
            return self.lipschitz_l1;
        }
        let l_inv = mass.cholesky_lower().clone().try_inverse()?;
        let whiten = |m: &Matrix| l_inv.clone() * m * l_inv.transpose();
        let top = |m: Matrix| SymmetricEigen::new(m).eigenvalues.max();
        match &self.family {
            Family::StandardGaussian => Some(top(whiten(&Matrix::identity(self.dim, self.dim)))),
            Family::Gaussian { precision } => Some(top(whiten(precision))),
            Family::PerturbedGaussian { precision, a5 } => Some(
                top(whiten(precision))
                    + a5 * top(whiten(&Matrix::identity(self.dim, self.dim))),
            ),
            Family::Flat => Some(0.0),
            _ => self.lipschitz_l1.map(|l| {
                l * top(whiten(&Matrix::identity(self.dim, self.dim)))
            }),
        }
    }
}

/// Numerically stable `log cosh(x)`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[derive(Debug, Clone, PartialEq)]
enum MassKind {
    Identity,
    Diagonal(Vector),
    Dense(Matrix),
}

/// Positive definite mass matrix with its Cholesky factor cached.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    dim: usize,
    kind: MassKind,
    lower: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MassSpec {
    Identity,
    Diagonal { values: Vec<f64> },
    /// Row-major dense matrix.
    Dense { values: Vec<f64> },
}

impl Default for MassSpec {
    fn default() -> Self {
        MassSpec::Identity
    }
}

impl MassSpec {
    pub fn build(&self, dim: usize) -> Result<MassMatrix> {
        match self {
            MassSpec::Identity => Ok(MassMatrix::identity(dim)),
            MassSpec::Diagonal { values } => {
                if values.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: values.len(),
                    });
                }
                MassMatrix::diagonal(Vector::from_column_slice(values))
            }
            MassSpec::Dense { values } => {
                if values.len() != dim * dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim * dim,
                        got: values.len(),
                    });
                }
                MassMatrix::dense(Matrix::from_row_slice(dim, dim, values))
            }
        }
    }
}

impl MassMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            kind: MassKind::Identity,
            lower: Matrix::identity(dim, dim),
        }
    }

    pub fn diagonal(values: Vector) -> Result<Self> {
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::NotPositiveDefinite);
        }
        let lower = Matrix::from_diagonal(&values.map(f64::sqrt));
        Ok(Self {
            dim: values.len(),
            kind: MassKind::Diagonal(values),
            lower,
        })
    }

    pub fn dense(m: Matrix) -> Result<Self> {
        check_spd(&m)?;
        let chol = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)?;
        let lower = chol.l();
        if lower.diagonal().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self {
            dim: m.nrows(),
            kind: MassKind::Dense(m),
            lower,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, MassKind::Identity)
    }

    pub fn cholesky_lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn matrix(&self) -> Matrix {
        match &self.kind {
            MassKind::Identity => Matrix::identity(self.dim, self.dim),
            MassKind::Diagonal(d) => Matrix::from_diagonal(d),
            MassKind::Dense(m) => m.clone(),
        }
    }

    /// `M v`.
    pub fn apply(&self, v: &Vector) -> Vector {
        match &self.kind {
            MassKind::Identity => v.clone(),
            MassKind::Diagonal(d) => v.component_mul(d),
            MassKind::Dense(m) => m * v,
        }
    }

    /// `M⁻¹ v`.
    pub fn apply_inv(&self, v: &Vector) -> Vector {
        match &self.kind {
            MassKind::Identity => v.clone(),
            MassKind::Diagonal(d) => v.component_div(d),
            MassKind::Dense(_) => {
                let y = self
                    .lower
                    .solve_lower_triangular(v)
                    .expect("cholesky factor has a positive diagonal");
                self.lower
                    .tr_solve_lower_triangular(&y)
                    .expect("cholesky factor has a positive diagonal")
            }
        }
    }

    /// `p^T M⁻¹ p / 2`.
    pub fn kinetic(&self, p: &Vector) -> f64 {
        match &self.kind {
            MassKind::Identity => 0.5 * p.norm_squared(),
            _ => 0.5 * p.dot(&self.apply_inv(p)),
        }
    }

    /// Draws `p ~ N(0, M)` as `L z` with `z` standard normal.
    pub fn sample_momentum<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let z = Vector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        match &self.kind {
            MassKind::Identity => z,
            MassKind::Diagonal(_) => z.component_mul(&self.lower.diagonal()),
            MassKind::Dense(_) => &self.lower * z,
        }
    }
}

/// Alias matching the operation name used in the docs.
pub fn momentum_refresh<R: Rng + ?Sized>(mass: &MassMatrix, rng: &mut R) -> Vector {
    mass.sample_momentum(rng)
}

/// `H(q, p) = U(q) + p^T M⁻¹ p / 2`. A non-finite result signals divergence.
pub fn hamiltonian(target: &Target, mass: &MassMatrix, x: &PhasePoint) -> Result<f64> {
    for len in [x.q.len(), x.p.len(), mass.dim()] {
        if len != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                got: len,
            });
        }
    }
    let h = target.potential(&x.q) + mass.kinetic(&x.p);
    Ok(if h.is_nan() { f64::INFINITY } else { h })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    fn pt(q: &[f64], p: &[f64]) -> PhasePoint {
        PhasePoint::from_slices(q, p).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let t = Target::standard_gaussian(1);
        let m = MassMatrix::identity(1);
        assert_eq!(hamiltonian(&t, &m, &pt(&[0.0], &[0.0])).unwrap(), 0.0);
        assert_eq!(hamiltonian(&t, &m, &pt(&[1.0], &[1.0])).unwrap(), 1.0);
        let perturbed = Target::perturbed_gaussian(Matrix::identity(1, 1), 1.0).unwrap();
        let h = hamiltonian(&perturbed, &m, &pt(&[1.0], &[0.0])).unwrap();
        assert_relative_eq!(h, 0.5 + 1.0f64.cosh().ln(), epsilon = 1e-15);
        assert_relative_eq!(h, 0.933781, epsilon = 1e-6);
    }

    #[test]
    fn hamiltonian_dimension_mismatch() {
        let t = Target::standard_gaussian(2);
        let m = MassMatrix::identity(2);
        let err = hamiltonian(&t, &m, &pt(&[0.0], &[0.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn hamiltonian_overflow_is_flagged() {
        let t = Target::double_well();
        let m = MassMatrix::identity(1);
        let h = hamiltonian(&t, &m, &pt(&[1e200], &[0.0])).unwrap();
        assert!(!h.is_finite());
    }

    #[test]
    fn builtin_examples() {
        let t = builtin_target(&TargetSpec {
            kind: TargetKind::StandardGaussian,
            dim: 2,
            sigma: None,
            a5: None,
        })
        .unwrap();
        let q = Vector::from_column_slice(&[0.3, -1.2]);
        assert_eq!(t.gradient(&q), q);
        assert_eq!(t.lipschitz_l1(), Some(1.0));

        let t = builtin_target(&TargetSpec {
            kind: TargetKind::Gaussian,
            dim: 2,
            sigma: Some(vec![1.0, 0.0, 0.0, 4.0]),
            a5: None,
        })
        .unwrap();
        assert_relative_eq!(t.lipschitz_l1().unwrap(), 4.0, epsilon = 1e-12);

        let t = builtin_target(&TargetSpec {
            kind: TargetKind::PerturbedGaussian,
            dim: 1,
            sigma: None,
            a5: Some(0.5),
        })
        .unwrap();
        let g = t.gradient(&Vector::from_element(1, 1.0))[0];
        assert_relative_eq!(g, 1.0 + 0.5 * 1.0f64.tanh(), epsilon = 1e-15);
        assert_relative_eq!(g, 1.380797, epsilon = 1e-6);
        assert_eq!(t.lipschitz_l1(), Some(1.5));
        assert_eq!(t.growth_class(), GrowthClass::H8);
    }

    #[test]
    fn non_spd_precision_rejected() {
        let spec = TargetSpec {
            kind: TargetKind::Gaussian,
            dim: 2,
            sigma: Some(vec![1.0, 2.0, 2.0, 1.0]),
            a5: None,
        };
        assert_eq!(builtin_target(&spec).unwrap_err(), Error::NotPositiveDefinite);
        let spec = TargetSpec {
            sigma: Some(vec![1.0, 0.5, 0.0, 1.0]),
            ..spec
        };
        assert_eq!(builtin_target(&spec).unwrap_err(), Error::NotPositiveDefinite);
    }

    fn all_builtins() -> Vec<Target> {
        let prec = Matrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, -0.2, 0.0, -0.2, 0.5]);
        vec![
            Target::standard_gaussian(3),
            Target::gaussian(prec.clone()).unwrap(),
            Target::perturbed_gaussian(prec, 0.7).unwrap(),
            Target::double_well(),
            Target::flat(2),
        ]
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = stream_rng(7, 0);
        for t in all_builtins() {
            for _ in 0..100 {
                let q = Vector::from_fn(t.dim(), |_, _| rng.random_range(-3.0..3.0));
                let g = t.gradient(&q);
                let step = 1e-5;
                for i in 0..t.dim() {
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[i] += step;
                    qm[i] -= step;
                    let fd = (t.potential(&qp) - t.potential(&qm)) / (2.0 * step);
                    let err = (fd - g[i]).abs() / (1.0 + g.norm());
                    assert!(err <= 1e-6, "{}: coordinate {i} err {err}", t.name());
                }
            }
        }
    }

    #[test]
    fn lipschitz_bound_holds_on_sampled_pairs() {
        let mut rng = stream_rng(8, 0);
        for t in all_builtins() {
            let Some(l1) = t.lipschitz_l1() else { continue };
            for _ in 0..200 {
                let q = Vector::from_fn(t.dim(), |_, _| rng.random_range(-5.0..5.0));
                let r = Vector::from_fn(t.dim(), |_, _| rng.random_range(-5.0..5.0));
                let lhs = (t.gradient(&q) - t.gradient(&r)).norm();
                assert!(lhs <= l1 * (q - r).norm() * (1.0 + 1e-12), "{}", t.name());
            }
        }
    }

    #[test]
    fn hamiltonian_is_even_in_momentum() {
        let mut rng = stream_rng(9, 0);
        let mass = MassMatrix::dense(Matrix::from_row_slice(
            3,
            3,
            &[2.0, 0.4, 0.1, 0.4, 1.0, 0.0, 0.1, 0.0, 3.0],
        ))
        .unwrap();
        for t in all_builtins().into_iter().filter(|t| t.dim() == 3) {
            for _ in 0..100 {
                let q = Vector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
                let p = Vector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
                let x = PhasePoint::new(q, p).unwrap();
                let a = hamiltonian(&t, &mass, &x).unwrap();
                let b = hamiltonian(&t, &mass, &x.flip()).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn mass_round_trip() {
        let mut rng = stream_rng(10, 0);
        let masses = [
            MassMatrix::identity(3),
            MassMatrix::diagonal(Vector::from_column_slice(&[0.5, 2.0, 7.0])).unwrap(),
            MassMatrix::dense(Matrix::from_row_slice(
                3,
                3,
                &[2.0, 0.4, 0.1, 0.4, 1.0, 0.0, 0.1, 0.0, 3.0],
            ))
            .unwrap(),
        ];
        for m in &masses {
            for _ in 0..50 {
                let v = Vector::from_fn(3, |_, _| rng.random_range(-10.0..10.0));
                let back = m.apply_inv(&m.apply(&v));
                assert!((back - &v).norm() <= 1e-12 * v.norm());
            }
            let l = m.cholesky_lower();
            assert!(l.diagonal().iter().all(|&d| d > 0.0));
            assert!((l * l.transpose() - m.matrix()).abs().max() < 1e-14);
        }
        assert_eq!(
            MassMatrix::diagonal(Vector::from_column_slice(&[1.0, -1.0])).unwrap_err(),
            Error::NotPositiveDefinite
        );
    }

    #[test]
    fn momentum_refresh_is_deterministic() {
        let m = MassMatrix::identity(4);
        let a = momentum_refresh(&m, &mut stream_rng(3, 1));
        let b = momentum_refresh(&m, &mut stream_rng(3, 1));
        assert_eq!(a, b);
        let c = momentum_refresh(&m, &mut stream_rng(3, 2));
        assert_ne!(a, c);
    }

    #[test]
    fn momentum_refresh_identity_covariance() {
        let m = MassMatrix::identity(2);
        let mut rng = stream_rng(11, 0);
        let n = 100_000;
        let mut sum = Matrix::zeros(2, 2);
        for _ in 0..n {
            let p = momentum_refresh(&m, &mut rng);
            sum += &p * p.transpose();
        }
        let cov = sum / n as f64;
        // Var of a diagonal entry is 2/n, of an off-diagonal entry 1/n.
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                let se = if i == j { (2.0 / n as f64).sqrt() } else { (1.0 / n as f64).sqrt() };
                assert!((cov[(i, j)] - target).abs() < 3.0 * se, "{cov}");
            }
        }
    }

    #[test]
    fn momentum_refresh_diagonal_variance() {
        let m = MassMatrix::diagonal(Vector::from_element(1, 4.0)).unwrap();
        let mut rng = stream_rng(12, 0);
        let n = 100_000;
        let var = (0..n)
            .map(|_| momentum_refresh(&m, &mut rng)[0].powi(2))
            .sum::<f64>()
            / n as f64;
        assert!((3.8..=4.2).contains(&var), "{var}");
    }

    #[test]
    fn target_spec_json() {
        let spec: TargetSpec =
            serde_json::from_str(r#"{"kind":"perturbed_gaussian","dim":1,"a5":0.3}"#).unwrap();
        assert_eq!(spec.kind, TargetKind::PerturbedGaussian);
        let t = spec.build().unwrap();
        assert_eq!(t.constants().a5, Some(0.3));
        assert!(serde_json::from_str::<TargetSpec>(r#"{"kind":"gaussian","dim":1,"bogus":1}"#).is_err());
    }
}
