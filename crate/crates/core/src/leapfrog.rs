//! Leapfrog integration, closed-form Gaussian iterates, and the fixed-endpoint
//! trajectory solver.

use std::cell::Cell;
use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::target::{hamiltonian, MassMatrix, Matrix, PhasePoint, Target, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeapfrogParams<'a> {
    pub h: f64,
    pub mass: &'a MassMatrix,
}

impl<'a> LeapfrogParams<'a> {
    pub fn new(h: f64, mass: &'a MassMatrix) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid("h", format!("step size must be positive and finite, got {h}")));
        }
        Ok(Self { h, mass })
    }
}

/// Integration direction; `Backward` is the momentum-flipped forward step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// A phase point together with its cached gradient and log-weight `-H`.
#[derive(Debug, Clone)]
pub struct State {
    pub x: PhasePoint,
    pub grad: Vector,
    pub log_weight: f64,
    pub diverged: bool,
}

impl State {
    pub fn q(&self) -> &Vector {
        &self.x.q
    }

    pub fn p(&self) -> &Vector {
        &self.x.p
    }
}

/// Leapfrog integrator bound to a target and mass matrix. Counts gradient
/// evaluations.
pub struct Integrator<'a> {
    pub target: &'a Target,
    pub mass: &'a MassMatrix,
    pub h: f64,
    grad_evals: Cell<u64>,
}

impl<'a> Integrator<'a> {
    pub fn new(target: &'a Target, params: LeapfrogParams<'a>) -> Self {
        Self {
            target,
            mass: params.mass,
            h: params.h,
            grad_evals: Cell::new(0),
        }
    }

    pub fn grad_evals(&self) -> u64 {
        self.grad_evals.get()
    }

    fn gradient(&self, q: &Vector) -> Vector {
        self.grad_evals.set(self.grad_evals.get() + 1);
        self.target.gradient(q)
    }

    /// Wraps a phase point, evaluating its gradient and log-weight.
    pub fn state(&self, x: PhasePoint) -> State {
        let grad = self.gradient(&x.q);
        self.finish(x, grad)
    }

    fn finish(&self, x: PhasePoint, grad: Vector) -> State {
        let h = self.target.potential(&x.q) + self.mass.kinetic(&x.p);
        let diverged =
            !h.is_finite() || !x.is_finite() || grad.iter().any(|g| !g.is_finite());
        State {
            x,
            grad,
            log_weight: if diverged { f64::NEG_INFINITY } else { -h },
            diverged,
        }
    }

    /// One leapfrog step reusing the cached gradient of `s`.
    ///
    /// A backward step equals `flip ∘ step ∘ flip` bit for bit: every operation
    /// below is odd in the momentum and IEEE rounding is sign-symmetric.
    pub fn step(&self, s: &State, dir: Direction) -> State {
        if s.diverged {
            return s.clone();
        }
        let half = 0.5 * dir.sign() * self.h;
        let p_half = &s.x.p - &s.grad * half;
        let q = &s.x.q + self.mass.apply_inv(&p_half) * (dir.sign() * self.h);
        let grad = self.gradient(&q);
        let p = p_half - &grad * half;
        self.finish(PhasePoint { q, p }, grad)
    }

    /// `Φ^{∘(j)}` for any integer `j`.
    pub fn iterate(&self, s: &State, j: i64) -> State {
        let dir = if j >= 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let mut cur = s.clone();
        for _ in 0..j.unsigned_abs() {
            cur = self.step(&cur, dir);
            if cur.diverged {
                break;
            }
        }
        cur
    }
}

/// Result of a stand-alone leapfrog evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub x: PhasePoint,
    pub diverged: bool,
}

/// One leapfrog step `Ψ_{h/2}^{(1)} ∘ Ψ_h^{(2)} ∘ Ψ_{h/2}^{(1)}`; two gradient
/// evaluations.
pub fn leapfrog_step(target: &Target, params: LeapfrogParams<'_>, x: &PhasePoint) -> StepOutcome {
    let integ = Integrator::new(target, params);
    let s = integ.step(&integ.state(x.clone()), Direction::Forward);
    StepOutcome {
        diverged: s.diverged,
        x: s.x,
    }
}

/// `Φ^{∘(j)}(x)`; negative `j` integrates `|j|` steps from `(q, -p)` and flips
/// the result back.
pub fn leapfrog_iter(
    target: &Target,
    params: LeapfrogParams<'_>,
    x: &PhasePoint,
    j: i64,
) -> StepOutcome {
    let integ = Integrator::new(target, params);
    if j >= 0 {
        let s = integ.iterate(&integ.state(x.clone()), j);
        StepOutcome {
            diverged: s.diverged,
            x: s.x,
        }
    } else {
        let s = integ.iterate(&integ.state(x.flip()), -j);
        StepOutcome {
            diverged: s.diverged,
            x: s.x.flip(),
        }
    }
}

/// Linear maps of `T` leapfrog steps on `U(q) = q^T Σ q / 2`:
/// `q_T = A q_0 + B p_0`, `p_T = Ã q_0 + B̃ p_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLeapfrogMaps {
    pub steps: u32,
    pub a: Matrix,
    pub b: Matrix,
    pub a_tilde: Matrix,
    pub b_tilde: Matrix,
    /// Determinant of the full `2d × 2d` map.
    pub det_full: f64,
    /// Determinant of `B`; zero marks a degenerate step size.
    pub det_b: f64,
}

impl GaussianLeapfrogMaps {
    pub fn full(&self) -> Matrix {
        let d = self.a.nrows();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&self.a);
        m.view_mut((0, d), (d, d)).copy_from(&self.b);
        m.view_mut((d, 0), (d, d)).copy_from(&self.a_tilde);
        m.view_mut((d, d), (d, d)).copy_from(&self.b_tilde);
        m
    }

    pub fn apply(&self, x: &PhasePoint) -> PhasePoint {
        PhasePoint {
            q: &self.a * &x.q + &self.b * &x.p,
            p: &self.a_tilde * &x.q + &self.b_tilde * &x.p,
        }
    }
}

/// Composes the one-step linear map `T` times.
pub fn gaussian_maps(sigma: &Matrix, mass: &MassMatrix, h: f64, steps: u32) -> GaussianLeapfrogMaps {
    let d = sigma.nrows();
    let m_inv = mass.matrix().try_inverse().expect("mass matrix is SPD");
    let mut kick = Matrix::identity(2 * d, 2 * d);
    kick.view_mut((d, 0), (d, d)).copy_from(&(sigma * (-0.5 * h)));
    let mut drift = Matrix::identity(2 * d, 2 * d);
    drift.view_mut((0, d), (d, d)).copy_from(&(&m_inv * h));
    let one = &kick * &drift * &kick;
    let mut full = Matrix::identity(2 * d, 2 * d);
    for _ in 0..steps {
        full = &one * full;
    }
    let a = full.view((0, 0), (d, d)).into_owned();
    let b = full.view((0, d), (d, d)).into_owned();
    let a_tilde = full.view((d, 0), (d, d)).into_owned();
    let b_tilde = full.view((d, d), (d, d)).into_owned();
    GaussianLeapfrogMaps {
        steps,
        det_full: full.determinant(),
        det_b: b.determinant(),
        a,
        b,
        a_tilde,
        b_tilde,
    }
}

/// `2(1 - cos(π/T))`, the sharp bound on `L₁h²`.
pub fn contraction_bound(steps: u32) -> f64 {
    2.0 * (1.0 - (PI / steps as f64).cos())
}

/// A leapfrog trajectory with prescribed endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySolution {
    /// Positions `q_0, ..., q_T` (endpoints included).
    pub positions: Vec<Vector>,
    /// Momenta `p_0, ..., p_T`.
    pub momenta: Vec<Vector>,
    pub iterations: usize,
    /// Relative Frobenius norm of the last fixed-point update.
    pub residual: f64,
    /// Largest observed ratio of successive update norms.
    pub observed_contraction: f64,
    /// Contraction rate guaranteed by the step-size bound, when known.
    pub contraction_rate: Option<f64>,
    /// `|proj₁ Φ^{∘(T)}(q_0, p_0) - q_T|`.
    pub round_trip_residual: f64,
}

impl TrajectorySolution {
    pub fn interior(&self) -> &[Vector] {
        &self.positions[1..self.positions.len() - 1]
    }

    pub fn p0(&self) -> &Vector {
        &self.momenta[0]
    }
}

pub const TRAJECTORY_TOLERANCE: f64 = 1e-12;

/// Finds the momentum `p_0` whose `T`-step leapfrog trajectory from `q0` ends
/// at `q_target`, by iterating `Q ↦ Q₀/2 + QA + (h²/2) M⁻¹G(Q)` on the interior
/// positions.
pub fn trajectory_solve(
    target: &Target,
    params: LeapfrogParams<'_>,
    q0: &Vector,
    q_target: &Vector,
    steps: u32,
) -> Result<TrajectorySolution> {
    let h = params.h;
    let mass = params.mass;
    let d = target.dim();
    for v in [q0, q_target] {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    if steps == 0 {
        return Err(invalid("T", "need at least one step"));
    }
    let l1 = target.lipschitz_for(mass);
    let rate = l1.map(|l| (PI / steps as f64).cos() + l * h * h / 2.0);
    if steps >= 2 {
        if let Some(l) = l1 {
            let lhs = l * h * h;
            let rhs = contraction_bound(steps);
            if !(lhs < rhs) {
                return Err(Error::ContractionViolated { lhs, rhs });
            }
        }
    }

    let mut positions: Vec<Vector> = (0..=steps)
        .map(|j| q0 + (q_target - q0) * (j as f64 / steps as f64))
        .collect();
    positions[steps as usize] = q_target.clone();

    // With a known rate r < 1 the distance to the fixed point is at most
    // r/(1-r) times the last update, so the update threshold shrinks by 1-r.
    let stop = match rate {
        Some(r) if r < 1.0 => TRAJECTORY_TOLERANCE * (1.0 - r),
        _ => TRAJECTORY_TOLERANCE,
    };
    let budget = match rate {
        Some(r) if r > 0.0 => 10 * (stop.ln() / r.ln()).ceil().max(1.0) as usize,
        Some(_) => 10,
        None => 100_000,
    };

    let mut iterations = 0;
    let mut residual = 0.0;
    let mut observed: f64 = 0.0;
    let mut prev_diff: Option<f64> = None;
    if steps >= 2 {
        let n = steps as usize;
        let scale = (q0.norm_squared() + q_target.norm_squared()).sqrt();
        loop {
            let next: Vec<Vector> = (1..n)
                .map(|j| {
                    (&positions[j - 1] + &positions[j + 1]) * 0.5
                        + mass.apply_inv(&target.gradient(&positions[j])) * (0.5 * h * h)
                })
                .collect();
            let diff = next
                .iter()
                .zip(&positions[1..n])
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt();
            let norm = next.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            for (j, v) in next.into_iter().enumerate() {
                positions[j + 1] = v;
            }
            iterations += 1;
            let denom = norm.max(scale).max(f64::MIN_POSITIVE);
            residual = diff / denom;
            if let Some(pd) = prev_diff {
                // Ratios of updates at round-off level carry no information.
                if pd > 1e-8 * denom {
                    observed = observed.max(diff / pd);
                }
            }
            prev_diff = Some(diff);
            if !residual.is_finite() {
                return Err(Error::NoConvergence {
                    iterations,
                    residual,
                });
            }
            if residual <= stop {
                break;
            }
            if iterations >= budget {
                return Err(Error::NoConvergence {
                    iterations,
                    residual,
                });
            }
        }
    }

    let grads: Vec<Vector> = positions.iter().map(|q| target.gradient(q)).collect();
    let mut momenta = Vec::with_capacity(steps as usize + 1);
    momenta.push(mass.apply(&(&positions[1] - &positions[0])) / h + &grads[0] * (0.5 * h));
    for i in 1..=steps as usize {
        let p = &momenta[i - 1] - (&grads[i - 1] + &grads[i]) * (0.5 * h);
        momenta.push(p);
    }

    let start = PhasePoint {
        q: q0.clone(),
        p: momenta[0].clone(),
    };
    let end = leapfrog_iter(target, params, &start, steps as i64);
    let round_trip_residual = (&end.x.q - q_target).norm();

    Ok(TrajectorySolution {
        positions,
        momenta,
        iterations,
        residual,
        observed_contraction: observed,
        contraction_rate: rate,
        round_trip_residual,
    })
}

/// The `(T-1) × (T-1)` tridiagonal matrix with `1/2` off the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalA {
    pub matrix: Matrix,
    /// Spectral norm estimated by power iteration.
    pub norm: f64,
    pub iterations: usize,
}

pub fn tridiag_a(steps: u32) -> Result<TridiagonalA> {
    if steps < 2 {
        return Err(invalid("T", "need T >= 2"));
    }
    let n = steps as usize - 1;
    let matrix = Matrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { 0.5 } else { 0.0 });
    // The spectrum is symmetric about zero, so iterate with A and read the
    // norm off |Av|/|v|, which converges like the dominant eigenvalue of A².
    let mut v = Vector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut norm = 0.0;
    let mut iterations = 0;
    for it in 1..=200_000 {
        let w = &matrix * &v;
        let est = w.norm();
        iterations = it;
        if est == 0.0 {
            norm = 0.0;
            break;
        }
        let converged = (est - norm).abs() <= 1e-16 * est;
        norm = est;
        v = w / est;
        if converged {
            break;
        }
    }
    Ok(TridiagonalA {
        matrix,
        norm,
        iterations,
    })
}

/// Convenience: `-H` at a phase point.
pub fn log_weight(target: &Target, mass: &MassMatrix, x: &PhasePoint) -> f64 {
    match hamiltonian(target, mass, x) {
        Ok(h) if h.is_finite() => -h,
        _ => f64::NEG_INFINITY,
    }
}
