//! Local generalized algebraic Riccati equations and the Lyapunov kernel behind them.
//!
//! The GARE
//!
//! ```text
//! P A + Aᵀ P + Q − P B R⁻¹ Bᵀ P + γ⁻² P D Dᵀ P = 0
//! ```
//!
//! is solved as a standard CARE with the combined quadratic weight
//! `S = B R⁻¹ Bᵀ − γ⁻² D Dᵀ`, which must be positive semidefinite. Each
//! Newton–Kleinman step is one Lyapunov solve.

use nalgebra::{Complex, DMatrix};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

const NEWTON_MAX_ITER: usize = 200;
const NEWTON_TOL: f64 = 1e-12;
/// Iterates whose step has stopped shrinking below this relative size are at
/// the rounding floor and accepted.
const NEWTON_FLOOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDynamics {
    pub a: Mat,
    pub b: Mat,
    pub d: Mat,
}

impl AgentDynamics {
    pub fn new(a: Mat, b: Mat, d: Mat) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, expected square",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || d.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows and D has {} rows, expected {}",
                b.nrows(),
                d.nrows(),
                n
            )));
        }
        Ok(Self { a, b, d })
    }

    /// The feedback-linearized planar vehicle: a double integrator per axis,
    /// control and attack both entering through the acceleration channel.
    pub fn planar_double_integrator() -> Self {
        let mut a = Mat::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let mut b = Mat::zeros(4, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        Self { a, d: b.clone(), b }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m1(&self) -> usize {
        self.b.ncols()
    }

    pub fn m2(&self) -> usize {
        self.d.ncols()
    }

    pub fn is_controllable(&self) -> bool {
        linalg::is_controllable(&self.a, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalWeights {
    pub q: Mat,
    pub r: Mat,
    pub gamma: f64,
}

impl LocalWeights {
    pub fn new(q: Mat, r: Mat, gamma: f64) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(Error::DimensionMismatch("Q and R must be square".into()));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Validation(format!("gamma must be positive, got {gamma}")));
        }
        let asym = linalg::asymmetry(&q).max(linalg::asymmetry(&r));
        if asym > 1e-10 {
            return Err(Error::NotSymmetric(asym));
        }
        if linalg::min_sym_eigenvalue(&q) < -1e-12 * (1.0 + q.norm()) {
            return Err(Error::Validation("Q must be positive semidefinite".into()));
        }
        if linalg::min_sym_eigenvalue(&r) <= 0.0 {
            return Err(Error::Validation("R must be positive definite".into()));
        }
        Ok(Self { q, r, gamma })
    }

    pub fn check_dims(&self, dyn_: &AgentDynamics) -> Result<()> {
        if self.q.nrows() != dyn_.n() || self.r.nrows() != dyn_.m1() {
            return Err(Error::DimensionMismatch(format!(
                "Q is {}x{} and R is {}x{}, but n = {} and m1 = {}",
                self.q.nrows(),
                self.q.ncols(),
                self.r.nrows(),
                self.r.ncols(),
                dyn_.n(),
                dyn_.m1()
            )));
        }
        Ok(())
    }

    /// `B R⁻¹ Bᵀ`
    fn control_weight(&self, dyn_: &AgentDynamics) -> Result<Mat> {
        let r_inv = self
            .r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Validation("R is singular".into()))?;
        Ok(linalg::symmetrize(&(&dyn_.b * r_inv * dyn_.b.transpose())))
    }

    /// `S = B R⁻¹ Bᵀ − γ⁻² D Dᵀ`
    pub fn combined_weight(&self, dyn_: &AgentDynamics) -> Result<Mat> {
        self.check_dims(dyn_)?;
        let attack = &dyn_.d * dyn_.d.transpose() / (self.gamma * self.gamma);
        Ok(linalg::symmetrize(&(self.control_weight(dyn_)? - attack)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CareSolution {
    #[serde(serialize_with = "serialize_mat")]
    pub p: Mat,
    #[serde(serialize_with = "serialize_mat")]
    pub k: Mat,
    #[serde(serialize_with = "serialize_mat", rename = "l")]
    pub l_gain: Mat,
    pub residual_norm: f64,
    pub closed_loop_spectral_abscissa: f64,
    pub iterations: usize,
}

pub(crate) fn serialize_mat<S: serde::Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

/// Solves `Aᵀ P + P A + Q = 0` for Hurwitz `A` (complex Schur + triangular sweep).
pub fn solve_lyapunov(a_stable: &Mat, q: &Mat) -> Result<Mat> {
    let n = a_stable.nrows();
    if !a_stable.is_square() || q.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "A is {:?} and Q is {:?}",
            a_stable.shape(),
            q.shape()
        )));
    }
    let abscissa = linalg::spectral_abscissa(a_stable);
    if !(abscissa < 0.0) {
        return Err(Error::NotHurwitz { abscissa });
    }

    // A = U T Uᴴ  ⇒  Tᴴ Y + Y T = −Uᴴ Q U  with  P = U Y Uᴴ.
    let ac: DMatrix<Complex<f64>> = a_stable.map(|x| Complex::new(x, 0.0));
    let (u, t) = linalg::schur(&ac)
        .ok_or_else(|| Error::NoStabilizingSolution("Schur iteration did not converge".into()))?
        .unpack();
    let qc: DMatrix<Complex<f64>> = q.map(|x| Complex::new(x, 0.0));
    let c = u.adjoint() * qc * &u;

    let mut y = DMatrix::<Complex<f64>>::zeros(n, n);
    for k in 0..n {
        // (Tᴴ + t_kk I) y_k = −c_k − Σ_{j<k} y_j t_jk ; Tᴴ is lower triangular.
        let mut rhs: Vec<Complex<f64>> = (0..n).map(|i| -c[(i, k)]).collect();
        for j in 0..k {
            let tjk = t[(j, k)];
            for (i, r) in rhs.iter_mut().enumerate() {
                *r -= y[(i, j)] * tjk;
            }
        }
        let tkk = t[(k, k)];
        for i in 0..n {
            let mut s = rhs[i];
            for l in 0..i {
                s -= t[(l, i)].conj() * y[(l, k)];
            }
            y[(i, k)] = s / (t[(i, i)].conj() + tkk);
        }
    }
    let p = (&u * y * u.adjoint()).map(|z| z.re);
    Ok(linalg::symmetrize(&p))
}

/// Frobenius norm of the GARE left-hand side at `p`.
pub fn gare_residual(dyn_: &AgentDynamics, w: &LocalWeights, p: &Mat) -> Result<f64> {
    let n = dyn_.n();
    if p.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "P is {:?}, expected {n}x{n}",
            p.shape()
        )));
    }
    let s = w.combined_weight(dyn_)?;
    Ok(care_lhs(&dyn_.a, &s, &w.q, p).norm())
}

fn care_lhs(a: &Mat, s: &Mat, q: &Mat, p: &Mat) -> Mat {
    p * a + a.transpose() * p + q - p * s * p
}

/// Bass' construction: a `P₀` with `A − S P₀` Hurwitz, given `(A, S)` controllable.
fn bass_initial(a: &Mat, s: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let shift = a.norm() + 1.0;
    // (A + βI) Z + Z (A + βI)ᵀ = 2S is Mᵀ Z + Z M + 2S = 0 with M = −(A + βI)ᵀ Hurwitz
    let m = -(a + Mat::identity(n, n) * shift).transpose();
    let z = solve_lyapunov(&m, &(s * 2.0))?;
    z.try_inverse()
        .ok_or_else(|| Error::NoStabilizingSolution("(A, S) is not controllable: Bass Gramian is singular".into()))
}

/// Newton–Kleinman on `Aᵀ P + P A + Q − P S P = 0` from a stabilizing `p0`.
fn newton_kleinman(a: &Mat, s: &Mat, q: &Mat, p0: Mat) -> Result<(Mat, usize)> {
    let mut p = p0;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for iter in 1..=NEWTON_MAX_ITER {
        let ac = a - s * &p;
        let rhs = q + &p * s * &p;
        let next = solve_lyapunov(&ac, &rhs)
            .map_err(|e| Error::NoStabilizingSolution(format!("Newton step {iter} lost stability: {e}")))?;
        let next = linalg::symmetrize(&next);
        let delta = (&next - &p).norm();
        p = next;
        if !p.iter().all(|x| x.is_finite()) {
            return Err(Error::NoStabilizingSolution("iteration diverged".into()));
        }
        let scale = 1.0 + p.norm();
        if delta < NEWTON_TOL * scale {
            return Ok((p, iter));
        }
        if delta < best {
            best = delta;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 3 && best < NEWTON_FLOOR_TOL * scale {
                return Ok((p, iter));
            }
        }
    }
    Err(Error::NoStabilizingSolution(format!(
        "Newton–Kleinman did not converge in {NEWTON_MAX_ITER} iterations"
    )))
}

/// Stabilizing solution of the local GARE with gains `K = R⁻¹BᵀP`, `L = γ⁻²DᵀP`.
pub fn solve_local_gare(dyn_: &AgentDynamics, w: &LocalWeights) -> Result<CareSolution> {
    w.check_dims(dyn_)?;
    let a = &dyn_.a;
    let n = dyn_.n();
    if !dyn_.is_controllable() {
        return Err(Error::NoStabilizingSolution("(A, B) is not controllable".into()));
    }
    let q_half = linalg::sqrt_psd(&w.q);
    if !linalg::is_observable(&q_half, a) {
        return Err(Error::NoStabilizingSolution("(Q^½, A) is not observable".into()));
    }
    let s = w.combined_weight(dyn_)?;
    let s_scale = 1.0 + s.norm();
    let s_min = linalg::min_sym_eigenvalue(&s);
    if s_min < -1e-12 * s_scale {
        return Err(Error::NoStabilizingSolution(format!(
            "B R⁻¹ Bᵀ − γ⁻² D Dᵀ is indefinite (min eigenvalue {s_min:.3e}); increase gamma"
        )));
    }

    // LQR warm start, then the full GARE.
    let s_lqr = w.control_weight(dyn_)?;
    let p0 = if linalg::spectral_abscissa(a) < 0.0 {
        Mat::zeros(n, n)
    } else {
        bass_initial(a, &s_lqr)?
    };
    let (p_lqr, it_lqr) = newton_kleinman(a, &s_lqr, &w.q, p0)?;
    let start = if linalg::spectral_abscissa(&(a - &s * &p_lqr)) < 0.0 {
        p_lqr
    } else {
        bass_initial(a, &s)?
    };
    let (p, it) = newton_kleinman(a, &s, &w.q, start)?;

    if linalg::min_sym_eigenvalue(&p) <= 0.0 {
        return Err(Error::NoStabilizingSolution(
            "Riccati solution is not positive definite".into(),
        ));
    }
    let r_inv = w.r.clone().try_inverse().expect("R checked positive definite");
    let k = r_inv * dyn_.b.transpose() * &p;
    let l_gain = dyn_.d.transpose() * &p / (w.gamma * w.gamma);
    let saddle = a - &dyn_.b * &k + &dyn_.d * &l_gain;
    let abscissa = linalg::spectral_abscissa(&saddle);
    if !(abscissa < 0.0) {
        return Err(Error::NoStabilizingSolution(format!(
            "closed loop A − BK + DL not Hurwitz (abscissa {abscissa:.3e})"
        )));
    }
    let control_only = linalg::spectral_abscissa(&(a - &dyn_.b * &k));
    if !(control_only < 0.0) {
        return Err(Error::NoStabilizingSolution(format!(
            "closed loop A − BK not Hurwitz (abscissa {control_only:.3e})"
        )));
    }
    let residual_norm = care_lhs(a, &s, &w.q, &p).norm();
    Ok(CareSolution {
        p,
        k,
        l_gain,
        residual_norm,
        closed_loop_spectral_abscissa: abscissa,
        iterations: it_lqr + it,
    })
}

pub fn spectral_abscissa(m: &Mat) -> f64 {
    linalg::spectral_abscissa(m)
}
