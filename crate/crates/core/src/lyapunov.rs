//! The quadratic Lyapunov functional for the exponentially stable closed
//! loop, with explicit equivalence and gradient constants, plus the
//! trigger-design quantities derived from it (admissible trigger ratio and
//! guaranteed decay rates).
//!
//! For a closed loop with certificate `(alpha, M)` and growth bound `c1`, the
//! functional is
//!
//! ```text
//! V(z) = 1/2 |z|^2 + eta * integral_0^inf e^{2 beta s} |e^{s A_cl} z|^2 ds
//! ```
//!
//! in orthonormalized coordinates, with `beta` in `(0, alpha)` and
//! `eta >= c1 + beta`. The integral is realized through the shifted Lyapunov
//! matrix equation `(A_cl + beta I)' Q + Q (A_cl + beta I) = -I`; the literal
//! truncated integral survives as [`quadrature_oracle`] for cross-validation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::{ControlSystem, StabilityCertificate};

/// Guaranteed decay rate of the triggered loop for a given `beta`:
/// `beta - gamma sqrt(2 (1 + (c1 + beta) M^2)) |BK|`.
fn delta_beta_formula(beta: f64, gamma: f64, c1: f64, m: f64, bk_norm: f64) -> f64 {
    beta - gamma * (2.0 * (1.0 + (c1 + beta) * m * m)).sqrt() * bk_norm
}

/// The beta-independent lower bound, with `|BKC| + alpha` replacing
/// `c1 + beta`.
fn delta_tilde_formula(beta: f64, gamma: f64, bkc_norm: f64, alpha: f64, m: f64, bk_norm: f64) -> f64 {
    beta - gamma * (2.0 * (1.0 + (bkc_norm + alpha) * m * m)).sqrt() * bk_norm
}

/// The Lyapunov functional `V(z) = 1/2 |z~|^2 + eta z~' Q z~`.
#[derive(Debug, Clone)]
pub struct LyapunovFunctional {
    beta: f64,
    eta: f64,
    q: DMatrix<f64>,
    c0: f64,
    c2: f64,
    growth_bound: f64,
    cert: StabilityCertificate,
    bk_norm: f64,
    bkc_norm: f64,
    chol: DMatrix<f64>,
    chol_inv: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct FunctionalJson {
    beta: f64,
    eta: f64,
    #[serde(rename = "C0")]
    c0: f64,
    #[serde(rename = "C1")]
    c1: f64,
    #[serde(rename = "C2")]
    c2: f64,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
}

/// Builds the functional with the decay guarantee: `eta` defaults to
/// `c1 + beta` (the smallest admissible weight); a supplied `eta` below that
/// is rejected because the decay property would be unproven.
pub fn build_lyapunov(
    sys: &ControlSystem,
    cert: &StabilityCertificate,
    beta: f64,
    eta: Option<f64>,
) -> Result<LyapunovFunctional> {
    let c1 = sys.c1();
    let floor = c1 + beta;
    let eta = match eta {
        None => floor,
        Some(e) => {
            if e < floor - 1e-15 {
                return Err(Error::EtaTooSmall { eta: e, minimum: floor });
            }
            e
        }
    };
    build_with_eta(sys, cert, beta, eta)
}

/// Builds the functional with an arbitrary `eta >= 0`. Below `c1 + beta` the
/// norm-equivalence and gradient bounds still hold, but the decay property
/// is not guaranteed.
pub fn build_lyapunov_relaxed(
    sys: &ControlSystem,
    cert: &StabilityCertificate,
    beta: f64,
    eta: f64,
) -> Result<LyapunovFunctional> {
    build_with_eta(sys, cert, beta, eta)
}

fn build_with_eta(
    sys: &ControlSystem,
    cert: &StabilityCertificate,
    beta: f64,
    eta: f64,
) -> Result<LyapunovFunctional> {
    let alpha = cert.alpha();
    if !(beta > 0.0 && beta < alpha) {
        return Err(Error::BetaOutOfRange { beta, alpha });
    }
    if !(eta >= 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be nonnegative, got {eta}")));
    }
    let n = sys.dim();
    let a_cl = sys.closed_loop_orthonormal();
    let shifted = &a_cl + DMatrix::identity(n, n) * beta;
    let q = linalg::solve_lyapunov(&shifted, &DMatrix::identity(n, n))?;

    let residual =
        (shifted.transpose() * &q + &q * &shifted + DMatrix::<f64>::identity(n, n)).norm();
    if residual > 1e-8 * n as f64 {
        return Err(Error::IllConditionedLyapunov { separation: residual });
    }
    let q_eigs = q.symmetric_eigenvalues();
    let lam_min = q_eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if lam_min < -1e-12 {
        return Err(Error::IllConditionedLyapunov { separation: lam_min });
    }

    let m = cert.overshoot();
    let c0 = 2.0 * (1.0 + eta * m * m).sqrt();
    let c2 = 0.5 * (1.0 + eta * m * m / (alpha - beta));
    Ok(LyapunovFunctional {
        beta,
        eta,
        q,
        c0,
        c2,
        growth_bound: sys.c1(),
        cert: cert.clone(),
        bk_norm: sys.bk_norm(),
        bkc_norm: sys.bkc_norm(),
        chol: sys.state_space().chol().clone(),
        chol_inv: sys.state_space().chol_inv().clone(),
    })
}

impl LyapunovFunctional {
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Gradient constant `C0 = 2 sqrt(1 + eta M^2)`.
    pub fn gradient_constant(&self) -> f64 {
        self.c0
    }

    /// Lower equivalence constant, exactly 1/2.
    pub fn sandwich_lower(&self) -> f64 {
        0.5
    }

    /// Upper equivalence constant `C2 = (1 + eta M^2 / (alpha - beta)) / 2`.
    pub fn sandwich_upper(&self) -> f64 {
        self.c2
    }

    /// Growth bound `c1` of the closed loop this functional was built for.
    pub fn growth_bound(&self) -> f64 {
        self.growth_bound
    }

    pub fn certificate(&self) -> &StabilityCertificate {
        &self.cert
    }

    /// The integral witness `Q` in orthonormalized coordinates.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `V(z)` for a state in original coordinates.
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        let zt = &self.chol * z;
        self.value_orthonormal(&zt)
    }

    /// `V` evaluated directly on an orthonormalized state `z~ = R z`.
    pub fn value_orthonormal(&self, zt: &DVector<f64>) -> f64 {
        0.5 * zt.norm_squared() + self.eta * (&self.q * zt).dot(zt)
    }

    /// Riesz gradient of `V` at `z`, in original coordinates: satisfies
    /// `<grad, h>_H = dV(z)[h]`.
    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let zt = &self.chol * z;
        let gt = &zt + &self.q * &zt * (2.0 * self.eta);
        &self.chol_inv * gt
    }

    /// `(delta_beta, delta_tilde_beta)` for the given trigger ratio; the
    /// first always dominates the second.
    pub fn decay_rate(&self, gamma: f64) -> (f64, f64) {
        let m = self.cert.overshoot();
        let db = delta_beta_formula(self.beta, gamma, self.growth_bound, m, self.bk_norm);
        let dtb = delta_tilde_formula(
            self.beta,
            gamma,
            self.bkc_norm,
            self.cert.alpha(),
            m,
            self.bk_norm,
        );
        (db, dtb)
    }

    /// Audit export: `{"beta","eta","C0","C1","C2","Q"}`.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&FunctionalJson {
            beta: self.beta,
            eta: self.eta,
            c0: self.c0,
            c1: 0.5,
            c2: self.c2,
            q: crate::system::matrix_to_rows(&self.q),
        })
        .expect("functional serialization cannot fail")
    }
}

/// Literal numerical integration of the defining integral, truncated where
/// the certificate bounds the tail below `tail_tol * |z|_H^2`, refined until
/// two successive Simpson levels agree to `tail_tol`.
///
/// Kept independent of the Lyapunov-equation path so the two can
/// cross-validate each other.
pub fn quadrature_oracle(
    sys: &ControlSystem,
    cert: &StabilityCertificate,
    beta: f64,
    eta: f64,
    z: &DVector<f64>,
    tail_tol: f64,
) -> Result<f64> {
    if !(tail_tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tail_tol must be positive, got {tail_tol}")));
    }
    let alpha = cert.alpha();
    if !(beta > 0.0 && beta < alpha) {
        return Err(Error::BetaOutOfRange { beta, alpha });
    }
    let zt = sys.state_space().to_orthonormal(z);
    let norm2 = zt.norm_squared();
    let base = 0.5 * norm2;
    if eta == 0.0 || norm2 == 0.0 {
        return Ok(base);
    }
    let m = cert.overshoot();
    let rate = 2.0 * (alpha - beta);
    // Tail of the weighted integral past T is at most
    // eta M^2 e^{-rate T} / rate * |z|^2; cut where that drops below tail_tol.
    let t_cut = ((eta * m * m / (rate * tail_tol)).ln() / rate).max(1.0);
    let a_cl = sys.closed_loop_orthonormal();

    let mut prev: Option<f64> = None;
    let mut intervals = 64usize;
    const MAX_INTERVALS: usize = 1 << 21;
    while intervals <= MAX_INTERVALS {
        let h = t_cut / intervals as f64;
        let step = linalg::expm(&(&a_cl * h));
        let mut w = zt.clone();
        let mut sum = w.norm_squared(); // s = 0 endpoint, weight 1
        for j in 1..=intervals {
            w = &step * w;
            let s = h * j as f64;
            let g = (2.0 * beta * s).exp() * w.norm_squared();
            let weight = if j == intervals {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            sum += weight * g;
        }
        let value = base + eta * sum * h / 3.0;
        if let Some(p) = prev {
            if (value - p).abs() <= tail_tol * value.abs().max(norm2) {
                return Ok(value);
            }
        }
        prev = Some(value);
        intervals *= 2;
    }
    Err(Error::QuadratureNoConvergence {
        achieved: prev.map_or(f64::INFINITY, |p| (p - base).abs()),
        requested: tail_tol,
    })
}

/// Trigger-design quantities for a certified closed loop: the radius `r`,
/// the admissible trigger-ratio bound `gamma_max = alpha / r`, and the decay
/// rates guaranteed for each `(beta, gamma)`.
#[derive(Debug, Clone)]
pub struct TriggerDesign {
    r: f64,
    gamma_max: f64,
    alpha: f64,
    overshoot: f64,
    c1: f64,
    bk_norm: f64,
    bkc_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct TriggerDesignJson {
    r: f64,
    gamma_max: Option<f64>,
    alpha: f64,
    #[serde(rename = "M")]
    m: f64,
    c1: f64,
}

/// Computes the design radius `r = |BK| sqrt(2 (1 + (|BKC| + alpha) M^2))`
/// and the admissible range `gamma < alpha / r`. A system without control
/// authority (`B K = 0`) yields `r = 0` and an unconstrained (infinite)
/// `gamma_max`.
pub fn trigger_bound(sys: &ControlSystem, cert: &StabilityCertificate) -> TriggerDesign {
    let alpha = cert.alpha();
    let m = cert.overshoot();
    let r = sys.bk_norm() * (2.0 * (1.0 + (sys.bkc_norm() + alpha) * m * m)).sqrt();
    let gamma_max = if r == 0.0 { f64::INFINITY } else { alpha / r };
    TriggerDesign {
        r,
        gamma_max,
        alpha,
        overshoot: m,
        c1: sys.c1(),
        bk_norm: sys.bk_norm(),
        bkc_norm: sys.bkc_norm(),
    }
}

impl TriggerDesign {
    pub fn r(&self) -> f64 {
        self.r
    }

    /// Supremal admissible trigger ratio; infinite when `r = 0`.
    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn overshoot(&self) -> f64 {
        self.overshoot
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    /// Largest decay rate compatible with the ratio: `alpha - gamma r`.
    pub fn delta_max(&self, gamma: f64) -> f64 {
        self.alpha - gamma * self.r
    }

    /// Guaranteed rate for a functional built at `beta`.
    pub fn delta_beta(&self, beta: f64, gamma: f64) -> f64 {
        delta_beta_formula(beta, gamma, self.c1, self.overshoot, self.bk_norm)
    }

    /// Beta-uniform lower bound on [`TriggerDesign::delta_beta`]; linear in
    /// `beta` with slope one: `beta - gamma r`.
    pub fn delta_tilde_beta(&self, beta: f64, gamma: f64) -> f64 {
        delta_tilde_formula(beta, gamma, self.bkc_norm, self.alpha, self.overshoot, self.bk_norm)
    }

    /// Searches for a `beta` in `(0, alpha)` witnessing `delta_tilde_beta >
    /// delta`, scanning 64 candidates whose offsets from `alpha` are
    /// log-spaced (witnesses concentrate near `alpha`, so uniform spacing of
    /// the interval itself would miss them at tight targets). Among the
    /// witnesses, returns the one with the best guaranteed rate.
    pub fn beta_star(&self, gamma: f64, delta: f64) -> Option<f64> {
        let lo = delta.max(0.0);
        if !(lo < self.alpha) {
            return None;
        }
        let span = self.alpha - lo;
        let mut best: Option<(f64, f64)> = None;
        for i in 0..64 {
            let frac = 10f64.powf(-6.0 * i as f64 / 63.0);
            let beta = self.alpha - span * frac;
            if beta <= 0.0 || beta >= self.alpha {
                continue;
            }
            if self.delta_tilde_beta(beta, gamma) > delta {
                let rate = self.delta_beta(beta, gamma);
                if best.is_none_or(|(_, b)| rate > b) {
                    best = Some((beta, rate));
                }
            }
        }
        best.map(|(b, _)| b)
    }

    /// Export as `{"r","gamma_max","alpha","M","c1"}`; an unconstrained
    /// `gamma_max` serializes as null.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&TriggerDesignJson {
            r: self.r,
            gamma_max: self.gamma_max.is_finite().then_some(self.gamma_max),
            alpha: self.alpha,
            m: self.overshoot,
            c1: self.c1,
        })
        .expect("design serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_transport, build_wave1d, ModelSpec, TransportSpec, WaveSpec};
    use crate::system::{certify_stability, ControlSystem, GramSpace};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn scalar_damped(a_gain: f64) -> (ControlSystem, StabilityCertificate) {
        let sys = ControlSystem::new(
            GramSpace::identity(1),
            GramSpace::identity(1),
            GramSpace::identity(1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, -a_gain),
        )
        .unwrap();
        let cert = sys.certify(0.05).unwrap();
        (sys, cert)
    }

    fn small_wave() -> (ControlSystem, StabilityCertificate) {
        let sys = build_wave1d(&WaveSpec { nx: 15, ..Default::default() }).unwrap();
        let cert = sys.certify(0.05).unwrap();
        (sys, cert)
    }

    fn random_states(n: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn scalar_q_closed_form() {
        // Closed loop -a with a = 1: Q = 1 / (2 (a - beta)).
        let (sys, cert) = scalar_damped(1.0);
        let f = build_lyapunov(&sys, &cert, 0.5, None).unwrap();
        assert_relative_eq!(f.q()[(0, 0)], 1.0, epsilon = 1e-12);
        // c1 = 0, eta = beta = 1/2, V(z) = z^2 / 2 + eta z^2 Q.
        assert_relative_eq!(f.eta(), 0.5, epsilon = 1e-15);
        let z = DVector::from_element(1, 2.0);
        assert_relative_eq!(f.value(&z), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn beta_out_of_range_rejected() {
        let (sys, cert) = scalar_damped(1.0);
        assert!(matches!(
            build_lyapunov(&sys, &cert, cert.alpha(), None),
            Err(Error::BetaOutOfRange { .. })
        ));
        assert!(matches!(
            build_lyapunov(&sys, &cert, -0.1, None),
            Err(Error::BetaOutOfRange { .. })
        ));
    }

    #[test]
    fn eta_below_floor_rejected_but_relaxed_allows() {
        let (sys, cert) = scalar_damped(1.0);
        assert!(matches!(
            build_lyapunov(&sys, &cert, 0.5, Some(0.1)),
            Err(Error::EtaTooSmall { .. })
        ));
        let f = build_lyapunov_relaxed(&sys, &cert, 0.5, 0.0).unwrap();
        assert_eq!(f.sandwich_lower(), 0.5);
        assert_eq!(f.sandwich_upper(), 0.5);
        assert_eq!(f.gradient_constant(), 2.0);
        let z = DVector::from_element(1, 3.0);
        assert_relative_eq!(f.value(&z), 4.5, epsilon = 1e-15);
        assert_relative_eq!(f.gradient(&z)[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn c2_exact_at_half_alpha_with_zero_growth() {
        // c1 = 0 and beta = alpha / 2 make C2 = (1 + M^2) / 2 exactly.
        let sys = build_transport(&TransportSpec { nx: 31, ..Default::default() }).unwrap();
        assert_eq!(sys.c1(), 0.0);
        let cert = sys.certify(0.05).unwrap();
        let beta = cert.alpha() / 2.0;
        let f = build_lyapunov(&sys, &cert, beta, None).unwrap();
        let m = cert.overshoot();
        assert_relative_eq!(f.sandwich_upper(), 0.5 * (1.0 + m * m), max_relative = 1e-15);
        assert_eq!(f.sandwich_lower(), 0.5);
        assert_relative_eq!(
            f.gradient_constant(),
            2.0 * (1.0 + beta * m * m).sqrt(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn sandwich_holds_on_wave_states() {
        let (sys, cert) = small_wave();
        let beta = cert.alpha() / 2.0;
        let f = build_lyapunov(&sys, &cert, beta, None).unwrap();
        let h = sys.state_space();
        for z in random_states(sys.dim(), 100, 41) {
            let v = f.value(&z);
            let n2 = h.norm(&z).powi(2);
            assert!(v >= 0.5 * n2 * (1.0 - 1e-9));
            assert!(v <= f.sandwich_upper() * n2 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn decay_quadratic_form_holds() {
        let (sys, cert) = small_wave();
        let beta = cert.alpha() / 2.0;
        let f = build_lyapunov(&sys, &cert, beta, None).unwrap();
        let h = sys.state_space();
        let a_cl = sys.closed_loop();
        for z in random_states(sys.dim(), 100, 43) {
            let lhs = h.inner(&f.gradient(&z), &(&a_cl * &z));
            let rhs = -2.0 * beta * f.value(&z) + 1e-9 * h.norm(&z).powi(2);
            assert!(lhs <= rhs, "decay violated: {lhs} > {rhs}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (sys, cert) = small_wave();
        let f = build_lyapunov(&sys, &cert, cert.alpha() / 2.0, None).unwrap();
        let h_space = sys.state_space();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let n = sys.dim();
        for _ in 0..5 {
            let z = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let grad = f.gradient(&z);
            for _ in 0..20 {
                let dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let eps = 1e-6;
                let fd = (f.value(&(&z + &dir * eps)) - f.value(&(&z - &dir * eps))) / (2.0 * eps);
                let analytic = h_space.inner(&grad, &dir);
                assert_relative_eq!(fd, analytic, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn gradient_norm_bounded_by_c0() {
        let (sys, cert) = small_wave();
        let f = build_lyapunov(&sys, &cert, cert.alpha() / 2.0, None).unwrap();
        let h = sys.state_space();
        for z in random_states(sys.dim(), 100, 53) {
            let g = h.norm(&f.gradient(&z));
            assert!(g <= f.gradient_constant() * f.value(&z).sqrt() * (1.0 + 1e-12));
        }
        let zero = DVector::zeros(sys.dim());
        assert_eq!(f.gradient(&zero).norm(), 0.0);
        assert_eq!(f.value(&zero), 0.0);
    }

    #[test]
    fn quadrature_oracle_matches_scalar_closed_form() {
        let (sys, cert) = scalar_damped(1.0);
        let beta = 0.5;
        let eta = 0.5;
        let z = DVector::from_element(1, 1.0);
        let v = quadrature_oracle(&sys, &cert, beta, eta, &z, 1e-9).unwrap();
        // 1/2 + eta / (2 (1 - beta)) = 1/2 + 1/2 = 1.
        assert_relative_eq!(v, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn quadrature_oracle_trivial_cases() {
        let (sys, cert) = scalar_damped(1.0);
        let zero = DVector::zeros(1);
        assert_eq!(quadrature_oracle(&sys, &cert, 0.5, 0.5, &zero, 1e-8).unwrap(), 0.0);
        let z = DVector::from_element(1, 2.0);
        assert_eq!(quadrature_oracle(&sys, &cert, 0.5, 0.0, &z, 1e-8).unwrap(), 2.0);
    }

    #[test]
    fn quadrature_oracle_cross_validates_wave_functional() {
        let (sys, cert) = small_wave();
        let beta = cert.alpha() / 2.0;
        let f = build_lyapunov(&sys, &cert, beta, None).unwrap();
        for z in random_states(sys.dim(), 5, 59) {
            let direct = f.value(&z);
            let oracle = quadrature_oracle(&sys, &cert, beta, f.eta(), &z, 1e-8).unwrap();
            assert_relative_eq!(direct, oracle, max_relative = 1e-6);
        }
    }

    #[test]
    fn trigger_bound_radius_formula() {
        // |BK| = |BKC| = 1, alpha = 1, M = 1: r = sqrt(6).
        let (sys, _) = scalar_damped(1.0);
        let cert = StabilityCertificate::from_parts(1.0, 1.0, 0.05, -1.0).unwrap();
        let design = trigger_bound(&sys, &cert);
        assert_relative_eq!(design.r(), 6.0f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(design.gamma_max(), 1.0 / 6.0f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(design.delta_max(0.1), 1.0 - 0.1 * 6.0f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn trigger_bound_degenerate_without_control() {
        let sys = ControlSystem::new(
            GramSpace::identity(2),
            GramSpace::identity(2),
            GramSpace::identity(2),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let cert = StabilityCertificate::from_parts(0.3, 2.0, 0.05, -0.3).unwrap();
        let design = trigger_bound(&sys, &cert);
        assert_eq!(design.r(), 0.0);
        assert!(design.gamma_max().is_infinite());
        assert!(design.to_json_string().contains("null"));
    }

    #[test]
    fn decay_rate_examples() {
        // gamma = 0 leaves delta_beta = beta.
        let (sys, cert) = scalar_damped(1.0);
        let f = build_lyapunov(&sys, &cert, 0.5, None).unwrap();
        let (db, dtb) = f.decay_rate(0.0);
        assert_relative_eq!(db, 0.5, epsilon = 1e-15);
        assert_relative_eq!(dtb, 0.5, epsilon = 1e-15);

        // c1 = 0, beta = M = |BK| = 1, gamma = 0.1: delta_beta = 0.8.
        let cert = StabilityCertificate::from_parts(2.0, 1.0, 0.05, -2.0).unwrap();
        let design = trigger_bound(&sys, &cert);
        assert_relative_eq!(design.delta_beta(1.0, 0.1), 0.8, epsilon = 1e-14);
    }

    #[test]
    fn delta_beta_dominates_delta_tilde() {
        let sys = build_transport(&TransportSpec { nx: 31, ..Default::default() }).unwrap();
        let cert = sys.certify(0.05).unwrap();
        let design = trigger_bound(&sys, &cert);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let beta = rng.random_range(1e-3..cert.alpha() * 0.999);
            let gamma = rng.random_range(0.0..design.gamma_max());
            assert!(design.delta_beta(beta, gamma) >= design.delta_tilde_beta(beta, gamma) - 1e-14);
        }
    }

    #[test]
    fn beta_star_witnesses_target_rate() {
        let sys = build_transport(&TransportSpec { nx: 31, ..Default::default() }).unwrap();
        let cert = sys.certify(0.05).unwrap();
        let design = trigger_bound(&sys, &cert);
        let gamma = 0.9 * design.gamma_max();
        let delta = 0.9 * design.delta_max(gamma);
        let beta = design.beta_star(gamma, delta).expect("witness must exist");
        assert!(beta > 0.0 && beta < cert.alpha());
        assert!(design.delta_tilde_beta(beta, gamma) > delta);
        assert!(design.delta_beta(beta, gamma) > delta);
        // Above the admissible region there is no witness.
        assert!(design.beta_star(gamma, design.delta_max(gamma) + 0.01).is_none());
    }

    #[test]
    fn gamma_max_decreases_with_overshoot() {
        let (sys, _) = scalar_damped(1.0);
        let mut last = f64::INFINITY;
        for m in [1.0, 2.0, 5.0, 10.0] {
            let cert = StabilityCertificate::from_parts(1.0, m, 0.05, -1.0).unwrap();
            let g = trigger_bound(&sys, &cert).gamma_max();
            assert!(g < last, "gamma_max should shrink as M grows");
            last = g;
        }
    }

    #[test]
    fn functional_json_export() {
        let (sys, cert) = scalar_damped(1.0);
        let f = build_lyapunov(&sys, &cert, 0.5, None).unwrap();
        let json = f.to_json_string();
        for key in ["\"beta\"", "\"eta\"", "\"C0\"", "\"C1\"", "\"C2\"", "\"Q\""] {
            assert!(json.contains(key), "missing {key}");
        }
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["C1"], 0.5);
    }

    #[test]
    fn constants_match_certificate_for_models() {
        for (name, sys) in [
            (
                "transport",
                build_transport(&TransportSpec { nx: 31, ..Default::default() }).unwrap(),
            ),
            ("wave", build_wave1d(&WaveSpec { nx: 15, ..Default::default() }).unwrap()),
            (
                "kdv",
                ModelSpec::KdvPeriodic(crate::models::KdvSpec { n_modes: 6, ..Default::default() })
                    .build()
                    .unwrap(),
            ),
        ] {
            let cert = sys.certify(0.05).unwrap();
            let beta = cert.alpha() / 2.0;
            let f = build_lyapunov(&sys, &cert, beta, None).unwrap();
            let m = cert.overshoot();
            let eta = f.eta();
            let expected_c2 = 0.5 * (1.0 + eta * m * m / (cert.alpha() - beta));
            let expected_c0 = 2.0 * (1.0 + eta * m * m).sqrt();
            assert!(
                (f.sandwich_upper() - expected_c2).abs() <= 1e-12 * expected_c2,
                "{name}: C2 mismatch"
            );
            assert!(
                (f.gradient_constant() - expected_c0).abs() <= 1e-12 * expected_c0,
                "{name}: C0 mismatch"
            );
        }
    }
}
