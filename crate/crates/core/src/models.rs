//! Builders for the worked example systems: a family of periodic transport
//! equations with in-domain damping, a damped 1-d wave equation on the energy
//! space, the linear Korteweg-de Vries equation with a volume-conserving
//! distributed control, and seeded random skew systems for fuzzing.
//!
//! The transport and KdV builders use spectral (Fourier) representations so
//! the drift is skew-symmetric to machine precision; the wave builder uses
//! second-order finite differences together with the matching energy Gram, so
//! skew-adjointness holds algebraically rather than asymptotically.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::{ControlSystem, GramSpace, StabilityCertificate};

/// Parameterized model selection, as it appears in harness configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ModelSpec {
    TransportFamily(TransportSpec),
    Wave1d(WaveSpec),
    KdvPeriodic(KdvSpec),
    RandomSkew(RandomSkewSpec),
}

impl ModelSpec {
    pub fn build(&self) -> Result<ControlSystem> {
        match self {
            ModelSpec::TransportFamily(s) => build_transport(s),
            ModelSpec::Wave1d(s) => build_wave1d(s),
            ModelSpec::KdvPeriodic(s) => build_kdv(s),
            ModelSpec::RandomSkew(s) => build_random_skew(s),
        }
    }

    /// Canonical smooth initial state for each model, used when the
    /// configuration does not supply one.
    pub fn builtin_initial_state(&self) -> DVector<f64> {
        match self {
            ModelSpec::TransportFamily(s) => {
                let f0 = |x: f64| (2.0 * PI * x).sin() + 0.5 * (4.0 * PI * x).cos();
                s.sample_per_velocity(|x, _v| f0(x))
            }
            ModelSpec::Wave1d(s) => {
                let w = |x: f64| (PI * x).sin() + 0.3 * (2.0 * PI * x).sin();
                let wt = |x: f64| 0.2 * (3.0 * PI * x).sin();
                s.sample_state(w, wt)
            }
            ModelSpec::KdvPeriodic(s) => {
                // sin(x) + 0.5 cos(2x) + 0.2 sin(3x), expressed in the
                // orthonormal trigonometric basis.
                let mut z = DVector::zeros(2 * s.n_modes);
                let root_pi = PI.sqrt();
                z[1] = root_pi; // sin x
                z[2] = 0.5 * root_pi; // cos 2x
                if s.n_modes >= 3 {
                    z[5] = 0.2 * root_pi; // sin 3x
                }
                z
            }
            ModelSpec::RandomSkew(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
                let z = DVector::from_fn(s.n, |_, _| rng.random_range(-1.0..1.0));
                let norm = z.norm();
                if norm > 0.0 {
                    z / norm
                } else {
                    DVector::from_element(s.n, (s.n as f64).sqrt().recip())
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::TransportFamily(_) => "transport_family",
            ModelSpec::Wave1d(_) => "wave1d",
            ModelSpec::KdvPeriodic(_) => "kdv_periodic",
            ModelSpec::RandomSkew(_) => "random_skew",
        }
    }
}

// ---------------------------------------------------------------------------
// Transport family
// ---------------------------------------------------------------------------

/// A family of periodic transport equations on `[0, 1)`, one block per
/// velocity, damped on the subinterval `omega`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportSpec {
    /// Number of grid points; must be odd so the spectral differentiation
    /// matrix is skew-symmetric.
    pub nx: usize,
    /// Transport speeds, each `>= 1`.
    pub velocities: Vec<f64>,
    /// Open damping interval.
    pub omega: (f64, f64),
}

impl Default for TransportSpec {
    fn default() -> Self {
        Self { nx: 63, velocities: vec![1.0], omega: (0.0, 0.5) }
    }
}

impl TransportSpec {
    pub fn grid(&self) -> Vec<f64> {
        (0..self.nx).map(|j| j as f64 / self.nx as f64).collect()
    }

    pub fn state_dim(&self) -> usize {
        self.nx * self.velocities.len()
    }

    /// Stacks `f(x_j, v)` per velocity block.
    pub fn sample_per_velocity(&self, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        let grid = self.grid();
        let mut z = DVector::zeros(self.state_dim());
        for (bi, &v) in self.velocities.iter().enumerate() {
            for (j, &x) in grid.iter().enumerate() {
                z[bi * self.nx + j] = f(x, v);
            }
        }
        z
    }

    /// The norm-envelope constants of the continuously damped family,
    /// `|f(t)| <= e^{1/2} e^{-t/2} |f0|`, valid uniformly in the velocity.
    pub fn continuum_certificate(&self) -> StabilityCertificate {
        StabilityCertificate::from_parts(0.5, 0.5f64.exp(), 0.0, -0.5)
            .expect("constants are valid")
    }

    /// Returns a copy whose velocity list contains the resonant speed for the
    /// given sampling period, together with that speed.
    pub fn with_counterexample_velocity(&self, t1: f64) -> (TransportSpec, f64) {
        let v1 = counterexample_velocity(t1);
        let mut spec = self.clone();
        if !spec.velocities.iter().any(|&v| v == v1) {
            spec.velocities.push(v1);
        }
        (spec, v1)
    }
}

/// Spectral differentiation matrix for periodic functions on `[0, 1)` with an
/// odd number of points; exactly antisymmetric by construction.
pub fn fourier_diff_matrix(nx: usize) -> DMatrix<f64> {
    assert!(nx % 2 == 1, "spectral differentiation needs an odd grid");
    let n = nx as f64;
    let mut d = DMatrix::zeros(nx, nx);
    for j in 0..nx {
        for l in 0..j {
            let diff = (j - l) as f64;
            let sign = if (j - l) % 2 == 0 { 1.0 } else { -1.0 };
            let val = sign * PI / (PI * diff / n).sin();
            d[(j, l)] = val;
            d[(l, j)] = -val;
        }
    }
    d
}

/// Node weight of the damping indicator: 1 strictly inside, 0 outside, and
/// 1/2 on a node that coincides with an endpoint. The half weight keeps the
/// semi-discrete damping second-order consistent when an endpoint of `omega`
/// lands on the grid (as `x = 0` always does).
fn damping_weight(omega: (f64, f64), x: f64) -> f64 {
    let (a, b) = omega;
    if (x - a).abs() <= 1e-12 || (x - b).abs() <= 1e-12 {
        0.5
    } else if x > a && x < b {
        1.0
    } else {
        0.0
    }
}

/// Builds the transport family: block-diagonal drift `-v D` per velocity,
/// collocated actuation/observation on `omega` (so `B K C = -diag(w_omega)`),
/// `K = -I`, uniform quadrature Grams.
pub fn build_transport(spec: &TransportSpec) -> Result<ControlSystem> {
    if spec.nx % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "transport grid size must be odd for a skew-symmetric differentiation matrix, got {}",
            spec.nx
        )));
    }
    if spec.velocities.is_empty() {
        return Err(Error::InvalidParameter("velocity list must be nonempty".into()));
    }
    if spec.velocities.iter().any(|&v| !(v >= 1.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("velocities must be finite and >= 1".into()));
    }
    if !(spec.omega.0 < spec.omega.1) {
        return Err(Error::InvalidParameter("omega must be a nonempty open interval".into()));
    }
    let nx = spec.nx;
    let nv = spec.velocities.len();
    let n = nx * nv;
    let d = fourier_diff_matrix(nx);
    let grid = spec.grid();

    let mut a = DMatrix::zeros(n, n);
    let mut ind = DMatrix::zeros(n, n);
    for (bi, &v) in spec.velocities.iter().enumerate() {
        let o = bi * nx;
        for j in 0..nx {
            for l in 0..nx {
                a[(o + j, o + l)] = -v * d[(j, l)];
            }
            ind[(o + j, o + j)] = damping_weight(spec.omega, grid[j]).sqrt();
        }
    }
    let h = 1.0 / nx as f64;
    let gram = GramSpace::with_label("state", DMatrix::identity(n, n) * h)?;
    ControlSystem::new(
        gram.clone(),
        gram.clone(),
        gram,
        a,
        ind.clone(),
        ind,
        -DMatrix::<f64>::identity(n, n),
    )
}

/// Occupation time of the open interval `omega` along the characteristic
/// `s -> {x0 + s v}`, for `s` in `[0, t]`, in closed form.
pub fn occupation_time(omega: (f64, f64), x0: f64, v: f64, t: f64) -> f64 {
    assert!(t >= 0.0 && v > 0.0);
    let (a, b) = omega;
    let len = b - a;
    // Measure of [0, y] intersected with (a, b), for y in [0, 1].
    let m = |y: f64| -> f64 { (y.min(b) - a).clamp(0.0, len) };
    let x0 = x0.rem_euclid(1.0);
    let total = t * v;
    let wraps = total.floor();
    let rest = total - wraps;
    let partial = if x0 + rest <= 1.0 {
        m(x0 + rest) - m(x0)
    } else {
        (len - m(x0)) + m(x0 + rest - 1.0)
    };
    (wraps * len + partial) / v
}

/// Evaluates the characteristics solution of the continuously damped family
/// at time `t` on the grid: `f(t, x) = f0({x - t v}) exp(-occupation)`.
pub fn transport_exact(
    spec: &TransportSpec,
    f0: impl Fn(f64, f64) -> f64,
    t: f64,
) -> DVector<f64> {
    assert!(t >= 0.0);
    let grid = spec.grid();
    let mut out = DVector::zeros(spec.state_dim());
    for (bi, &v) in spec.velocities.iter().enumerate() {
        for (j, &x) in grid.iter().enumerate() {
            let x0 = (x - t * v).rem_euclid(1.0);
            let occ = occupation_time(spec.omega, x0, v, t);
            out[bi * spec.nx + j] = f0(x0, v) * (-occ).exp();
        }
    }
    out
}

/// The sampling-resonant speed for period `t1`: `1/t1` when `t1 <= 1`, else
/// the smallest multiple of `1/t1` exceeding 1.
pub fn counterexample_velocity(t1: f64) -> f64 {
    assert!(t1 > 0.0);
    if t1 <= 1.0 {
        1.0 / t1
    } else {
        (t1.floor() + 1.0) / t1
    }
}

/// Initial datum defeating periodic sampling: a smooth bump carried by the
/// resonant velocity whose support never meets the damping region at the
/// sampling instants.
#[derive(Clone, Debug)]
pub struct Counterexample {
    /// Grid samples of the datum, stacked per velocity.
    pub f0: DVector<f64>,
    /// The resonant transport speed carrying the bump.
    pub v1: f64,
    /// Index of `v1` in the spec's velocity list.
    pub v1_index: usize,
    /// Number of sampling periods after which a hypothetical exponential
    /// envelope would force the norm below one half.
    pub k_star: usize,
    /// Bump center.
    pub center: f64,
    /// Bump support half-width.
    pub half_width: f64,
}

impl Counterexample {
    /// Pointwise evaluation of the datum.
    pub fn eval(&self, x: f64, v: f64) -> f64 {
        if v != self.v1 {
            return 0.0;
        }
        let s = (x - self.center) / self.half_width;
        if s.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s * s)).exp()
        }
    }
}

/// Builds the periodic-sampling counterexample datum for sampling period
/// `t1`. The spec's velocity list must already contain the resonant speed
/// (see [`TransportSpec::with_counterexample_velocity`]).
pub fn counterexample_f0(spec: &TransportSpec, t1: f64) -> Result<Counterexample> {
    if !(t1 > 0.0) {
        return Err(Error::InvalidParameter(format!("sampling period must be positive, got {t1}")));
    }
    let v1 = counterexample_velocity(t1);
    let v1_index = spec
        .velocities
        .iter()
        .position(|&v| v == v1)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "velocity list must contain the resonant speed {v1}; \
                 insert it with `with_counterexample_velocity`"
            ))
        })?;

    let center = 0.75;
    let (a, b) = spec.omega;
    // Largest admissible half-width keeping the support clear of the closure
    // of omega (accounting for wrap-around).
    let gap = (center - b).min(1.0 - center + a);
    let cell = 1.0 / spec.nx as f64;
    let half_width = (3.0 * cell).min(0.9 * gap);
    if half_width < cell {
        return Err(Error::InvalidParameter(format!(
            "counterexample bump support would fall below grid resolution \
             (half-width {half_width:.3e} < cell {cell:.3e}); use a finer grid"
        )));
    }

    // Hypothetical envelope constants of the continuously damped family.
    let cert = spec.continuum_certificate();
    let k_star = ((2.0 * cert.overshoot()).ln() / (cert.alpha() * t1)).ceil().max(1.0) as usize;

    let mut cx = Counterexample { f0: DVector::zeros(spec.state_dim()), v1, v1_index, k_star, center, half_width };
    cx.f0 = spec.sample_per_velocity(|x, v| cx.eval(x, v));
    Ok(cx)
}

// ---------------------------------------------------------------------------
// Wave equation
// ---------------------------------------------------------------------------

/// A 1-d wave equation on `(0, 1)` with Dirichlet boundaries, nonnegative
/// potential, and velocity damping on `omega`, posed on the energy space.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveSpec {
    /// Number of interior grid points.
    pub nx: usize,
    /// Potential samples at interior nodes; empty means zero.
    pub p: Vec<f64>,
    /// Open damping interval inside `(0, 1)`.
    pub omega: (f64, f64),
    /// Damping gain `k > 0`.
    pub gain: f64,
}

impl Default for WaveSpec {
    fn default() -> Self {
        Self { nx: 63, p: Vec::new(), omega: (0.0, 0.5), gain: 1.0 }
    }
}

impl WaveSpec {
    pub fn mesh(&self) -> f64 {
        1.0 / (self.nx + 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        let h = self.mesh();
        (1..=self.nx).map(|i| i as f64 * h).collect()
    }

    /// Samples `(w, w_t)` on the interior grid.
    pub fn sample_state(&self, w: impl Fn(f64) -> f64, wt: impl Fn(f64) -> f64) -> DVector<f64> {
        let grid = self.grid();
        let mut z = DVector::zeros(2 * self.nx);
        for (i, &x) in grid.iter().enumerate() {
            z[i] = w(x);
            z[self.nx + i] = wt(x);
        }
        z
    }
}

/// Builds the damped wave system with state `(w, w_t)` and the discrete
/// energy Gram `blockdiag(L + P, h I)`, `L` the Dirichlet stiffness matrix.
pub fn build_wave1d(spec: &WaveSpec) -> Result<ControlSystem> {
    if spec.nx < 3 {
        return Err(Error::InvalidParameter(format!("wave grid needs nx >= 3, got {}", spec.nx)));
    }
    if !(spec.gain > 0.0) {
        return Err(Error::InvalidParameter(format!("wave gain must be positive, got {}", spec.gain)));
    }
    let nx = spec.nx;
    let p = if spec.p.is_empty() { vec![0.0; nx] } else { spec.p.clone() };
    if p.len() != nx {
        return Err(Error::DimensionMismatch {
            context: format!("potential must have {nx} samples, got {}", p.len()),
        });
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "potential must be nonnegative and finite (energy Gram would lose definiteness)".into(),
        ));
    }
    let h = spec.mesh();
    // Stiffness form of the Dirichlet Laplacian plus potential mass.
    let mut lp = DMatrix::zeros(nx, nx);
    for i in 0..nx {
        lp[(i, i)] = 2.0 / h + h * p[i];
        if i + 1 < nx {
            lp[(i, i + 1)] = -1.0 / h;
            lp[(i + 1, i)] = -1.0 / h;
        }
    }
    let n = 2 * nx;
    let mut gram = DMatrix::zeros(n, n);
    gram.view_mut((0, 0), (nx, nx)).copy_from(&lp);
    for i in 0..nx {
        gram[(nx + i, nx + i)] = h;
    }

    // Drift [[0, I], [-(L+P)/h, 0]]; the lower-left block is (Delta_h - p).
    let mut a = DMatrix::zeros(n, n);
    for i in 0..nx {
        a[(i, nx + i)] = 1.0;
        for j in 0..nx {
            a[(nx + i, j)] = -lp[(i, j)] / h;
        }
    }

    let grid = spec.grid();
    let mut b = DMatrix::zeros(n, nx);
    let mut c = DMatrix::zeros(nx, n);
    for (i, &x) in grid.iter().enumerate() {
        let on = damping_weight(spec.omega, x).sqrt();
        b[(nx + i, i)] = on;
        c[(i, nx + i)] = on;
    }
    let io_gram = GramSpace::with_label("input", DMatrix::identity(nx, nx) * h)?;
    ControlSystem::new(
        GramSpace::with_label("state", gram)?,
        io_gram.clone(),
        io_gram,
        a,
        b,
        c,
        -DMatrix::<f64>::identity(nx, nx) * spec.gain,
    )
}

// ---------------------------------------------------------------------------
// Linear KdV
// ---------------------------------------------------------------------------

const KDV_QUADRATURE_POINTS: usize = 4096;

/// The linear KdV equation on `(0, 2 pi)` with periodic boundary conditions
/// and the volume-conserving feedback `-k g(x)(u - integral(g u))`, reduced to
/// the mean-zero subspace and realified over trigonometric modes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct KdvSpec {
    /// Number of trigonometric mode pairs; state dimension is `2 n_modes`.
    pub n_modes: usize,
    /// Support `[a, b]` of the built-in control profile.
    pub support: (f64, f64),
    /// Feedback gain `k > 0`.
    pub gain: f64,
    /// Optional custom profile samples on a uniform grid over `[0, 2 pi)`.
    pub g_samples: Option<Vec<f64>>,
    /// Rescale the profile so its integral is one (default). When disabled
    /// the profile must already satisfy the unit-integral constraint.
    pub normalize_profile: bool,
}

impl Default for KdvSpec {
    fn default() -> Self {
        Self {
            n_modes: 16,
            support: (PI / 2.0, 3.0 * PI / 2.0),
            gain: 1.0,
            g_samples: None,
            normalize_profile: true,
        }
    }
}

impl KdvSpec {
    /// Profile samples on the quadrature grid, optionally normalized to unit
    /// integral.
    fn profile(&self) -> Result<Vec<f64>> {
        let samples = match &self.g_samples {
            Some(s) => s.clone(),
            None => {
                let (a, b) = self.support;
                if !(a >= 0.0 && b <= 2.0 * PI && a < b) {
                    return Err(Error::InvalidParameter(format!(
                        "profile support must be a nonempty subinterval of [0, 2 pi], got [{a}, {b}]"
                    )));
                }
                (0..KDV_QUADRATURE_POINTS)
                    .map(|j| {
                        let x = 2.0 * PI * j as f64 / KDV_QUADRATURE_POINTS as f64;
                        let s = (2.0 * x - (a + b)) / (b - a);
                        if s.abs() >= 1.0 {
                            0.0
                        } else {
                            (-1.0 / (1.0 - s * s)).exp()
                        }
                    })
                    .collect()
            }
        };
        if samples.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter("profile must be nonnegative and finite".into()));
        }
        let dx = 2.0 * PI / samples.len() as f64;
        let mass: f64 = samples.iter().sum::<f64>() * dx;
        if self.normalize_profile {
            if mass <= 0.0 {
                return Err(Error::InvalidParameter("profile must have positive integral".into()));
            }
            Ok(samples.iter().map(|&v| v / mass).collect())
        } else {
            if (mass - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParameter(format!(
                    "profile integral must be 1 within 1e-10, got {mass}"
                )));
            }
            Ok(samples)
        }
    }
}

/// Orthonormal trigonometric basis function `idx` evaluated at `x`, over the
/// mode pairs `cos(kx)/sqrt(pi), sin(kx)/sqrt(pi)` for `k = 1..`.
fn kdv_basis(idx: usize, x: f64) -> f64 {
    let k = (idx / 2 + 1) as f64;
    if idx % 2 == 0 {
        (k * x).cos() / PI.sqrt()
    } else {
        (k * x).sin() / PI.sqrt()
    }
}

/// Assembles the matrix of the feedback profile operator
/// `u -> g (u - integral(g u))` on the span of the given basis (plus the
/// constant mode when `with_mean` is set, in which case it occupies index 0).
fn kdv_feedback_matrix(g: &[f64], n_modes: usize, with_mean: bool) -> DMatrix<f64> {
    let nq = g.len();
    let dx = 2.0 * PI / nq as f64;
    let dim = 2 * n_modes + usize::from(with_mean);
    let basis = |i: usize, x: f64| -> f64 {
        if with_mean {
            if i == 0 {
                return 1.0 / (2.0 * PI).sqrt();
            }
            kdv_basis(i - 1, x)
        } else {
            kdv_basis(i, x)
        }
    };
    // Tabulate basis values on the quadrature grid.
    let mut table = DMatrix::zeros(dim, nq);
    for j in 0..nq {
        let x = 2.0 * PI * j as f64 / nq as f64;
        for i in 0..dim {
            table[(i, j)] = basis(i, x);
        }
    }
    let mut weighted = DMatrix::zeros(dim, nq);
    for j in 0..nq {
        for i in 0..dim {
            weighted[(i, j)] = table[(i, j)] * g[j] * dx;
        }
    }
    // M_ij = integral(g phi_i phi_j), w_i = integral(g phi_i).
    let m = &weighted * table.transpose();
    let w = DVector::from_fn(dim, |i, _| weighted.row(i).sum());
    m - &w * w.transpose()
}

fn kdv_drift(n_modes: usize, with_mean: bool) -> DMatrix<f64> {
    let dim = 2 * n_modes + usize::from(with_mean);
    let off = usize::from(with_mean);
    let mut a = DMatrix::zeros(dim, dim);
    for k in 1..=n_modes {
        let k3 = (k * k * k) as f64;
        let i = off + 2 * (k - 1);
        a[(i, i + 1)] = k3;
        a[(i + 1, i)] = -k3;
    }
    a
}

fn build_kdv_with_mean(spec: &KdvSpec, with_mean: bool) -> Result<ControlSystem> {
    if spec.n_modes < 2 {
        return Err(Error::InvalidParameter(format!("n_modes must be >= 2, got {}", spec.n_modes)));
    }
    if !(spec.gain > 0.0) {
        return Err(Error::InvalidParameter(format!("KdV gain must be positive, got {}", spec.gain)));
    }
    let g = spec.profile()?;
    let dim = 2 * spec.n_modes + usize::from(with_mean);
    let a = kdv_drift(spec.n_modes, with_mean);
    let c = kdv_feedback_matrix(&g, spec.n_modes, with_mean);
    let id = GramSpace::identity(dim);
    ControlSystem::new(
        id.clone(),
        id.clone(),
        id,
        a,
        DMatrix::identity(dim, dim),
        c,
        -DMatrix::<f64>::identity(dim, dim) * spec.gain,
    )
}

/// Builds the mean-zero (reduced) KdV system with `B = I`, `K = -k I`, and
/// `C` the profile-operator matrix.
pub fn build_kdv(spec: &KdvSpec) -> Result<ControlSystem> {
    build_kdv_with_mean(spec, false)
}

/// Full-space variant retaining the mean mode at index 0; the closed loop is
/// only neutrally stable there, which is what the mass diagnostic observes.
pub fn build_kdv_full(spec: &KdvSpec) -> Result<ControlSystem> {
    build_kdv_with_mean(spec, true)
}

/// Total integral of the state over the period, for full-space coefficient
/// vectors (index 0 carries the constant mode). Identically zero on the
/// reduced system by construction.
pub fn kdv_mass(u_full: &DVector<f64>) -> f64 {
    (2.0 * PI).sqrt() * u_full[0]
}

// ---------------------------------------------------------------------------
// Random skew systems
// ---------------------------------------------------------------------------

/// Seeded random skew system with collocated damping, for fuzzing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSkewSpec {
    pub n: usize,
    pub seed: u64,
    /// Number of input channels; defaults to `ceil(n / 2)` when zero.
    pub inputs: usize,
    /// Feedback coupling strength.
    pub gain: f64,
}

impl Default for RandomSkewSpec {
    fn default() -> Self {
        Self { n: 8, seed: 0, inputs: 0, gain: 1.0 }
    }
}

/// Builds `A = S - S'` from a seeded random `S`, a random bounded `B`,
/// collocated observation `C = B'`, and `K = -gain I`, resampling until the
/// closed loop is exponentially stable.
pub fn build_random_skew(spec: &RandomSkewSpec) -> Result<ControlSystem> {
    if spec.n < 2 {
        return Err(Error::InvalidParameter(format!("random system needs n >= 2, got {}", spec.n)));
    }
    if !(spec.gain > 0.0) {
        return Err(Error::InvalidParameter(format!("gain must be positive, got {}", spec.gain)));
    }
    let n = spec.n;
    let m = if spec.inputs == 0 { n.div_ceil(2) } else { spec.inputs };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    const MAX_ATTEMPTS: usize = 50;
    for _ in 0..MAX_ATTEMPTS {
        let s = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) / (n as f64).sqrt();
        let a = &s - s.transpose();
        let b_raw = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let b_norm = linalg::spectral_norm_with_maximizer(&b_raw).0;
        let b = b_raw / b_norm;
        let c = b.transpose();
        let k = -DMatrix::<f64>::identity(m, m) * spec.gain;
        let a_cl = &a + &b * &k * &c;
        if linalg::spectral_abscissa(&a_cl) < 0.0 {
            return ControlSystem::new(
                GramSpace::identity(n),
                GramSpace::identity(m),
                GramSpace::identity(m),
                a,
                b,
                c,
                k,
            );
        }
    }
    Err(Error::RandomSystemUnstable { attempts: MAX_ATTEMPTS, seed: spec.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::expm;
    use crate::system::check_skew_adjoint;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fourier_diff_differentiates_trig_exactly() {
        let nx = 31;
        let spec = TransportSpec { nx, velocities: vec![1.0], omega: (0.0, 0.5) };
        let d = fourier_diff_matrix(nx);
        let grid = spec.grid();
        let f = DVector::from_fn(nx, |j, _| (2.0 * PI * grid[j]).sin());
        let df = &d * &f;
        for (j, &x) in grid.iter().enumerate() {
            assert_relative_eq!(df[j], 2.0 * PI * (2.0 * PI * x).cos(), epsilon = 1e-10);
        }
    }

    #[test]
    fn transport_rejects_even_grid() {
        let spec = TransportSpec { nx: 32, ..Default::default() };
        assert!(build_transport(&spec).is_err());
    }

    #[test]
    fn transport_skew_residual_tiny() {
        let spec = TransportSpec { nx: 31, ..Default::default() };
        let sys = build_transport(&spec).unwrap();
        assert!(check_skew_adjoint(sys.a(), sys.state_space()) <= 1e-12);
    }

    #[test]
    fn transport_closed_loop_is_drift_minus_damping() {
        let spec = TransportSpec { nx: 15, ..Default::default() };
        let sys = build_transport(&spec).unwrap();
        let grid = spec.grid();
        let expected = {
            let mut m = sys.a().clone();
            for (j, &x) in grid.iter().enumerate() {
                m[(j, j)] -= damping_weight(spec.omega, x);
            }
            m
        };
        assert!((sys.closed_loop() - expected).norm() <= 1e-14);
        // Interior nodes carry the plain indicator; only boundary-aligned
        // nodes are reweighted.
        assert_eq!(sys.b()[(0, 0)], 0.5f64.sqrt());
        assert_eq!(sys.b()[(1, 1)], 1.0);
    }

    #[test]
    fn transport_uncontrolled_flow_conserves_norm() {
        let spec = TransportSpec { nx: 31, ..Default::default() };
        let sys = build_transport(&spec).unwrap();
        let z0 = ModelSpec::TransportFamily(spec).builtin_initial_state();
        let h = sys.state_space();
        for t in [0.5, 1.0, 2.0] {
            let zt = expm(&(sys.a() * t)) * &z0;
            assert!((h.norm(&zt) / h.norm(&z0) - 1.0).abs() <= 1e-10 * t.max(1.0));
        }
    }

    #[test]
    fn transport_continuous_decay_matches_envelope() {
        let spec = TransportSpec { nx: 63, ..Default::default() };
        let sys = build_transport(&spec).unwrap();
        let z0 = ModelSpec::TransportFamily(spec).builtin_initial_state();
        let h = sys.state_space();
        let a_cl = sys.closed_loop();
        for t in [1.0, 2.0, 4.0] {
            let zt = expm(&(&a_cl * t)) * &z0;
            let bound = ((1.0 - t) / 2.0).exp() * h.norm(&z0);
            assert!(
                h.norm(&zt) <= bound * 1.1,
                "t = {t}: {} > {}",
                h.norm(&zt),
                bound * 1.1
            );
        }
    }

    #[test]
    fn transport_exact_constant_datum() {
        let spec = TransportSpec { nx: 31, ..Default::default() };
        let f = transport_exact(&spec, |_, _| 1.0, 1.0);
        for j in 0..spec.nx {
            assert_relative_eq!(f[j], (-0.5f64).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn transport_exact_time_zero_is_identity() {
        let spec = TransportSpec { nx: 31, ..Default::default() };
        let f0 = |x: f64, _: f64| (2.0 * PI * x).sin();
        let f = transport_exact(&spec, f0, 0.0);
        let sampled = spec.sample_per_velocity(f0);
        assert!((f - sampled).norm() <= 1e-15);
    }

    #[test]
    fn transport_discrete_vs_exact_spectral_convergence() {
        let f0 = |x: f64, _: f64| (2.0 * PI * x).sin() + 0.5 * (4.0 * PI * x).cos();
        let t = 2.0;
        let mut errors = Vec::new();
        for nx in [31usize, 63] {
            let spec = TransportSpec { nx, velocities: vec![1.0], omega: (0.0, 0.5) };
            let sys = build_transport(&spec).unwrap();
            let z0 = spec.sample_per_velocity(f0);
            let zt = expm(&(sys.closed_loop() * t)) * &z0;
            let exact = transport_exact(&spec, f0, t);
            errors.push((zt - &exact).norm() / exact.norm());
        }
        assert!(errors[1] <= 1e-3, "fine-grid error {} too large", errors[1]);
        assert!(errors[0] / errors[1] >= 4.0, "convergence ratio {} below 4", errors[0] / errors[1]);
    }

    #[test]
    fn transport_family_decouples_per_velocity() {
        let spec = TransportSpec { nx: 15, velocities: vec![1.0, 2.0], omega: (0.0, 0.5) };
        let sys = build_transport(&spec).unwrap();
        let t = 0.7;
        let family = expm(&(sys.closed_loop() * t));
        for (bi, &v) in spec.velocities.iter().enumerate() {
            let single = TransportSpec { nx: 15, velocities: vec![v], omega: (0.0, 0.5) };
            let sys_v = build_transport(&single).unwrap();
            let block = expm(&(sys_v.closed_loop() * t));
            let view = family.view((bi * 15, bi * 15), (15, 15)).clone_owned();
            assert!((view - block).norm() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn occupation_time_is_additive_and_bounded(
            x0 in 0.0f64..1.0,
            v in 1.0f64..4.0,
            t1 in 0.0f64..3.0,
            t2 in 0.0f64..3.0,
        ) {
            let omega = (0.0, 0.5);
            let occ1 = occupation_time(omega, x0, v, t1);
            let shifted = (x0 + t1 * v).rem_euclid(1.0);
            let occ2 = occupation_time(omega, shifted, v, t2);
            let total = occupation_time(omega, x0, v, t1 + t2);
            prop_assert!((occ1 + occ2 - total).abs() <= 1e-10);
            prop_assert!(total >= -1e-15 && total <= t1 + t2 + 1e-15);
        }
    }

    #[test]
    fn occupation_time_full_wrap_is_omega_length() {
        // One full wrap at speed v covers omega exactly once.
        for x0 in [0.0, 0.3, 0.9] {
            let occ = occupation_time((0.0, 0.5), x0, 2.0, 0.5);
            assert_relative_eq!(occ, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn counterexample_characteristics_avoid_omega() {
        let t1 = 0.5;
        let (spec, v1) = TransportSpec::default().with_counterexample_velocity(t1);
        let cx = counterexample_f0(&spec, t1).unwrap();
        assert_eq!(cx.v1, v1);
        for k in 0..=cx.k_star {
            let pos = (0.75 + k as f64 * t1 * v1).rem_euclid(1.0);
            assert!(
                !(pos > spec.omega.0 && pos < spec.omega.1),
                "characteristic hit omega at k = {k}: {pos}"
            );
        }
        // Support clear of the damping region on the grid.
        let sys = build_transport(&spec).unwrap();
        let damped = sys.closed_loop() * &cx.f0 - sys.a() * &cx.f0;
        assert_eq!(damped.norm(), 0.0);
    }

    #[test]
    fn counterexample_requires_inserted_velocity() {
        let spec = TransportSpec { velocities: vec![1.5], ..Default::default() };
        assert!(counterexample_f0(&spec, 0.7).is_err());
    }

    #[test]
    fn wave_skew_residual_and_energy_identity() {
        let spec = WaveSpec { nx: 63, ..Default::default() };
        let sys = build_wave1d(&spec).unwrap();
        assert!(check_skew_adjoint(sys.a(), sys.state_space()) <= 1e-10);

        // The Gram realizes the discrete energy exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = DVector::from_fn(2 * spec.nx, |_, _| rng.random_range(-1.0..1.0));
        let h = spec.mesh();
        let w = z.rows(0, spec.nx).clone_owned();
        let wt = z.rows(spec.nx, spec.nx).clone_owned();
        let mut stiffness = 0.0;
        let mut prev = 0.0;
        for i in 0..spec.nx {
            let diff = w[i] - prev;
            stiffness += diff * diff / h;
            prev = w[i];
        }
        stiffness += prev * prev / h;
        let energy = 0.5 * (stiffness + h * wt.norm_squared());
        assert_relative_eq!(
            energy,
            0.5 * sys.state_space().norm(&z).powi(2),
            max_relative = 1e-12
        );
    }

    #[test]
    fn wave_rejects_negative_potential() {
        let spec = WaveSpec { nx: 5, p: vec![0.0, 1.0, -0.5, 0.0, 0.0], ..Default::default() };
        assert!(build_wave1d(&spec).is_err());
    }

    #[test]
    fn wave_uncontrolled_energy_conserved() {
        let spec = WaveSpec { nx: 31, ..Default::default() };
        let sys = build_wave1d(&spec).unwrap();
        let z0 = ModelSpec::Wave1d(spec).builtin_initial_state();
        let h = sys.state_space();
        // Work in orthonormalized coordinates where the flow is orthogonal.
        let a_tilde = sys.a_orthonormal();
        let z0_t = h.to_orthonormal(&z0);
        for t in [0.5, 1.0, 2.0] {
            let zt = expm(&(a_tilde * t)) * &z0_t;
            assert!((zt.norm() / z0_t.norm() - 1.0).abs() <= 1e-10 * t.max(1.0));
        }
    }

    #[test]
    fn wave_closed_loop_is_stable() {
        let spec = WaveSpec { nx: 63, ..Default::default() };
        let sys = build_wave1d(&spec).unwrap();
        let sigma = linalg::spectral_abscissa(&sys.closed_loop_orthonormal());
        assert!(sigma < 0.0, "wave abscissa {sigma} not negative");
        assert!(sys.certify(0.05).is_ok());
    }

    #[test]
    fn kdv_skew_and_stability() {
        let spec = KdvSpec::default();
        let sys = build_kdv(&spec).unwrap();
        assert!(check_skew_adjoint(sys.a(), sys.state_space()) <= 1e-12);
        let sigma = linalg::spectral_abscissa(&sys.closed_loop_orthonormal());
        assert!(sigma < 0.0, "KdV abscissa {sigma} not negative");
    }

    #[test]
    fn kdv_uncontrolled_flow_conserves_norm() {
        let spec = KdvSpec::default();
        let sys = build_kdv(&spec).unwrap();
        let z0 = ModelSpec::KdvPeriodic(spec).builtin_initial_state();
        for t in [0.5, 1.0] {
            let zt = expm(&(sys.a() * t)) * &z0;
            assert!((zt.norm() / z0.norm() - 1.0).abs() <= 1e-10 * t.max(1.0));
        }
    }

    #[test]
    fn kdv_mass_examples() {
        let spec = KdvSpec { n_modes: 4, ..Default::default() };
        // u = c: only the constant coefficient, c * sqrt(2 pi).
        let mut u = DVector::zeros(2 * spec.n_modes + 1);
        let c = 1.7;
        u[0] = c * (2.0 * PI).sqrt();
        assert_relative_eq!(kdv_mass(&u), 2.0 * PI * c, epsilon = 1e-12);
        // Mean-zero state.
        u[0] = 0.0;
        u[3] = 2.0;
        assert_eq!(kdv_mass(&u), 0.0);
    }

    #[test]
    fn kdv_full_flow_conserves_mass() {
        let spec = KdvSpec { n_modes: 8, ..Default::default() };
        let sys = build_kdv_full(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut u = DVector::from_fn(sys.dim(), |_, _| rng.random_range(-1.0..1.0));
        u[0] = 2.0;
        let m0 = kdv_mass(&u);
        let a_cl = sys.closed_loop();
        for steps in [1, 4, 10] {
            let ut = expm(&(&a_cl * (0.1 * steps as f64))) * &u;
            assert!((kdv_mass(&ut) - m0).abs() <= 1e-10 * m0.abs());
        }
    }

    #[test]
    fn kdv_rejects_unnormalized_profile() {
        let spec = KdvSpec {
            n_modes: 4,
            g_samples: Some(vec![2.0; 64]),
            normalize_profile: false,
            ..Default::default()
        };
        assert!(build_kdv(&spec).is_err());
        let ok = KdvSpec {
            n_modes: 4,
            g_samples: Some(vec![2.0; 64]),
            normalize_profile: true,
            ..Default::default()
        };
        assert!(build_kdv(&ok).is_ok());
    }

    #[test]
    fn random_skew_is_deterministic_and_valid() {
        let spec = RandomSkewSpec { n: 8, seed: 42, ..Default::default() };
        let s1 = build_random_skew(&spec).unwrap();
        let s2 = build_random_skew(&spec).unwrap();
        assert_eq!(s1.a(), s2.a());
        assert_eq!(s1.b(), s2.b());
        assert!(check_skew_adjoint(s1.a(), s1.state_space()) <= 1e-12);
        let cert = s1.certify(0.05).unwrap();
        assert!(cert.alpha() > 0.0);
    }

    #[test]
    fn model_spec_serde_round_trip() {
        let spec = ModelSpec::TransportFamily(TransportSpec::default());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("transport_family"));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.name(), "transport_family");

        let wave: ModelSpec =
            serde_json::from_str(r#"{"variant":"wave1d","nx":31,"gain":2.0}"#).unwrap();
        match wave {
            ModelSpec::Wave1d(w) => {
                assert_eq!(w.nx, 31);
                assert_eq!(w.gain, 2.0);
                assert_eq!(w.omega, (0.0, 0.5));
            }
            _ => panic!("wrong variant"),
        }
    }
}
