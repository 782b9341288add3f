//! Gram-weighted linear control systems, induced operator norms, and
//! numerical exponential-stability certificates.
//!
//! A system consists of matrices `(A, B, C, K)` over three inner-product
//! spaces (state `H`, input `U`, output `Y`), each carried by a symmetric
//! positive definite Gram matrix. The drift `A` must be skew-adjoint with
//! respect to the state Gram, so the uncontrolled flow conserves the state
//! norm. All numerics run in orthonormalized coordinates `z~ = R z` with
//! `R' R = G`; original coordinates are a presentation layer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative tolerance for the skew-adjointness residual of `A`.
pub const TOL_SKEW: f64 = 1e-10;
/// Absolute per-entry tolerance for Gram symmetry.
pub const TOL_GRAM_SYMMETRY: f64 = 1e-12;
/// Relative tolerance on the certificate's Lyapunov residual.
pub const TOL_CERTIFICATE_RESIDUAL: f64 = 1e-8;
/// Default stability margin used when shifting the spectral abscissa.
pub const DEFAULT_MARGIN: f64 = 0.05;

/// A finite-dimensional inner-product space represented by its Gram matrix.
///
/// Caches the upper-triangular factor `R` with `R' R = G` and its inverse,
/// so that `|z|_G = |R z|_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSpace {
    dim: usize,
    gram: DMatrix<f64>,
    chol: DMatrix<f64>,
    chol_inv: DMatrix<f64>,
}

impl GramSpace {
    /// Builds a space from its Gram matrix, symmetrizing benign asymmetry
    /// before factorization.
    pub fn new(gram: DMatrix<f64>) -> Result<Self> {
        Self::with_label("space", gram)
    }

    /// Same as [`GramSpace::new`] but errors name the offending space.
    pub fn with_label(label: &str, gram: DMatrix<f64>) -> Result<Self> {
        let n = gram.nrows();
        if gram.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: format!("gram matrix for `{label}` must be square, got {n}x{}", gram.ncols()),
            });
        }
        let mut max_asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                max_asym = max_asym.max((gram[(i, j)] - gram[(j, i)]).abs());
            }
        }
        if max_asym > TOL_GRAM_SYMMETRY {
            return Err(Error::NonSymmetricGram {
                space: label.to_string(),
                max_asymmetry: max_asym,
            });
        }
        let gram = (&gram + gram.transpose()) * 0.5;
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite { space: label.to_string() })?;
        // nalgebra yields lower-triangular L with L L' = G; we keep R = L'.
        let chol = chol.l().transpose();
        let chol_inv = chol
            .clone()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::NotPositiveDefinite { space: label.to_string() })?;
        Ok(Self { dim: n, gram, chol, chol_inv })
    }

    /// The Euclidean space of the given dimension.
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            gram: DMatrix::identity(dim, dim),
            chol: DMatrix::identity(dim, dim),
            chol_inv: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Upper-triangular factor `R` with `R' R = G`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn chol_inv(&self) -> &DMatrix<f64> {
        &self.chol_inv
    }

    pub fn is_identity(&self) -> bool {
        self.gram == DMatrix::identity(self.dim, self.dim)
    }

    /// `<a, b>` in this space's inner product.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (self.gram.clone() * b).dot(a)
    }

    /// `|z|` in this space's norm.
    pub fn norm(&self, z: &DVector<f64>) -> f64 {
        (&self.chol * z).norm()
    }

    /// Maps to orthonormalized coordinates, `z~ = R z`.
    pub fn to_orthonormal(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.chol * z
    }

    /// Maps back from orthonormalized coordinates.
    pub fn from_orthonormal(&self, z_tilde: &DVector<f64>) -> DVector<f64> {
        &self.chol_inv * z_tilde
    }
}

/// Relative skew-adjointness residual `|G A + A' G|_F / max(1, |G A|_F)`.
pub fn check_skew_adjoint(a: &DMatrix<f64>, g: &GramSpace) -> f64 {
    let ga = g.gram() * a;
    let residual = (&ga + ga.transpose()).norm();
    residual / ga.norm().max(1.0)
}

/// Induced operator norm of `op: (in, G_in) -> (out, G_out)`, i.e. the largest
/// generalized singular value.
pub fn induced_norm(op: &DMatrix<f64>, g_in: &GramSpace, g_out: &GramSpace) -> f64 {
    induced_norm_with_maximizer(op, g_in, g_out).0
}

/// Induced norm together with a maximizing input vector (original coordinates).
pub fn induced_norm_with_maximizer(
    op: &DMatrix<f64>,
    g_in: &GramSpace,
    g_out: &GramSpace,
) -> (f64, DVector<f64>) {
    assert_eq!(op.ncols(), g_in.dim(), "operator/input dimension mismatch");
    assert_eq!(op.nrows(), g_out.dim(), "operator/output dimension mismatch");
    let op_tilde = g_out.chol() * op * g_in.chol_inv();
    let (norm, v_tilde) = linalg::spectral_norm_with_maximizer(&op_tilde);
    (norm, g_in.from_orthonormal(&v_tilde))
}

/// Growth bound `c1 >= 0` with `<z, A_cl z>_H <= c1 |z|_H^2`: the positive part
/// of the largest eigenvalue of the symmetric part in orthonormalized
/// coordinates.
pub fn compute_c1(a_cl: &DMatrix<f64>, g: &GramSpace) -> f64 {
    let a_tilde = g.chol() * a_cl * g.chol_inv();
    let eigs = linalg::symmetric_part_eigenvalues(&a_tilde);
    eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0)
}

/// An exponential-stability certificate `|e^{t A_cl}|_H <= M e^{-alpha t}`.
///
/// `alpha` is the spectral abscissa shifted by a safety margin and `M` the
/// conditioning bound of the Lyapunov witness `P`, which solves
/// `(A~ + alpha I)' P + P (A~ + alpha I) = -I` in orthonormalized coordinates.
#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    alpha: f64,
    overshoot: f64,
    margin: f64,
    spectral_abscissa: f64,
    witness: Option<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CertificateJson {
    alpha: f64,
    #[serde(rename = "M")]
    m: f64,
    margin: f64,
    spectral_abscissa: f64,
}

impl StabilityCertificate {
    /// Decay rate `alpha > 0`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Overshoot constant `M >= 1`.
    pub fn overshoot(&self) -> f64 {
        self.overshoot
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn spectral_abscissa(&self) -> f64 {
        self.spectral_abscissa
    }

    /// Lyapunov witness matrix, absent for externally supplied certificates.
    pub fn witness(&self) -> Option<&DMatrix<f64>> {
        self.witness.as_ref()
    }

    /// Wraps externally supplied constants (e.g. from closed-form analysis)
    /// without a witness matrix. No validation beyond positivity.
    pub fn from_parts(alpha: f64, overshoot: f64, margin: f64, spectral_abscissa: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        if !(overshoot >= 1.0) {
            return Err(Error::InvalidParameter(format!("overshoot must be >= 1, got {overshoot}")));
        }
        Ok(Self { alpha, overshoot, margin, spectral_abscissa, witness: None })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&CertificateJson {
            alpha: self.alpha,
            m: self.overshoot,
            margin: self.margin,
            spectral_abscissa: self.spectral_abscissa,
        })
        .expect("certificate serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let j: CertificateJson = serde_json::from_str(s)?;
        Self::from_parts(j.alpha, j.m, j.margin, j.spectral_abscissa)
    }
}

/// Certifies exponential stability of `A_cl` in the norm of `g`.
///
/// Fails when the spectral abscissa is nonnegative. `margin` in `(0, 1)` sets
/// `alpha = -abscissa * (1 - margin)`.
pub fn certify_stability(
    a_cl: &DMatrix<f64>,
    g: &GramSpace,
    margin: f64,
) -> Result<StabilityCertificate> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::InvalidParameter(format!("margin must lie in (0, 1), got {margin}")));
    }
    let n = a_cl.nrows();
    let a_tilde = g.chol() * a_cl * g.chol_inv();
    let sigma = linalg::spectral_abscissa(&a_tilde);
    if sigma >= 0.0 {
        return Err(Error::NotExponentiallyStable { abscissa: sigma });
    }
    let alpha = -sigma * (1.0 - margin);
    let shifted = &a_tilde + DMatrix::identity(n, n) * alpha;
    let p = linalg::solve_lyapunov(&shifted, &DMatrix::identity(n, n))?;

    let residual = (shifted.transpose() * &p + &p * &shifted + DMatrix::<f64>::identity(n, n)).norm();
    let rel = residual / (n as f64).sqrt();
    if rel > TOL_CERTIFICATE_RESIDUAL {
        return Err(Error::IllConditionedLyapunov { separation: rel });
    }

    let eigs = p.symmetric_eigenvalues();
    let lam_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let lam_max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lam_min <= 0.0 {
        return Err(Error::IllConditionedLyapunov { separation: lam_min });
    }
    let overshoot = (lam_max / lam_min).sqrt();
    Ok(StabilityCertificate {
        alpha,
        overshoot,
        margin,
        spectral_abscissa: sigma,
        witness: Some(p),
    })
}

/// A validated Gram-weighted linear control system.
///
/// Construction enforces dimensional consistency and skew-adjointness of `A`
/// with respect to the state Gram; orthonormalized representations and the
/// key induced norms are cached up front.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    state: GramSpace,
    input: GramSpace,
    output: GramSpace,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    k: DMatrix<f64>,
    // Orthonormalized representations.
    a_tilde: DMatrix<f64>,
    bk_tilde: DMatrix<f64>,
    bkc_tilde: DMatrix<f64>,
    c_tilde: DMatrix<f64>,
    // Cached induced norms.
    bkc_norm: f64,
    bk_norm: f64,
    c_norm: f64,
}

impl ControlSystem {
    pub fn new(
        state: GramSpace,
        input: GramSpace,
        output: GramSpace,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        k: DMatrix<f64>,
    ) -> Result<Self> {
        Self::with_tolerance(state, input, output, a, b, c, k, TOL_SKEW)
    }

    /// Constructor with an explicit skew-adjointness gate.
    #[allow(clippy::too_many_arguments)]
    pub fn with_tolerance(
        state: GramSpace,
        input: GramSpace,
        output: GramSpace,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        k: DMatrix<f64>,
        tol_skew: f64,
    ) -> Result<Self> {
        let (n, m, p) = (state.dim(), input.dim(), output.dim());
        let expect = |name: &str, mat: &DMatrix<f64>, rows: usize, cols: usize| -> Result<()> {
            if mat.nrows() != rows || mat.ncols() != cols {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "{name} must be {rows}x{cols}, got {}x{}",
                        mat.nrows(),
                        mat.ncols()
                    ),
                });
            }
            Ok(())
        };
        expect("A", &a, n, n)?;
        expect("B", &b, n, m)?;
        expect("C", &c, p, n)?;
        expect("K", &k, m, p)?;

        let ga = state.gram() * &a;
        let residual = (&ga + ga.transpose()).norm();
        if residual > tol_skew * ga.norm() {
            return Err(Error::NotSkewAdjoint { residual: residual / ga.norm().max(1.0), tol: tol_skew });
        }

        let a_tilde = state.chol() * &a * state.chol_inv();
        let bk_tilde = state.chol() * &b * &k * output.chol_inv();
        let c_tilde = output.chol() * &c * state.chol_inv();
        let bkc_tilde = &bk_tilde * &c_tilde;
        let bkc_norm = linalg::spectral_norm_with_maximizer(&bkc_tilde).0;
        let bk_norm = linalg::spectral_norm_with_maximizer(&bk_tilde).0;
        let c_norm = linalg::spectral_norm_with_maximizer(&c_tilde).0;

        Ok(Self {
            state,
            input,
            output,
            a,
            b,
            c,
            k,
            a_tilde,
            bk_tilde,
            bkc_tilde,
            c_tilde,
            bkc_norm,
            bk_norm,
            c_norm,
        })
    }

    pub fn state_space(&self) -> &GramSpace {
        &self.state
    }

    pub fn input_space(&self) -> &GramSpace {
        &self.input
    }

    pub fn output_space(&self) -> &GramSpace {
        &self.output
    }

    pub fn dim(&self) -> usize {
        self.state.dim()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Closed-loop drift `A + B K C` in original coordinates.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a + &self.b * &self.k * &self.c
    }

    /// `A~` in orthonormalized coordinates (skew-symmetric).
    pub fn a_orthonormal(&self) -> &DMatrix<f64> {
        &self.a_tilde
    }

    /// `(BKC)~` in orthonormalized coordinates.
    pub fn bkc_orthonormal(&self) -> &DMatrix<f64> {
        &self.bkc_tilde
    }

    /// `(BK)~ : Y -> H` in orthonormalized coordinates.
    pub fn bk_orthonormal(&self) -> &DMatrix<f64> {
        &self.bk_tilde
    }

    /// `C~ : H -> Y` in orthonormalized coordinates.
    pub fn c_orthonormal(&self) -> &DMatrix<f64> {
        &self.c_tilde
    }

    /// Closed-loop drift in orthonormalized coordinates.
    pub fn closed_loop_orthonormal(&self) -> DMatrix<f64> {
        &self.a_tilde + &self.bkc_tilde
    }

    /// `|BKC| : H -> H`.
    pub fn bkc_norm(&self) -> f64 {
        self.bkc_norm
    }

    /// `|BK| : Y -> H`.
    pub fn bk_norm(&self) -> f64 {
        self.bk_norm
    }

    /// `|C| : H -> Y`.
    pub fn c_norm(&self) -> f64 {
        self.c_norm
    }

    /// Growth bound of the closed loop, `max(0, lambda_max(sym(A~_cl)))`.
    pub fn c1(&self) -> f64 {
        let a_cl_tilde = self.closed_loop_orthonormal();
        let eigs = linalg::symmetric_part_eigenvalues(&a_cl_tilde);
        eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0)
    }

    /// Hold-interval growth rate `kappa = |BKC| + gamma |BK|` of the norm
    /// envelope estimate.
    pub fn kappa(&self, gamma: f64) -> f64 {
        if self.bk_norm == 0.0 {
            self.bkc_norm
        } else {
            self.bkc_norm + gamma * self.bk_norm
        }
    }

    /// Certifies the closed loop with the given abscissa margin.
    pub fn certify(&self, margin: f64) -> Result<StabilityCertificate> {
        certify_stability(&self.closed_loop(), &self.state, margin)
    }

    /// Coordinate change making every Gram the identity. Returns the state
    /// transform `R` (with `z~ = R z`) and the transformed system.
    pub fn orthonormalize(&self) -> Result<(DMatrix<f64>, ControlSystem)> {
        let transform = self.state.chol().clone();
        let b_tilde = self.state.chol() * &self.b * self.input.chol_inv();
        let k_tilde = self.input.chol() * &self.k * self.output.chol_inv();
        let sys = ControlSystem::new(
            GramSpace::identity(self.state.dim()),
            GramSpace::identity(self.input.dim()),
            GramSpace::identity(self.output.dim()),
            self.a_tilde.clone(),
            b_tilde,
            self.c_tilde.clone(),
            k_tilde,
        )?;
        Ok((transform, sys))
    }
}

// ---------------------------------------------------------------------------
// JSON import/export
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SystemJson {
    n: usize,
    m: usize,
    p: usize,
    #[serde(rename = "gram_H", default, skip_serializing_if = "Option::is_none")]
    gram_h: Option<Vec<Vec<f64>>>,
    #[serde(rename = "gram_U", default, skip_serializing_if = "Option::is_none")]
    gram_u: Option<Vec<Vec<f64>>>,
    #[serde(rename = "gram_Y", default, skip_serializing_if = "Option::is_none")]
    gram_y: Option<Vec<Vec<f64>>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn matrix_from_rows(
    field: &str,
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch {
            context: format!("`{field}` must be {nrows}x{ncols}"),
        });
    }
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteEntry { field: field.to_string(), row: i, col: j });
            }
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ControlSystem {
    /// Serializes to the interchange schema
    /// `{"n","m","p","gram_H","gram_U","gram_Y","A","B","C","K"}`; identity
    /// Grams are omitted.
    pub fn to_json_string(&self) -> String {
        let gram = |g: &GramSpace| {
            if g.is_identity() {
                None
            } else {
                Some(matrix_to_rows(g.gram()))
            }
        };
        let doc = SystemJson {
            n: self.state.dim(),
            m: self.input.dim(),
            p: self.output.dim(),
            gram_h: gram(&self.state),
            gram_u: gram(&self.input),
            gram_y: gram(&self.output),
            a: matrix_to_rows(&self.a),
            b: matrix_to_rows(&self.b),
            c: matrix_to_rows(&self.c),
            k: matrix_to_rows(&self.k),
        };
        serde_json::to_string_pretty(&doc).expect("system serialization cannot fail")
    }

    /// Parses and validates a system from the interchange schema. Omitted
    /// Grams default to the identity.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: SystemJson = serde_json::from_str(s)?;
        let (n, m, p) = (doc.n, doc.m, doc.p);
        let gram = |label: &str, rows: &Option<Vec<Vec<f64>>>, dim: usize| -> Result<GramSpace> {
            match rows {
                None => Ok(GramSpace::identity(dim)),
                Some(rows) => {
                    GramSpace::with_label(label, matrix_from_rows(label, rows, dim, dim)?)
                }
            }
        };
        ControlSystem::new(
            gram("gram_H", &doc.gram_h, n)?,
            gram("gram_U", &doc.gram_u, m)?,
            gram("gram_Y", &doc.gram_y, p)?,
            matrix_from_rows("A", &doc.a, n, n)?,
            matrix_from_rows("B", &doc.b, n, m)?,
            matrix_from_rows("C", &doc.c, p, n)?,
            matrix_from_rows("K", &doc.k, m, p)?,
        )
    }
}
