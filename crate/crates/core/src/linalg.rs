//! Dense linear-algebra kernels: matrix exponential helpers, a real-Schur
//! Lyapunov solver, spectral abscissa, and generalized induced norms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Matrix exponential `e^A` (scaling-and-squaring Pade).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.exp()
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves the continuous-time Lyapunov equation `A' X + X A = -Q` for stable
/// `A` via real Schur reduction and block back-substitution.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!(q.nrows(), n, "Q must match A");
    assert_eq!(q.ncols(), n, "Q must match A");

    let schur = a.clone().schur();
    let (u, t) = schur.unpack();

    // Eigenvalues come in from the quasi-triangular diagonal; the equation is
    // solvable iff no two eigenvalues sum to zero.
    let eigs = a.complex_eigenvalues();
    let mut min_sep = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let s = (eigs[i] + eigs[j]).norm();
            if s < min_sep {
                min_sep = s;
            }
        }
    }
    let scale = a.norm().max(1.0);
    if min_sep <= 1e-13 * scale {
        return Err(Error::IllConditionedLyapunov { separation: min_sep });
    }

    let q_tilde = u.transpose() * q * &u;
    let y = solve_lyapunov_schur(&t, &q_tilde)?;
    let x = &u * y * u.transpose();
    // Symmetrize: Q symmetric implies X symmetric in exact arithmetic.
    Ok((&x + x.transpose()) * 0.5)
}

/// Back-substitution for `T' Y + Y T = -Q` with `T` quasi-upper-triangular.
fn solve_lyapunov_schur(t: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    // Locate the 1x1 / 2x2 diagonal blocks of the real Schur form.
    let mut starts = Vec::new();
    let mut i = 0;
    while i < n {
        starts.push(i);
        if i + 1 < n && t[(i + 1, i)].abs() > 0.0 {
            i += 2;
        } else {
            i += 1;
        }
    }
    let nb = starts.len();
    let block = |k: usize| -> (usize, usize) {
        let s = starts[k];
        let e = if k + 1 < nb { starts[k + 1] } else { n };
        (s, e)
    };

    let mut y = DMatrix::<f64>::zeros(n, n);
    for bi in 0..nb {
        let (is, ie) = block(bi);
        for bj in 0..nb {
            let (js, je) = block(bj);
            // RHS: -Q_ij - sum_{k<i} T_ki' Y_kj - sum_{k<j} Y_ik T_kj
            let mut rhs = -q.view((is, js), (ie - is, je - js)).clone_owned();
            if is > 0 {
                rhs -= t.view((0, is), (is, ie - is)).transpose()
                    * y.view((0, js), (is, je - js));
            }
            if js > 0 {
                rhs -= y.view((is, 0), (ie - is, js)) * t.view((0, js), (js, je - js));
            }
            let tii = t.view((is, is), (ie - is, ie - is)).clone_owned();
            let tjj = t.view((js, js), (je - js, je - js)).clone_owned();
            let w = solve_small_sylvester(&tii, &tjj, &rhs)?;
            y.view_mut((is, js), (ie - is, je - js)).copy_from(&w);
        }
    }
    Ok(y)
}

/// Solves `A' W + W B = R` for blocks of size at most 2 via Kronecker lifting.
fn solve_small_sylvester(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, q) = (a.nrows(), b.nrows());
    let m = p * q;
    let mut k = DMatrix::<f64>::zeros(m, m);
    // vec(W) ordering: column-major, W_{i,j} -> index j*p + i.
    for i in 0..p {
        for j in 0..q {
            let row = j * p + i;
            for l in 0..p {
                k[(row, j * p + l)] += a[(l, i)];
            }
            for l in 0..q {
                k[(row, l * p + i)] += b[(l, j)];
            }
        }
    }
    let rhs = DVector::from_fn(m, |idx, _| r[(idx % p, idx / p)]);
    let lu = k.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or(Error::IllConditionedLyapunov { separation: 0.0 })?;
    Ok(DMatrix::from_fn(p, q, |i, j| sol[j * p + i]))
}

/// Eigenvalues of the symmetric part `(A + A') / 2`.
pub fn symmetric_part_eigenvalues(a: &DMatrix<f64>) -> DVector<f64> {
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
}

/// Spectral norm (largest singular value) together with a maximizing unit vector.
pub fn spectral_norm_with_maximizer(a: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let svd = a.clone().svd(false, true);
    let mut best = 0usize;
    let mut best_sv = 0.0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > best_sv {
            best_sv = s;
            best = i;
        }
    }
    let v_t = svd.v_t.expect("SVD with V requested");
    let v = v_t.row(best).transpose();
    (best_sv, v)
}
