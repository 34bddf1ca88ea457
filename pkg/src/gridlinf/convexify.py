"""First-order overestimators used by the successive convex approximation.

Each bilinear product in the synthesis inequalities splits into a convex
quadratic plus a concave quadratic; the concave part is replaced by its
first-order Taylor expansion, which is exact at the expansion point and a
global overestimator elsewhere. Every function here accepts either numeric
values (returns ndarray / float) or program variables (returns an affine
MatExpr), so the solver constraints and the certificate checks share one
definition.

Two of the published closed forms contain transcription slips (an extra
mu0*Zt'Zt term and a missing mu0*Zt term in the input-budget pair); the
implementations below are the exact Taylor expansions, which restore both
the expansion-point tightness and the overestimation property.
"""

from __future__ import annotations

import numpy as np

from .lmi import MatExpr, VarHandle


def _is_var(x):
    return isinstance(x, (VarHandle, MatExpr))


def _mat(X):
    if isinstance(X, VarHandle):
        return MatExpr.of(X)
    if isinstance(X, MatExpr):
        return X
    return np.asarray(X, float)


def _scaled(a, C):
    """a * C for scalar a (number or scalar variable) and constant matrix C."""
    if isinstance(a, VarHandle):
        return MatExpr.scaled(a, C)
    return float(a) * np.asarray(C, float)


def _lr(X, L=None, R=None):
    """L @ X @ R with constant factors, X numeric or expression."""
    X = _mat(X)
    if isinstance(X, MatExpr):
        if L is not None:
            X = X.lmul(L)
        if R is not None:
            X = X.rmul(R)
        return X
    if L is not None:
        X = L @ X
    if R is not None:
        X = X @ R
    return X


def taylor_neg_sq_diff(a, M, a_t: float, M_t: np.ndarray):
    """Taylor expansion of -(aI - M)^2 at (a_t, M_t), M symmetric."""
    n = M_t.shape[0]
    W = a_t * np.eye(n) - M_t
    const = -W @ W + 2.0 * a_t * W - M_t @ W - W @ M_t
    return const + _scaled(a, -2.0 * W) + _lr(M, R=W) + _lr(M, L=W)


def taylor_neg_sq_sum(a, M, a_t: float, M_t: np.ndarray):
    """Taylor expansion of -(aI + M)^2 at (a_t, M_t), M symmetric."""
    n = M_t.shape[0]
    W = a_t * np.eye(n) + M_t
    const = -W @ W + 2.0 * a_t * W + M_t @ W + W @ M_t
    return const + _scaled(a, -2.0 * W) - _lr(M, R=W) - _lr(M, L=W)


def taylor_neg_scalar_sum_sq(a, b, a_t: float, b_t: float, dim: int):
    """Taylor expansion of -(a + b)^2 I at (a_t, b_t)."""
    s = a_t + b_t
    I = np.eye(dim)
    return s * s * I + _scaled(a, -2.0 * s * I) + _scaled(b, -2.0 * s * I)


def taylor_neg_scalar_diff_sq(a, b, a_t: float, b_t: float):
    """Taylor expansion of -(a - b)^2 as a 1x1 block at (a_t, b_t)."""
    d = a_t - b_t
    one = np.eye(1)
    return d * d * one + _scaled(a, -2.0 * d * one) + _scaled(b, 2.0 * d * one)


def taylor_neg_scalar_sq(a, a_t: float, dim: int):
    """Taylor expansion of -a^2 I at a_t."""
    I = np.eye(dim)
    return a_t * a_t * I + _scaled(a, -2.0 * a_t * I)


def taylor_neg_gram(Z, Z_t: np.ndarray):
    """Taylor expansion of -Z'Z at Z_t (rectangular Z)."""
    const = Z_t.T @ Z_t
    Zl = _mat(Z)
    if isinstance(Zl, MatExpr):
        return const - Zl.lmul(Z_t.T) - Zl.T.rmul(Z_t)
    return const - Z_t.T @ Zl - Zl.T @ Z_t


def linearize_scalar_times_mat(a, Z, a_t: float, Z_t: np.ndarray):
    """First-order expansion of the bilinear product a*Z at (a_t, Z_t)."""
    return _lr(Z, L=a_t * np.eye(Z_t.shape[0])) + _scaled(a, Z_t) - a_t * Z_t


def taylor_neg_sq_p_minus_bk(P, K, B_u: np.ndarray, P_t: np.ndarray, K_t: np.ndarray):
    """Taylor expansion of -(P - B_u K)'(P - B_u K) at (P_t, K_t)."""
    X_t = P_t - B_u @ K_t
    const = -X_t.T @ X_t + P_t @ X_t + X_t.T @ P_t \
        - K_t.T @ B_u.T @ X_t - X_t.T @ B_u @ K_t
    Pe = _mat(P)
    Ke = _mat(K)
    if isinstance(Pe, MatExpr) or isinstance(Ke, MatExpr):
        out = MatExpr.constant(const) if not isinstance(const, MatExpr) else const
        out = out - _lr(P, R=X_t) - _lr(P, L=X_t.T)
        KB = _lr(K, L=X_t.T @ B_u)    # X_t' B_u K
        out = out + KB + KB.T
        return out
    return const - Pe @ X_t - X_t.T @ Pe + Ke.T @ B_u.T @ X_t + X_t.T @ B_u @ Ke


def centralized_forms(alpha, mu0, mu1, S, Z, point, n_w: int) -> dict:
    """All seven linear matrix-valued functions of the centralized SCA,
    evaluated at (alpha, mu0, mu1, S, Z) around ``point``.

    Keys name the convexified product; ``n_w`` sizes the disturbance block.
    """
    n_x = point.S.shape[0]
    n_u = point.Z.shape[0]
    return {
        "lyap_alpha_S": taylor_neg_sq_diff(alpha, S, point.alpha, point.S),
        "lyap_alpha_mu0": taylor_neg_scalar_sum_sq(alpha, mu0, point.alpha, point.mu0, n_w),
        "perf_mu1_S": taylor_neg_sq_sum(mu1, S, point.mu1, point.S),
        "input_gram": taylor_neg_scalar_sq(mu0, point.mu0, n_x) + taylor_neg_gram(Z, point.Z),
        "input_cross": linearize_scalar_times_mat(mu0, Z, point.mu0, point.Z),
        "input_sq_mu0": taylor_neg_scalar_sq(mu0, point.mu0, n_u),
        "objective_mu0_mu1": taylor_neg_scalar_diff_sq(mu0, mu1, point.mu0, point.mu1),
    }
