"""Maximum-likelihood fitting of the three-level Gaussian mixed model.

    y = X beta + Z_la u_la + Z_school u_school + e

with ``u_la ~ N(0, omega_la)`` per LA, ``u_school ~ N(0, omega_school)`` per
school and ``e ~ N(0, sigma2 I)``.  The marginal covariance V is
block-diagonal over LAs.  Within an LA block all random effects are stacked
as ``b = (u_la, u_school_1, ..., u_school_J)`` with covariance ``Lambda
Lambda'``, and every quantity is obtained from the per-block cross-products
X'X, Z'Z, Z'X, Z'y, y'y through the Woodbury identity

    V^-1 = (I - W C^-1 W') / sigma2,   W = Z Lambda,   C = sigma2 I + W'W,

so no n x n matrix is ever formed and the work per likelihood evaluation
does not grow with the number of pupils.

Estimation profiles beta and sigma2 out of the deviance and runs L-BFGS-B on
the lower-triangular elements of the relative covariance factors (diagonals
bounded below by zero, which keeps both covariance matrices PSD), followed by
Newton refinement with a finite-difference Hessian of the analytic gradient.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, optimize

from .errors import CollinearityError, FitError, LikelihoodAscentError
from .model import DesignMatrices, ModelSpec, TERM_LABELS

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FitOptions:
    method: str = "ml"
    tol_ll: float = 1e-8
    tol_param: float = 1e-6
    max_iter: int = 200
    variance_constraint: str = "clip_psd"

    def __post_init__(self):
        if self.method != "ml":
            raise ValueError("only method='ml' is implemented")
        if self.variance_constraint != "clip_psd":
            raise ValueError("only variance_constraint='clip_psd' is implemented")
        if self.tol_ll <= 0 or self.tol_param <= 0 or self.max_iter < 1:
            raise ValueError("tolerances must be positive and max_iter >= 1")


@dataclass(frozen=True)
class ModelParams:
    beta: np.ndarray
    sigma2: float
    omega_la: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    omega_school: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        for name in ("omega_la", "omega_school"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if m.size == 0:
                m = np.zeros((0, 0))
            object.__setattr__(self, name, m)

    def vector(self) -> np.ndarray:
        """(beta, sigma2, vech omega_la, vech omega_school)."""
        return np.concatenate([self.beta, [self.sigma2], _vech(self.omega_la),
                               _vech(self.omega_school)])

    @classmethod
    def from_vector(cls, v, p, q_la, q_school):
        v = np.asarray(v, dtype=float)
        k3 = q_la * (q_la + 1) // 2
        return cls(v[:p], float(v[p]), _unvech(v[p + 1:p + 1 + k3], q_la),
                   _unvech(v[p + 1 + k3:], q_school))


def _vech(m):
    return m[np.tril_indices(m.shape[0])] if m.size else np.zeros(0)


def _unvech(v, q):
    m = np.zeros((q, q))
    if q:
        m[np.tril_indices(q)] = v
        m = m + np.tril(m, -1).T
    return m


def _psd_factor(m, name):
    """F with F F' = m; raises if m is not PSD."""
    if m.size == 0:
        return m
    if not np.allclose(m, m.T, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ValueError(f"{name} is not symmetric")
    lam, vec = np.linalg.eigh(m)
    if lam.min() < -1e-10 * max(1.0, lam.max()):
        raise ValueError(f"{name} is not positive semi-definite")
    return vec * np.sqrt(np.clip(lam, 0.0, None))


class _Block:
    """Cross-products of one LA block; random effects stacked (LA, schools)."""

    __slots__ = ("n", "J", "XtX", "Xty", "yty", "ZtZ", "ZtX", "Zty")


class BlockSystem:
    """Per-LA sufficient statistics of a design for a given random structure."""

    def __init__(self, design: DesignMatrices):
        self.design = design
        self.n, self.p = design.n, design.p
        z3, z2 = list(design.z_la_cols), list(design.z_school_cols)
        self.q3, self.q2 = len(z3), len(z2)
        p = self.p
        Xy = np.column_stack([design.X, design.y])
        sbounds = np.searchsorted(design.school_index, np.arange(design.n_schools + 1))
        S = np.empty((design.n_schools, p + 1, p + 1))
        for j in range(design.n_schools):
            M = Xy[sbounds[j]:sbounds[j + 1]]
            S[j] = M.T @ M
        lbounds = np.searchsorted(design.school_la, np.arange(design.n_las + 1))
        self.blocks = []
        for k in range(design.n_las):
            a, b = lbounds[k], lbounds[k + 1]
            Sk = S[a:b]
            tot = Sk.sum(axis=0)
            J = b - a
            blk = _Block()
            blk.n = int(sbounds[b] - sbounds[a])
            blk.J = J
            blk.XtX = tot[:p, :p]
            blk.Xty = tot[:p, p]
            blk.yty = float(tot[p, p])
            q3, q2 = self.q3, self.q2
            q = q3 + J * q2
            ZtZ = np.zeros((q, q))
            ZtX = np.empty((q, p))
            Zty = np.empty(q)
            if q3:
                ZtZ[:q3, :q3] = tot[np.ix_(z3, z3)]
                ZtX[:q3] = tot[z3, :p]
                Zty[:q3] = tot[z3, p]
            if q2:
                d = Sk[:, z2][:, :, z2]  # (J, q2, q2)
                for j in range(J):
                    r = q3 + j * q2
                    ZtZ[r:r + q2, r:r + q2] = d[j]
                if q3:
                    cross = Sk[:, z3][:, :, z2]  # (J, q3, q2)
                    ZtZ[:q3, q3:] = cross.transpose(1, 0, 2).reshape(q3, J * q2)
                    ZtZ[q3:, :q3] = ZtZ[:q3, q3:].T
                ZtX[q3:] = Sk[:, z2, :p].reshape(J * q2, p)
                Zty[q3:] = Sk[:, z2, p].reshape(J * q2)
            blk.ZtZ, blk.ZtX, blk.Zty = ZtZ, ZtX, Zty
            self.blocks.append(blk)
        self.XtX = sum(b.XtX for b in self.blocks)
        self.Xty = sum(b.Xty for b in self.blocks)
        self.yty = sum(b.yty for b in self.blocks)

    # --- Lambda products -------------------------------------------------
    def _right(self, M, F3, F2, J):
        """M @ Lambda for Lambda = blockdiag(F3, F2, ..., F2)."""
        q3, q2 = self.q3, self.q2
        out = np.empty_like(M)
        if q3:
            out[..., :q3] = M[..., :q3] @ F3
        if q2:
            lead = M.shape[:-1]
            out[..., q3:] = (M[..., q3:].reshape(*lead, J, q2) @ F2).reshape(*lead, J * q2)
        return out

    def _left(self, M, F3, F2, J):
        """Lambda' @ M."""
        if M.ndim == 1:
            return self._right(M, F3, F2, J)
        return self._right(M.T, F3, F2, J).T

    def block_pieces(self, blk, s2, F3, F2):
        """Woodbury factorisation pieces of one block (unscaled by 1/s2)."""
        J = blk.J
        H = self._right(blk.ZtZ, F3, F2, J)  # Z'Z Lambda
        WtW = self._right(H.T.copy(), F3, F2, J)  # Lambda' Z'Z Lambda
        WtW = 0.5 * (WtW + WtW.T)
        C = WtW + s2 * np.eye(WtW.shape[0])
        cf = linalg.cho_factor(C, lower=True, check_finite=False)
        logdet = 2.0 * np.log(np.diag(cf[0])).sum()
        WtX = self._left(blk.ZtX, F3, F2, J)
        Wty = self._left(blk.Zty, F3, F2, J)
        return H, WtW, cf, logdet, WtX, Wty


@dataclass
class _Eval:
    m2ll: float
    beta: np.ndarray
    sigma2: float
    XVX: np.ndarray
    grad: np.ndarray | None = None


def _theta_layout(q3, q2):
    return np.tril_indices(q3), np.tril_indices(q2)


def _theta_to_factors(theta, q3, q2):
    (r3, c3), (r2, c2) = _theta_layout(q3, q2)
    k3 = len(r3)
    F3 = np.zeros((q3, q3))
    F3[r3, c3] = theta[:k3]
    F2 = np.zeros((q2, q2))
    F2[r2, c2] = theta[k3:]
    return F3, F2


def _profiled(system: BlockSystem, theta, want_grad=True) -> _Eval:
    """Profiled ML deviance over relative factors (Omega = sigma2 F F')."""
    q3, q2, p, n = system.q3, system.q2, system.p, system.n
    F3, F2 = _theta_to_factors(theta, q3, q2)
    XVX = np.zeros((p, p))
    XVy = np.zeros(p)
    yVy = 0.0
    logdet = 0.0
    cache = []
    for blk in system.blocks:
        if blk.ZtZ.shape[0] == 0:
            XVX += blk.XtX
            XVy += blk.Xty
            yVy += blk.yty
            cache.append(None)
            continue
        H, WtW, cf, ld, WtX, Wty = system.block_pieces(blk, 1.0, F3, F2)
        CiWtX = linalg.cho_solve(cf, WtX, check_finite=False)
        CiWty = linalg.cho_solve(cf, Wty, check_finite=False)
        XVX += blk.XtX - WtX.T @ CiWtX
        XVy += blk.Xty - WtX.T @ CiWty
        yVy += blk.yty - Wty @ CiWty
        logdet += ld
        cache.append((H, cf, CiWtX, CiWty))
    XVX = 0.5 * (XVX + XVX.T)
    try:
        cfx = linalg.cho_factor(XVX, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise CollinearityError("collinear fixed effects") from exc
    beta = linalg.cho_solve(cfx, XVy, check_finite=False)
    rVr = yVy - beta @ XVy
    sigma2 = rVr / n
    if not sigma2 > 0:
        raise FitError("profiled residual variance is not positive")
    m2ll = n * (LOG2PI + math.log(sigma2) + 1.0) + logdet
    out = _Eval(m2ll, beta, sigma2, XVX / sigma2)
    if not want_grad or len(theta) == 0:
        out.grad = np.zeros(len(theta))
        return out
    G3 = np.zeros((q3, q3))
    G2 = np.zeros((q2, q2))
    for blk, c in zip(system.blocks, cache):
        H, cf, CiWtX, CiWty = c
        J = blk.J
        Ztr = blk.Zty - blk.ZtX @ beta
        w = Ztr - H @ (CiWty - CiWtX @ beta)
        K = linalg.cho_solve(cf, H.T, check_finite=False)
        if q3:
            A33 = blk.ZtZ[:q3, :q3] - H[:q3] @ K[:, :q3]
            G3 += A33 - np.outer(w[:q3], w[:q3]) / sigma2
        if q2:
            Hs = H[q3:].reshape(J, q2, -1)
            Ks = K[:, q3:].reshape(-1, J, q2)
            HK = np.einsum("jaq,qjb->ab", Hs, Ks)
            D = sum(blk.ZtZ[q3 + j * q2:q3 + (j + 1) * q2, q3 + j * q2:q3 + (j + 1) * q2]
                    for j in range(J))
            ws = w[q3:].reshape(J, q2)
            G2 += D - HK - ws.T @ ws / sigma2
    (r3, c3), (r2, c2) = _theta_layout(q3, q2)
    g3 = (2.0 * G3 @ F3)[r3, c3] if q3 else np.zeros(0)
    g2 = (2.0 * G2 @ F2)[r2, c2] if q2 else np.zeros(0)
    out.grad = np.concatenate([g3, g2])
    return out


@dataclass
class AbsolutePieces:
    """Likelihood quantities at absolute parameters, per block where needed."""

    m2ll: float
    grad: np.ndarray
    XVX: np.ndarray
    info: np.ndarray | None
    u_la: list
    u_school: list
    A_la: list
    A_school: list
    ZVX_la: list
    ZVX_school: list


def absolute_pieces(system: BlockSystem, params: ModelParams, info=False, eb=False):
    """-2LL, its analytic gradient in (beta, sigma2, vech omegas) and, on
    request, the expected information of the variance components and the
    per-unit quantities needed for empirical-Bayes residuals."""
    q3, q2, p, n = system.q3, system.q2, system.p, system.n
    beta, s2 = params.beta, float(params.sigma2)
    if beta.shape != (p,):
        raise ValueError("beta has the wrong length")
    if params.omega_la.shape != (q3, q3) or params.omega_school.shape != (q2, q2):
        raise ValueError("covariance matrices have the wrong shape")
    if not s2 > 0:
        raise ValueError("sigma2 must be positive")
    O3, O2 = params.omega_la, params.omega_school
    F3 = _psd_factor(O3, "omega_la")
    F2 = _psd_factor(O2, "omega_school")
    m2ll = n * LOG2PI
    g_beta = np.zeros(p)
    g_s2 = 0.0
    G3 = np.zeros((q3, q3))
    G2 = np.zeros((q2, q2))
    XVX = np.zeros((p, p))
    k3, k2 = q3 * q3, q2 * q2
    I_full = np.zeros((1 + k3 + k2, 1 + k3 + k2)) if info else None
    res = {k: [] for k in ("u_la", "u_school", "A_la", "A_school", "ZVX_la", "ZVX_school")}
    for blk in system.blocks:
        J = blk.J
        Xtr = blk.Xty - blk.XtX @ beta
        rtr = blk.yty - 2.0 * beta @ blk.Xty + beta @ blk.XtX @ beta
        q = blk.ZtZ.shape[0]
        if q == 0:
            m2ll += blk.n * math.log(s2) + rtr / s2
            g_beta += -2.0 * Xtr / s2
            g_s2 += blk.n / s2 - rtr / s2 ** 2
            XVX += blk.XtX / s2
            if info:
                I_full[0, 0] += 0.5 * blk.n / s2 ** 2
            continue
        H, WtW, cf, ld, WtX, Wty = system.block_pieces(blk, s2, F3, F2)
        Ztr = blk.Zty - blk.ZtX @ beta
        Wtr = Wty - WtX @ beta
        CiWtr = linalg.cho_solve(cf, Wtr, check_finite=False)
        CiWtX = linalg.cho_solve(cf, WtX, check_finite=False)
        m2ll += (blk.n - q) * math.log(s2) + ld + (rtr - Wtr @ CiWtr) / s2
        g_beta += -2.0 * (Xtr - WtX.T @ CiWtr) / s2
        M = linalg.cho_solve(cf, WtW, check_finite=False)
        trVi = (blk.n - np.trace(M)) / s2
        rV2r = (rtr - 2.0 * Wtr @ CiWtr + CiWtr @ WtW @ CiWtr) / s2 ** 2
        g_s2 += trVi - rV2r
        XVX += (blk.XtX - WtX.T @ CiWtX) / s2
        K = linalg.cho_solve(cf, H.T, check_finite=False)
        A = (blk.ZtZ - H @ K) / s2
        A = 0.5 * (A + A.T)
        w = (Ztr - H @ CiWtr) / s2
        A33 = A[:q3, :q3]
        As = A[q3:, q3:].reshape(J, q2, J, q2)
        Ajj = np.einsum("jajb->jab", As) if q2 else np.zeros((J, 0, 0))
        ws = w[q3:].reshape(J, q2)
        if q3:
            G3 += A33 - np.outer(w[:q3], w[:q3])
        if q2:
            G2 += Ajj.sum(axis=0) - ws.T @ ws
        if info:
            ZV2Z = (blk.ZtZ - 2.0 * H @ K + K.T @ WtW @ K) / s2 ** 2
            trV2 = (blk.n - 2.0 * np.trace(M) + np.trace(M @ M)) / s2 ** 2
            I_full[0, 0] += 0.5 * trV2
            if q3:
                v = 0.5 * ZV2Z[:q3, :q3].T.ravel()
                I_full[0, 1:1 + k3] += v
                I_full[1:1 + k3, 0] += v
                T33 = np.einsum("jk,li->ijkl", A33, A33)
                I_full[1:1 + k3, 1:1 + k3] += 0.5 * T33.reshape(k3, k3)
            if q2:
                Z2 = ZV2Z[q3:, q3:].reshape(J, q2, J, q2)
                v = 0.5 * np.einsum("jajb->ab", Z2).T.ravel()
                I_full[0, 1 + k3:] += v
                I_full[1 + k3:, 0] += v
                T22 = np.einsum("sjtk,tlsi->ijkl", As, As)
                I_full[1 + k3:, 1 + k3:] += 0.5 * T22.reshape(k2, k2)
            if q3 and q2:
                A0t = A[:q3, q3:].reshape(q3, J, q2)
                At0 = A[q3:, :q3].reshape(J, q2, q3)
                T32 = 0.5 * np.einsum("jtk,tli->ijkl", A0t, At0).reshape(k3, k2)
                I_full[1:1 + k3, 1 + k3:] += T32
                I_full[1 + k3:, 1:1 + k3] += T32.T
        if eb:
            ZVX = (blk.ZtX - H @ CiWtX) / s2
            res["u_la"].append(O3 @ w[:q3])
            res["u_school"].append(ws @ O2.T)
            res["A_la"].append(A33)
            res["A_school"].append(Ajj)
            res["ZVX_la"].append(ZVX[:q3])
            res["ZVX_school"].append(ZVX[q3:].reshape(J, q2, p))
    D3, D2 = _duplication(q3), _duplication(q2)
    grad = np.concatenate([g_beta, [g_s2], D3.T @ G3.ravel(), D2.T @ G2.ravel()])
    info_v = None
    if info:
        D = linalg.block_diag(np.ones((1, 1)), D3, D2)
        info_v = D.T @ I_full @ D
    return AbsolutePieces(m2ll, grad, 0.5 * (XVX + XVX.T), info_v, **res)


def _duplication(q):
    """Maps vech (tril_indices order) to row-major vec of a symmetric matrix."""
    r, c = np.tril_indices(q)
    D = np.zeros((q * q, len(r)))
    for m, (i, j) in enumerate(zip(r, c)):
        D[i * q + j, m] = 1.0
        D[j * q + i, m] = 1.0
    return D


def loglik(design: DesignMatrices, spec: ModelSpec | None, params: ModelParams,
           system: BlockSystem | None = None) -> float:
    """Exact -2 log-likelihood including the n log(2 pi) constant."""
    _check_spec(design, spec)
    system = system or BlockSystem(design)
    return absolute_pieces(system, params).m2ll


def analytic_gradient(design, spec, params, system=None) -> np.ndarray:
    """Gradient of -2LL in (beta, sigma2, vech omega_la, vech omega_school)."""
    _check_spec(design, spec)
    system = system or BlockSystem(design)
    return absolute_pieces(system, params).grad


def score_check(design: DesignMatrices, spec: ModelSpec | None, params: ModelParams,
                rel_step: float = 1e-5) -> float:
    """Max relative discrepancy between analytic and central-difference gradients.

    The error for each component is ``|a - f| / max(|a|, |f|, 1)``.
    """
    _check_spec(design, spec)
    system = BlockSystem(design)
    p, q3, q2 = design.p, system.q3, system.q2
    x0 = params.vector()
    a = absolute_pieces(system, params).grad
    fd = np.empty_like(x0)
    for i in range(x0.size):
        h = rel_step * max(1.0, abs(x0[i]))
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        fp = absolute_pieces(system, ModelParams.from_vector(xp, p, q3, q2)).m2ll
        fm = absolute_pieces(system, ModelParams.from_vector(xm, p, q3, q2)).m2ll
        fd[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1.0)))


def _check_spec(design, spec):
    if spec is None:
        return
    for lvl, cols in (("la", design.z_la_cols), ("school", design.z_school_cols)):
        names = tuple(design.term_names[c] for c in cols)
        if names != tuple(spec.random_terms(lvl)):
            raise ValueError(f"design random block for {lvl!r} does not match the model specification")
    if tuple(design.term_names) != tuple(spec.fixed_terms):
        raise ValueError("design fixed terms do not match the spec")


@dataclass
class FitResult:
    beta: np.ndarray
    se_beta: np.ndarray
    omega_la: np.ndarray
    omega_school: np.ndarray
    sigma2: float
    se_omega_la: np.ndarray
    se_omega_school: np.ndarray
    se_sigma2: float
    minus2ll: float
    n_pupils: int
    n_schools: int
    n_las: int
    iterations: int
    converged: bool
    boundary_flags: list
    term_names: tuple
    la_terms: tuple
    school_terms: tuple
    cov_beta: np.ndarray
    cov_components: np.ndarray
    history: list = field(default_factory=list)

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.beta, self.sigma2, self.omega_la, self.omega_school)

    def coefficients(self) -> pd.DataFrame:
        return pd.DataFrame({
            "term": list(self.term_names),
            "label": [TERM_LABELS.get(t, t) for t in self.term_names],
            "estimate": self.beta,
            "se": self.se_beta,
        })

    def random_table(self) -> pd.DataFrame:
        rows = []
        for level, terms, om, se in (("la", self.la_terms, self.omega_la, self.se_omega_la),
                                     ("school", self.school_terms, self.omega_school,
                                      self.se_omega_school)):
            for i, j in zip(*np.tril_indices(len(terms))):
                rows.append((level, terms[i], terms[j], om[i, j], se[i, j]))
        rows.append(("pupil", "intercept", "intercept", self.sigma2, self.se_sigma2))
        return pd.DataFrame(rows, columns=["level", "row", "col", "estimate", "se"])

    def to_dict(self) -> dict:
        def f(x):
            return None if x is None or not np.isfinite(x) else float(x)
        return {
            "fixed": [{"term": r.term, "label": r.label, "estimate": f(r.estimate), "se": f(r.se)}
                      for r in self.coefficients().itertuples()],
            "random": [{"level": r.level, "row": r.row, "col": r.col,
                        "estimate": f(r.estimate), "se": f(r.se)}
                       for r in self.random_table().itertuples()],
            "minus2ll": float(self.minus2ll),
            "n_pupils": self.n_pupils,
            "n_schools": self.n_schools,
            "n_las": self.n_las,
            "iterations": self.iterations,
            "converged": bool(self.converged),
            "boundary_flags": list(self.boundary_flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        """Rebuild point estimates (and SEs) from :meth:`to_dict` output."""
        terms = tuple(r["term"] for r in d["fixed"])
        nan = float("nan")
        beta = np.array([r["estimate"] for r in d["fixed"]], dtype=float)
        se_beta = np.array([nan if r["se"] is None else r["se"] for r in d["fixed"]])
        mats = {}
        for level in ("la", "school"):
            rows = [r for r in d["random"] if r["level"] == level]
            names = []
            for r in rows:
                for t in (r["col"], r["row"]):
                    if t not in names:
                        names.append(t)
            q = len(names)
            om, se = np.zeros((q, q)), np.full((q, q), nan)
            for r in rows:
                i, j = names.index(r["row"]), names.index(r["col"])
                om[i, j] = om[j, i] = r["estimate"]
                se[i, j] = se[j, i] = nan if r["se"] is None else r["se"]
            mats[level] = (tuple(names), om, se)
        pupil = next(r for r in d["random"] if r["level"] == "pupil")
        return cls(
            beta=beta, se_beta=se_beta,
            omega_la=mats["la"][1], omega_school=mats["school"][1],
            sigma2=float(pupil["estimate"]),
            se_omega_la=mats["la"][2], se_omega_school=mats["school"][2],
            se_sigma2=nan if pupil["se"] is None else pupil["se"],
            minus2ll=d["minus2ll"], n_pupils=d["n_pupils"], n_schools=d["n_schools"],
            n_las=d["n_las"], iterations=d["iterations"], converged=d["converged"],
            boundary_flags=list(d["boundary_flags"]), term_names=terms,
            la_terms=mats["la"][0], school_terms=mats["school"][0],
            cov_beta=np.diag(se_beta ** 2), cov_components=np.zeros((0, 0)),
        )


def fit(design: DesignMatrices, spec: ModelSpec | None = None,
        opts: FitOptions | None = None) -> FitResult:
    """ML fit. Returns the best iterate with ``converged=False`` on failure."""
    opts = opts or FitOptions()
    spec = spec or design.spec
    _check_spec(design, spec)
    n, p = design.n, design.p
    if n <= p:
        raise FitError("need more pupils than fixed effects")
    if np.linalg.matrix_rank(design.X) < p:
        raise CollinearityError("collinear fixed effects")
    system = BlockSystem(design)
    q3, q2 = system.q3, system.q2
    (r3, c3), (r2, c2) = _theta_layout(q3, q2)
    diag_mask = np.concatenate([r3 == c3, r2 == c2]).astype(bool)
    theta0 = np.where(diag_mask, math.sqrt(0.05), 0.0)
    bounds = [(0.0, None) if d else (None, None) for d in diag_mask]
    history: list[float] = []
    seen: dict[bytes, float] = {}

    def fun(theta):
        ev = _profiled(system, theta)
        seen[theta.tobytes()] = ev.m2ll
        return ev.m2ll, ev.grad

    def record(theta):
        f = seen.get(np.asarray(theta).tobytes())
        if f is None:
            f = _profiled(system, np.asarray(theta), want_grad=False).m2ll
        _push(history, f)

    theta = theta0
    iterations = 0
    converged = True
    if theta0.size:
        record(theta0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(
                fun, theta0, jac=True, method="L-BFGS-B", bounds=bounds, callback=record,
                options={"maxiter": opts.max_iter, "ftol": 1e-15, "gtol": 1e-10,
                         "maxcor": 20},
            )
        theta = np.where(diag_mask, np.maximum(res.x, 0.0), res.x)
        iterations = int(res.nit)
        record(theta)
        theta, extra, converged = _newton_polish(system, theta, diag_mask, opts, history)
        iterations += extra
    ev = _profiled(system, theta, want_grad=False)
    F3, F2 = _theta_to_factors(theta, q3, q2)
    O3 = ev.sigma2 * F3 @ F3.T
    O2 = ev.sigma2 * F2 @ F2.T
    O3, O2 = 0.5 * (O3 + O3.T), 0.5 * (O2 + O2.T)
    params = ModelParams(ev.beta, ev.sigma2, O3, O2)
    pieces = absolute_pieces(system, params, info=True)
    try:
        cov_beta = np.linalg.inv(pieces.XVX)
    except np.linalg.LinAlgError as exc:
        raise CollinearityError("collinear fixed effects") from exc
    try:
        cov_comp = np.linalg.inv(pieces.info)
    except np.linalg.LinAlgError:
        cov_comp = np.full_like(pieces.info, np.nan)
    se_comp = np.sqrt(np.clip(np.diag(cov_comp), 0.0, None))
    k3 = q3 * (q3 + 1) // 2
    flags = []
    eps = 1e-7
    for lvl, F, terms in (("la", F3, spec.random_terms("la")),
                          ("school", F2, spec.random_terms("school"))):
        for i, t in enumerate(terms):
            if F[i, i] <= eps:
                flags.append(f"omega_{lvl}[{t}]")
    return FitResult(
        beta=ev.beta,
        se_beta=np.sqrt(np.diag(cov_beta)),
        omega_la=O3,
        omega_school=O2,
        sigma2=float(ev.sigma2),
        se_omega_la=_unvech(se_comp[1:1 + k3], q3),
        se_omega_school=_unvech(se_comp[1 + k3:], q2),
        se_sigma2=float(se_comp[0]),
        minus2ll=float(ev.m2ll),
        n_pupils=n,
        n_schools=design.n_schools,
        n_las=design.n_las,
        iterations=iterations,
        converged=bool(converged),
        boundary_flags=flags,
        term_names=tuple(design.term_names),
        la_terms=tuple(spec.random_terms("la")),
        school_terms=tuple(spec.random_terms("school")),
        cov_beta=cov_beta,
        cov_components=cov_comp,
        history=history,
    )


def _push(history, f):
    if history and f > history[-1] + 1e-10 * max(1.0, abs(history[-1])):
        raise LikelihoodAscentError(
            f"-2LL increased from {history[-1]!r} to {f!r} between iterations")
    history.append(f)


def _newton_polish(system, theta, diag_mask, opts, history):
    """Newton steps on free coordinates using a finite-difference Hessian."""
    f = _profiled(system, theta).m2ll
    converged = False
    for it in range(1, opts.max_iter + 1):
        g = _profiled(system, theta).grad
        free = ~(diag_mask & (theta <= 1e-10) & (g >= 0))
        idx = np.flatnonzero(free)
        if idx.size == 0:
            return theta, it, True
        Hm = np.empty((idx.size, idx.size))
        for a, i in enumerate(idx):
            h = 1e-6 * max(1.0, abs(theta[i]))
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            Hm[:, a] = (_profiled(system, tp).grad[idx] - _profiled(system, tm).grad[idx]) / (2 * h)
        Hm = 0.5 * (Hm + Hm.T)
        try:
            step = -linalg.cho_solve(linalg.cho_factor(Hm), g[idx])
        except linalg.LinAlgError:
            # flat or indefinite curvature: the quasi-Newton answer stands
            gmax = np.abs(g[idx]).max()
            return theta, it, bool(gmax <= max(1e-3, opts.tol_param * abs(f)))
        t = 1.0
        # near the optimum the change in -2LL drops below rounding; a full step
        # that keeps -2LL level and shrinks the gradient is still progress
        cand = theta.copy()
        cand[idx] += step
        cand = np.where(diag_mask, np.maximum(cand, 0.0), cand)
        try:
            ec = _profiled(system, cand)
            level = ec.m2ll <= f + 1e-13 * max(1.0, abs(f))
            if level and np.abs(ec.grad[idx]).max() < np.abs(g[idx]).max():
                dtheta = np.abs(cand - theta).max()
                theta, f = cand, min(f, ec.m2ll)
                _push(history, f)
                converged = converged or dtheta <= opts.tol_param * max(1.0, np.abs(theta).max())
                if dtheta <= 1e-10 * max(1.0, np.abs(theta).max()):
                    break
                continue
        except FitError:
            pass
        while t > 1e-8:
            cand = theta.copy()
            cand[idx] += t * step
            cand = np.where(diag_mask, np.maximum(cand, 0.0), cand)
            try:
                fc = _profiled(system, cand, want_grad=False).m2ll
            except FitError:
                fc = np.inf
            if fc <= f:
                break
            t *= 0.5
        else:
            return theta, it, True
        dtheta = np.abs(cand - theta).max()
        df = f - fc
        theta, f = cand, fc
        _push(history, f)
        scale = max(1.0, np.abs(theta).max())
        if df <= opts.tol_ll * max(1.0, abs(f)) and dtheta <= opts.tol_param * scale:
            converged = True
        # once converged, keep taking the cheap quadratic steps to full precision
        if converged and dtheta <= 1e-10 * scale:
            break
    return theta, it, converged
