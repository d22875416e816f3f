"""Independent dense-matrix oracles for small designs.

Nothing here touches the blockwise Woodbury code: V is formed explicitly and
the likelihood is maximised by a generic optimiser over all parameters.
"""
import numpy as np
from scipy import linalg, optimize

from lascreen.model import DesignMatrices


def random_toy(rng, n_las=3, schools=(2, 4), pupils=(3, 6), slopes=False, la_slope=False,
               omega_la=None, omega_school=None, sigma2=0.5):
    """Small design with intercept + one covariate and known generating values."""
    la, sch, x = [], [], []
    for k in range(n_las):
        for j in range(rng.integers(schools[0], schools[1] + 1)):
            m = rng.integers(pupils[0], pupils[1] + 1)
            la += [f"L{k}"] * m
            sch += [f"S{k}_{j}"] * m
            x += list(rng.normal(size=m))
    x = np.array(x)
    X = np.column_stack([np.ones_like(x), x])
    la_terms = ("intercept", "x") if la_slope else ("intercept",)
    sch_terms = ("intercept", "x") if slopes else ("intercept",)
    q3, q2 = len(la_terms), len(sch_terms)
    O3 = np.eye(q3) * 0.6 if omega_la is None else np.asarray(omega_la)
    O2 = np.diag([1.0, 0.5][:q2]) if omega_school is None else np.asarray(omega_school)
    if q2 == 2 and omega_school is None:
        O2[0, 1] = O2[1, 0] = 0.3
    y = X @ np.array([0.5, 1.0]) + rng.normal(scale=np.sqrt(sigma2), size=len(x))
    la_arr, sch_arr = np.array(la), np.array(sch)
    for k in np.unique(la_arr):
        m = la_arr == k
        u = rng.multivariate_normal(np.zeros(q3), O3)
        y[m] += X[m][:, :q3] @ u
    for s in np.unique(sch_arr):
        m = sch_arr == s
        u = rng.multivariate_normal(np.zeros(q2), O2)
        y[m] += X[m][:, :q2] @ u
    return DesignMatrices.from_arrays(y, X, la_arr, sch_arr, ("intercept", "x"),
                                      {"la": la_terms, "school": sch_terms})


def dense_Z(design):
    n = design.n
    Z3 = np.zeros((n, design.n_las * design.q_la))
    Z2 = np.zeros((n, design.n_schools * design.q_school))
    for i in range(n):
        k, j = design.la_index[i], design.school_index[i]
        Z3[i, k * design.q_la:(k + 1) * design.q_la] = design.Z_la[i]
        Z2[i, j * design.q_school:(j + 1) * design.q_school] = design.Z_school[i]
    return Z3, Z2


def dense_V(design, omega_la, omega_school, sigma2):
    Z3, Z2 = dense_Z(design)
    G3 = np.kron(np.eye(design.n_las), omega_la) if design.q_la else np.zeros((0, 0))
    G2 = np.kron(np.eye(design.n_schools), omega_school) if design.q_school else np.zeros((0, 0))
    return sigma2 * np.eye(design.n) + Z3 @ G3 @ Z3.T + Z2 @ G2 @ Z2.T


def dense_m2ll(design, beta, omega_la, omega_school, sigma2):
    V = dense_V(design, omega_la, omega_school, sigma2)
    r = design.y - design.X @ beta
    c = linalg.cho_factor(V, lower=True)
    logdet = 2 * np.log(np.diag(c[0])).sum()
    return design.n * np.log(2 * np.pi) + logdet + r @ linalg.cho_solve(c, r)


def _chol_from(v, q):
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = v
    return L @ L.T


def dense_fit(design, restarts=4, seed=0):
    """Brute-force ML: every parameter free, dense likelihood, BFGS + Nelder-Mead."""
    p, q3, q2 = design.p, design.q_la, design.q_school
    k3, k2 = q3 * (q3 + 1) // 2, q2 * (q2 + 1) // 2

    def unpack(v):
        beta = v[:p]
        s2 = np.exp(v[p])
        O3 = _chol_from(v[p + 1:p + 1 + k3], q3)
        O2 = _chol_from(v[p + 1 + k3:], q2)
        return beta, O3, O2, s2

    def obj(v):
        beta, O3, O2, s2 = unpack(v)
        try:
            return dense_m2ll(design, beta, O3, O2, s2)
        except linalg.LinAlgError:
            return np.inf

    rng = np.random.default_rng(seed)
    beta0 = np.linalg.lstsq(design.X, design.y, rcond=None)[0]
    s0 = np.var(design.y - design.X @ beta0)
    best = None
    for r in range(restarts):
        chol0 = []
        for q in (q3, q2):
            L = np.eye(q) * np.sqrt(s0 * rng.uniform(0.1, 1.0))
            chol0 += list(L[np.tril_indices(q)])
        v0 = np.concatenate([beta0, [np.log(s0 * rng.uniform(0.3, 1.0))], chol0])
        res = optimize.minimize(obj, v0, method="BFGS", options={"gtol": 1e-10, "maxiter": 5000})
        res = optimize.minimize(obj, res.x, method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 40000,
                                         "maxfev": 80000, "adaptive": True})
        res = optimize.minimize(obj, res.x, method="BFGS", options={"gtol": 1e-11, "maxiter": 5000})
        if best is None or res.fun < best.fun:
            best = res
    beta, O3, O2, s2 = unpack(best.x)
    return {"beta": beta, "omega_la": O3, "omega_school": O2, "sigma2": s2, "minus2ll": best.fun}


def dense_eb(design, beta, omega_la, omega_school, sigma2):
    """EB predictions and comparative covariances straight from the formulas."""
    Z3, Z2 = dense_Z(design)
    V = dense_V(design, omega_la, omega_school, sigma2)
    Vi = np.linalg.inv(V)
    r = design.y - design.X @ beta
    out = {}
    for name, Z, om, m in (("la", Z3, omega_la, design.n_las),
                           ("school", Z2, omega_school, design.n_schools)):
        q = om.shape[0]
        G = np.kron(np.eye(m), om)
        u = (G @ Z.T @ Vi @ r).reshape(m, q)
        C = G - G @ Z.T @ Vi @ Z @ G
        comp = np.array([C[i * q:(i + 1) * q, i * q:(i + 1) * q] for i in range(m)])
        P = Vi - Vi @ design.X @ np.linalg.inv(design.X.T @ Vi @ design.X) @ design.X.T @ Vi
        Cb = G - G @ Z.T @ P @ Z @ G
        comp_b = np.array([Cb[i * q:(i + 1) * q, i * q:(i + 1) * q] for i in range(m)])
        out[name] = (u, comp, comp_b)
    return out
