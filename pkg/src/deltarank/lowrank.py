"""Low-rank layer transformations.

Dense weights are replaced by a truncated SVD ``U diag(s) V^T``; 4-D conv
kernels by a rank-r CP (canonical polyadic) decomposition fitted with
alternating least squares. The SVD is a one-sided Jacobi iteration so the
whole module needs nothing beyond numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model_ir import Conv2D, Dense, DecomposedConv2D, DecomposedDense
from .tensor_core import unfold


class SVDNonConvergence(RuntimeError):
    pass


class ALSFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- SVD


def _round_robin(n: int):
    """Pairings of ``n`` (even) indices into ``n - 1`` rounds of disjoint pairs."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _hestenes(a: np.ndarray, tol: float, max_sweeps: int):
    """Orthogonalize the columns of ``a`` (m >= n) by plane rotations.

    Returns the rotated columns and the accumulated rotation ``v`` such that
    ``a_in @ v == a_out``.
    """
    a = np.array(a, dtype=np.float64)
    m, n = a.shape
    v = np.eye(n)
    if n < 2:
        return a, v
    npad = n + (n % 2)
    if npad != n:
        a = np.hstack([a, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    rounds = _round_robin(npad)
    for _ in range(max_sweeps):
        worst = 0.0
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            norm = np.sqrt(alpha * beta)
            live = norm > 0
            off = np.zeros_like(gamma)
            off[live] = np.abs(gamma[live]) / norm[live]
            worst = max(worst, float(off.max(initial=0.0)))
            rot = off > tol
            if not rot.any():
                continue
            p, q = p[rot], q[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (a, v):
                mp, mq = mat[:, p], mat[:, q]
                mat[:, p] = c * mp - s * mq
                mat[:, q] = s * mp + c * mq
        if worst <= tol:
            return a[:, :n], v[:n, :n]
    raise SVDNonConvergence(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def _complete_basis(u: np.ndarray, m: int) -> np.ndarray:
    """Orthonormal ``m x m`` basis whose leading columns are ``u``."""
    q, _ = np.linalg.qr(np.hstack([u, np.eye(m)]))
    signs = np.sign(np.einsum("ij,ij->j", q[:, : u.shape[1]], u))
    q[:, : u.shape[1]] *= np.where(signs == 0, 1.0, signs)
    return q


def svd(a, tol: float = 1e-12, max_sweeps: int = 60):
    """Thin SVD ``a = U diag(s) V^T`` with ``k = min(m, n)`` singular values.

    Singular values are sorted non-increasing; U and V have orthonormal
    columns even where singular values vanish.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {a.shape}")
    transposed = a.shape[0] < a.shape[1]
    work = a.T if transposed else a
    m, n = work.shape
    cols, v = _hestenes(work, tol, max_sweeps)
    s = np.sqrt(np.einsum("ij,ij->j", cols, cols))
    order = np.argsort(-s, kind="stable")
    s, cols, v = s[order], cols[:, order], v[:, order]
    cutoff = s[0] * max(m, n) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
    good = s > cutoff
    u = np.zeros((m, n))
    u[:, good] = cols[:, good] / s[good]
    if not good.all():
        k = int(good.sum())
        u = _complete_basis(u[:, :k], m)[:, :n]
        s = np.where(good, s, 0.0)
    return (v, s, u) if transposed else (u, s, v)


def truncated_svd(a, r: int):
    """Rank-``r`` Eckart-Young approximation factors ``(U[m,r], s[r], V[n,r])``."""
    a = np.asarray(a, dtype=np.float64)
    if not 1 <= r <= min(a.shape):
        raise ValueError(f"rank {r} outside [1, {min(a.shape)}] for shape {a.shape}")
    u, s, v = svd(a)
    return u[:, :r].copy(), s[:r].copy(), v[:, :r].copy()


# ---------------------------------------------------------------- factor sets


@dataclass
class FactorSet:
    """Factors of one layer.

    ``kind == "dense"``: ``factors = (U[in,r], s[r], V[out,r])``.
    ``kind == "conv"``: ``factors = (F1[r,kw], F2[r,kh], F3[r,in], F4[r,out])``.
    ``fit`` is the relative Frobenius reconstruction error.
    """

    kind: str
    factors: tuple
    fit: float
    history: list = field(default_factory=list)
    restart_fits: list = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.factors[1].shape[0] if self.kind == "dense" else self.factors[0].shape[0]

    def reconstruct(self) -> np.ndarray:
        if self.kind == "dense":
            u, s, v = self.factors
            return (u * s) @ v.T
        f1, f2, f3, f4 = self.factors
        return np.einsum("ro,rc,rh,rw->ochw", f4, f3, f2, f1)


def rel_error(original, factors: FactorSet) -> float:
    """``||W - W_hat||_F / ||W||_F``."""
    w = np.asarray(original, dtype=np.float64)
    w_hat = factors.reconstruct()
    if w_hat.shape != w.shape:
        raise ValueError(f"factors reconstruct {w_hat.shape}, original is {w.shape}")
    norm = np.linalg.norm(w)
    diff = np.linalg.norm(w - w_hat)
    if norm == 0:
        if diff == 0:
            return 0.0
        raise ValueError("relative error undefined: zero original, nonzero reconstruction")
    return float(diff / norm)


# ---------------------------------------------------------------- CP-ALS


def _khatri_rao(mats):
    """Row-major Khatri-Rao product: the first matrix's index varies slowest."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, out.shape[1])
    return out


def _cp_error(unfolded0, mats, lam, norm_k) -> float:
    approx = (mats[0] * lam) @ _khatri_rao(mats[1:]).T
    return float(np.linalg.norm(unfolded0 - approx) / norm_k)


def _normalized(full):
    mats, lam = [], np.ones(full[0].shape[1])
    for m in full:
        n = np.linalg.norm(m, axis=0)
        n = np.where(n > 0, n, 1.0)
        mats.append(m / n)
        lam = lam * n
    return mats, lam


def _als_run(unfolded, mats, max_iters, tol, norm_k):
    """ALS sweeps over the four modes.

    After each sweep the change since the previous sweep is extrapolated by
    ``sweep ** (1/3)`` and kept only if that lowers the error; this pulls
    ALS out of the long plateaus it otherwise shows on near-collinear
    factors, and the error history stays non-increasing.
    """
    mats = [m.copy() for m in mats]
    r = mats[0].shape[1]
    lam = np.ones(r)
    grams = [m.T @ m for m in mats]
    history = []
    prev = np.inf
    for sweep in range(max_iters):
        before = [mats[0] * lam, *mats[1:]]
        for mode in range(4):
            others = [i for i in range(4) if i != mode]
            kr = _khatri_rao([mats[i] for i in others])
            gram = np.ones((r, r))
            for i in others:
                gram *= grams[i]
            new = unfolded[mode] @ kr @ np.linalg.pinv(gram, rcond=1e-15, hermitian=True)
            lam = np.linalg.norm(new, axis=0)
            mats[mode] = new / np.where(lam > 0, lam, 1.0)
            grams[mode] = mats[mode].T @ mats[mode]
        fit = _cp_error(unfolded[0], mats, lam, norm_k)
        if sweep > 0 and np.isfinite(fit):
            step = (sweep + 1) ** (1 / 3)
            trial = [b + step * (a - b) for a, b in zip([mats[0] * lam, *mats[1:]], before)]
            t_mats, t_lam = _normalized(trial)
            t_fit = _cp_error(unfolded[0], t_mats, t_lam, norm_k)
            if t_fit < fit:
                mats, lam, fit = t_mats, t_lam, t_fit
                grams = [m.T @ m for m in mats]
        history.append(fit)
        if not np.isfinite(fit) or abs(prev - fit) < tol:
            break
        prev = fit
    return mats, lam, history


def _hosvd_init(unfolded, r, rng):
    mats = []
    for x in unfolded:
        u, _, _ = svd(x)
        take = min(r, u.shape[1])
        m = u[:, :take]
        if take < r:
            m = np.hstack([m, rng.standard_normal((x.shape[0], r - take))])
        mats.append(m)
    return mats


def cp_als(
    kernel,
    rank: int,
    max_iters: int = 200,
    tol: float = 1e-7,
    restarts: int = 3,
    seed: int = 0,
    init: FactorSet | None = None,
) -> FactorSet:
    """Rank-``rank`` CP decomposition of an ``[out, in, kh, kw]`` kernel.

    Restart 0 starts from ``init`` (padded with random columns up to
    ``rank``) when given, otherwise from the leading left singular vectors of
    each mode unfolding; later restarts start from seeded Gaussians. The
    lowest-error restart wins, ties going to the earlier restart.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 4:
        raise ValueError(f"cp_als expects a 4-D kernel, got shape {k.shape}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    norm_k = np.linalg.norm(k)
    if norm_k == 0:
        zeros = (np.zeros((rank, k.shape[3])), np.zeros((rank, k.shape[2])),
                 np.zeros((rank, k.shape[1])), np.zeros((rank, k.shape[0])))
        return FactorSet("conv", zeros, 0.0, [0.0], [0.0])
    unfolded = [unfold(k, m) for m in range(4)]

    best = None
    fits = []
    for restart in range(max(1, restarts)):
        rng = np.random.default_rng([seed, rank, restart])
        if restart == 0 and init is not None:
            f1, f2, f3, f4 = init.factors
            have = f1.shape[0]
            if have > rank:
                raise ValueError(f"warm start of rank {have} exceeds target rank {rank}")
            mats = [
                np.hstack([f.T, rng.standard_normal((f.shape[1], rank - have))])
                for f in (f4, f3, f2, f1)
            ]
        elif restart == 0:
            mats = _hosvd_init(unfolded, rank, rng)
        else:
            mats = [rng.standard_normal((d, rank)) for d in k.shape]
        mats, lam, history = _als_run(unfolded, mats, max_iters, tol, norm_k)
        fit = history[-1] if history else np.inf
        fits.append(fit)
        if np.isfinite(fit) and (best is None or fit < best[0]):
            best = (fit, mats, lam, history)
    if best is None:
        raise ALSFailure(f"all {len(fits)} ALS restarts diverged; fits per restart: {fits}")

    fit, mats, lam, history = best
    # spread each component's weight evenly over the four factors
    scale = lam ** 0.25
    a_out, a_in, a_h, a_w = (m * scale for m in mats)
    return FactorSet("conv", (a_w.T.copy(), a_h.T.copy(), a_in.T.copy(), a_out.T.copy()),
                     float(fit), history, fits)


# ---------------------------------------------------------------- layer transforms


def dense_factors(layer: Dense, r: int) -> FactorSet:
    u, s, v = truncated_svd(layer.weight, r)
    fs = FactorSet("dense", (u, s, v), 0.0)
    fs.fit = rel_error(layer.weight, fs) if np.any(layer.weight) else 0.0
    return fs


def dense_from_factors(layer: Dense, fs: FactorSet) -> DecomposedDense:
    u, s, v = fs.factors
    return DecomposedDense(layer.in_features, layer.out_features, fs.rank, u, s, v, layer.bias)


def decompose_dense(layer: Dense, r: int) -> DecomposedDense:
    if not 1 <= r <= min(layer.in_features, layer.out_features):
        raise ValueError(
            f"rank {r} outside [1, {min(layer.in_features, layer.out_features)}]"
        )
    return dense_from_factors(layer, dense_factors(layer, r))


def conv_from_factors(layer: Conv2D, fs: FactorSet) -> DecomposedConv2D:
    f1, f2, f3, f4 = fs.factors
    r = fs.rank
    return DecomposedConv2D(
        layer.geom,
        r,
        f1[:, None, None, :],
        f2[:, None, :, None],
        f3[:, :, None, None],
        f4.T[:, :, None, None],
        layer.bias,
    )


def decompose_conv(layer: Conv2D, r: int, max_iters=200, tol=1e-7, restarts=3, seed=0):
    fs = cp_als(layer.weight, r, max_iters=max_iters, tol=tol, restarts=restarts, seed=seed)
    return conv_from_factors(layer, fs)
