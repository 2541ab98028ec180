"""Rigid point-set registration: nearest-neighbour ICP and a Gaussian-mixture EM (FilterReg-style)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .. import geomath as gm
from ..geomath import Pose8


class RegistrationError(ValueError):
    pass


@dataclass
class Registration:
    """Rigid transform x -> R x + t taking the source cloud onto the target."""

    q: np.ndarray
    t: np.ndarray
    iterations: int
    objective: float
    history: list = field(default_factory=list)
    converged: bool = True
    stages: list = field(default_factory=list)
    sigma: float = 0.0

    @property
    def R(self) -> np.ndarray:
        return gm.quat_to_matrix(self.q)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.R.T + self.t

    def as_pose(self) -> Pose8:
        return Pose8(self.t, self.q, 1.0)

    @classmethod
    def identity(cls) -> "Registration":
        return cls(gm.IDENTITY_Q.copy(), np.zeros(3), 0, 0.0)


def _check_cloud(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) < 3:
        raise RegistrationError(f"{name} cloud needs at least 3 points, got {len(p)}")
    sv = np.linalg.svd(p - p.mean(0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise RegistrationError(f"{name} cloud is degenerate (collinear or coincident points)")
    return p


def kabsch(src: np.ndarray, dst: np.ndarray, w: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least-squares rotation and translation with R @ src + t ~ dst (rows paired)."""
    w = np.ones(len(src)) if w is None else np.asarray(w, dtype=np.float64)
    ws = w.sum()
    mu_s = w @ src / ws
    mu_d = w @ dst / ws
    A = (dst - mu_d).T @ ((src - mu_s) * w[:, None])
    return _rotation_from_cross(A, mu_s, mu_d)


def _rotation_from_cross(A: np.ndarray, mu_s: np.ndarray, mu_d: np.ndarray):
    U, _, Vt = np.linalg.svd(A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def _result(R, t, it, obj, hist, conv) -> Registration:
    return Registration(gm.matrix_to_quat(R), np.asarray(t, dtype=np.float64), it, float(obj), hist, conv)


def register_icp(src, dst, max_iters: int = 100, tol: float = 1e-10) -> Registration:
    """Point-to-point ICP: nearest-neighbour pairing and a Kabsch update, until the mean
    squared residual stops improving by more than ``tol`` (relative)."""
    src = _check_cloud(src, "source")
    dst = _check_cloud(dst, "target")
    tree = cKDTree(dst)
    R, t = np.eye(3), np.zeros(3)
    d, idx = tree.query(src)
    hist = [float(np.mean(d ** 2))]
    it, conv = 0, False
    while it < max_iters:
        if hist[-1] == 0.0:
            conv = True
            break
        R, t = kabsch(src, dst[idx])
        it += 1
        d, idx = tree.query(src @ R.T + t)
        hist.append(float(np.mean(d ** 2)))
        if hist[-2] - hist[-1] <= tol * max(hist[-2], 1e-300):
            conv = True
            break
    return _result(R, t, max(it, 1), hist[-1], hist, conv)


class FilterReg:
    """EM over an isotropic Gaussian mixture centred on the target points, plus a uniform
    outlier density. The E-step assigns source points to target components; the M-step is a
    weighted Kabsch fit followed by the closed-form variance update. Both M-step parts
    maximise the expected complete-data log-likelihood, so the mixture negative
    log-likelihood never increases; that is checked at every iteration.
    """

    CUTOFF = 8.0

    def __init__(self, w_outlier: float = 0.1, max_iters: int = 200, tol: float = 1e-8,
                 sigma_floor: float = 1e-7, max_points: int = 8192, coarse_points: int = 512, seed: int = 0,
                 chunk: int = 1024):
        if not 0.0 <= w_outlier < 1.0:
            raise ValueError("outlier weight must lie in [0, 1)")
        self.w = w_outlier
        self.max_iters = max_iters
        self.tol = tol
        self.sigma_floor = sigma_floor
        self.max_points = max_points
        self.coarse_points = coarse_points
        self.seed = seed
        self.chunk = chunk

    def _subsample(self, p: np.ndarray, n: int) -> np.ndarray:
        if len(p) <= n:
            return p
        rng = np.random.default_rng(self.seed)
        return p[np.sort(rng.choice(len(p), n, replace=False))]

    def _estep(self, x: np.ndarray, y: np.ndarray, s2: float, u: float):
        """Sufficient statistics and NLL for transformed source x against targets y.

        Components further than ``CUTOFF`` sigmas contribute below exp(-32) of their peak and
        are skipped once that radius is small next to the cloud, using a k-d tree.
        """
        reach = self.CUTOFF * np.sqrt(s2)
        if reach < 0.25 * self._extent:
            return self._estep_sparse(x, y, s2, u, reach)
        M = len(y)
        norm = (1.0 - self.w) / (M * (2 * np.pi * s2) ** 1.5)
        out_d = self.w * u
        p1 = np.zeros(len(x))
        pt1 = np.zeros(M)
        Px = np.zeros((M, 3))
        nll = 0.0
        for a in range(0, len(x), self.chunk):
            xs = x[a:a + self.chunk]
            lg = cdist(xs, y, "sqeuclidean") / (-2 * s2)
            m = lg.max(axis=1, keepdims=True)
            e = np.exp(lg - m)
            peak = norm * np.exp(m[:, 0])
            dens = peak * e.sum(axis=1) + out_d
            nll -= float(np.sum(np.log(dens)))
            P = e * (peak / dens)[:, None]
            p1[a:a + len(xs)] = P.sum(1)
            pt1 += P.sum(0)
            Px += P.T @ xs
        return p1, pt1, Px, nll

    def _estep_sparse(self, x, y, s2, u, reach):
        M = len(y)
        norm = (1.0 - self.w) / (M * (2 * np.pi * s2) ** 1.5)
        pairs = cKDTree(x).sparse_distance_matrix(self._tree, reach, output_type="ndarray")
        i, j = pairs["i"], pairs["j"]
        g = norm * np.exp(pairs["v"] ** 2 / (-2 * s2))
        dens = np.bincount(i, g, minlength=len(x)) + self.w * u
        nll = -float(np.sum(np.log(dens)))
        P = g / dens[i]
        p1 = np.bincount(i, P, minlength=len(x))
        pt1 = np.bincount(j, P, minlength=M)
        flat = (j[:, None] * 3 + np.arange(3)).ravel()
        Px = np.bincount(flat, (P[:, None] * x[i]).ravel(), minlength=3 * M).reshape(M, 3)
        return p1, pt1, Px, nll

    def _em(self, x0: np.ndarray, y: np.ndarray, R: np.ndarray, t: np.ndarray, s2: float):
        """EM from (R, t, s2) on fixed clouds; returns the refined state and the NLL history."""
        lo, hi = np.minimum(x0.min(0), y.min(0)), np.maximum(x0.max(0), y.max(0))
        u = 1.0 / max(float(np.prod(np.maximum(hi - lo, 1e-9))), 1e-300)
        floor = self.sigma_floor ** 2
        s2 = max(s2, floor)
        self._tree = cKDTree(y)
        self._extent = float(np.linalg.norm(y.max(0) - y.min(0)))
        x = x0 @ R.T + t
        p1, pt1, Px, nll = self._estep(x, y, s2, u)
        hist = [nll]
        it, conv = 0, False
        while it < self.max_iters:
            Np = p1.sum()
            if Np <= 1e-12:
                raise RegistrationError("every point assigned to the outlier class")
            mu_x = p1 @ x0 / Np
            mu_y = pt1 @ y / Np
            # Px holds sum_n P[n, m] * (R x0_n + t); undo the current transform to pair with x0
            A = (Px - np.outer(pt1, t)) @ R  # rows: sum_n P[n, m] x0_n
            cross = y.T @ A - Np * np.outer(mu_y, mu_x)
            R, t = _rotation_from_cross(cross, mu_x, mu_y)
            x = x0 @ R.T + t
            # closed-form variance for the new transform
            d2w = float(np.sum(pt1 * np.sum(y * y, 1)) + np.sum(p1 * np.sum(x * x, 1))
                        - 2.0 * np.sum(y * (A @ R.T + np.outer(pt1, t))))
            s2 = max(d2w / (3.0 * Np), floor)
            it += 1
            p1, pt1, Px, nll = self._estep(x, y, s2, u)
            if nll > hist[-1] + 1e-9 * max(1.0, abs(hist[-1])):
                raise RegistrationError(f"EM objective increased at iteration {it}: {hist[-1]} -> {nll}")
            hist.append(nll)
            if abs(hist[-2] - nll) <= self.tol * max(1.0, abs(hist[-2])):
                conv = True
                break
        return R, t, s2, hist, it, conv

    def register(self, src, dst, sigma_init: float | None = None, inits=None) -> Registration:
        """Coarse EM on a small subsample, then EM at full resolution from its result.

        Each stage is a separate EM run with its own monotone objective; ``history`` holds the
        final stage, ``stages`` all of them. ``inits`` is an optional list of starting
        rotations (centroids are matched for each); the coarse stage runs from every start
        and the lowest final objective wins.
        """
        src = _check_cloud(src, "source")
        dst = _check_cloud(dst, "target")
        x0 = self._subsample(src, self.max_points)
        y = self._subsample(dst, self.max_points)
        xc = self._subsample(x0, self.coarse_points)
        yc = self._subsample(y, self.coarse_points)
        coarse = len(xc) < len(x0) or len(yc) < len(y)
        starts = [(np.eye(3), np.zeros(3))] if inits is None else \
            [(R0, yc.mean(0) - R0 @ xc.mean(0)) for R0 in inits]
        # first stage from every start: coarse when subsampling applies, else the only stage
        xa, ya = (xc, yc) if coarse else (x0, y)
        best = None
        for R, t in starts:
            s2 = (float(np.mean(cdist(xc @ R.T + t, yc, "sqeuclidean"))) / 3.0 if sigma_init is None
                  else float(sigma_init) ** 2)
            run = self._em(xa, ya, R, t, s2)
            if best is None or run[3][-1] < best[3][-1]:
                best = run
        R, t, s2, h, iters, conv = best
        stages = [h]
        if coarse:
            R, t, s2, h, it, c = self._em(x0, y, R, t, s2)
            stages.append(h)
            iters += it
            conv = conv and c
        reg = _result(R, t, iters, h[-1], h, conv)
        reg.stages = stages
        reg.sigma = float(np.sqrt(s2))
        return reg


def register_filterreg(src, dst, sigma_init: float | None = None, max_iters: int = 200, tol: float = 1e-8,
                       w_outlier: float = 0.1, max_points: int = 8192) -> Registration:
    return FilterReg(w_outlier, max_iters, tol, max_points=max_points).register(src, dst, sigma_init)


REGISTRATIONS = {"filterreg": register_filterreg, "icp": register_icp}


def register(method: str, src, dst) -> Registration:
    try:
        fn = REGISTRATIONS[method]
    except KeyError:
        raise ValueError(f"unknown registration {method!r}; choose from {sorted(REGISTRATIONS)}") from None
    return fn(src, dst)
