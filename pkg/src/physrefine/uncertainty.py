"""Variance propagation through the reverse chain and its pushforward to forces.

Only diagonals are tracked. With x^{n-1} = A_n x^n + B_n x_hat + sqrt(Sigma_n) eps,

    E[x^{n-1}]   = A_n E[x^n] + B_n E[x_hat]
    Var(x^{n-1}) = A_n^2 Var(x^n) + B_n^2 Var(x_hat) + Sigma_n + 2 A_n B_n Cov(x^n, x_hat)

where E[x_hat], Var(x_hat) and Cov(x^n, x_hat) are estimated from S auxiliary
draws x^{n,i} ~ N(E[x^n], Var(x^n)) pushed through the Laplace predictive.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import LaplacePosterior, predict_with_variance
from .diffusion import ShiftSchedule, reverse_step, sample_prior
from .dynamics import GRAVITY, force_jacobian
from .kinematics import KinematicTree


@dataclass
class VarianceState:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if not (self.mean.shape == self.var.shape == self.cov.shape):
            raise ValueError("mean, var and cov must share a shape")
        if np.any(self.var < 0):
            raise ValueError("variances must be nonnegative")


@dataclass
class VarianceReport:
    refined: np.ndarray
    mean0: np.ndarray
    var0: np.ndarray
    force_var: np.ndarray | None = None
    joint_map: np.ndarray | None = None
    vertex_map: np.ndarray | None = None
    floored: int = 0
    tree: KinematicTree | None = field(default=None, repr=False)

    def frame_force_variance(self) -> np.ndarray:
        """Per-frame total of Var(F) over coordinates."""
        if self.force_var is None:
            raise ValueError("report has no force variance")
        return self.force_var.sum(axis=1)

    def to_csv(self, path) -> None:
        T, dim = self.var0.shape
        link = self.tree.coord_link() if self.tree is not None else np.zeros(dim, dtype=int)
        fv = self.force_var if self.force_var is not None else np.full((T, dim), np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "joint", "coordinate", "var_x0", "var_force", "normalized_map"])
            for t in range(T):
                for i in range(dim):
                    m = self.joint_map[t, link[i]] if self.joint_map is not None else float("nan")
                    w.writerow([t, int(link[i]), i, repr(float(self.var0[t, i])), repr(float(fv[t, i])), repr(float(m))])

    def to_svg(self, path, cell: int = 18) -> None:
        if self.joint_map is None:
            raise ValueError("report has no joint map")
        Path(path).write_text(heatmap_svg(self.joint_map.T, cell))


# ---------------------------------------------------------------------------
# Recursion


def step_expectation(state: VarianceState, mean_xhat, n: int, schedule: ShiftSchedule) -> np.ndarray:
    return schedule.A(n) * state.mean + schedule.B(n) * np.asarray(mean_xhat, dtype=float)


def _raw_step_variance(var_xn, var_xhat, cov, n, schedule):
    A, B = schedule.A(n), schedule.B(n)
    return A * A * var_xn + B * B * np.asarray(var_xhat, dtype=float) + schedule.Sigma(n) \
        + 2.0 * A * B * np.asarray(cov, dtype=float)


def step_variance(state: VarianceState, var_xhat, cov, n: int, schedule: ShiftSchedule) -> np.ndarray:
    """Var(x^{n-1}) with negative entries floored at zero."""
    return np.maximum(_raw_step_variance(state.var, var_xhat, cov, n, schedule), 0.0)


def mc_covariance(samples_xn, samples_xhat, mean_xn) -> np.ndarray:
    """Cov(x^n, x_hat) ~ mean_i(x^{n,i} x_hat^i) - E[x^n] mean_i(x_hat^i), entrywise."""
    xs = np.asarray(samples_xn, dtype=float)
    fs = np.asarray(samples_xhat, dtype=float)
    if xs.shape != fs.shape:
        raise ValueError("sample arrays must share a shape")
    if xs.shape[0] < 2:
        raise ValueError("need at least two Monte Carlo samples")
    # Same estimator, centered on E[x^n] first so identical samples give exactly zero.
    return ((xs - np.asarray(mean_xn, dtype=float)) * fs).mean(axis=0)


def matched_normals(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws rescaled so every entry has exact sample mean 0 and variance 1 along axis 0."""
    eps = rng.standard_normal(shape)
    eps -= eps.mean(axis=0)
    sd = eps.std(axis=0)
    return eps / np.where(sd > 0, sd, 1.0)


def _predictive(denoiser, posterior):
    """(x_n, y, n) -> (mean, gamma^2).

    ``posterior`` is a LaplacePosterior or a callable returning gamma^2 for
    (x_n, y, n); the latter lets analytic test models plug in directly.
    """
    if isinstance(posterior, LaplacePosterior):
        return lambda x, y, n: predict_with_variance(denoiser, posterior, x, y, n)
    if callable(posterior):
        predict = denoiser.predict if hasattr(denoiser, "predict") else denoiser
        return lambda x, y, n: (np.asarray(predict(x, y, n), dtype=float), np.asarray(posterior(x, y, n), dtype=float))
    raise ValueError("a fitted Laplace posterior is required")


def propagate(y, denoiser, posterior, schedule: ShiftSchedule, S: int, rng: np.random.Generator, *,
              x_init=None, tree: KinematicTree | None = None, bodies=None, dt: float | None = None,
              normalizer=None, part_weights=None, gravity=GRAVITY) -> VarianceReport:
    """Run the reverse chain while tracking E[x^n], Var(x^n) and Cov(x^n, x_hat).

    The chain state starts at x^N (drawn from the prior unless ``x_init`` is
    given) with zero variance. At each step the actual chain draws
    x_hat ~ N(f, gamma^2) and takes a reverse step. The S auxiliary samples
    only feed the moment estimates. They are moment matched to E[x^n] and
    Var(x^n), which removes the sampling noise of the first two moments.
    Var(x_hat) is the predictive variance averaged over the samples plus the
    spread of the predictive mean.

    With ``normalizer`` the chain runs in normalized coordinates and the
    report is mapped back to raw units. With ``tree``, ``bodies`` and ``dt``
    the report also carries Var(F) and the joint variance map.
    """
    if S < 2:
        raise ValueError("S must be >= 2")
    pred = _predictive(denoiser, posterior)
    y = np.asarray(y, dtype=float)
    if normalizer is not None:
        y = normalizer.normalize(y)
    x = sample_prior(y, schedule, rng) if x_init is None else np.array(x_init, dtype=float)
    state = VarianceState(x.copy(), np.zeros_like(x), np.zeros_like(x))
    samples = np.broadcast_to(x, (S,) + x.shape)
    ys = np.broadcast_to(y, samples.shape)
    floored = 0
    for n in range(schedule.N, 0, -1):
        f_s, g_s = pred(samples, ys, n)
        mean_xhat = f_s.mean(axis=0)
        var_xhat = g_s.mean(axis=0) + ((f_s - mean_xhat) ** 2).mean(axis=0)
        cov = mc_covariance(samples, f_s, state.mean)
        state.cov = cov

        f_c, g_c = pred(x, y, n)
        x_hat = f_c + np.sqrt(g_c) * rng.standard_normal(x.shape)
        x = reverse_step(x, x_hat, n, schedule, rng)

        raw = _raw_step_variance(state.var, var_xhat, cov, n, schedule)
        floored += int(np.count_nonzero(raw < 0))
        state = VarianceState(step_expectation(state, mean_xhat, n, schedule), np.maximum(raw, 0.0), cov)
        if n > 1:
            samples = state.mean + np.sqrt(state.var) * matched_normals(rng, (S,) + x.shape)

    refined, mean0, var0 = x, state.mean, state.var
    if normalizer is not None:
        refined, mean0 = normalizer.denormalize(refined), normalizer.denormalize(mean0)
        var0 = var0 * normalizer.scale**2
    report = VarianceReport(refined, mean0, var0, floored=floored, tree=tree)
    if tree is not None and bodies is not None and dt is not None:
        report.force_var = force_variance(tree, bodies, mean0, var0, dt, gravity)
        report.joint_map, report.vertex_map = variance_maps(report.force_var, tree, part_weights)
    return report


# ---------------------------------------------------------------------------
# Pushforward and maps


def force_variance(tree: KinematicTree, bodies, mean0, var0, dt: float, gravity=GRAVITY,
                   rel_step: float = 1e-5) -> np.ndarray:
    """diag(J Var(x0) J^T) per frame, J = dF/dx at E[x0]; shape (T, dim)."""
    var0 = np.asarray(var0, dtype=float)
    mean0 = np.asarray(mean0, dtype=float)
    if var0.shape != mean0.shape:
        raise ValueError("mean and variance shapes differ")
    if np.any(var0 < 0):
        raise ValueError("variances must be nonnegative")
    h = rel_step * (1.0 + np.abs(mean0))
    if np.any(mean0 + h == mean0):
        raise FloatingPointError("finite-difference step underflows at the given state")
    J = force_jacobian(tree, bodies, mean0, dt, gravity, rel_step)
    return np.einsum("tsij,sj->ti", J * J, var0)


def variance_maps(var_force, tree: KinematicTree, part_weights=None):
    """Normalized per-joint map (T, J) and optional per-vertex map (T, V).

    A joint's value is the sum of its three rotational coordinate variances
    (for the root, the root rotation coordinates).
    """
    vf = np.asarray(var_force, dtype=float)
    if vf.ndim != 2 or vf.shape[1] != tree.dim:
        raise ValueError(f"var_force must be (T, {tree.dim})")
    if np.any(vf < 0):
        raise ValueError("variances must be nonnegative")
    joint = np.stack([vf[:, tree.rot_slice(k)].sum(axis=1) for k in range(tree.part_count)], axis=1)
    peak = joint.max()
    if peak > 0:
        joint = joint / peak
    vertex = None
    if part_weights is not None:
        w = np.asarray(part_weights, dtype=float)
        if w.ndim != 2 or w.shape[1] != tree.part_count:
            raise ValueError(f"part weights must be (V, {tree.part_count})")
        vertex = joint @ w.T
    return joint, vertex


def _ramp(v: float) -> str:
    lo, hi = np.array([49, 54, 149]), np.array([215, 48, 39])
    r, g, b = np.round(lo + (hi - lo) * float(np.clip(v, 0, 1))).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(grid, cell: int = 18) -> str:
    """Rect-grid SVG with a linear color ramp; rows are joints, columns frames."""
    grid = np.asarray(grid, dtype=float)
    rows, cols = grid.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell}">']
    for i in range(rows):
        for j in range(cols):
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_ramp(grid[i, j])}"><title>joint {i} frame {j}: {grid[i, j]:.4g}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
