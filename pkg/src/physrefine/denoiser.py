"""Clean-motion predictor f(x^n, y, n) and its last-layer Laplace posterior.

The reference backbone is a per-frame MLP over a clamped temporal window of
the current state and the observation. Its last layer is linear in a
feature vector ``a_t`` that holds ``[h_t, u_t]`` (final hidden activations
concatenated with the standardized inputs) in the block belonging to the
diffusion step n and zeros elsewhere, so every step has its own head rows.
The prediction is residual:

    x_hat_t = x^n_t + W a_t + b

so a zero head makes the denoiser the identity on x^n.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

CHECKPOINT_VERSION = 1


class MissingCacheError(RuntimeError):
    """backward() called without a preceding forward pass."""


def step_embedding(n, size: int = 8) -> np.ndarray:
    """Sinusoidal encoding of the diffusion step; ``n`` scalar or array."""
    n = np.asarray(n, dtype=float)
    freqs = np.pi / 2.0 ** (np.arange(size // 2) + 1)
    ang = n[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class MLPDenoiser:
    """Windowed MLP denoiser with a linear residual head.

    Inputs are arrays of shape (T, dim) or (B, T, dim); ``n`` is an int or a
    length-B integer array.
    """

    def __init__(self, dim: int, window: int = 2, hidden=(64, 64), embed_dim: int = 8,
                 rng: np.random.Generator | None = None, n_steps: int = 4):
        if window < 1:
            raise ValueError("window must be >= 1")
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.dim = int(dim)
        self.n_steps = int(n_steps)
        self.window = int(window)
        self.hidden = tuple(int(h) for h in hidden)
        self.embed_dim = int(embed_dim)
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_mean = np.zeros(self.input_size)
        self.input_std = np.ones(self.input_size)
        self.params: dict[str, np.ndarray] = {}
        fan_in = self.input_size
        for i, h in enumerate(self.hidden):
            self.params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(h, fan_in))
            self.params[f"b{i}"] = np.zeros(h)
            fan_in = h
        self.params["W_head"] = np.zeros((self.dim, self.feature_size))
        self.params["b_head"] = np.zeros(self.dim)
        self._cache = None

    # -- sizes ---------------------------------------------------------------
    @property
    def input_size(self) -> int:
        k = 2 * self.window
        return self.dim * (1 + k + k + 1) + self.embed_dim

    @property
    def block_size(self) -> int:
        return (self.hidden[-1] if self.hidden else 0) + self.input_size

    @property
    def feature_size(self) -> int:
        return self.n_steps * self.block_size

    # -- forward ---------------------------------------------------------------
    def _inputs(self, x_n, y, n):
        x_n = np.asarray(x_n, dtype=float)
        y = np.asarray(y, dtype=float)
        if x_n.shape != y.shape or x_n.shape[-1] != self.dim:
            raise ValueError(f"expected matching (..., T, {self.dim}) inputs, got {x_n.shape} and {y.shape}")
        T = x_n.shape[-2]
        offs = np.arange(-self.window, self.window + 1)
        idx = np.clip(np.arange(T)[:, None] + offs, 0, T - 1)  # (T, 2w+1)
        xw = x_n[..., idx, :]  # (..., T, 2w+1, dim)
        yw = y[..., idx, :]
        xc = x_n[..., :, None, :]
        rel_x = np.delete(xw - xc, self.window, axis=-2)
        rel_y = yw - xc
        lead = x_n.shape[:-1]
        n_arr = np.asarray(n)
        emb = step_embedding(n_arr, self.embed_dim)
        if n_arr.ndim == 0:
            emb = np.broadcast_to(emb, lead + (self.embed_dim,))
        else:
            emb = np.broadcast_to(emb.reshape(n_arr.shape + (1,) * (len(lead) - n_arr.ndim) + (self.embed_dim,)),
                                  lead + (self.embed_dim,))
        return np.concatenate([x_n, rel_x.reshape(lead + (-1,)), rel_y.reshape(lead + (-1,)), emb], axis=-1)

    def _forward(self, x_n, y, n):
        u = (self._inputs(x_n, y, n) - self.input_mean) / self.input_std
        acts = [u]
        h = u
        for i in range(len(self.hidden)):
            h = np.tanh(h @ self.params[f"W{i}"].T + self.params[f"b{i}"])
            acts.append(h)
        base = np.concatenate([h, u], axis=-1) if self.hidden else u
        onehot = self._step_onehot(n, base.shape[:-1])
        a = (onehot[..., :, None] * base[..., None, :]).reshape(base.shape[:-1] + (self.feature_size,))
        return acts, a

    def _step_onehot(self, n, lead):
        n_arr = np.asarray(n)
        if np.any(n_arr < 1) or np.any(n_arr > self.n_steps):
            raise IndexError(f"diffusion step outside [1, {self.n_steps}]")
        oh = np.eye(self.n_steps)[n_arr - 1]
        if n_arr.ndim:
            oh = oh.reshape(n_arr.shape + (1,) * (len(lead) - n_arr.ndim) + (self.n_steps,))
        return np.broadcast_to(oh, lead + (self.n_steps,))

    def features(self, x_n, y, n) -> np.ndarray:
        """Last-layer input vectors, shape (..., T, feature_size)."""
        return self._forward(x_n, y, n)[1]

    def predict(self, x_n, y, n, cache: bool = False) -> np.ndarray:
        acts, a = self._forward(x_n, y, n)
        out = np.asarray(x_n, dtype=float) + a @ self.params["W_head"].T + self.params["b_head"]
        if cache:
            self._cache = (acts, a, self._step_onehot(n, a.shape[:-1]))
        return out

    __call__ = predict

    def predict_and_features(self, x_n, y, n):
        _, a = self._forward(x_n, y, n)
        out = np.asarray(x_n, dtype=float) + a @ self.params["W_head"].T + self.params["b_head"]
        return out, a

    # -- backward --------------------------------------------------------------
    def backward(self, upstream) -> dict[str, np.ndarray]:
        """Parameter gradients of sum(upstream * x_hat) for the cached forward pass."""
        if self._cache is None:
            raise MissingCacheError("call predict(..., cache=True) before backward()")
        acts, a, onehot = self._cache
        self._cache = None
        g = np.asarray(upstream, dtype=float)
        if g.shape[:-1] != a.shape[:-1] or g.shape[-1] != self.dim:
            raise ValueError("upstream gradient shape does not match the cached prediction")
        g2 = g.reshape(-1, self.dim)
        a2 = a.reshape(-1, a.shape[-1])
        grads = {"W_head": g2.T @ a2, "b_head": g2.sum(axis=0)}
        if self.hidden:
            L = len(self.hidden)
            ga = (g2 @ self.params["W_head"]).reshape(-1, self.n_steps, self.block_size)
            gbase = np.einsum("rk,rkh->rh", onehot.reshape(-1, self.n_steps), ga)
            gh = gbase[:, :self.hidden[-1]]
            for i in range(L - 1, -1, -1):
                h = acts[i + 1].reshape(-1, self.hidden[i])
                gz = gh * (1.0 - h * h)
                prev = acts[i].reshape(-1, acts[i].shape[-1])
                grads[f"W{i}"] = gz.T @ prev
                grads[f"b{i}"] = gz.sum(axis=0)
                gh = gz @ self.params[f"W{i}"]
        return grads

    # -- input statistics ------------------------------------------------------
    def fit_input_stats(self, batches: Iterable[tuple]) -> None:
        """Standardize inputs with statistics of (x_n, y, n) triples."""
        us = [self._inputs(x, y, n).reshape(-1, self.input_size) for x, y, n in batches]
        u = np.concatenate(us)
        self.input_mean = u.mean(axis=0)
        std = u.std(axis=0)
        self.input_std = np.where(std > 1e-8, std, 1.0)

    # -- persistence -------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "dim": self.dim, "window": self.window, "hidden": list(self.hidden), "embed_dim": self.embed_dim,
            "n_steps": self.n_steps,
            "input_mean": self.input_mean.tolist(), "input_std": self.input_std.tolist(),
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MLPDenoiser":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        m = cls(doc["dim"], doc["window"], tuple(doc["hidden"]), doc["embed_dim"], n_steps=doc["n_steps"])
        m.input_mean = np.asarray(doc["input_mean"], dtype=float)
        m.input_std = np.asarray(doc["input_std"], dtype=float)
        for k in m.params:
            m.params[k] = np.asarray(doc["params"][k], dtype=float).reshape(m.params[k].shape)
        return m


def predict(denoiser, x_n, y, n):
    return denoiser.predict(x_n, y, n)


def backward(denoiser, upstream_grad):
    return denoiser.backward(upstream_grad)


# ---------------------------------------------------------------------------
# Laplace


@dataclass
class LaplacePosterior:
    """Diagonal Gaussian over the head weights: precision = prior + GGN diagonal."""

    prior_precision: float
    ggn_W: np.ndarray
    ggn_b: np.ndarray

    def __post_init__(self):
        self.ggn_W = np.asarray(self.ggn_W, dtype=float)
        self.ggn_b = np.asarray(self.ggn_b, dtype=float)
        if not self.prior_precision > 0:
            raise ValueError("prior precision must be positive")
        if np.any(self.ggn_W < 0) or np.any(self.ggn_b < 0):
            raise ValueError("Gauss-Newton diagonal must be nonnegative")

    @property
    def var_W(self) -> np.ndarray:
        return 1.0 / (self.prior_precision + self.ggn_W)

    @property
    def var_b(self) -> np.ndarray:
        return 1.0 / (self.prior_precision + self.ggn_b)

    def with_prior(self, prior_precision: float) -> "LaplacePosterior":
        return LaplacePosterior(prior_precision, self.ggn_W, self.ggn_b)

    def output_variance(self, a) -> np.ndarray:
        """gamma^2 for feature vectors ``a`` of shape (..., H)."""
        a = np.asarray(a, dtype=float)
        return (a * a) @ self.var_W.T + self.var_b

    def to_json(self) -> dict:
        return {"prior_precision": self.prior_precision, "ggn_W": self.ggn_W.tolist(), "ggn_b": self.ggn_b.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "LaplacePosterior":
        return cls(doc["prior_precision"], np.asarray(doc["ggn_W"]), np.asarray(doc["ggn_b"]))


def fit_laplace(denoiser: MLPDenoiser, dataset: Iterable[tuple], prior_precision: float = 1.0) -> LaplacePosterior:
    """Accumulate the Gauss-Newton diagonal of the squared loss over (x_n, y, n) inputs.

    For a linear head with shared features a, every output row j gets the
    same data precision sum(a_k^2); the bias gets the number of frames.
    """
    phi = np.zeros(denoiser.feature_size)
    count = 0
    for x_n, y, n in dataset:
        a = denoiser.features(x_n, y, n).reshape(-1, denoiser.feature_size)
        phi += (a * a).sum(axis=0)
        count += a.shape[0]
    if count == 0:
        raise ValueError("cannot fit a Laplace posterior on an empty dataset")
    ggn_W = np.broadcast_to(phi, (denoiser.dim, denoiser.feature_size)).copy()
    return LaplacePosterior(prior_precision, ggn_W, np.full(denoiser.dim, float(count)))


def predict_with_variance(denoiser, posterior: LaplacePosterior, x_n, y, n):
    """Predictive mean and per-entry variance gamma^2 of x_hat."""
    if posterior is None:
        raise ValueError("a fitted Laplace posterior is required")
    if hasattr(denoiser, "predict_and_features"):
        mean, a = denoiser.predict_and_features(x_n, y, n)
    else:
        mean, a = denoiser.predict(x_n, y, n), denoiser.features(x_n, y, n)
    return mean, posterior.output_variance(a)


def save_checkpoint(path, denoiser: MLPDenoiser, extra: dict | None = None) -> None:
    doc = {"denoiser": denoiser.to_json()}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[MLPDenoiser, dict]:
    doc = json.loads(Path(path).read_text())
    return MLPDenoiser.from_json(doc.pop("denoiser")), doc
