"""Smooth ground-elevation regression z = f(x, y) from sparse surface points.

Road height varies slowly compared to texture or semantics, so a small
feed-forward regressor on sinusoidally encoded planar coordinates is enough;
the encoding frequency count controls how much high-frequency relief the
field can express (L = 0 gives an almost-planar prior, larger L follows
sharper undulation).  Training is plain minibatch Adam with a fixed seed, so
a fit is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateExtentError


@dataclass
class ElevationConfig:
    num_frequencies: int = 6     # per axis; 0 disables the sinusoidal features
    hidden_units: int = 64
    iterations: int = 2000
    batch_size: int = 256
    learning_rate: float = 3e-3
    seed: int = 0


@dataclass
class ElevationField:
    """Trained regressor mapping ground-plane (x, y) to height z, in meters."""

    bounds: tuple                # (x_min, x_max, y_min, y_max)
    num_frequencies: int
    weights: list                # [W1, b1, W2, b2, W3, b3]
    z_mean: float
    z_std: float
    loss_history: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else float("nan")

    def contains(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x_min, x_max, y_min, y_max = self.bounds
        return ((xy[:, 0] >= x_min) & (xy[:, 0] <= x_max)
                & (xy[:, 1] >= y_min) & (xy[:, 1] <= y_max))

    def _normalize(self, xy):
        x_min, x_max, y_min, y_max = self.bounds
        sx = max(x_max - x_min, 1e-9)
        sy = max(y_max - y_min, 1e-9)
        out = np.empty_like(xy)
        out[:, 0] = 2.0 * (xy[:, 0] - x_min) / sx - 1.0
        out[:, 1] = 2.0 * (xy[:, 1] - y_min) / sy - 1.0
        return out

    def _encode(self, xy_n):
        feats = [xy_n]
        for l in range(self.num_frequencies):
            w = (2.0 ** l) * np.pi
            feats.append(np.sin(w * xy_n))
            feats.append(np.cos(w * xy_n))
        return np.concatenate(feats, axis=1)

    def _forward(self, f):
        W1, b1, W2, b2, W3, b3 = self.weights
        h1 = np.tanh(f @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        return h1, h2, (h2 @ W3 + b3)[:, 0]

    def predict(self, xy) -> np.ndarray:
        """Heights at (N,2) query points; deterministic."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        _, _, zn = self._forward(self._encode(self._normalize(xy)))
        return zn * self.z_std + self.z_mean

    def refine(self, points, iterations: int = 200, seed: int = 1,
               learning_rate: float = 1e-3, batch_size: int = 256):
        """Continue training on (possibly re-weighted) surface points in place."""
        xy, z = _as_xyz(points)
        _train(self, xy, z, iterations, batch_size, learning_rate,
               np.random.default_rng(seed))
        return self


def _as_xyz(points):
    if hasattr(points, "shape"):
        arr = np.asarray(points, dtype=float)
    else:
        arr = np.stack([np.asarray(p.position, dtype=float) for p in points])
    return arr[:, :2], arr[:, 2]


def _train(fieldobj: ElevationField, xy, z, iterations, batch_size, lr, rng):
    f_all = fieldobj._encode(fieldobj._normalize(xy))
    zn = (z - fieldobj.z_mean) / fieldobj.z_std
    n = xy.shape[0]
    W1, b1, W2, b2, W3, b3 = fieldobj.weights
    params = [W1, b1, W2, b2, W3, b3]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def full_loss():
        _, _, pred = fieldobj._forward(f_all)
        return float(np.mean((pred - zn) ** 2))

    fieldobj.loss_history.append(full_loss())
    t = 0
    for it in range(iterations):
        idx = rng.integers(0, n, size=min(batch_size, n))
        f = f_all[idx]
        target = zn[idx]
        h1 = np.tanh(f @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        pred = (h2 @ W3 + b3)[:, 0]
        diff = pred - target
        B = f.shape[0]
        dy = (2.0 / B) * diff[:, None]
        grads = [None] * 6
        grads[4] = h2.T @ dy
        grads[5] = dy.sum(axis=0)
        dh2 = (dy @ W3.T) * (1.0 - h2 * h2)
        grads[2] = h1.T @ dh2
        grads[3] = dh2.sum(axis=0)
        dh1 = (dh2 @ W2.T) * (1.0 - h1 * h1)
        grads[0] = f.T @ dh1
        grads[1] = dh1.sum(axis=0)
        t += 1
        for k, (p, g) in enumerate(zip(params, grads)):
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * (g * g)
            mh = m[k] / (1 - beta1 ** t)
            vh = v[k] / (1 - beta2 ** t)
            p -= lr * mh / (np.sqrt(vh) + eps)
        if (it + 1) % 100 == 0 or it == iterations - 1:
            fieldobj.loss_history.append(full_loss())
    return fieldobj


def fit_elevation(points, cfg: ElevationConfig | None = None) -> ElevationField:
    """Train an elevation field on surface points ((N,3) array or SemanticPoints).

    Raises DegenerateExtentError when the points are (near-)collinear in the
    ground plane, since a surface fit is then ill-posed.
    """
    cfg = cfg or ElevationConfig()
    xy, z = _as_xyz(points)
    if xy.shape[0] < 10:
        raise ValueError(f"need at least 10 points, got {xy.shape[0]}")
    centered = xy - xy.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] < 1e-6 * max(svals[0], 1e-12):
        raise DegenerateExtentError("surface points are collinear in x/y")

    bounds = (float(xy[:, 0].min()), float(xy[:, 0].max()),
              float(xy[:, 1].min()), float(xy[:, 1].max()))
    z_mean = float(z.mean())
    z_std = float(max(z.std(), 1e-8))
    rng = np.random.default_rng(cfg.seed)
    in_dim = 2 + 4 * cfg.num_frequencies
    H = cfg.hidden_units
    weights = [
        rng.normal(scale=1.0 / np.sqrt(in_dim), size=(in_dim, H)),
        np.zeros(H),
        rng.normal(scale=1.0 / np.sqrt(H), size=(H, H)),
        np.zeros(H),
        np.zeros((H, 1)),  # zero head: the fit starts at the mean plane
        np.zeros(1),
    ]
    fieldobj = ElevationField(bounds=bounds, num_frequencies=cfg.num_frequencies,
                              weights=weights, z_mean=z_mean, z_std=z_std)
    _train(fieldobj, xy, z, cfg.iterations, cfg.batch_size, cfg.learning_rate, rng)
    return fieldobj
