"""Value-function approximators with exact parameter gradients.

Two representations share one small interface:

* ``value(s)``          V(s; theta), vectorised over states
* ``grad(s)``           dV(s)/dtheta for a single state, flat layout
* ``vjp(s, c)``         sum_m c_m dV(s_m)/dtheta without forming per-state gradients
* ``forward(s)`` / ``backward(cache, c)``   the same, split so one forward pass
                        can serve both residuals and gradient
* ``params`` / ``with_params(theta)``

Approximators are immutable; trainers build new ones from updated vectors.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from pathlib import Path

import numpy as np

from .env import make_rng
from .errors import SpecError

HIDDEN = 50


class TabularValues:
    """One free value per discrete state: ``V(i) = v[i]``."""

    kind = "tabular"

    def __init__(self, values):
        v = np.array(values, dtype=float)
        if v.ndim != 1:
            raise SpecError("tabular values must be a vector")
        v.setflags(write=False)
        self.values = v

    @property
    def n_params(self) -> int:
        return self.values.size

    @property
    def params(self) -> np.ndarray:
        return self.values

    def with_params(self, theta) -> "TabularValues":
        return TabularValues(theta)

    def value(self, s):
        if not np.all(np.isfinite(self.values)):
            raise SpecError("non-finite tabular values")
        out = self.values[np.asarray(s, dtype=np.int64)]
        return float(out) if np.ndim(out) == 0 else out

    def grad(self, s) -> np.ndarray:
        g = np.zeros(self.n_params)
        g[int(s)] = 1.0
        return g

    def forward(self, s):
        s = np.asarray(s, dtype=np.int64)
        return np.atleast_1d(self.value(s)), s

    def backward(self, cache, weights) -> np.ndarray:
        return np.bincount(cache, weights=np.asarray(weights, dtype=float), minlength=self.n_params)

    def vjp(self, s, weights) -> np.ndarray:
        return self.backward(np.asarray(s, dtype=np.int64), weights)


class CosineMLP:
    """``V(s) = L3(cos(L2(cos(L1(cos s, sin s)))))`` with two 50-wide hidden layers.

    ``L_k(x) = x @ w_k + b_k`` with ``w_k`` of shape (fan_in, fan_out). The
    flat parameter layout is ``w1, b1, w2, b2, w3, b3``, each row-major.

    If ``n_states`` is set, inputs are state indices and are fed to the
    network as the angle ``2 pi i / n_states``.
    """

    kind = "mlp"

    def __init__(self, theta, hidden: int = HIDDEN, n_states: int | None = None):
        self.hidden = hidden
        self.n_states = n_states
        theta = np.array(theta, dtype=float)
        if theta.shape != (self.param_count(hidden),):
            raise SpecError(f"expected {self.param_count(hidden)} parameters, got {theta.shape}")
        theta.setflags(write=False)
        self.theta = theta
        h = hidden
        shapes = [(2, h), (h,), (h, h), (h,), (h, 1), (1,)]
        views, k = [], 0
        for shp in shapes:
            size = math.prod(shp)
            views.append(theta[k:k + size].reshape(shp))
            k += size
        self.w1, self.b1, self.w2, self.b2, self.w3, self.b3 = views

    @staticmethod
    def param_count(hidden: int = HIDDEN) -> int:
        return (2 * hidden + hidden) + (hidden * hidden + hidden) + (hidden + 1)

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def params(self) -> np.ndarray:
        return self.theta

    def with_params(self, theta) -> "CosineMLP":
        return CosineMLP(theta, hidden=self.hidden, n_states=self.n_states)

    def output_bound(self) -> float:
        return float(np.abs(self.w3).sum() + abs(self.b3[0]))

    def _angles(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.n_states is not None:
            s = 2.0 * math.pi * s / self.n_states
        return s

    def forward(self, s):
        if not np.all(np.isfinite(self.theta)):
            raise SpecError("non-finite network parameters")
        a = self._angles(s)
        x = np.stack([np.cos(a), np.sin(a)], axis=1)
        z1 = x @ self.w1 + self.b1
        h1 = np.cos(z1)
        z2 = h1 @ self.w2 + self.b2
        h2 = np.cos(z2)
        out = (h2 @ self.w3)[:, 0] + self.b3[0]
        return out, (x, z1, h1, z2, h2)

    def value(self, s):
        out, _ = self.forward(s)
        return float(out[0]) if np.ndim(s) == 0 else out

    def vjp(self, s, weights) -> np.ndarray:
        return self.backward(self.forward(s)[1], weights)

    def backward(self, cache, weights) -> np.ndarray:
        c = np.atleast_1d(np.asarray(weights, dtype=float))
        x, z1, h1, z2, h2 = cache
        dw3 = h2.T @ c
        db3 = c.sum()
        dz2 = -np.sin(z2) * (c[:, None] * self.w3[:, 0])
        dw2 = h1.T @ dz2
        db2 = dz2.sum(axis=0)
        dz1 = -np.sin(z1) * (dz2 @ self.w2.T)
        dw1 = x.T @ dz1
        db1 = dz1.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2, dw3.ravel(), [db3]])

    def grad(self, s) -> np.ndarray:
        return self.vjp([s], [1.0])


def init_params(kind: str, seed: int = 0, n: int | None = None, *, hidden: int = HIDDEN,
                n_states: int | None = None, purpose: str = "init"):
    """Fresh approximator: tabular zeros, or an MLP with N(0, 1/fan_in) weights and zero biases."""
    if kind == "tabular":
        if n is None:
            raise SpecError("tabular init needs the state count n")
        return TabularValues(np.zeros(n))
    if kind != "mlp":
        raise SpecError(f"unknown approximator kind {kind!r}")
    rng = make_rng(seed, purpose)
    h = hidden
    parts = [
        rng.normal(0.0, 1.0 / math.sqrt(2), size=2 * h),
        np.zeros(h),
        rng.normal(0.0, 1.0 / math.sqrt(h), size=h * h),
        np.zeros(h),
        rng.normal(0.0, 1.0 / math.sqrt(h), size=h),
        np.zeros(1),
    ]
    return CosineMLP(np.concatenate(parts), hidden=h, n_states=n_states)


def save_checkpoint(path, approx, seed: int | None = None) -> Path:
    path = Path(path)
    header = {"kind": approx.kind, "dims": int(approx.n_params), "seed": seed}
    if approx.kind == "mlp":
        header.update(hidden=approx.hidden, n_states=approx.n_states)
    arrays = {"theta": np.asarray(approx.params), "header": np.array(json.dumps(header, sort_keys=True))}
    # fixed member timestamps keep the file byte-identical across reruns
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_checkpoint(path):
    """Return ``(approximator, header)`` from a file written by :func:`save_checkpoint`."""
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        theta = data["theta"].copy()
    if theta.size != header["dims"]:
        raise SpecError(f"checkpoint dims {header['dims']} != stored {theta.size}")
    if header["kind"] == "tabular":
        return TabularValues(theta), header
    return CosineMLP(theta, hidden=header["hidden"], n_states=header["n_states"]), header
