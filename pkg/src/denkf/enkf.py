"""Ensemble Kalman filter over learned (MLP) models.

Array arguments follow the shape convention ``(..., E, D)``: optional
leading batch dimensions, then ensemble members, then features. All
operations are differentiable; :func:`analysis` returns a cache that
:func:`analysis_backward` consumes.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import layout, rotmath
from .errors import (DegenerateSixD, InvalidEnsembleSize, ModelShapeMismatch,
                     SingularInnovation)

MAX_CONDITION = 1e12


@dataclass
class Ensemble:
    members: np.ndarray     # (E, D)
    t: int = 0

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 2 or self.members.shape[0] < 2:
            raise InvalidEnsembleSize(f"need an (E >= 2, D) member matrix, got {self.members.shape}")

    @property
    def size(self):
        return self.members.shape[0]

    def mean(self):
        return self.members.mean(axis=0)

    def spread(self):
        return self.members.std(axis=0)


class StateHistory:
    """Ring buffer of the last ``window`` member matrices, oldest first."""

    def __init__(self, window, ensembles=()):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._buf = deque(maxlen=window)
        for e in ensembles:
            self.push(e)

    def push(self, ensemble):
        members = ensemble.members if isinstance(ensemble, Ensemble) else np.asarray(ensemble)
        if self._buf and members.shape != self._buf[-1].shape:
            raise ModelShapeMismatch("ensemble shape changed within a history")
        self._buf.append(members)

    def __len__(self):
        return len(self._buf)

    @property
    def latest(self):
        return self._buf[-1]

    def matrix(self):
        """Flattened window ``(E, window * D)``; missing (oldest) slots are zero."""
        if not self._buf:
            raise ValueError("empty history")
        e, d = self._buf[-1].shape
        pad = [np.zeros((e, d))] * (self.window - len(self._buf))
        return np.concatenate(pad + list(self._buf), axis=1)


@dataclass
class FilterEstimate:
    mean: np.ndarray        # exported state (rotation blocks orthonormalized)
    spread: np.ndarray      # per-dimension ensemble std
    raw_mean: np.ndarray    # plain ensemble mean
    t: float = 0.0
    warmup: bool = False
    degraded: bool = False


def init_ensemble(x0, E, jitter, rng):
    if E < 2:
        raise InvalidEnsembleSize(f"ensemble size must be >= 2, got {E}")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    x0 = np.asarray(x0, dtype=float)
    members = np.repeat(x0[None, :], E, axis=0)
    if jitter > 0:
        members = members + jitter * rng.standard_normal(members.shape)
    return Ensemble(members, 0)


def _check_model(model, in_dim, out_dim, what):
    if model.in_dim != in_dim or model.out_dim != out_dim:
        raise ModelShapeMismatch(f"{what} model maps {model.in_dim}->{model.out_dim}, "
                                 f"expected {in_dim}->{out_dim}")


def propagate(window, transition, rng):
    """Stochastic transition forward on a flattened window ``(..., E, N*D)``."""
    return transition.forward(window, rng)


def predict(history, transition, rng):
    """One stochastic forward pass per member through the transition model."""
    if not len(history):
        raise ValueError("empty history")
    window = history.matrix()
    d = history.latest.shape[1]
    _check_model(transition, window.shape[1], d, "transition")
    members, _ = propagate(window, transition, rng)
    return Ensemble(members, 0)


def observe_ensemble(X, h, rng=None):
    """Map members to observation space; return ``(HX, HA)``."""
    X = X.members if isinstance(X, Ensemble) else np.asarray(X)
    _check_model(h, X.shape[-1], h.out_dim, "observation")
    hx, _ = h.forward(X, rng)
    return hx, hx - hx.mean(axis=-2, keepdims=True)


def sample_sensor(y_raw, s, E, rng):
    """E stochastic sensor-model forwards on the same raw input.

    :return: ``(Y, y_mean)`` with shapes ``(..., E, D)`` and ``(..., D)``
    """
    y_raw = np.asarray(y_raw, dtype=float)
    _check_model(s, y_raw.shape[-1], s.out_dim, "sensor")
    tiled = np.broadcast_to(y_raw[..., None, :], y_raw.shape[:-1] + (E, y_raw.shape[-1]))
    Y, _ = s.forward(tiled, rng)
    return Y, Y.mean(axis=-2)


def innovation_covariance(HA, R_diag):
    """``S = HA^T HA / (E - 1) + diag(R)``."""
    HA = np.asarray(HA, dtype=float)
    E = HA.shape[-2]
    S = np.swapaxes(HA, -1, -2) @ HA / (E - 1)
    idx = np.arange(HA.shape[-1])
    S[..., idx, idx] += np.asarray(R_diag, dtype=float)
    return S


def _cholesky(S):
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc
    eig = np.linalg.eigvalsh(S)
    cond = eig[..., -1] / eig[..., 0]
    if np.any(cond > MAX_CONDITION):
        raise SingularInnovation(f"innovation covariance condition number {np.max(cond):.3g}")
    return L


def _cho_solve(L, B):
    """Solve ``(L L^T) Z = B`` with two triangular solves."""
    return np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, B))


def kalman_update(X, HX, HA, Y, S):
    """Perturbed-observation update: each member moves by ``K (y_i - h(x_i))``
    with ``K = A^T HA S^-1 / (E - 1)``."""
    X_post, _ = _update(np.asarray(X, dtype=float), np.asarray(HX, dtype=float),
                        np.asarray(HA, dtype=float), np.asarray(Y, dtype=float), S)
    return X_post


def kalman_gain(X, HA, S):
    X = np.asarray(X, dtype=float)
    E = X.shape[-2]
    A = X - X.mean(axis=-2, keepdims=True)
    C = np.swapaxes(A, -1, -2) @ HA / (E - 1)
    L = _cholesky(S)
    # K = C S^-1  <=>  K^T = S^-1 C^T
    return np.swapaxes(_cho_solve(L, np.swapaxes(C, -1, -2)), -1, -2)


def _update(X, HX, HA, Y, S):
    E = X.shape[-2]
    A = X - X.mean(axis=-2, keepdims=True)
    C = np.swapaxes(A, -1, -2) @ HA / (E - 1)
    L = _cholesky(S)
    innov = Y - HX
    Z = np.swapaxes(_cho_solve(L, np.swapaxes(innov, -1, -2)), -1, -2)   # innov S^-1
    X_post = X + Z @ np.swapaxes(C, -1, -2)
    return X_post, dict(A=A, C=C, L=L, Z=Z, E=E)


def analysis(X, HX, Y, R_diag):
    """Full measurement update from predicted members, their observations,
    sampled sensor observations and the noise diagonal.

    :return: ``(X_post, cache)``
    """
    HA = HX - HX.mean(axis=-2, keepdims=True)
    S = innovation_covariance(HA, R_diag)
    X_post, cache = _update(X, HX, HA, Y, S)
    cache["HA"] = HA
    return X_post, cache


def analysis_backward(cache, dX_post):
    """Vector-Jacobian product of :func:`analysis`.

    :return: gradients w.r.t. ``(X, HX, Y, R_diag)``
    """
    A, C, L, Z, HA, E = (cache[k] for k in ("A", "C", "L", "Z", "HA", "E"))
    T = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
    G = dX_post
    dX = G.copy()
    dZ = G @ C
    dC = T(G) @ Z
    dI = T(_cho_solve(L, T(dZ)))
    dS = -T(Z) @ dI
    dY = dI
    dHX = -dI
    dHA = (HA @ (dS + T(dS)) + A @ dC) / (E - 1)
    dA = HA @ T(dC) / (E - 1)
    dR = np.diagonal(dS, axis1=-2, axis2=-1).copy()
    dX += dA - dA.mean(axis=-2, keepdims=True)
    dHX += dHA - dHA.mean(axis=-2, keepdims=True)
    return dX, dHX, dY, dR


def _export_state(mean):
    """Orthonormalize the 6D blocks and normalize the heading of a pose state.
    Degenerate blocks fall back to the identity rotation."""
    out = mean.copy()
    for block in (layout.Q_LOWER, layout.Q_UPPER):
        try:
            out[block] = rotmath.orthonormalize_sixd(mean[block])
        except DegenerateSixD:
            out[block] = rotmath.IDENTITY_SIXD
    n = np.linalg.norm(mean[layout.R_HIP])
    out[layout.R_HIP] = mean[layout.R_HIP] / n if n > 1e-12 else np.array([0.0, 1.0])
    return out


def estimate(X, t=0.0, warmup=False, degraded=False):
    members = X.members if isinstance(X, Ensemble) else np.asarray(X, dtype=float)
    raw = members.mean(axis=0)
    spread = members.std(axis=0)
    mean = _export_state(raw) if raw.shape[-1] == layout.STATE_DIM else raw.copy()
    return FilterEstimate(mean, spread, raw, t, warmup, degraded)
