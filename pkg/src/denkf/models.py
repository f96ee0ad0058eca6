"""The four learned submodels, the differentiable filter step, training and
evaluation.

Submodels (all MLPs from :mod:`denkf.neuralnet`):

* ``transition``  window of N past states -> next state (stochastic)
* ``observation`` state -> learned observation (same 14-dim space)
* ``sensor``      raw observation(s) -> learned observation (stochastic)
* ``noise``       mean learned observation -> diagonal measurement noise
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import enkf, layout, neuralnet as nn
from .errors import EmptyDataset, ModelShapeMismatch, ShapeMismatch
from .kinematics import ArmConfig, state_kinematics
from .rotmath import wrap_angle, yaw_to_angle

log = logging.getLogger(__name__)

NETS = ("transition", "observation", "sensor", "noise")
DEFAULT_HIDDEN = {
    "transition": (128, 128, 128),
    "sensor": (256, 256, 256),
    "observation": (64, 64),
    "noise": (64, 64),
}
DEFAULT_DROPOUT = {"transition": 0.1, "sensor": 0.1, "observation": 0.0, "noise": 0.0}
NOISE_FLOOR = 1e-6
# softplus^-1(0.01): start with a measurement variance of about 0.01
_NOISE_BIAS = math.log(math.expm1(0.01))


@dataclass
class ModelBundle:
    transition: nn.Network
    observation: nn.Network
    sensor: nn.Network
    noise: nn.Network
    window: int = 5
    sensor_window: int = 1
    state_dim: int = layout.STATE_DIM
    raw_dim: int = layout.RAW_DIM

    def __post_init__(self):
        d = self.state_dim
        want = {
            "transition": (self.window * d, d),
            "observation": (d, d),
            "sensor": (self.sensor_window * self.raw_dim, d),
            "noise": (d, d),
        }
        for name, (i, o) in want.items():
            net = getattr(self, name)
            if (net.in_dim, net.out_dim) != (i, o):
                raise ModelShapeMismatch(f"{name} maps {net.in_dim}->{net.out_dim}, expected {i}->{o}")

    def networks(self):
        return {name: getattr(self, name) for name in NETS}

    def copy(self):
        nets = {k: v.copy() for k, v in self.networks().items()}
        return ModelBundle(**nets, window=self.window, sensor_window=self.sensor_window,
                           state_dim=self.state_dim, raw_dim=self.raw_dim)

    def metadata(self):
        return {"window": self.window, "sensor_window": self.sensor_window,
                "state_dim": self.state_dim, "raw_dim": self.raw_dim,
                "noise_floor": NOISE_FLOOR, "noise_activation": "softplus"}

    def save(self, path):
        nets = self.networks()
        nn.save_checkpoint(path, {k: v.params for k, v in nets.items()},
                           {k: v.dropout for k, v in nets.items()}, self.metadata())

    @classmethod
    def load(cls, path):
        params, dropout, meta = nn.load_checkpoint(path)
        nets = {k: nn.Network(params[k], dropout[k]) for k in NETS}
        return cls(**nets, window=meta["window"], sensor_window=meta.get("sensor_window", 1),
                   state_dim=meta.get("state_dim", layout.STATE_DIM),
                   raw_dim=meta.get("raw_dim", layout.RAW_DIM))


def init_bundle(rng, window=5, sensor_window=1, hidden=None, dropout=None,
                state_dim=layout.STATE_DIM, raw_dim=layout.RAW_DIM, sensor_stats=None):
    """Fresh bundle. Transition and observation nets carry a skip connection
    and a small output layer, so they start close to "repeat the last state"
    and the identity map respectively.

    ``sensor_stats = (mean, std)`` of the sensor input (see
    :func:`input_stats`) is folded into the sensor net's first layer so it
    sees standardized features.
    """
    hidden = {**DEFAULT_HIDDEN, **(hidden or {})}
    dropout = {**DEFAULT_DROPOUT, **(dropout or {})}
    d = state_dim
    ins = {"transition": window * d, "observation": d, "sensor": sensor_window * raw_dim, "noise": d}
    nets = {}
    for name in NETS:
        dims = [ins[name], *hidden[name], d]
        params = nn.init_mlp(dims, rng, skip=name in ("transition", "observation"))
        if name == "transition":
            params.weights[-1] *= 0.1
        elif name == "observation":
            params.weights[-1] *= 0.01
        elif name == "noise":
            params.weights[-1] *= 0.1
            params.biases[-1][:] = _NOISE_BIAS
        if name == "sensor" and sensor_stats is not None:
            _fold_standardization(params, *sensor_stats)
        nets[name] = nn.Network(params, dropout[name])
    return ModelBundle(**nets, window=window, sensor_window=sensor_window, state_dim=d, raw_dim=raw_dim)


def input_stats(dataset, sensor_window=1, min_std=1e-2):
    """Per-feature mean and (floored) std of the sensor input over a dataset."""
    if not dataset:
        raise EmptyDataset("no samples for input statistics")
    x = np.concatenate([sensor_inputs(t.observations, sensor_window) for t in dataset])
    return x.mean(axis=0), np.maximum(x.std(axis=0), min_std)


def _fold_standardization(params, mean, std):
    """Make layer 0 act on ``(x - mean) / std`` instead of ``x``."""
    w = params.weights[0] / std
    params.biases[0] -= w @ mean
    params.weights[0] = w


def noise_forward(bundle, y_mean, rng=None, with_tape=False):
    """Diagonal of the measurement noise covariance: ``eps + softplus(mlp)``."""
    y_mean = np.asarray(y_mean, dtype=float)
    if y_mean.shape[-1] != bundle.noise.in_dim:
        raise ShapeMismatch(f"noise model expects {bundle.noise.in_dim} inputs, got {y_mean.shape[-1]}")
    u, tape = bundle.noise.forward(y_mean, rng)
    R = NOISE_FLOOR + nn.softplus(u)
    return (R, u, tape) if with_tape else R


# -- differentiable filter step ----------------------------------------------

@dataclass
class StepTapes:
    transition: nn.GradTape
    observation: nn.GradTape = None
    sensor: nn.GradTape = None
    noise: nn.GradTape = None
    analysis: dict = None
    X: np.ndarray = None            # predicted members
    y_mean: np.ndarray = None
    noise_pre: np.ndarray = None
    R: np.ndarray = None


def _step(bundle, window, sensor_in, rng, E, update=True):
    """Predict + update on arrays shaped ``(..., E, N*D)`` / ``(..., k*22)``."""
    X, t_f = enkf.propagate(window, bundle.transition, rng)
    if not update:
        return X, StepTapes(t_f, X=X)
    HX, t_h = bundle.observation.forward(X, rng)
    tiled = np.broadcast_to(sensor_in[..., None, :], sensor_in.shape[:-1] + (E, sensor_in.shape[-1]))
    Y, t_s = bundle.sensor.forward(tiled, rng)
    y_mean = Y.mean(axis=-2)
    R, u, t_r = noise_forward(bundle, y_mean, rng, with_tape=True)
    X_post, cache = enkf.analysis(X, HX, Y, R)
    return X_post, StepTapes(t_f, t_h, t_s, t_r, cache, X, y_mean, u, R)


def _step_backward(tapes, E, dX_post, dX_pred=None, dy_mean=None):
    """Reverse pass of :func:`_step`. Returns ``(param_grads, d_window)``."""
    dX, dHX, dY, dR = enkf.analysis_backward(tapes.analysis, dX_post)
    if dX_pred is not None:
        dX = dX + dX_pred
    du = dR * nn.sigmoid(tapes.noise_pre)
    g_r = nn.backward(tapes.noise, du)
    dym = g_r.input if dy_mean is None else g_r.input + dy_mean
    dY = dY + dym[..., None, :] / E
    g_s = nn.backward(tapes.sensor, dY)
    g_h = nn.backward(tapes.observation, dHX)
    g_f = nn.backward(tapes.transition, dX + g_h.input)
    return {"transition": g_f, "observation": g_h, "sensor": g_s, "noise": g_r}, g_f.input


def filter_step(bundle, history, y_raw, rng, update=True, t=0.0, warmup=False):
    """One predict/update cycle on a single stream.

    ``y_raw`` is the sensor-model input (one raw observation, or the
    concatenated window when ``bundle.sensor_window > 1``). The history is
    not modified. With ``update=False`` only the prediction runs and the
    estimate is flagged degraded.
    """
    E = history.latest.shape[0]
    window = history.matrix()
    if window.shape[-1] != bundle.transition.in_dim:
        raise ModelShapeMismatch(f"history window has {window.shape[-1]} features, "
                                 f"transition expects {bundle.transition.in_dim}")
    X_post, tapes = _step(bundle, window, np.asarray(y_raw, dtype=float), rng, E, update)
    ens = enkf.Ensemble(X_post)
    est = enkf.estimate(ens, t=t, warmup=warmup, degraded=not update)
    return ens, est, tapes


class StreamingFilter:
    """Stateful single-stream filter used both offline and by the live
    session. The first observation initializes the ensemble around the
    sensor model's mean prediction."""

    def __init__(self, bundle, ensemble_size=32, rng=None, jitter=0.05):
        if ensemble_size < 2:
            raise enkf.InvalidEnsembleSize(f"ensemble size must be >= 2, got {ensemble_size}")
        self.bundle = bundle
        self.E = ensemble_size
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.jitter = jitter
        self.reset()

    def reset(self):
        self.history = enkf.StateHistory(self.bundle.window)
        self.raw = deque(maxlen=self.bundle.sensor_window)
        self.steps = 0

    def _sensor_input(self, y_raw):
        self.raw.append(np.asarray(y_raw, dtype=float))
        k = self.bundle.sensor_window
        pad = [np.zeros(self.bundle.raw_dim)] * (k - len(self.raw))
        return np.concatenate(pad + list(self.raw))

    def step(self, y_raw, t=0.0, update=True):
        s_in = self._sensor_input(y_raw)
        if not len(self.history):
            _, y_mean = enkf.sample_sensor(s_in, self.bundle.sensor, self.E, self.rng)
            self.history.push(enkf.init_ensemble(y_mean, self.E, self.jitter, self.rng))
        self.steps += 1
        ens, est, _ = filter_step(self.bundle, self.history, s_in, self.rng, update=update,
                                  t=t, warmup=self.steps <= self.bundle.window)
        self.history.push(ens)
        return est


def run_filter(bundle, observations, rng, ensemble_size=32, timestamps=None, jitter=0.05):
    """Filter a whole observation sequence; returns the list of estimates."""
    flt = StreamingFilter(bundle, ensemble_size, rng, jitter)
    if timestamps is None:
        timestamps = np.cumsum(np.asarray(observations)[:, layout.DT])
    return [flt.step(y, t=float(ts)) for y, ts in zip(observations, timestamps)]


# -- training data -----------------------------------------------------------

@dataclass
class Batch:
    sensor_in: np.ndarray   # (B, T, k*22)
    states: np.ndarray      # (B, T, 14) ground truth
    history: np.ndarray     # (B, N, 14) ground truth before the window, zero padded
    valid: np.ndarray       # (B, N) which history slots are real


def sensor_inputs(observations, k):
    """Per-step sensor input: the last k raw observations, zero padded."""
    obs = np.asarray(observations, dtype=float)
    if k == 1:
        return obs
    T, R = obs.shape
    padded = np.concatenate([np.zeros((k - 1, R)), obs])
    return np.concatenate([padded[j:j + T] for j in range(k)], axis=1)


class WindowSource:
    """Cuts trajectories into training windows of ``seq_len`` filter steps."""

    def __init__(self, trajectories, window, sensor_window, seq_len):
        self.inputs = [sensor_inputs(t.observations, sensor_window) for t in trajectories]
        self.states = [t.states for t in trajectories]
        self.N = window
        self.seq_len = seq_len

    def windows(self, rng=None):
        items = []
        for i, st in enumerate(self.states):
            off = int(rng.integers(self.seq_len)) if rng is not None else 0
            for s in range(1 + off, len(st) - self.seq_len + 1, self.seq_len):
                items.append((i, s))
        return items

    def batch(self, items):
        T, N = self.seq_len, self.N
        d = self.states[0].shape[1]
        B = len(items)
        hist = np.zeros((B, N, d))
        valid = np.zeros((B, N), dtype=bool)
        s_in = np.stack([self.inputs[i][s:s + T] for i, s in items])
        states = np.stack([self.states[i][s:s + T] for i, s in items])
        for b, (i, s) in enumerate(items):
            lo = max(0, s - N)
            hist[b, N - (s - lo):] = self.states[i][lo:s]
            valid[b, N - (s - lo):] = True
        return Batch(s_in, states, hist, valid)


# -- loss --------------------------------------------------------------------

def _rollout(bundle, batch, rng, E, jitter, lam_f, lam_s, need_grad):
    B, T, D = batch.states.shape
    N = bundle.window
    h0 = np.repeat(batch.history[:, None], E, axis=1)
    if jitter > 0:
        h0 = h0 + jitter * rng.standard_normal(h0.shape) * batch.valid[:, None, :, None]
    hist = [h0[:, :, j] for j in range(N)]
    tapes, parts = [], []
    sums = np.zeros(3)
    for t in range(T):
        window = np.concatenate(hist[-N:], axis=-1)
        X_post, tp = _step(bundle, window, batch.sensor_in[:, t], rng, E)
        hist.append(X_post)
        gt = batch.states[:, t]
        x_bar = X_post.mean(axis=1)
        x_pred = tp.X.mean(axis=1)
        sums += [np.mean((x_bar - gt) ** 2), np.mean((x_pred - gt) ** 2),
                 np.mean((tp.y_mean - gt) ** 2)]
        if need_grad:
            tapes.append(tp)
            parts.append((x_bar - gt, x_pred - gt, tp.y_mean - gt))
    comps = dict(zip(("end_to_end", "transition", "sensor"), (sums / T).tolist()))
    total = comps["end_to_end"] + lam_f * comps["transition"] + lam_s * comps["sensor"]
    if not need_grad:
        return total, comps, None

    c = 2.0 / (B * D * T)
    grads = {k: None for k in NETS}
    d_hist = [np.zeros((B, E, D)) for _ in range(N + T)]
    for t in range(T - 1, -1, -1):
        r_e, r_f, r_s = parts[t]
        dX_post = d_hist[N + t] + (c / E) * r_e[:, None, :]
        dX_pred = np.broadcast_to((lam_f * c / E) * r_f[:, None, :], dX_post.shape)
        g, d_win = _step_backward(tapes[t], E, dX_post, dX_pred, lam_s * c * r_s)
        for k in NETS:
            grads[k] = g[k] if grads[k] is None else _add_grads(grads[k], g[k])
        for j in range(N):
            d_hist[t + j] += d_win[..., j * D:(j + 1) * D]
    return total, comps, grads


def _add_grads(a, b):
    return nn.Gradients([x + y for x, y in zip(a.weights, b.weights)],
                        [x + y for x, y in zip(a.biases, b.biases)])


def loss(bundle, batch, rng, ensemble_size=32, lambda_f=1.0, lambda_s=1.0, jitter=0.0):
    """End-to-end MSE of the ensemble mean plus weighted transition and sensor
    supervision terms, averaged over the window's filter steps.

    :return: ``(total, {"end_to_end", "transition", "sensor"})``
    """
    _check_batch(bundle, batch)
    total, comps, _ = _rollout(bundle, batch, rng, ensemble_size, jitter, lambda_f, lambda_s, False)
    return total, comps


def loss_and_grad(bundle, batch, rng, ensemble_size=32, lambda_f=1.0, lambda_s=1.0, jitter=0.0):
    _check_batch(bundle, batch)
    return _rollout(bundle, batch, rng, ensemble_size, jitter, lambda_f, lambda_s, True)


def _check_batch(bundle, batch):
    if batch.states.ndim != 3 or batch.states.shape[-1] != bundle.state_dim:
        raise ShapeMismatch(f"states must be (B, T, {bundle.state_dim}), got {batch.states.shape}")
    if batch.sensor_in.shape[:2] != batch.states.shape[:2] or \
            batch.sensor_in.shape[-1] != bundle.sensor.in_dim:
        raise ShapeMismatch(f"sensor input {batch.sensor_in.shape} does not fit states "
                            f"{batch.states.shape} / sensor in_dim {bundle.sensor.in_dim}")
    if batch.history.shape != (batch.states.shape[0], bundle.window, bundle.state_dim):
        raise ShapeMismatch(f"history must be (B, {bundle.window}, {bundle.state_dim})")


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256           # filter steps per optimizer step
    lr: float = 1e-5
    ensemble: int = 32
    window: int = 5
    seq_len: int = 8                # truncated backprop length
    seed: int = 0
    lambda_f: float = 1.0
    lambda_s: float = 1.0
    val_fraction: float = 0.1
    jitter: float = 0.05
    max_val_windows: int = 512

    def __post_init__(self):
        for k in ("batch_size", "lr", "ensemble", "window", "seq_len"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.ensemble < 2:
            raise ValueError("ensemble must be >= 2")


def split_dataset(trajectories, val_fraction, rng):
    """Split by recording: yaw-augmented copies of one session stay together."""
    groups = defaultdict(list)
    for t in trajectories:
        groups[(t.subject, t.motion)].append(t)
    keys = sorted(groups)
    if len(keys) < 2 or val_fraction <= 0:
        return list(trajectories), list(trajectories)
    order = rng.permutation(len(keys))
    n_val = min(len(keys) - 1, max(1, int(round(val_fraction * len(keys)))))
    val_keys = {keys[i] for i in order[:n_val]}
    train = [t for k in keys if k not in val_keys for t in groups[k]]
    val = [t for k in keys if k in val_keys for t in groups[k]]
    return train, val


def _mean_loss(bundle, src, items, cfg, rng, per_batch):
    tot, comps, n = 0.0, defaultdict(float), 0
    for i in range(0, len(items), per_batch):
        chunk = items[i:i + per_batch]
        t, c = loss(bundle, src.batch(chunk), rng, cfg.ensemble, cfg.lambda_f, cfg.lambda_s, cfg.jitter)
        w = len(chunk)
        tot += t * w
        for k, v in c.items():
            comps[k] += v * w
        n += w
    return tot / n, {k: v / n for k, v in comps.items()}


@dataclass
class TrainState:
    """Everything needed to continue an interrupted run, in float64."""
    bundle: ModelBundle
    best: ModelBundle
    adam: dict
    epoch: int = 0
    best_val: float = math.inf
    base_seed: int = 0
    metrics: list = field(default_factory=list)

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        arrays = {}
        for role, b in (("params", self.bundle), ("best", self.best)):
            for name, net in b.networks().items():
                for i, p in enumerate(net.params.tensors()):
                    arrays[f"{role}/{name}/{i}"] = p
        for name, st in self.adam.items():
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                arrays[f"adam_m/{name}/{i}"] = m
                arrays[f"adam_v/{name}/{i}"] = v
        np.savez(os.path.join(path, "train_state.npz"), **arrays)
        meta = {"epoch": self.epoch, "best_val": self.best_val, "base_seed": self.base_seed,
                "adam_t": {k: s.t for k, s in self.adam.items()}, "metrics": self.metrics}
        with open(os.path.join(path, "train_state.json"), "w") as fh:
            json.dump(meta, fh)
        self.best.save(path)

    @classmethod
    def load(cls, path):
        best_f32 = ModelBundle.load(path)
        with open(os.path.join(path, "train_state.json")) as fh:
            meta = json.load(fh)
        arrays = np.load(os.path.join(path, "train_state.npz"))

        def fill(role):
            b = best_f32.copy()
            for name, net in b.networks().items():
                for i, p in enumerate(net.params.tensors()):
                    p[...] = arrays[f"{role}/{name}/{i}"]
            return b

        bundle, best = fill("params"), fill("best")
        adam = {}
        for name, net in bundle.networks().items():
            n = len(net.params.tensors())
            adam[name] = nn.AdamState([arrays[f"adam_m/{name}/{i}"].copy() for i in range(n)],
                                      [arrays[f"adam_v/{name}/{i}"].copy() for i in range(n)],
                                      meta["adam_t"][name])
        return cls(bundle, best, adam, meta["epoch"], meta["best_val"], meta["base_seed"],
                   meta["metrics"])


def train(bundle, dataset, config=TrainConfig(), rng=None, state_dir=None, resume=False,
          metrics_path=None, on_epoch=None):
    """Adam on all four submodels through the unrolled filter.

    Returns ``(best_bundle, metrics)`` where the best bundle has the lowest
    validation end-to-end loss among the initial parameters and every epoch.
    With ``state_dir`` the full training state is written after each epoch;
    ``resume=True`` continues from it.
    """
    if not dataset or not sum(len(t) for t in dataset):
        raise EmptyDataset("no training samples")
    if bundle.window != config.window:
        raise ValueError(f"bundle window {bundle.window} != config window {config.window}")
    base_seed = int(rng.integers(2 ** 31)) if rng is not None else config.seed

    if resume:
        st = TrainState.load(state_dir)
        base_seed = st.base_seed
    else:
        st = TrainState(bundle.copy(), bundle.copy(),
                        {k: nn.AdamState.zeros(n.params) for k, n in bundle.networks().items()},
                        base_seed=base_seed)
    train_set, val_set = split_dataset(dataset, config.val_fraction, np.random.default_rng([base_seed, 1]))
    seq = config.seq_len
    tr_src = WindowSource(train_set, bundle.window, bundle.sensor_window, seq)
    va_src = WindowSource(val_set, bundle.window, bundle.sensor_window, seq)
    val_items = va_src.windows()
    if len(val_items) > config.max_val_windows:
        pick = np.random.default_rng([base_seed, 2]).choice(len(val_items), config.max_val_windows,
                                                            replace=False)
        val_items = [val_items[i] for i in sorted(pick)]
    if not tr_src.windows() or not val_items:
        raise EmptyDataset(f"trajectories too short for windows of {seq} steps")
    per_batch = max(1, config.batch_size // seq)

    def validate(b):
        return _mean_loss(b, va_src, val_items, config, np.random.default_rng([base_seed, 3]), per_batch)

    if not resume:
        v_tot, v_comps = validate(st.bundle)
        st.best_val = v_comps["end_to_end"]
        rec = {"epoch": 0, "val_total": v_tot, **{f"val_{k}": v for k, v in v_comps.items()}}
        st.metrics.append(rec)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        log.info("initial validation end-to-end loss %.5f", st.best_val)

    for epoch in range(st.epoch, config.epochs):
        t0 = time.time()
        erng = np.random.default_rng([base_seed, 100 + epoch])
        items = tr_src.windows(erng)
        order = erng.permutation(len(items))
        items = [items[i] for i in order]
        acc, acc_c, n = 0.0, defaultdict(float), 0
        for i in range(0, len(items), per_batch):
            chunk = items[i:i + per_batch]
            total, comps, grads = loss_and_grad(st.bundle, tr_src.batch(chunk), erng, config.ensemble,
                                                config.lambda_f, config.lambda_s, config.jitter)
            for name, net in st.bundle.networks().items():
                nn.adam_step(net.params, grads[name], st.adam[name], config.lr)
            acc += total * len(chunk)
            for k, v in comps.items():
                acc_c[k] += v * len(chunk)
            n += len(chunk)
        v_tot, v_comps = validate(st.bundle)
        rec = {"epoch": epoch + 1, "train_total": acc / n,
               **{f"train_{k}": v / n for k, v in acc_c.items()},
               "val_total": v_tot, **{f"val_{k}": v for k, v in v_comps.items()},
               "seconds": time.time() - t0}
        if v_comps["end_to_end"] < st.best_val:
            st.best_val = v_comps["end_to_end"]
            st.best = st.bundle.copy()
            rec["best"] = True
        st.metrics.append(rec)
        st.epoch = epoch + 1
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch + 1, rec["train_total"],
                 v_tot, rec["seconds"])
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if state_dir:
            st.save(state_dir)
        if on_epoch is not None:
            on_epoch(rec)
    return st.best, list(st.metrics)


# -- evaluation --------------------------------------------------------------

def score_states(pred, true, arm=ArmConfig()):
    """Per-sample wrist/elbow error (cm) and absolute heading error (deg)."""
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    fp, ft = state_kinematics(pred, arm), state_kinematics(true, arm)
    wrist = 100.0 * np.linalg.norm(fp.wrist - ft.wrist, axis=-1)
    elbow = 100.0 * np.linalg.norm(fp.elbow - ft.elbow, axis=-1)
    hip = np.degrees(np.abs(wrap_angle(yaw_to_angle(pred[..., layout.R_HIP])
                                       - yaw_to_angle(true[..., layout.R_HIP]))))
    return {"wrist_cm": wrist, "elbow_cm": elbow, "hip_deg": hip}


def _summarize(per_traj):
    out = {}
    for key in ("wrist_cm", "elbow_cm", "hip_deg"):
        vals = np.concatenate([p[key] for _, p in per_traj]) if per_traj else np.zeros(0)
        out[key] = float(vals.mean()) if vals.size else float("nan")
    motions = defaultdict(list)
    for motion, p in per_traj:
        motions[motion].append((motion, p))
    out["per_motion"] = {
        m: {k: float(np.concatenate([p[k] for _, p in items]).mean())
            for k in ("wrist_cm", "elbow_cm", "hip_deg")}
        for m, items in sorted(motions.items())
    }
    out["samples"] = int(sum(len(p["wrist_cm"]) for _, p in per_traj))
    return out


def evaluate(bundle, dataset, arm=ArmConfig(), ensemble_size=32, seed=0, jitter=0.05):
    """Run the filter over every trajectory (trajectory i uses the generator
    ``default_rng([seed, i])``) and report mean errors plus throughput."""
    if not dataset:
        raise EmptyDataset("nothing to evaluate")
    per_traj, steps, elapsed = [], 0, 0.0
    for i, traj in enumerate(dataset):
        t0 = time.perf_counter()
        ests = run_filter(bundle, traj.observations, np.random.default_rng([seed, i]),
                          ensemble_size, jitter=jitter)
        elapsed += time.perf_counter() - t0
        steps += len(ests)
        pred = np.array([e.mean for e in ests])
        per_traj.append((traj.motion, score_states(pred, traj.states, arm)))
    out = _summarize(per_traj)
    out["hz"] = steps / elapsed if elapsed > 0 else float("inf")
    return out


def mean_state(dataset):
    """Average ground-truth state, exported as a valid pose."""
    allstates = np.concatenate([t.states for t in dataset])
    return enkf.estimate(allstates).mean


def evaluate_constant(state, dataset, arm=ArmConfig()):
    """Metrics of a predictor that always outputs ``state``."""
    if not dataset:
        raise EmptyDataset("nothing to evaluate")
    per_traj = [(t.motion, score_states(np.broadcast_to(state, t.states.shape), t.states, arm))
                for t in dataset]
    return _summarize(per_traj)
