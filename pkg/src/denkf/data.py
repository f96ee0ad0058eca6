"""Observation assembly, yaw augmentation, synthetic IMU sessions and CSV I/O.

A raw observation is a 22-vector ``[dt, theta_sw(6), v(3), alpha(3),
gamma(3), phi(3), rho, r_h(2)]`` and a pose state a 14-vector ``[q_l(6),
q_u(6), r_h(2)]`` (see :mod:`denkf.layout`). Segment rotations in the state
are relative to the body heading; the calibrated watch orientation and the
headings are in the global frame.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import layout, rotmath, wire
from .errors import (EmptyInterval, InvalidConfig, NotCalibrated, ParseError,
                     SchemaMismatch)
from .kinematics import ArmConfig

HEADER = ["subject", "motion"] + layout.RAW_NAMES + layout.STATE_NAMES
_YAW_TAG = "@yaw"


# -- containers --------------------------------------------------------------

@dataclass
class Trajectory:
    observations: np.ndarray    # (T, 22)
    states: np.ndarray          # (T, 14)
    subject: str = "synth"
    motion: str = "unknown"
    yaw_offset: float = 0.0     # accumulated augmentation (radians)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float).reshape(-1, layout.RAW_DIM)
        self.states = np.asarray(self.states, dtype=float).reshape(-1, layout.STATE_DIM)
        if len(self.observations) != len(self.states):
            raise ValueError("observation and state counts differ")

    def __len__(self):
        return len(self.states)

    def pairs(self):
        return list(zip(self.observations, self.states))

    def timestamps(self, t0=0.0):
        return t0 + np.cumsum(self.observations[:, layout.DT])

    @property
    def key(self):
        """Motion tag as written to CSV (augmentation suffix included)."""
        if self.yaw_offset == 0.0:
            return self.motion
        return f"{self.motion}{_YAW_TAG}{self.yaw_offset!r}"


def make_state(q_l, q_u, r_h):
    return np.concatenate([q_l, q_u, r_h], axis=-1)


def make_observation(dt, theta_sw, v, alpha, gamma, phi, rho, r_h):
    return np.concatenate([[dt], theta_sw, v, alpha, gamma, phi, [rho], r_h])


# -- live assembly -----------------------------------------------------------

def assemble_observation(watch_pkts, phone_pkt, calib, prev_timestamp):
    """Build one raw observation from the watch packets received since the
    previous observation at ``prev_timestamp`` and the latest phone packet.
    """
    if calib is None or not calib.captured:
        raise NotCalibrated("no calibration captured")
    if not watch_pkts:
        raise EmptyInterval("no watch packets since the last observation")
    if phone_pkt is None:
        raise NotCalibrated("no phone packet received")
    last = watch_pkts[-1]
    dt = last.timestamp - prev_timestamp
    if not dt > 0:
        raise EmptyInterval(f"non-positive interval {dt}")
    alpha = np.mean([p.lin_acc for p in watch_pkts], axis=0)
    gamma = np.mean([p.gravity for p in watch_pkts], axis=0)
    phi = np.mean([p.gyro for p in watch_pkts], axis=0)
    theta = rotmath.quat_to_sixd(rotmath.calibrate(calib.watch_init, rotmath.quat_normalize(last.quat)))
    rho = last.pressure - calib.pressure_init
    r_h = rotmath.up_axis_yaw(rotmath.calibrate(calib.phone_init, rotmath.quat_normalize(phone_pkt.quat)))
    return make_observation(dt, theta, alpha * dt, alpha, gamma, phi, rho, r_h)


class ObservationAssembler:
    """Per-session assembly state: calibration, last phone packet and the
    timestamp of the previous observation.

    The first watch packet seen after a phone packet is consumed as the
    calibration reading and yields no observation; afterwards every watch
    packet yields one observation.
    """

    def __init__(self, calib=None):
        self.calib = calib
        self.phone = None
        self.prev_timestamp = None
        self.dropped_uncalibrated = 0

    def recalibrate(self):
        self.calib = None
        self.prev_timestamp = None

    def add(self, pkt):
        """Feed one packet; returns ``(timestamp, observation)`` or ``None``."""
        if pkt.device == wire.PHONE:
            self.phone = pkt
            return None
        if self.calib is None:
            if self.phone is None:
                self.dropped_uncalibrated += 1
                return None
            self.calib = wire.capture_calibration(pkt, self.phone)
            self.prev_timestamp = pkt.timestamp
            return None
        if self.prev_timestamp is None:
            self.prev_timestamp = pkt.timestamp
            return None
        obs = assemble_observation([pkt], self.phone, self.calib, self.prev_timestamp)
        self.prev_timestamp = pkt.timestamp
        return pkt.timestamp, obs


def packets_to_observations(packets):
    """Offline assembly of a packet sequence; returns ``(timestamps, obs)``."""
    asm = ObservationAssembler()
    ts, obs = [], []
    for pkt in packets:
        out = asm.add(pkt)
        if out is not None:
            ts.append(out[0])
            obs.append(out[1])
    return np.array(ts), np.array(obs).reshape(-1, layout.RAW_DIM)


# -- augmentation ------------------------------------------------------------

def augment_yaw(traj, delta_yaw):
    """Simulate the same session with the body turned by ``delta_yaw``.

    Only globally referenced quantities change: the calibrated watch
    orientation and both headings. Segment rotations are body-relative and
    the IMU channels live in the watch frame, so they are untouched.
    """
    if delta_yaw == 0:
        return replace(traj, observations=traj.observations.copy(), states=traj.states.copy())
    R = rotmath.yaw_matrix(np.array([math.sin(delta_yaw), math.cos(delta_yaw)]))
    obs = traj.observations.copy()
    states = traj.states.copy()
    theta = obs[:, layout.THETA_SW]
    obs[:, 1:4] = theta[:, 0:3] @ R.T
    obs[:, 4:7] = theta[:, 3:6] @ R.T
    obs[:, layout.RAW_R_HIP] = rotmath.rotate_yaw_sincos(obs[:, layout.RAW_R_HIP], delta_yaw)
    states[:, layout.R_HIP] = rotmath.rotate_yaw_sincos(states[:, layout.R_HIP], delta_yaw)
    return replace(traj, observations=obs, states=states, yaw_offset=traj.yaw_offset + delta_yaw)


def augment_dataset(trajectories, n_yaws=8):
    """``n_yaws`` evenly spaced headings in [0, 2pi) per trajectory (0 keeps
    the original)."""
    return [augment_yaw(t, 2.0 * math.pi * k / n_yaws) for t in trajectories for k in range(n_yaws)]


# -- synthesis ---------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    mean: float = 0.0               # degrees
    rate: float = 0.0               # degrees / s
    waves: tuple = ()               # (amplitude deg, frequency Hz, phase rad)


# body_yaw: heading about +Y; sh_yaw/sh_abd/sh_flex: shoulder (about Y, Z,
# -X); elbow: flexion (about -X); twist: forearm rotation about its long axis
CHANNELS = ("body_yaw", "sh_yaw", "sh_abd", "sh_flex", "elbow", "twist")

MOTIONS = {
    "arm_swing": dict(
        body_yaw=Channel(0, 0, ((25, 0.07, 0.0),)),
        sh_yaw=Channel(0, 0, ((8, 0.3, 0.0),)),
        sh_abd=Channel(10, 0, ((6, 0.45, 0.0),)),
        sh_flex=Channel(5, 0, ((35, 0.9, 0.0),)),
        elbow=Channel(25, 0, ((15, 0.9, 1.0),)),
        twist=Channel(0, 0, ((15, 0.9, 0.0),))),
    "waving": dict(
        body_yaw=Channel(0, 0, ((35, 0.05, 0.0),)),
        sh_yaw=Channel(10, 0, ((15, 0.3, 0.0),)),
        sh_abd=Channel(70, 0, ((10, 0.3, 0.0),)),
        sh_flex=Channel(30, 0, ((10, 0.2, 0.0),)),
        elbow=Channel(95, 0, ((35, 1.4, 0.0),)),
        twist=Channel(10, 0, ((25, 1.4, 0.0),))),
    "boxing": dict(
        body_yaw=Channel(0, 0, ((45, 0.08, 0.0),)),
        sh_yaw=Channel(-10, 0, ((10, 0.6, 0.0),)),
        sh_abd=Channel(20, 0, ((10, 0.6, 0.0),)),
        sh_flex=Channel(60, 0, ((30, 1.2, 0.0),)),
        elbow=Channel(80, 0, ((55, 1.2, math.pi),)),
        twist=Channel(60, 0, ((20, 1.2, 0.0),))),
    "clapping": dict(
        body_yaw=Channel(0, 0, ((20, 0.05, 0.0),)),
        sh_yaw=Channel(-30, 0, ((20, 2.0, 0.0),)),
        sh_abd=Channel(20, 0, ((10, 2.0, 0.0),)),
        sh_flex=Channel(60, 0, ((10, 1.0, 0.0),)),
        elbow=Channel(50, 0, ((15, 2.0, 0.0),)),
        twist=Channel(45, 0, ((10, 2.0, 0.0),))),
    "arm_raise": dict(
        body_yaw=Channel(0, 0, ((60, 0.04, 0.0),)),
        sh_yaw=Channel(0, 0, ((10, 0.1, 0.0),)),
        sh_abd=Channel(30, 0, ((25, 0.15, 0.0),)),
        sh_flex=Channel(75, 0, ((65, 0.3, 0.0),)),
        elbow=Channel(20, 0, ((15, 0.3, 0.0),)),
        twist=Channel(0, 0, ((30, 0.2, 0.0),))),
    "arm_cross": dict(
        body_yaw=Channel(0, 0, ((30, 0.06, 0.0),)),
        sh_yaw=Channel(-40, 0, ((30, 0.25, 0.0),)),
        sh_abd=Channel(15, 0, ((10, 0.25, 0.0),)),
        sh_flex=Channel(65, 0, ((20, 0.25, 0.0),)),
        elbow=Channel(100, 0, ((30, 0.25, 0.5),)),
        twist=Channel(30, 0, ((20, 0.25, 0.0),))),
    "figure_eight": dict(
        body_yaw=Channel(0, 0, ((120, 0.06, 0.0),)),
        sh_yaw=Channel(0, 0, ((5, 0.8, 0.0),)),
        sh_abd=Channel(8, 0, ((4, 0.8, 0.0),)),
        sh_flex=Channel(0, 0, ((20, 0.8, 0.0),)),
        elbow=Channel(20, 0, ((10, 0.8, 0.0),)),
        twist=Channel(0, 0, ((10, 0.8, 0.0),))),
    "jogging_circle": dict(
        body_yaw=Channel(0, 30, ()),
        sh_yaw=Channel(0, 0, ((5, 1.4, 0.0),)),
        sh_abd=Channel(10, 0, ((5, 1.4, 0.0),)),
        sh_flex=Channel(10, 0, ((30, 1.4, 0.0),)),
        elbow=Channel(90, 0, ((20, 1.4, 0.0),)),
        twist=Channel(20, 0, ((10, 1.4, 0.0),))),
    # deterministic test motions (never randomized)
    "static": dict(sh_yaw=Channel(10), sh_abd=Channel(20), sh_flex=Channel(30),
                   elbow=Channel(40), twist=Channel(15)),
    "yaw_spin": dict(body_yaw=Channel(0, 57.29577951308232)),
}
CATALOG = ("arm_swing", "waving", "boxing", "clapping", "arm_raise",
           "arm_cross", "figure_eight", "jogging_circle")
_FIXED = ("static", "yaw_spin")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic session description.

    Calibration posture: upper arm hanging down, elbow bent 90 degrees with
    the forearm pointing forward (+Z), body heading 0. The watch is mounted
    on the forearm with a +90 degree rotation about X, which makes the watch
    frame coincide with the global frame in that posture. The phone sits in
    a pocket rotated ``phone_pocket_yaw_deg`` about the vertical axis.
    """
    motion: str = "arm_swing"
    duration_s: float = 60.0
    rate_hz: float = 80.0
    subject: str = "synth"
    l_u: float = 0.30
    l_l: float = 0.25
    shoulder_offset: tuple = (0.2, 0.5, 0.0)
    watch_mount: tuple = (math.cos(math.pi / 4), math.sin(math.pi / 4), 0.0, 0.0)
    phone_pocket_yaw_deg: float = 20.0
    phone_every: int = 1
    gravity: float = 9.81
    pressure_ref_hpa: float = 1013.25
    pressure_slope_hpa_per_m: float = -0.12
    acc_noise: float = 0.0
    gyro_noise: float = 0.0
    pressure_noise: float = 0.0
    randomize: bool = True
    start_time: float = 0.0

    @property
    def arm(self):
        return ArmConfig(self.l_u, self.l_l, tuple(self.shoulder_offset))

    def validate(self):
        if not (self.duration_s > 0 and self.rate_hz > 0):
            raise InvalidConfig("duration and rate must be positive")
        if self.motion not in MOTIONS:
            raise InvalidConfig(f"unknown motion {self.motion!r}; choose from {sorted(MOTIONS)}")
        if self.phone_every < 1:
            raise InvalidConfig("phone_every must be >= 1")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("shoulder_offset", "watch_mount"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc


def _randomized(channels, rng):
    out = {}
    for name, ch in channels.items():
        waves = tuple((a * rng.uniform(0.8, 1.2), f * rng.uniform(0.85, 1.15),
                       p + rng.uniform(0.0, 2.0 * math.pi)) for a, f, p in ch.waves)
        spread = 30.0 if name == "body_yaw" else 5.0
        out[name] = Channel(ch.mean + rng.uniform(-spread, spread), ch.rate, waves)
    return out


def _channel_eval(ch, t):
    ang = np.full_like(t, ch.mean) + ch.rate * t
    rate = np.full_like(t, ch.rate)
    for a, f, p in ch.waves:
        w = 2.0 * math.pi * f
        ang = ang + a * np.sin(w * t + p)
        rate = rate + a * w * np.cos(w * t + p)
    return np.radians(ang), np.radians(rate)


def _axis_rot(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    o, z = np.ones_like(angle), np.zeros_like(angle)
    if axis == 0:
        m = [o, z, z, z, c, -s, z, s, c]
    elif axis == 1:
        m = [c, z, s, z, o, z, -s, z, c]
    else:
        m = [c, -s, z, s, c, z, z, z, o]
    return np.stack(m, axis=-1).reshape(angle.shape + (3, 3))


class _Motion:
    """Analytic joint-angle trajectories and the kinematic chain built on them."""

    def __init__(self, channels, cfg):
        self.channels = {n: channels.get(n, Channel()) for n in CHANNELS}
        self.cfg = cfg
        self.mount = rotmath.quat_to_matrix(rotmath.quat_normalize(np.array(cfg.watch_mount)))

    def factors(self, t):
        """(axis, angle, rate) of the rotation chain heading * R_l."""
        ang = {n: _channel_eval(ch, t) for n, ch in self.channels.items()}
        (psi, dpsi), (a, da), (b, db) = ang["body_yaw"], ang["sh_yaw"], ang["sh_abd"]
        (fl, dfl), (e, de), (tw, dtw) = ang["sh_flex"], ang["elbow"], ang["twist"]
        return [(1, psi, dpsi), (1, a, da), (2, b, db), (0, -fl, -dfl), (0, -e, -de), (1, tw, dtw)]

    def pose(self, t):
        f = self.factors(t)
        mats = [_axis_rot(ax, ang) for ax, ang, _ in f]
        R_u = mats[1] @ mats[2] @ mats[3]
        R_l = R_u @ mats[4] @ mats[5]
        return f[0][1], R_u, R_l, f, mats

    def wrist(self, t):
        psi, R_u, R_l, _, _ = self.pose(t)
        R_y = _axis_rot(1, psi)
        cfg = self.cfg
        local = (np.asarray(cfg.shoulder_offset) + R_u @ np.array([0.0, -cfg.l_u, 0.0])
                 + R_l @ np.array([0.0, -cfg.l_l, 0.0]))
        return np.einsum("...ij,...j->...i", R_y, local)

    def watch(self, t):
        """Global watch rotation matrix and watch-frame angular velocity."""
        _, _, _, f, mats = self.pose(t)
        prefix = np.broadcast_to(np.eye(3), t.shape + (3, 3))
        omega = np.zeros(t.shape + (3,))
        for (ax, _, rate), m in zip(f, mats):
            omega = omega + prefix[..., :, ax] * rate[..., None]
            prefix = prefix @ m
        G = prefix @ self.mount
        return G, np.einsum("...ji,...j->...i", G, omega)


def _calibration_pose(cfg):
    ch = {"elbow": Channel(90.0)}
    return _Motion(ch, cfg)


def synthesize_session(cfg, rng):
    """Generate the packet stream of a session plus aligned ground truth.

    :return: ``(packets, states)``; ``states[k]`` belongs to the k-th
        post-calibration watch packet.
    """
    cfg.validate()
    channels = MOTIONS[cfg.motion]
    if cfg.randomize and cfg.motion not in _FIXED:
        channels = _randomized(channels, rng)
    motion = _Motion(channels, cfg)
    n = int(round(cfg.duration_s * cfg.rate_hz))
    t = cfg.start_time + np.arange(1, n + 1) / cfg.rate_hz

    psi, R_u, R_l, _, _ = motion.pose(t)
    G, omega = motion.watch(t)
    h = 1e-4
    p0 = motion.wrist(t)
    acc_global = (motion.wrist(t + h) - 2.0 * p0 + motion.wrist(t - h)) / (h * h)
    GT = np.swapaxes(G, -1, -2)
    alpha = np.einsum("...ij,...j->...i", GT, acc_global)
    gamma = np.einsum("...ij,j->...i", GT, np.array([0.0, -cfg.gravity, 0.0]))
    pressure = cfg.pressure_ref_hpa + cfg.pressure_slope_hpa_per_m * p0[:, 1]
    if cfg.acc_noise:
        alpha = alpha + cfg.acc_noise * rng.standard_normal(alpha.shape)
    if cfg.gyro_noise:
        omega = omega + cfg.gyro_noise * rng.standard_normal(omega.shape)
    if cfg.pressure_noise:
        pressure = pressure + cfg.pressure_noise * rng.standard_normal(pressure.shape)
    watch_q = rotmath.matrix_to_quat(G)
    pocket = math.radians(cfg.phone_pocket_yaw_deg)
    phone_q = rotmath.yaw_quat(psi + pocket)

    cal = _calibration_pose(cfg)
    t_cal = np.array([cfg.start_time])
    G_cal, _ = cal.watch(t_cal)
    cal_pressure = cfg.pressure_ref_hpa + cfg.pressure_slope_hpa_per_m * cal.wrist(t_cal)[0, 1]
    packets = [
        wire.phone_packet(0, cfg.start_time, rotmath.yaw_quat(pocket)),
        wire.watch_packet(0, cfg.start_time, rotmath.matrix_to_quat(G_cal[0]), np.zeros(3),
                          G_cal[0].T @ np.array([0.0, -cfg.gravity, 0.0]), np.zeros(3), cal_pressure),
    ]
    phone_seq = 1
    for k in range(n):
        if (k + 1) % cfg.phone_every == 0:
            packets.append(wire.phone_packet(phone_seq, float(t[k]), phone_q[k]))
            phone_seq += 1
        packets.append(wire.watch_packet(k + 1, float(t[k]), watch_q[k], alpha[k], gamma[k],
                                         omega[k], float(pressure[k])))

    states = make_state(rotmath.quat_to_sixd(rotmath.matrix_to_quat(R_l)),
                        rotmath.quat_to_sixd(rotmath.matrix_to_quat(R_u)),
                        np.stack([np.sin(psi), np.cos(psi)], axis=-1))
    return packets, states


def synthesize(cfg, rng):
    """Synthetic trajectory; observations go through the live assembly path."""
    packets, states = synthesize_session(cfg, rng)
    _, obs = packets_to_observations(packets)
    return Trajectory(obs, states, cfg.subject, cfg.motion)


def session_rng(seed, subject_index, motion_index):
    return np.random.default_rng([seed, subject_index, motion_index])


def synthesize_dataset(motions, base=SynthConfig(), subjects=1, n_yaws=8, seed=0):
    """One session per (subject, motion), each with its own generator, then
    yaw augmentation. Subjects differ through the randomized motion
    amplitudes and phases."""
    trajs = []
    for j in range(subjects):
        subject = f"{base.subject}{j}" if subjects > 1 else base.subject
        for i, motion in enumerate(motions):
            cfg = replace(base, motion=motion, subject=subject)
            cfg.validate()
            trajs.append(synthesize(cfg, session_rng(seed, j, i)))
    return augment_dataset(trajs, n_yaws)


# -- CSV I/O -----------------------------------------------------------------

def save_dataset(trajectories, path):
    """One row per sample: subject, motion tag, 22 observation and 14 state
    columns. Consecutive rows with the same (subject, motion tag) form one
    trajectory, so neighbouring trajectories must differ in that key."""
    keys = [(t.subject, t.key) for t in trajectories]
    for a, b in zip(keys, keys[1:]):
        if a == b:
            raise ValueError(f"adjacent trajectories share the key {a}; they would merge on load")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for traj in trajectories:
            for o, s in zip(traj.observations, traj.states):
                w.writerow([traj.subject, traj.key] + [repr(float(v)) for v in o]
                           + [repr(float(v)) for v in s])


def _split_tag(tag):
    if _YAW_TAG in tag:
        motion, _, yaw = tag.rpartition(_YAW_TAG)
        try:
            return motion, float(yaw)
        except ValueError:
            pass
    return tag, 0.0


def load_dataset(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch("missing header row") from None
        if header != HEADER:
            raise SchemaMismatch(f"expected {len(HEADER)} columns {HEADER[:3]}..., "
                                 f"got {len(header)} columns")
        groups = []
        current, rows = None, []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HEADER):
                raise ParseError(f"line {lineno}: {len(row)} fields, expected {len(HEADER)}")
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"line {lineno}: non-finite value")
            key = (row[0], row[1])
            if key != current:
                if rows:
                    groups.append((current, rows))
                current, rows = key, []
            rows.append(vals)
        if rows:
            groups.append((current, rows))
    out = []
    for (subject, tag), rows in groups:
        arr = np.array(rows)
        motion, yaw = _split_tag(tag)
        out.append(Trajectory(arr[:, :layout.RAW_DIM], arr[:, layout.RAW_DIM:], subject, motion, yaw))
    return out


def dataset_size(trajectories):
    return sum(len(t) for t in trajectories)
