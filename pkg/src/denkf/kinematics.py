"""Forward kinematics from pose state to elbow/wrist positions.

Segment rotations are expressed in the calibrated body frame (hip heading
removed). The identity rotation points a limb straight down (-Y).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layout, rotmath


@dataclass(frozen=True)
class ArmConfig:
    l_u: float = 0.30
    l_l: float = 0.25
    shoulder_offset: tuple = (0.2, 0.5, 0.0)

    def __post_init__(self):
        if self.l_u <= 0 or self.l_l <= 0:
            raise ValueError("segment lengths must be positive")


@dataclass
class ArmPose:
    elbow: np.ndarray
    wrist: np.ndarray
    shoulder: np.ndarray = field(default=None, repr=False)


def _limb(length):
    return np.array([0.0, -length, 0.0])


def fk_matrices(R_u, R_l, R_yaw, cfg):
    """Same as :func:`forward_kinematics` but on rotation matrices."""
    offset = np.asarray(cfg.shoulder_offset, dtype=float)
    shoulder = R_yaw @ offset
    elbow = shoulder + R_yaw @ (R_u @ _limb(cfg.l_u))
    wrist = elbow + R_yaw @ (R_l @ _limb(cfg.l_l))
    return ArmPose(elbow, wrist, shoulder)


def forward_kinematics(q_u, q_l, r_h, cfg=ArmConfig()):
    """Elbow and wrist positions (metres, hip-centred global frame).

    Vectorized over leading dimensions. Raises DegenerateSixD if a 6D block
    cannot be turned into a rotation.
    """
    R_u = rotmath.sixd_to_matrix(q_u)
    R_l = rotmath.sixd_to_matrix(q_l)
    r_h = np.asarray(r_h, dtype=float)
    R_yaw = rotmath.yaw_matrix(r_h / np.linalg.norm(r_h, axis=-1, keepdims=True))
    offset = np.asarray(cfg.shoulder_offset, dtype=float)
    shoulder = np.einsum("...ij,j->...i", R_yaw, offset)
    upper = np.einsum("...ij,...jk,k->...i", R_yaw, R_u, _limb(cfg.l_u))
    lower = np.einsum("...ij,...jk,k->...i", R_yaw, R_l, _limb(cfg.l_l))
    elbow = shoulder + upper
    return ArmPose(elbow, elbow + lower, shoulder)


def state_kinematics(x, cfg=ArmConfig()):
    """FK on a full 14-dim state vector (or a stack of them)."""
    x = np.asarray(x, dtype=float)
    return forward_kinematics(x[..., layout.Q_UPPER], x[..., layout.Q_LOWER],
                              x[..., layout.R_HIP], cfg)
