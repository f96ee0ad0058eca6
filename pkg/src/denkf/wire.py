"""Binary datagram format for watch and phone sensor packets.

Layout (little-endian)::

    u32 magic = 0x57434150 | u8 version = 1 | u8 device (0 watch, 1 phone)
    u16 reserved = 0 | u32 seq | f64 timestamp | f32 payload[14 or 4]

Watch payload: orientation quaternion (w, x, y, z), linear acceleration,
gravity, gyroscope (3 each) and pressure (hPa). Phone payload: orientation
quaternion only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadLength, BadMagic, NonUnitQuaternion, UnsupportedVersion
from .rotmath import quat_normalize

MAGIC = 0x57434150
VERSION = 1
WATCH, PHONE = 0, 1

HEADER = struct.Struct("<IBBHId")
PAYLOAD_LEN = {WATCH: 14, PHONE: 4}
PACKET_SIZE = {dev: HEADER.size + 4 * n for dev, n in PAYLOAD_LEN.items()}
QUAT_TOLERANCE = 1e-2


@dataclass
class SensorPacket:
    device: int
    seq: int
    timestamp: float
    quat: np.ndarray
    lin_acc: np.ndarray = None
    gravity: np.ndarray = None
    gyro: np.ndarray = None
    pressure: float = 0.0

    @property
    def is_watch(self):
        return self.device == WATCH

    def payload(self):
        if self.device == PHONE:
            return np.asarray(self.quat, dtype=float)
        return np.concatenate([self.quat, self.lin_acc, self.gravity, self.gyro, [self.pressure]])

    def __eq__(self, other):
        if not isinstance(other, SensorPacket):
            return NotImplemented
        return (self.device == other.device and self.seq == other.seq
                and self.timestamp == other.timestamp
                and np.array_equal(self.payload(), other.payload()))


def watch_packet(seq, timestamp, quat, lin_acc, gravity, gyro, pressure):
    return SensorPacket(WATCH, seq, timestamp, np.asarray(quat, float), np.asarray(lin_acc, float),
                        np.asarray(gravity, float), np.asarray(gyro, float), float(pressure))


def phone_packet(seq, timestamp, quat):
    return SensorPacket(PHONE, seq, timestamp, np.asarray(quat, float))


def encode(pkt):
    header = HEADER.pack(MAGIC, VERSION, pkt.device, 0, pkt.seq & 0xFFFFFFFF, pkt.timestamp)
    return header + pkt.payload().astype("<f4").tobytes()


def decode(data):
    data = bytes(data)
    if len(data) < HEADER.size:
        raise BadLength(f"datagram of {len(data)} bytes is shorter than the header")
    magic, version, device, _reserved, seq, ts = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise UnsupportedVersion(f"protocol version {version}")
    if device not in PAYLOAD_LEN:
        raise BadLength(f"unknown device id {device}")
    if len(data) != PACKET_SIZE[device]:
        raise BadLength(f"device {device} packet must be {PACKET_SIZE[device]} bytes, got {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(float)
    quat = vals[:4]
    if abs(np.linalg.norm(quat) - 1.0) > QUAT_TOLERANCE:
        raise NonUnitQuaternion(f"orientation norm {np.linalg.norm(quat):.4f}")
    if device == PHONE:
        return SensorPacket(PHONE, seq, ts, quat)
    return SensorPacket(WATCH, seq, ts, quat, vals[4:7], vals[7:10], vals[10:13], float(vals[13]))


@dataclass(frozen=True)
class CalibrationState:
    """Start-up reference readings; immutable once captured."""
    watch_init: np.ndarray
    phone_init: np.ndarray
    pressure_init: float
    captured: bool = True


def capture_calibration(watch_pkt, phone_pkt):
    return CalibrationState(quat_normalize(watch_pkt.quat), quat_normalize(phone_pkt.quat),
                            float(watch_pkt.pressure))
