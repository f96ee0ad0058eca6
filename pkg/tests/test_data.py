import math
from dataclasses import replace

import numpy as np
import pytest

from denkf import data, layout, rotmath as rm, wire
from denkf.errors import (EmptyInterval, InvalidConfig, NotCalibrated, ParseError,
                          SchemaMismatch)
from denkf.kinematics import state_kinematics

G = np.array([0.0, -9.81, 0.0])


def watch(seq, ts, gravity=G, lin_acc=(0, 0, 0), quat=rm.IDENTITY, pressure=1000.0):
    return wire.watch_packet(seq, ts, quat, lin_acc, gravity, np.zeros(3), pressure)


@pytest.fixture(scope="module")
def waving():
    return data.synthesize(data.SynthConfig(motion="waving", duration_s=4.0), np.random.default_rng(0))


class TestAssembly:
    def test_self_calibration_at_rest(self):
        phone = wire.phone_packet(0, 0.0, rm.yaw_quat(0.4))
        w0 = watch(0, 0.0, quat=rm.quat_from_axis_angle(np.array([1.0, 1, 0]), 0.3))
        calib = wire.capture_calibration(w0, phone)
        obs = data.assemble_observation([replace(w0, seq=1, timestamp=0.0125)], phone, calib, 0.0)
        np.testing.assert_allclose(obs[layout.THETA_SW], rm.IDENTITY_SIXD, atol=1e-12)
        assert obs[layout.PRESSURE] == 0
        np.testing.assert_allclose(obs[layout.RAW_R_HIP], [0, 1], atol=1e-12)
        assert obs[layout.DT] == pytest.approx(0.0125)

    def test_velocity_integral(self):
        phone = wire.phone_packet(0, 0.0, rm.IDENTITY)
        calib = wire.capture_calibration(watch(0, 0.0), phone)
        obs = data.assemble_observation([watch(1, 0.1, lin_acc=(0, 0, 1))], phone, calib, 0.0)
        np.testing.assert_allclose(obs[layout.VEL], [0, 0, 0.1], atol=1e-15)

    def test_gravity_mean(self):
        phone = wire.phone_packet(0, 0.0, rm.IDENTITY)
        calib = wire.capture_calibration(watch(0, 0.0), phone)
        pk = [watch(i + 1, 0.01 * (i + 1), gravity=(0, g, 0)) for i, g in enumerate((-9.7, -9.8, -9.9))]
        obs = data.assemble_observation(pk, phone, calib, 0.0)
        np.testing.assert_allclose(obs[layout.GRAVITY], [0, -9.8, 0], atol=1e-12)
        assert obs[layout.DT] == pytest.approx(0.03)

    def test_errors(self):
        phone = wire.phone_packet(0, 0.0, rm.IDENTITY)
        with pytest.raises(NotCalibrated):
            data.assemble_observation([watch(1, 0.1)], phone, None, 0.0)
        calib = wire.capture_calibration(watch(0, 0.0), phone)
        with pytest.raises(EmptyInterval):
            data.assemble_observation([], phone, calib, 0.0)

    def test_assembler_consumes_calibration_packet(self):
        asm = data.ObservationAssembler()
        assert asm.add(watch(0, 0.0)) is None          # no phone yet
        assert asm.dropped_uncalibrated == 1
        assert asm.add(wire.phone_packet(0, 0.0, rm.IDENTITY)) is None
        assert asm.add(watch(1, 0.0125)) is None       # calibration reading
        ts, obs = asm.add(watch(2, 0.025))
        assert ts == 0.025 and obs.shape == (layout.RAW_DIM,)


class TestAugmentation:
    def test_zero_is_identity(self, waving):
        aug = data.augment_yaw(waving, 0.0)
        np.testing.assert_array_equal(aug.observations, waving.observations)
        np.testing.assert_array_equal(aug.states, waving.states)

    def test_quarter_turn(self):
        st = np.concatenate([rm.IDENTITY_SIXD, rm.IDENTITY_SIXD, [0.0, 1.0]])[None]
        ob = np.zeros((1, layout.RAW_DIM))
        ob[0, layout.DT] = 0.0125
        ob[0, layout.THETA_SW] = rm.IDENTITY_SIXD
        ob[0, layout.RAW_R_HIP] = [0, 1]
        aug = data.augment_yaw(data.Trajectory(ob, st, "s", "m"), math.pi / 2)
        np.testing.assert_allclose(aug.states[0, layout.R_HIP], [1, 0], atol=1e-15)
        np.testing.assert_allclose(aug.observations[0, layout.RAW_R_HIP], [1, 0], atol=1e-15)

    def test_watch_frame_channels_untouched(self, waving):
        aug = data.augment_yaw(waving, 1.234)
        for sl in (slice(0, 1), layout.VEL, layout.LIN_ACC, layout.GRAVITY, layout.GYRO,
                   slice(layout.PRESSURE, layout.PRESSURE + 1)):
            np.testing.assert_array_equal(aug.observations[:, sl], waving.observations[:, sl])

    def test_composition(self, waving):
        a = data.augment_yaw(data.augment_yaw(waving, 0.5), 1.1)
        b = data.augment_yaw(waving, 1.6)
        np.testing.assert_allclose(a.observations, b.observations, atol=1e-9)
        np.testing.assert_allclose(a.states, b.states, atol=1e-9)

    def test_fk_equivariance(self, waving):
        d = 2.2
        aug = data.augment_yaw(waving, d)
        Ry = rm.yaw_matrix(np.array([math.sin(d), math.cos(d)]))
        np.testing.assert_allclose(state_kinematics(aug.states).wrist,
                                   state_kinematics(waving.states).wrist @ Ry.T, atol=1e-9)

    def test_heading_rotation_matches_rotated_session(self):
        # turning the whole session by d is the same as augmenting by d
        cfg = data.SynthConfig(motion="static", duration_s=0.5)
        base = data.synthesize(cfg, np.random.default_rng(0))
        aug = data.augment_yaw(base, 0.3)
        np.testing.assert_allclose(rm.yaw_to_angle(aug.observations[:, layout.RAW_R_HIP]), 0.3, atol=1e-12)

    def test_dataset_sweep(self, waving):
        out = data.augment_dataset([waving], 8)
        assert len(out) == 8
        assert out[0].yaw_offset == 0
        np.testing.assert_allclose([t.yaw_offset for t in out], np.arange(8) * math.pi / 4)


class TestSynthesis:
    def test_length(self):
        tr = data.synthesize(data.SynthConfig(duration_s=2.0), np.random.default_rng(0))
        assert len(tr) == 160
        assert np.all(np.diff(tr.timestamps()) > 0)

    def test_static(self):
        tr = data.synthesize(data.SynthConfig(motion="static", duration_s=1.0), np.random.default_rng(0))
        o = tr.observations
        np.testing.assert_allclose(o[:, layout.GYRO], 0, atol=1e-12)
        np.testing.assert_allclose(o[:, layout.LIN_ACC], 0, atol=1e-6)
        assert np.ptp(o[:, layout.PRESSURE]) < 1e-12
        # pose differs from the calibration posture, so gravity is rotated
        assert np.abs(o[0, layout.GRAVITY] - G).max() > 1.0

    def test_yaw_spin_rate(self):
        tr = data.synthesize(data.SynthConfig(motion="yaw_spin", duration_s=2.0), np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(tr.observations[:, layout.GYRO], axis=1), 1.0, atol=1e-12)

    def test_gravity_norm(self, waving):
        np.testing.assert_allclose(np.linalg.norm(waving.observations[:, layout.GRAVITY], axis=1), 9.81, atol=1e-9)

    def test_pressure_tracks_wrist_height(self, waving):
        cfg = data.SynthConfig(motion="waving")
        wrist_y = state_kinematics(waving.states, cfg.arm).wrist[:, 1]
        # calibration posture: elbow bent 90 deg, forearm forward
        cal_y = cfg.shoulder_offset[1] - cfg.l_u
        np.testing.assert_allclose(waving.observations[:, layout.PRESSURE], -0.12 * (wrist_y - cal_y), atol=1e-9)

    def test_acceleration_consistent_with_kinematics(self, waving):
        dt = 1 / 80.0
        wrist = state_kinematics(waving.states).wrist
        fd = (wrist[2:] - 2 * wrist[1:-1] + wrist[:-2]) / dt ** 2
        R = rm.sixd_to_matrix(waving.observations[1:-1, layout.THETA_SW])
        acc = np.einsum("nij,nj->ni", R, waving.observations[1:-1, layout.LIN_ACC])
        rel = np.sqrt(np.mean((fd - acc) ** 2)) / np.sqrt(np.mean(acc ** 2))
        assert rel < 0.02

    def test_invalid_config(self):
        with pytest.raises(InvalidConfig):
            data.synthesize(data.SynthConfig(duration_s=0), np.random.default_rng(0))
        with pytest.raises(InvalidConfig):
            data.synthesize(data.SynthConfig(motion="juggling"), np.random.default_rng(0))
        with pytest.raises(InvalidConfig):
            data.SynthConfig.from_dict({"bogus": 1})

    def test_determinism(self):
        a = data.synthesize(data.SynthConfig(duration_s=1.0), np.random.default_rng(5))
        b = data.synthesize(data.SynthConfig(duration_s=1.0), np.random.default_rng(5))
        np.testing.assert_array_equal(a.observations, b.observations)

    def test_ground_truth_blocks_orthonormal(self, waving):
        for sl in (layout.Q_LOWER, layout.Q_UPPER):
            d = waving.states[:, sl]
            np.testing.assert_allclose(rm.orthonormalize_sixd(d), d, atol=1e-6)


class TestCsv:
    def test_round_trip(self, tmp_path, waving):
        trajs = data.augment_dataset([waving], 2)
        path = tmp_path / "d.csv"
        data.save_dataset(trajs, path)
        back = data.load_dataset(path)
        assert [(t.subject, t.motion, t.yaw_offset) for t in back] == \
               [(t.subject, t.motion, t.yaw_offset) for t in trajs]
        for a, b in zip(trajs, back):
            np.testing.assert_array_equal(a.observations.astype(np.float32), b.observations.astype(np.float32))
            np.testing.assert_array_equal(a.states, b.states)

    def test_header_and_empty(self, tmp_path):
        p = tmp_path / "e.csv"
        data.save_dataset([], p)
        assert data.load_dataset(p) == []
        lines = p.read_text().splitlines()
        assert len(lines[0].split(",")) == 2 + 36

    def test_schema_mismatch(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(",".join(data.HEADER[:35]) + "\n")
        with pytest.raises(SchemaMismatch):
            data.load_dataset(p)

    def test_parse_errors(self, tmp_path, waving):
        p = tmp_path / "d.csv"
        data.save_dataset([waving], p)
        lines = p.read_text().splitlines()
        bad = lines[:2] + [lines[2].rsplit(",", 1)[0]]
        p.write_text("\n".join(bad) + "\n")
        with pytest.raises(ParseError):
            data.load_dataset(p)
        bad = lines[:2] + [lines[2].rsplit(",", 1)[0] + ",nan"]
        p.write_text("\n".join(bad) + "\n")
        with pytest.raises(ParseError):
            data.load_dataset(p)

    def test_adjacent_key_collision(self, tmp_path, waving):
        with pytest.raises(ValueError):
            data.save_dataset([waving, waving], tmp_path / "x.csv")
