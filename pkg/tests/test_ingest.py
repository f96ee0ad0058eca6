import json
import socket
import struct
import threading
import time

import numpy as np
import pytest

from denkf import data, ingest, models, rotmath as rm, wire
from denkf.errors import BadLength, BadMagic, NonUnitQuaternion, ParseError, UnsupportedVersion

SMALL = {k: (16,) for k in models.NETS}


def golden_watch():
    q = np.array([0.5, 0.5, -0.5, 0.5])
    return wire.watch_packet(7, 12.5, q, [0.25, -1.5, 3.0], [0.0, -9.8125, 0.0], [0.125, 0.0, -2.0], 1013.25)


@pytest.fixture(scope="module")
def bundle():
    return models.init_bundle(np.random.default_rng(0), hidden=SMALL)


@pytest.fixture(scope="module")
def session_packets():
    packets, _ = data.synthesize_session(data.SynthConfig(motion="boxing", duration_s=3.0),
                                         np.random.default_rng(4))
    return packets


class TestWire:
    def test_golden_round_trip(self):
        pkt = golden_watch()
        raw = wire.encode(pkt)
        assert len(raw) == 76
        assert raw[:4] == bytes([0x50, 0x41, 0x43, 0x57])
        assert raw[4:8] == bytes([1, 0, 0, 0])
        assert raw[8:12] == struct.pack("<I", 7)
        assert raw[12:20] == struct.pack("<d", 12.5)
        assert raw[20:24] == struct.pack("<f", 0.5)
        back = wire.decode(raw)
        assert back == pkt
        assert wire.encode(back) == raw

    def test_phone(self):
        pkt = wire.phone_packet(3, 1.0, rm.IDENTITY)
        raw = wire.encode(pkt)
        assert len(raw) == 36
        assert wire.decode(raw) == pkt

    def test_error_matrix(self):
        raw = bytearray(wire.encode(golden_watch()))
        bad = bytearray(raw)
        bad[0] ^= 0xFF
        with pytest.raises(BadMagic):
            wire.decode(bad)
        with pytest.raises(BadLength):
            wire.decode(raw[:40])
        with pytest.raises(BadLength):
            wire.decode(raw[:10])
        with pytest.raises(BadLength):
            wire.decode(raw + b"\0")
        bad = bytearray(raw)
        bad[4] = 2
        with pytest.raises(UnsupportedVersion):
            wire.decode(bad)
        bad = bytearray(raw)
        bad[5] = 9
        with pytest.raises(BadLength):
            wire.decode(bad)
        bad = bytearray(raw)
        bad[20:24] = struct.pack("<f", 0.9)
        with pytest.raises(NonUnitQuaternion):
            wire.decode(bad)

    def test_calibration_state_frozen(self):
        c = wire.capture_calibration(golden_watch(), wire.phone_packet(0, 0.0, rm.IDENTITY))
        with pytest.raises(Exception):
            c.pressure_init = 0.0


class TestQueue:
    def test_drop_oldest(self):
        q = ingest.PacketQueue(4)
        for i in range(10):
            q.put(i)
        assert q.dropped == 6 and len(q) == 4
        assert [q.get(0) for _ in range(4)] == [6, 7, 8, 9]
        assert q.get(0) is None
        q.close()
        with pytest.raises(ingest.Closed):
            q.get(0)

    def test_blocking(self):
        q = ingest.PacketQueue(2, drop_oldest=False)
        got = []

        def consume():
            while True:
                try:
                    item = q.get(1.0)
                except ingest.Closed:
                    return
                if item is not None:
                    got.append(item)
                    time.sleep(0.001)

        t = threading.Thread(target=consume)
        t.start()
        for i in range(50):
            q.put(i)
        q.close()
        t.join()
        assert got == list(range(50)) and q.dropped == 0 and q.high_water <= 2


class TestSession:
    def test_offline_online_equivalence(self, bundle, session_packets):
        raw = [wire.encode(p) for p in session_packets]
        lines = []
        stats = ingest.run_session(iter(raw), bundle, lines.append, ensemble_size=16, seed=5,
                                   drop_oldest=False)
        ts, obs = data.packets_to_observations([wire.decode(r) for r in raw])
        offline = models.run_filter(bundle, obs, np.random.default_rng([5, 0]), 16, timestamps=ts)
        recs = [json.loads(line) for line in lines]
        n_watch = sum(p.device == wire.WATCH for p in session_packets)
        assert stats.emitted == len(recs) == n_watch - 1
        for r, e, t in zip(recs, offline, ts):
            assert r["mean"] == e.mean.tolist() and r["spread"] == e.spread.tolist()
            assert r["t"] == t
        assert not any(r["degraded"] for r in recs)
        assert [r["warmup"] for r in recs[:6]] == [True] * 5 + [False]

    def test_timestamps_from_watch(self, bundle, session_packets):
        lines = []
        ingest.run_session(iter(map(wire.encode, session_packets)), bundle, lines.append, 8, drop_oldest=False)
        watch_ts = [p.timestamp for p in session_packets if p.device == wire.WATCH][1:]
        assert [json.loads(x)["t"] for x in lines] == pytest.approx(watch_ts, abs=0)

    def test_out_of_order_dropped(self, bundle):
        s = ingest.Session(bundle, 8)
        assert s.handle(wire.phone_packet(0, 0.0, rm.IDENTITY)) is None
        w = golden_watch()
        s.handle(wire.watch_packet(5, 0.0, w.quat, w.lin_acc, w.gravity, w.gyro, w.pressure))
        assert s.handle(wire.watch_packet(6, 0.0125, w.quat, w.lin_acc, w.gravity, w.gyro, w.pressure))
        assert s.handle(wire.watch_packet(5, 0.025, w.quat, w.lin_acc, w.gravity, w.gyro, w.pressure)) is None
        assert s.stats.out_of_order == 1

    def test_phone_silence_degrades(self, bundle, session_packets):
        pk = [p for p in session_packets if not (p.device == wire.PHONE and 0.5 < p.timestamp <= 2.5)]
        lines = []
        stats = ingest.run_session(iter(map(wire.encode, pk)), bundle, lines.append, 8, drop_oldest=False)
        recs = [json.loads(x) for x in lines]
        degraded = [r["t"] for r in recs if r["degraded"]]
        assert degraded and min(degraded) > 1.5 and max(degraded) <= 2.5
        assert stats.stale_phone == len(degraded)
        assert all(np.isfinite(r["mean"]).all() for r in recs)

    def test_watch_gap_degrades(self, bundle, session_packets):
        pk = [p for p in session_packets if not (p.device == wire.WATCH and 1.0 < p.timestamp <= 2.2)]
        lines = []
        stats = ingest.run_session(iter(map(wire.encode, pk)), bundle, lines.append, 8, drop_oldest=False)
        assert stats.stale_watch == 1

    def test_malformed_counted(self, bundle, session_packets):
        raw = [wire.encode(p) for p in session_packets[:20]]
        raw.insert(5, b"garbage")
        lines = []
        stats = ingest.run_session(iter(raw), bundle, lines.append, 8, drop_oldest=False)
        assert stats.malformed == 1 and stats.emitted == len(lines)

    def test_burst_backpressure(self, bundle, session_packets):
        raw = [wire.encode(p) for p in session_packets]
        lines = []

        def slow_sink(line):
            time.sleep(0.002)
            lines.append(line)

        stats = ingest.run_session(iter(raw), bundle, slow_sink, 8, queue_size=16, drop_oldest=True)
        n_watch = sum(p.device == wire.WATCH for p in session_packets)
        assert stats.queue_dropped > 0
        assert stats.queue_high_water <= 16
        assert stats.emitted == len(lines) < n_watch - 1
        for line in lines:
            json.loads(line)

    def test_stop_event(self, bundle, session_packets):
        stop = threading.Event()
        lines = []

        def sink(line):
            lines.append(line)
            if len(lines) == 10:
                stop.set()

        ingest.run_session(iter(map(wire.encode, session_packets)), bundle, sink, 8,
                           drop_oldest=False, stop=stop)
        assert len(lines) == 10
        for line in lines:
            json.loads(line)


class TestCapture:
    def test_round_trip(self, tmp_path, session_packets):
        raw = [wire.encode(p) for p in session_packets]
        path = tmp_path / "c.bin"
        ingest.write_capture(path, raw)
        assert ingest.read_capture(path) == raw
        assert path.stat().st_size == sum(len(r) + 2 for r in raw)

    def test_truncated(self, tmp_path, session_packets):
        path = tmp_path / "c.bin"
        ingest.write_capture(path, [wire.encode(p) for p in session_packets[:3]])
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ParseError):
            ingest.read_capture(path)

    def test_realtime_pacing(self, session_packets):
        raw = [wire.encode(p) for p in session_packets[:41]]   # ~0.25 s of data
        t0 = time.monotonic()
        list(ingest.capture_source(raw, realtime=True))
        assert time.monotonic() - t0 >= 0.2


def test_udp_end_to_end(bundle, session_packets):
    probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    stop = threading.Event()
    source = ingest.udp_source(port, host="127.0.0.1", stop=stop, poll=0.05)
    lines = []
    worker = threading.Thread(target=lambda: ingest.run_session(source, bundle, lines.append, 8, stop=stop))
    worker.start()
    tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    for p in session_packets[:60]:
        tx.sendto(wire.encode(p), ("127.0.0.1", port))
        time.sleep(0.001)
    deadline = time.monotonic() + 5
    while len(lines) < 25 and time.monotonic() < deadline:
        time.sleep(0.02)
    stop.set()
    worker.join(5)
    tx.close()
    assert not worker.is_alive()
    assert len(lines) >= 25


def test_udp_bind_failure():
    blocker = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    blocker.bind(("127.0.0.1", 0))
    try:
        with pytest.raises(OSError):
            ingest.udp_source(blocker.getsockname()[1], host="127.0.0.1")
    finally:
        blocker.close()
