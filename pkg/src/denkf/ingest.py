"""Live ingestion: datagram receiver, bounded packet queue and the filter loop.

A receiver thread decodes datagrams and pushes them into a bounded
single-producer/single-consumer queue. The filter loop drains it, assembles
one observation per watch packet and emits one JSON line per estimate.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import wire
from .data import ObservationAssembler
from .errors import PacketError, ParseError
from .kinematics import ArmConfig, state_kinematics
from .models import StreamingFilter

log = logging.getLogger(__name__)

DEFAULT_PORT = 46000
QUEUE_SIZE = 256
STALE_AFTER = 1.0
_LEN = struct.Struct("<H")


class Closed(Exception):
    """Raised by :meth:`PacketQueue.get` once the queue is closed and empty."""


class PacketQueue:
    """Bounded SPSC queue. When full, ``put`` either discards the oldest
    item (live mode) or blocks until there is room (lossless replay)."""

    def __init__(self, maxlen=QUEUE_SIZE, drop_oldest=True):
        if maxlen < 1:
            raise ValueError("maxlen must be >= 1")
        self.maxlen = maxlen
        self.drop_oldest = drop_oldest
        self.dropped = 0
        self.high_water = 0
        self._items = deque()
        self._closed = False
        self._cond = threading.Condition()

    def put(self, item):
        with self._cond:
            if self._closed:
                return
            while len(self._items) >= self.maxlen:
                if self.drop_oldest:
                    self._items.popleft()
                    self.dropped += 1
                else:
                    self._cond.wait()
                    if self._closed:
                        return
            self._items.append(item)
            self.high_water = max(self.high_water, len(self._items))
            self._cond.notify_all()

    def get(self, timeout=None):
        with self._cond:
            end = None if timeout is None else time.monotonic() + timeout
            while not self._items:
                if self._closed:
                    raise Closed()
                wait = None if end is None else end - time.monotonic()
                if wait is not None and wait <= 0:
                    return None
                self._cond.wait(wait)
            item = self._items.popleft()
            self._cond.notify_all()
            return item

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self):
        with self._cond:
            return len(self._items)


@dataclass
class SessionStats:
    received: int = 0
    malformed: int = 0
    out_of_order: int = 0
    queue_dropped: int = 0
    queue_high_water: int = 0
    uncalibrated: int = 0
    emitted: int = 0
    degraded: int = 0
    stale_phone: int = 0
    stale_watch: int = 0
    elapsed: float = 0.0

    @property
    def rate(self):
        return self.emitted / self.elapsed if self.elapsed > 0 else 0.0


class Session:
    """Per-connection processing state (calibration, ordering, filter).

    The filter generator is ``default_rng([seed, 0])``, the same stream
    :func:`denkf.models.evaluate` uses for the first trajectory, so a replayed
    capture reproduces the offline estimates exactly.
    """

    def __init__(self, bundle, ensemble_size=32, seed=0, arm=ArmConfig(), stale_after=STALE_AFTER,
                 jitter=0.05):
        self.filter = StreamingFilter(bundle, ensemble_size, np.random.default_rng([seed, 0]), jitter)
        self.assembler = ObservationAssembler()
        self.arm = arm
        self.stale_after = stale_after
        self.last_seq = {}
        self.last_watch_ts = None
        self.last_phone_ts = None
        self.stats = SessionStats()

    def recalibrate(self):
        self.assembler.recalibrate()
        self.filter.reset()

    def handle(self, pkt):
        """Process one decoded packet; returns an output record or ``None``."""
        last = self.last_seq.get(pkt.device)
        if last is not None and pkt.seq <= last:
            self.stats.out_of_order += 1
            return None
        self.last_seq[pkt.device] = pkt.seq
        if pkt.device == wire.PHONE:
            self.last_phone_ts = pkt.timestamp
            self.assembler.add(pkt)
            return None

        stale_watch = self.last_watch_ts is not None and pkt.timestamp - self.last_watch_ts > self.stale_after
        self.last_watch_ts = pkt.timestamp
        out = self.assembler.add(pkt)
        if out is None:
            if self.assembler.calib is None:
                self.stats.uncalibrated += 1
            return None
        ts, obs = out
        stale_phone = pkt.timestamp - self.last_phone_ts > self.stale_after
        self.stats.stale_phone += stale_phone
        self.stats.stale_watch += stale_watch
        degraded = bool(stale_phone or stale_watch)
        est = self.filter.step(obs, t=ts, update=not degraded)
        pose = state_kinematics(est.mean, self.arm)
        self.stats.emitted += 1
        self.stats.degraded += degraded
        return {
            "t": ts,
            "mean": est.mean.tolist(),
            "spread": est.spread.tolist(),
            "elbow": pose.elbow.tolist(),
            "wrist": pose.wrist.tolist(),
            "degraded": degraded,
            "warmup": bool(est.warmup),
        }


def _receive(source, queue, stats, stop):
    try:
        for datagram in source:
            if stop.is_set():
                break
            stats.received += 1
            try:
                queue.put(wire.decode(datagram))
            except PacketError as exc:
                stats.malformed += 1
                log.debug("dropping datagram: %s", exc)
    finally:
        queue.close()


def run_session(source, bundle, sink, ensemble_size=32, seed=0, arm=ArmConfig(),
                queue_size=QUEUE_SIZE, drop_oldest=True, stop=None, stale_after=STALE_AFTER):
    """Drive a session from an iterable of raw datagrams until it is exhausted
    or ``stop`` is set.

    ``sink`` receives each output record as one complete JSON line (string
    without the newline). Returns the session statistics.
    """
    stop = stop or threading.Event()
    session = Session(bundle, ensemble_size, seed, arm, stale_after)
    queue = PacketQueue(queue_size, drop_oldest)
    rx = threading.Thread(target=_receive, args=(source, queue, session.stats, stop),
                          name="denkf-rx", daemon=True)
    t0 = time.perf_counter()
    rx.start()
    try:
        while True:
            try:
                pkt = queue.get(timeout=0.1)
            except Closed:
                break
            if pkt is None:
                if stop.is_set():
                    break
                continue
            rec = session.handle(pkt)
            if rec is not None:
                sink(json.dumps(rec))
            if stop.is_set():
                break
    finally:
        stop.set()
        queue.close()
        rx.join(timeout=1.0)
        session.stats.queue_dropped = queue.dropped
        session.stats.queue_high_water = queue.high_water
        session.stats.elapsed = time.perf_counter() - t0
    return session.stats


# -- sources -----------------------------------------------------------------

def write_capture(path, datagrams):
    with open(path, "wb") as fh:
        for d in datagrams:
            if len(d) > 0xFFFF:
                raise ValueError("datagram too long for a capture record")
            fh.write(_LEN.pack(len(d)))
            fh.write(d)


def read_capture(path):
    """All datagrams of a capture file. Raises ParseError on truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    out, pos = [], 0
    while pos < len(blob):
        if pos + 2 > len(blob):
            raise ParseError(f"truncated length prefix at byte {pos}")
        (n,) = _LEN.unpack_from(blob, pos)
        pos += 2
        if pos + n > len(blob):
            raise ParseError(f"truncated datagram at byte {pos}")
        out.append(blob[pos:pos + n])
        pos += n
    return out


def capture_source(datagrams, realtime=False, stop=None):
    """Yield datagrams, optionally paced by their embedded timestamps."""
    start = None
    for d in datagrams:
        if stop is not None and stop.is_set():
            return
        if realtime:
            try:
                ts = wire.HEADER.unpack_from(d)[5]
            except struct.error:
                ts = None
            if ts is not None:
                if start is None:
                    start = (time.monotonic(), ts)
                delay = (ts - start[1]) - (time.monotonic() - start[0])
                if delay > 0:
                    time.sleep(delay)
        yield d


def udp_source(port=DEFAULT_PORT, host="0.0.0.0", stop=None, poll=0.2):
    """Bind a UDP socket now (so bind errors surface to the caller) and
    return a generator of received datagrams that ends once ``stop`` is set."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind((host, port))
    except OSError:
        sock.close()
        raise
    sock.settimeout(poll)

    def gen():
        try:
            while stop is None or not stop.is_set():
                try:
                    data, _ = sock.recvfrom(2048)
                except socket.timeout:
                    continue
                yield data
        finally:
            sock.close()

    return gen()


def stats_dict(stats):
    d = asdict(stats)
    d["rate_hz"] = stats.rate
    return d
