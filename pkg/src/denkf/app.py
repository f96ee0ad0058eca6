"""Command-line entry point: ``denkf synth | train | eval | serve | replay``.

Settings come from an optional JSON config file; command-line flags
override it. Exit codes: 0 success, 1 usage, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socket
import sys
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import data, ingest, models, wire
from .errors import DataError, DenkfError, InvalidConfig
from .kinematics import ArmConfig

log = logging.getLogger("denkf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
REFERENCE = {"wrist_cm": 9.94, "elbow_cm": 9.27, "hip_deg": 7.75}
DEFAULT_MOTIONS = ("arm_swing", "waving", "boxing", "clapping", "arm_raise")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class AppConfig:
    dataset: str = "dataset.csv"
    checkpoint: str = "checkpoint"
    capture: str = None
    output: str = None
    port: int = ingest.DEFAULT_PORT
    seed: int = 0
    ensemble: int = 32
    motions: tuple = DEFAULT_MOTIONS
    subjects: int = 1
    n_yaws: int = 8
    synth: data.SynthConfig = field(default_factory=data.SynthConfig)
    train: models.TrainConfig = field(default_factory=models.TrainConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        try:
            if "synth" in d:
                d["synth"] = data.SynthConfig.from_dict(d["synth"])
            if "train" in d:
                d["train"] = models.TrainConfig(**d["train"])
            if "arm" in d:
                arm = dict(d["arm"])
                if "shoulder_offset" in arm:
                    arm["shoulder_offset"] = tuple(arm["shoulder_offset"])
                d["arm"] = ArmConfig(**arm)
            if "motions" in d:
                d["motions"] = tuple(d["motions"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc

    def to_dict(self):
        return asdict(self)


def _load_config(args):
    cfg = AppConfig()
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{args.config}: {exc}") from exc
        cfg = AppConfig.from_dict(raw)
    over = {k: getattr(args, k) for k in ("dataset", "checkpoint", "capture", "output", "port",
                                          "seed", "ensemble", "subjects", "n_yaws")
            if getattr(args, k, None) is not None}
    if getattr(args, "motions", None):
        over["motions"] = tuple(args.motions.split(","))
    cfg = replace(cfg, **over)
    synth_over = {k: v for k, v in (("duration_s", getattr(args, "duration", None)),
                                    ("rate_hz", getattr(args, "rate", None))) if v is not None}
    if synth_over:
        cfg = replace(cfg, synth=replace(cfg.synth, **synth_over))
    train_over = {k: getattr(args, k) for k in ("epochs", "lr", "batch_size")
                  if getattr(args, k, None) is not None}
    train_over["seed"] = cfg.seed
    train_over["ensemble"] = cfg.ensemble
    try:
        cfg = replace(cfg, train=replace(cfg.train, **train_over))
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc
    return cfg


class _Output:
    """JSON-lines sink: stdout, a file, and/or TCP clients on a local port."""

    def __init__(self, path=None, port=None):
        self.fh = sys.stdout if path in (None, "-") else open(path, "w")
        self.lock = threading.Lock()
        self.clients = []
        self.server = None
        if port is not None:
            self.server = socket.create_server(("127.0.0.1", port))
            self.server.settimeout(0.2)
            threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while self.server is not None:
            try:
                conn, _ = self.server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with self.lock:
                self.clients.append(conn)

    def __call__(self, line):
        payload = line + "\n"
        with self.lock:
            self.fh.write(payload)
            for c in list(self.clients):
                try:
                    c.sendall(payload.encode())
                except OSError:
                    self.clients.remove(c)

    def close(self):
        with self.lock:
            self.fh.flush()
            if self.fh is not sys.stdout:
                self.fh.close()
            srv, self.server = self.server, None
            if srv is not None:
                srv.close()
            for c in self.clients:
                c.close()


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg):
    trajs = data.synthesize_dataset(cfg.motions, cfg.synth, cfg.subjects, cfg.n_yaws, cfg.seed)
    data.save_dataset(trajs, cfg.dataset)
    manifest = {
        "dataset": os.path.basename(cfg.dataset),
        "seed": cfg.seed,
        "motions": list(cfg.motions),
        "subjects": cfg.subjects,
        "n_yaws": cfg.n_yaws,
        "synth": asdict(cfg.synth),
        "samples": data.dataset_size(trajs),
        "trajectories": [{"subject": t.subject, "motion": t.motion, "yaw_offset": t.yaw_offset,
                          "samples": len(t)} for t in trajs],
    }
    with open(cfg.dataset + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    if cfg.capture:
        # raw datagrams of the first un-augmented session, for replay
        first = replace(cfg.synth, motion=cfg.motions[0],
                        subject=f"{cfg.synth.subject}0" if cfg.subjects > 1 else cfg.synth.subject)
        packets, _ = data.synthesize_session(first, data.session_rng(cfg.seed, 0, 0))
        ingest.write_capture(cfg.capture, [wire.encode(p) for p in packets])
    counts = Counter()
    for t in trajs:
        counts[t.motion] += len(t)
    for motion, n in counts.items():
        print(f"{motion:16s} {n:8d} samples")
    print(f"{'total':16s} {sum(counts.values()):8d} samples in {len(trajs)} trajectories")
    return EXIT_OK


def cmd_train(cfg, resume=False):
    tc = cfg.train
    print("training config: " + json.dumps(asdict(tc)))
    dataset = data.load_dataset(cfg.dataset)
    if resume:
        bundle = models.ModelBundle.load(cfg.checkpoint)
    else:
        bundle = models.init_bundle(np.random.default_rng([cfg.seed, 7]), window=tc.window,
                                    sensor_stats=models.input_stats(dataset))
    os.makedirs(cfg.checkpoint, exist_ok=True)
    metrics_path = os.path.join(cfg.checkpoint, "metrics.jsonl")
    if not resume and os.path.exists(metrics_path):
        os.remove(metrics_path)
    best, metrics = models.train(bundle, dataset, tc, state_dir=cfg.checkpoint, resume=resume,
                                 metrics_path=metrics_path,
                                 on_epoch=lambda r: print(json.dumps(r), flush=True))
    best.save(cfg.checkpoint)
    print(f"best checkpoint written to {cfg.checkpoint}")
    return EXIT_OK


def _fmt_metrics(m):
    return f"wrist {m['wrist_cm']:.2f} cm  elbow {m['elbow_cm']:.2f} cm  hip yaw {m['hip_deg']:.2f} deg"


def cmd_eval(cfg):
    bundle = models.ModelBundle.load(cfg.checkpoint)
    dataset = data.load_dataset(cfg.dataset)
    m = models.evaluate(bundle, dataset, cfg.arm, cfg.ensemble, cfg.seed)
    base = models.evaluate_constant(models.mean_state(dataset), dataset, cfg.arm)
    print(f"measured        {_fmt_metrics(m)}")
    print(f"constant mean   {_fmt_metrics(base)}")
    print(f"reference (real-device study, not reproducible here)  {_fmt_metrics(REFERENCE)}")
    for motion, pm in m["per_motion"].items():
        print(f"  {motion:16s} {_fmt_metrics(pm)}")
    print(f"throughput      {m['hz']:.1f} Hz (E={cfg.ensemble}, {m['samples']} samples)")
    if cfg.output:
        with open(cfg.output, "w") as fh:
            json.dump({"measured": m, "baseline": base, "reference": REFERENCE}, fh, indent=2)
    return EXIT_OK


def _run_stream(cfg, source, stop, drop_oldest, out_port=None):
    bundle = models.ModelBundle.load(cfg.checkpoint)
    out = _Output(cfg.output, out_port)
    try:
        stats = ingest.run_session(source, bundle, out, cfg.ensemble, cfg.seed, cfg.arm,
                                   drop_oldest=drop_oldest, stop=stop)
    finally:
        out.close()
    print(json.dumps(ingest.stats_dict(stats)), file=sys.stderr)
    return EXIT_OK


def _install_stop(stop):
    def handler(signum, frame):
        stop.set()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGINT, handler)
        signal.signal(signal.SIGTERM, handler)


def cmd_replay(cfg, speed="max"):
    if not cfg.capture:
        raise UsageError("replay needs --capture")
    datagrams = ingest.read_capture(cfg.capture)
    stop = threading.Event()
    _install_stop(stop)
    source = ingest.capture_source(datagrams, realtime=speed == "realtime", stop=stop)
    return _run_stream(cfg, source, stop, drop_oldest=False)


def cmd_serve(cfg, duration=None, out_port=None):
    stop = threading.Event()
    _install_stop(stop)
    source = ingest.udp_source(cfg.port, stop=stop)
    if duration is not None:
        threading.Timer(duration, stop.set).start()
    print(f"listening on udp port {cfg.port}", file=sys.stderr)
    return _run_stream(cfg, source, stop, drop_oldest=True, out_port=out_port)


# -- argument parsing --------------------------------------------------------

def build_parser():
    p = _Parser(prog="denkf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--ensemble", type=int, help="ensemble size E")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    s.add_argument("--dataset", help="output CSV path")
    s.add_argument("--capture", help="also write a packet capture of the first session")
    s.add_argument("--motions", help="comma-separated motion names")
    s.add_argument("--subjects", type=int)
    s.add_argument("--n-yaws", dest="n_yaws", type=int)
    s.add_argument("--duration", type=float, help="seconds per session")
    s.add_argument("--rate", type=float, help="sample rate in Hz")

    t = common(sub.add_parser("train", help="train a model bundle"))
    t.add_argument("--dataset")
    t.add_argument("--checkpoint", help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint's train state")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"))
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--output", help="write the report as JSON")

    r = common(sub.add_parser("replay", help="run the live pipeline on a capture file"))
    r.add_argument("--checkpoint")
    r.add_argument("--capture")
    r.add_argument("--speed", choices=("realtime", "max"), default="max")
    r.add_argument("--output", help="JSON-lines output file (default stdout)")

    v = common(sub.add_parser("serve", help="listen for UDP sensor packets"))
    v.add_argument("--checkpoint")
    v.add_argument("--port", type=int)
    v.add_argument("--output", help="JSON-lines output file (default stdout)")
    v.add_argument("--output-port", dest="output_port", type=int,
                   help="also stream JSON lines to TCP clients on this local port")
    v.add_argument("--duration", type=float, help="stop after this many seconds")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("denkf: a command is required (synth, train, eval, replay, serve)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "replay":
            return cmd_replay(cfg, args.speed)
        return cmd_serve(cfg, duration=args.duration, out_port=args.output_port)
    except (UsageError, InvalidConfig) as exc:
        print(f"denkf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"denkf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DenkfError, OSError) as exc:
        print(f"denkf: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
