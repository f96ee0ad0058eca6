import json
import socket
import threading
import time

import pytest

from denkf import app, ingest, wire
from denkf.app import EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny dataset, a capture, and a one-epoch checkpoint shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--dataset", str(d / "ds.csv"), "--capture", str(d / "cap.bin"),
                 "--motions", "arm_swing,waving", "--n-yaws", "2", "--duration", "2", "--seed", "1"]) == 0
    cfg = {"train": {"epochs": 1, "batch_size": 64, "lr": 1e-3, "seq_len": 4}}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(d / "cfg.json"), "--dataset", str(d / "ds.csv"),
                 "--checkpoint", str(d / "ckpt"), "--ensemble", "4"]) == 0
    return d


class TestSynth:
    def test_counts_and_manifest(self, tmp_path, capsys):
        path = tmp_path / "a.csv"
        rc = main(["synth", "--dataset", str(path), "--motions", "arm_swing,waving,boxing,clapping,arm_raise",
                   "--duration", "1"])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "total" in out and "3200 samples in 40 trajectories" in out
        man = json.loads((tmp_path / "a.csv.manifest.json").read_text())
        assert len(man["trajectories"]) == 40 and man["samples"] == 3200
        assert len(path.read_text().splitlines()) == 3201

    def test_sixty_seconds(self, tmp_path):
        path = tmp_path / "b.csv"
        assert main(["synth", "--dataset", str(path), "--motions", "waving", "--n-yaws", "1",
                     "--duration", "60"]) == 0
        assert len(path.read_text().splitlines()) == 4801

    def test_deterministic(self, tmp_path):
        for name in ("x", "y"):
            main(["synth", "--dataset", str(tmp_path / f"{name}.csv"), "--motions", "boxing",
                  "--n-yaws", "2", "--duration", "1", "--seed", "9",
                  "--capture", str(tmp_path / f"{name}.bin")])
        assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()
        assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()


class TestTrain:
    def test_default_config_echo(self):
        cfg = app._load_config(app.build_parser().parse_args(["train"]))
        t = cfg.train
        assert (t.epochs, t.batch_size, t.lr, t.ensemble, t.window) == (50, 256, 1e-5, 32, 5)

    def test_outputs(self, workdir):
        ck = workdir / "ckpt"
        for name in ("manifest.json", "weights.bin", "train_state.json", "metrics.jsonl"):
            assert (ck / name).exists(), name
        recs = [json.loads(x) for x in (ck / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in recs] == [0, 1]

    def test_resume(self, workdir, tmp_path, capsys):
        import shutil
        ck = tmp_path / "ck"
        shutil.copytree(workdir / "ckpt", ck)
        cfg = {"train": {"epochs": 2, "batch_size": 64, "lr": 1e-3, "seq_len": 4}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        rc = main(["train", "--config", str(tmp_path / "c.json"), "--dataset", str(workdir / "ds.csv"),
                   "--checkpoint", str(ck), "--ensemble", "4", "--resume"])
        assert rc == EXIT_OK
        recs = [json.loads(x) for x in (ck / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in recs] == [0, 1, 2]


class TestEval:
    def test_report(self, workdir, tmp_path, capsys):
        args = ["eval", "--dataset", str(workdir / "ds.csv"), "--checkpoint", str(workdir / "ckpt"),
                "--ensemble", "4", "--output", str(tmp_path / "r.json")]
        assert main(args) == 0
        out = capsys.readouterr().out
        assert "9.94 cm" in out and "throughput" in out and "constant mean" in out
        first = json.loads((tmp_path / "r.json").read_text())
        assert main(args) == 0
        second = json.loads((tmp_path / "r.json").read_text())
        for k in ("wrist_cm", "elbow_cm", "hip_deg"):
            assert first["measured"][k] == second["measured"][k]


class TestReplay:
    def test_line_count(self, workdir, tmp_path):
        out = tmp_path / "est.jsonl"
        rc = main(["replay", "--checkpoint", str(workdir / "ckpt"), "--capture", str(workdir / "cap.bin"),
                   "--ensemble", "8", "--output", str(out)])
        assert rc == EXIT_OK
        pkts = [wire.decode(r) for r in ingest.read_capture(workdir / "cap.bin")]
        n_watch = sum(p.device == wire.WATCH for p in pkts)
        lines = out.read_text().splitlines()
        assert len(lines) == n_watch - 1
        rec = json.loads(lines[-1])
        assert len(rec["mean"]) == 14 and len(rec["wrist"]) == 3

    def test_requires_capture(self, workdir):
        assert main(["replay", "--checkpoint", str(workdir / "ckpt")]) == EXIT_USAGE


def free_port(kind=socket.SOCK_DGRAM):
    s = socket.socket(socket.AF_INET, kind)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


class TestServe:
    def test_short_session(self, workdir, tmp_path):
        port = free_port()
        out = tmp_path / "live.jsonl"
        result = {}
        worker = threading.Thread(target=lambda: result.setdefault("rc", main(
            ["serve", "--checkpoint", str(workdir / "ckpt"), "--port", str(port), "--ensemble", "8",
             "--output", str(out), "--duration", "1.5"])))
        worker.start()
        time.sleep(0.3)
        tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        for raw in ingest.read_capture(workdir / "cap.bin")[:40]:
            tx.sendto(raw, ("127.0.0.1", port))
            time.sleep(0.002)
        tx.close()
        worker.join(10)
        assert not worker.is_alive() and result["rc"] == EXIT_OK
        assert len(out.read_text().splitlines()) > 10

    def test_port_conflict_is_runtime_error(self, workdir):
        blocker = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        blocker.bind(("0.0.0.0", 0))
        try:
            rc = main(["serve", "--checkpoint", str(workdir / "ckpt"),
                       "--port", str(blocker.getsockname()[1]), "--duration", "0.1"])
        finally:
            blocker.close()
        assert rc == EXIT_RUNTIME


class TestExitCodes:
    def test_usage(self):
        assert main([]) == EXIT_USAGE
        assert main(["synth", "--bogus"]) == EXIT_USAGE
        assert main(["train", "--epochs", "many"]) == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert main(["eval", "--dataset", str(tmp_path / "nope.csv"),
                     "--checkpoint", str(tmp_path)]) == EXIT_DATA

    def test_bad_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"colour": "red"}))
        assert main(["synth", "--config", str(tmp_path / "c.json")]) == EXIT_USAGE
        (tmp_path / "d.json").write_text("{not json")
        assert main(["synth", "--config", str(tmp_path / "d.json")]) == EXIT_USAGE

    def test_bad_csv(self, tmp_path, workdir):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        assert main(["eval", "--dataset", str(tmp_path / "x.csv"),
                     "--checkpoint", str(workdir / "ckpt")]) == EXIT_DATA
