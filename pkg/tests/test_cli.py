import json
import os
import socket
import subprocess
import sys

import pytest
from safetensors.torch import load_file

from splitcodec.cli import build_parser, main
from splitcodec.config import ExperimentConfig

from conftest import tiny_config

COMMANDS = ("train", "rd-sweep", "analyze", "encode", "decode", "serve")
TEXT = "The cat sat."


def _run(*args, env=None):
    return subprocess.run([sys.executable, "-m", "splitcodec.cli", *args], capture_output=True, text=True,
                          env={**os.environ, **(env or {})}, timeout=300)


def _records(stdout):
    return [json.loads(line) for line in stdout.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config().replace(train={"max_steps": 6, "warmup_steps": 2, "batch_size": 2, "accum_steps": 1,
                                       "eval_interval": 3, "eval_batches": 1, "corpus_chars": 20000})
    (root / "tiny.json").write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--config", str(root / "tiny.json"), "--out", str(root / "runs"), "--lambda", "0.01"]) == 0
    (root / "input.txt").write_text(TEXT)
    return root, root / "runs" / "proposed_s1_l0.01.safetensors"


def test_help_lists_every_command():
    text = build_parser().format_help()
    for name in COMMANDS:
        assert name in text
    for name in COMMANDS:
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([name, "--help"])
        assert exc.value.code == 0


def test_train_writes_checkpoint_and_log(trained):
    root, ckpt = trained
    assert ckpt.exists()
    log = (root / "runs" / "proposed_s1_l0.01.log.csv").read_text().splitlines()
    assert log[0] == "step,lr,loss,distortion,bpt_y,bpt_w" and len(log) == 7


def test_encode_decode_matches_reference(trained, tmp_path):
    root, ckpt = trained
    stream = tmp_path / "a.rcst"
    assert main(["encode", "--checkpoint", str(ckpt), "--input", str(root / "input.txt"), "--output", str(stream)]) == 0
    out = tmp_path / "dec.safetensors"
    res = _run("decode", "--checkpoint", str(ckpt), "--input", str(stream), "--output", str(out),
               "--reference", str(root / "input.txt"))
    assert res.returncode == 0, res.stderr
    rec = _records(res.stdout)[-1]
    assert rec["matches_reference"] is True and rec["frames"] == len(TEXT)
    assert load_file(out)["y"].shape[0] == len(TEXT)


def test_decode_rejects_other_weights(trained, tmp_path):
    root, ckpt = trained
    other_cfg = tmp_path / "other.json"
    cfg = ExperimentConfig.load(root / "tiny.json").replace(train={"max_steps": 3})
    other_cfg.write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--config", str(other_cfg), "--out", str(tmp_path), "--lambda", "0.01"]) == 0
    stream = tmp_path / "a.rcst"
    main(["encode", "--checkpoint", str(ckpt), "--input", str(root / "input.txt"), "--output", str(stream)])
    res = _run("decode", "--checkpoint", str(tmp_path / "proposed_s1_l0.01.safetensors"), "--input", str(stream))
    assert res.returncode == 1 and "fingerprint" in res.stderr


def test_output_dir_env_overrides_flag(trained, tmp_path):
    root, _ = trained
    env_dir = tmp_path / "from_env"
    res = _run("train", "--config", str(root / "tiny.json"), "--out", str(tmp_path / "flag"), "--max-steps", "2",
               env={"SPLITCODEC_OUTPUT_DIR": str(env_dir)})
    assert res.returncode == 0, res.stderr
    assert (env_dir / "proposed_s1_l0.001.safetensors").exists()
    assert not (tmp_path / "flag").exists()


def test_bad_inputs_exit_nonzero(trained, tmp_path):
    root, ckpt = trained
    assert main(["encode", "--checkpoint", str(tmp_path / "none.safetensors"), "--input", str(root / "input.txt"),
                 "--output", str(tmp_path / "x")]) == 1
    (tmp_path / "long.txt").write_text("x" * 100)
    assert main(["encode", "--checkpoint", str(ckpt), "--input", str(tmp_path / "long.txt"),
                 "--output", str(tmp_path / "x")]) == 1
    assert main(["serve", "--role", "head", "--checkpoint", str(ckpt), "--split", "2"]) == 2


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_head_and_tail_processes(trained, tmp_path):
    root, ckpt = trained
    addr = f"127.0.0.1:{_free_port()}"
    (tmp_path / "two.txt").write_text(TEXT + " A dog ran off.")
    out = tmp_path / "tail.safetensors"
    tail = subprocess.Popen([sys.executable, "-m", "splitcodec.cli", "serve", "--role", "tail", "--addr", addr,
                             "--checkpoint", str(ckpt), "--split", "1", "--sessions", "2", "--output", str(out),
                             "--timeout", "120"], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    head = _run("serve", "--role", "head", "--addr", addr, "--checkpoint", str(ckpt), "--split", "1",
                "--input", str(tmp_path / "two.txt"))
    t_out, t_err = tail.communicate(timeout=300)
    assert head.returncode == 0, head.stderr
    assert tail.returncode == 0, t_err
    h, t = _records(head.stdout)[-1], _records(t_out)[-1]
    n = len(TEXT) + len(" A dog ran off.")
    assert h["sessions"] == t["sessions"] == 2 and h["frames"] == t["frames"] == n
    assert t["no_lookahead"] is True
    assert h["bpt"] == pytest.approx(t["bpt"])
    tensors = load_file(out)
    assert tensors["y_0"].shape[0] == 16 and tensors["y_1"].shape[0] == n - 16
