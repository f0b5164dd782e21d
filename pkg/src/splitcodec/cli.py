"""Command-line interface: ``splitcodec {train,rd-sweep,analyze,encode,decode,serve}``."""
from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
import time
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import save_file

from . import experiments as ex
from .checkpoint import Checkpoint, CheckpointError
from .codec import CodecError, SequenceCodec, measure_bpt, read_packet_stream, write_packet_stream
from .config import ExperimentConfig
from .runtime import SessionError, Transport, parse_addr, serve_head, serve_tail, timing_report

log = logging.getLogger("splitcodec")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for flag, section, key in (("lmbda", "train", "lmbda"), ("split", "model", "split"),
                               ("variant", "codec", "variant"), ("max_steps", "train", "max_steps"),
                               ("seed", "train", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    return cfg.replace(**overrides) if overrides else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_codec(path: str, split: int | None = None) -> SequenceCodec:
    ck = Checkpoint.load(path)
    if split is not None and split != ck.config.model.split:
        raise CheckpointError(f"--split {split} does not match the checkpoint split {ck.config.model.split}")
    return SequenceCodec(ck.build_model())


def _read_tokens(path: str, seq_len: int) -> np.ndarray:
    return ex.tokens_from_text(Path(path).read_text(encoding="utf-8"), seq_len)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = ex.output_dir(args.out)

    def on_log(rec):
        if rec.get("eval") or rec["step"] % args.log_every == 0:
            _emit(rec)

    path, result = ex.run_train(cfg, out, on_log=on_log)
    _emit({"checkpoint": str(path), "best_step": result.step, "best_val": result.best_val,
           "restarts": result.restarts, "seconds": round(result.seconds, 1)})
    return 0


def cmd_rd_sweep(args) -> int:
    cfg = _config(args)
    out = ex.output_dir(args.out)
    ckpt_dir = Path(args.checkpoints) if args.checkpoints else out
    variants = args.variants or [cfg.codec.variant]
    if args.train_missing:
        corpus = ex.load_corpus(cfg)
        for v in variants:
            for s in cfg.splits:
                for lam in cfg.lambdas:
                    if not (ckpt_dir / ex.checkpoint_name(v, s, lam)).exists():
                        run_cfg = cfg.replace(model={"split": s}, codec={"variant": v}, train={"lmbda": lam})
                        ex.run_train(run_cfg, ckpt_dir, corpus)
    doc = ex.rd_sweep(cfg, ckpt_dir, out, variants, args.sequences)
    for row in doc["rows"]:
        _emit(row)
    if doc["bd_rate_percent"]:
        _emit({"bd_rate_percent": doc["bd_rate_percent"]})
    return 0


def cmd_analyze(args) -> int:
    out = ex.output_dir(args.out)
    report = ex.analyze(args.checkpoints, out, args.samples, args.rate_sequences)
    for row in report.rows:
        _emit(row.as_record())
    _emit({"correlations": report.correlations, "notices": report.notices})
    return 0


def cmd_encode(args) -> int:
    codec = _load_codec(args.checkpoint)
    tokens = _read_tokens(args.input, codec.seq_len)
    packets = codec.encode_frames(tokens)
    Path(args.output).write_bytes(write_packet_stream(packets, codec.model.fingerprint()))
    _emit({"frames": len(packets), "bpt": measure_bpt(packets, len(packets)) if packets else 0.0,
           "output": args.output})
    return 0


def cmd_decode(args) -> int:
    codec = _load_codec(args.checkpoint)
    packets = read_packet_stream(Path(args.input).read_bytes(), codec.model.fingerprint())
    decoded = codec.decode_frames(packets, streaming=True)
    result = {"frames": len(packets), "bpt": measure_bpt(packets, len(packets)) if packets else 0.0}
    if args.output:
        save_file({"y": torch.from_numpy(decoded.y).contiguous(), "logits": decoded.logits.contiguous()}, args.output)
        result["output"] = args.output
    if args.reference:
        ref = codec.reference(_read_tokens(args.reference, codec.seq_len))
        result["matches_reference"] = bool(np.array_equal(ref.y, decoded.y) and torch.equal(ref.logits, decoded.logits))
    _emit(result)
    return 0 if result.get("matches_reference", True) else 1


def _windows(tokens: np.ndarray, seq_len: int) -> list[np.ndarray]:
    return [tokens[i:i + seq_len] for i in range(0, len(tokens), seq_len)]


def cmd_serve(args) -> int:
    codec = _load_codec(args.checkpoint, args.split)
    host, port = parse_addr(args.addr)
    if args.role == "tail":
        with socket.create_server((host, port)) as server:
            server.settimeout(args.timeout)
            conn, _ = server.accept()
        transport = Transport.from_socket(conn)
        try:
            results = serve_tail(transport, codec, args.sessions)
        finally:
            transport.close()
        if args.output:
            tensors = {}
            for k, r in enumerate(results):
                tensors[f"y_{k}"] = torch.from_numpy(r.y).contiguous()
                tensors[f"logits_{k}"] = r.logits.contiguous()
            save_file(tensors, args.output)
        frames = sum(r.n_frames for r in results)
        _emit({"role": "tail", "sessions": len(results), "frames": frames,
               "bpt": sum(r.payload_bits for r in results) / max(frames, 1),
               "no_lookahead": all(r.frames_at_emit == list(range(1, r.n_frames + 1)) for r in results)})
        return 0
    text = Path(args.input).read_text(encoding="utf-8")
    tokens = ex.encode_text(text)
    deadline = time.monotonic() + args.timeout
    while True:
        try:
            conn = socket.create_connection((host, port), timeout=args.timeout)
            break
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.1)
    transport = Transport.from_socket(conn)
    sessions = []
    try:
        for window in _windows(tokens, codec.seq_len):
            sessions.append(serve_head(transport, codec, window))
    finally:
        transport.close()
    n = sum(s.n_frames for s in sessions)
    bits = sum(s.payload_bits for s in sessions)
    coding_ms = 1e3 * sum(s.coding_seconds for s in sessions) / max(n, 1)
    raw_bits = 16 * codec.n_embd
    report = timing_report(raw_bits, bits / max(n, 1), coding_ms)
    _emit({"role": "head", "sessions": len(sessions), "frames": n, "bpt": bits / max(n, 1),
           "coding_ms_per_token": coding_ms, "crossover_mbps": report.crossover_mbps,
           "crossover_derivation": report.derivation})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitcodec", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config")
        if out:
            sp.add_argument("--out", help=f"output directory (overridden by ${ex.OUTPUT_ENV})")

    t = sub.add_parser("train", help="train one codec")
    common(t)
    t.add_argument("--lambda", dest="lmbda", type=float)
    t.add_argument("--split", type=int)
    t.add_argument("--variant", choices=["proposed", "fourier", "direct_access"])
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rd-sweep", help="rate-distortion table over lambdas and split points")
    common(r)
    r.add_argument("--checkpoints", help="directory holding the checkpoints (default: output directory)")
    r.add_argument("--variants", nargs="+", choices=["proposed", "fourier", "direct_access"])
    r.add_argument("--sequences", type=int, default=20, help="validation sequences per point")
    r.add_argument("--train-missing", action="store_true", help="train checkpoints that do not exist yet")
    r.add_argument("--max-steps", type=int)
    r.set_defaults(func=cmd_rd_sweep)

    a = sub.add_parser("analyze", help="complexity estimates and correlations across split points")
    a.add_argument("--checkpoints", nargs="+", required=True)
    a.add_argument("--samples", type=int, help="latent samples per checkpoint (default from config)")
    a.add_argument("--rate-sequences", type=int, default=20)
    a.add_argument("--out", help=f"output directory (overridden by ${ex.OUTPUT_ENV})")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("encode", help="encode a text file into a frame-packet stream")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a frame-packet stream and report BPT")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", help="write decoded latents and predictions (safetensors)")
    d.add_argument("--reference", help="text file to compare against in-process inference")
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("serve", help="run the head or tail side of a split session")
    s.add_argument("--role", choices=["head", "tail"], required=True)
    s.add_argument("--addr", default="127.0.0.1:7431")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", type=int)
    s.add_argument("--input", help="head: text to send, one session per context window")
    s.add_argument("--output", help="tail: write decoded latents and predictions (safetensors)")
    s.add_argument("--sessions", type=int, help="tail: stop after this many sessions")
    s.add_argument("--timeout", type=float, default=60.0)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    if args.command == "serve" and args.role == "head" and not args.input:
        print("error: --input is required for the head role", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CheckpointError, CodecError, SessionError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
