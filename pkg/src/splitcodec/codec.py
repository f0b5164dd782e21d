"""End-to-end codec: backbone head, hyper-prior, entropy models and the range coder.

The sending side computes ``Y = round(f_{1,S}(X))``, ``W = round(h(Y))`` and
codes both with the range coder. The receiving side decodes ``W``, rebuilds
the Gaussian tables for ``Y`` from it and finishes the forward pass with the
backbone tail.

All coding-time network evaluations use batch size 1 and the full context
length ``seq_len`` (rows past the current frame are zero-filled). Because
every network is causal, row ``i`` is then bit-identical on both sides no
matter how much of the sequence each side has seen.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtr
from torch import nn

from . import range_coder as rc
from .blocks import AnalysisNetwork, DirectAccessModel, SplitModel, SynthesisNetwork
from .config import ExperimentConfig
from .entropy_models import FactorizedDensity, FourierDensity, GaussianParams, gaussian_bits
from .quantization import quantize_ste

FRAME_MAGIC = b"RCF1"
SEQUENCE_MAGIC = b"RCS1"
STREAM_MAGIC = b"RCST"
FORMAT_VERSION = 1

# Gaussian tables cover round(mu) +- R with R = min(GAUSS_MAX_RADIUS, ceil(GAUSS_TAIL_SIGMAS * sigma))
GAUSS_MAX_RADIUS = 64
GAUSS_TAIL_SIGMAS = 8.0
# W tables cover the bins whose CDF lies inside (W_TAIL, 1 - W_TAIL)
W_TAIL = 1e-9
W_GRID = 1 << 14


class CodecError(ValueError):
    """Raised for malformed packets, missing frames or mismatched models."""


# ---------------------------------------------------------------- models


@dataclass
class CodecOutput:
    logits: torch.Tensor
    y: torch.Tensor
    w: torch.Tensor
    params: GaussianParams
    bits_y: torch.Tensor  # per element
    bits_w: torch.Tensor  # per element


class CodecModel(nn.Module):
    """Backbone plus the hyper-prior networks of one entropy-model variant."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        m, c = config.model, config.codec
        self.backbone = SplitModel(m.vocab_size, m.n_layer, m.n_embd, m.n_head, m.seq_len, m.split)
        self.analysis = AnalysisNetwork(m.n_embd, c.analysis_widths, m.n_head, m.seq_len)
        if c.variant == "fourier":
            self.hyper = FourierDensity(c.channels, c.fourier_coefficients)
        else:
            self.hyper = FactorizedDensity(c.channels, tuple(c.density_filters))
        if c.variant == "direct_access":
            self.entropy = DirectAccessModel(c.channels, m.n_embd, m.n_head, m.seq_len)
        else:
            self.entropy = SynthesisNetwork(c.channels, c.synthesis_widths, m.n_embd, m.n_head, m.seq_len)

    @property
    def variant(self) -> str:
        return self.config.codec.variant

    def latent(self, tokens: torch.Tensor) -> torch.Tensor:
        return quantize_ste(self.backbone.head_forward(tokens))

    def entropy_params(self, w: torch.Tensor, y: torch.Tensor | None = None) -> GaussianParams:
        if self.variant == "direct_access":
            if y is None:
                raise ValueError("the direct-access model needs the latent")
            return self.entropy(w, y)
        return self.entropy(w)

    def forward(self, tokens: torch.Tensor) -> CodecOutput:
        y = self.latent(tokens)
        w = self.analysis.analyze(y)
        params = self.entropy_params(w, y)
        return CodecOutput(self.backbone.tail_forward(y), y, w, params,
                           gaussian_bits(y, params), self.hyper.bits(w))

    def fingerprint(self) -> bytes:
        """SHA-256 over the config hash and every parameter, in name order."""
        h = hashlib.sha256(self.config.config_hash().encode())
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.digest()


@dataclass
class RDLossTerms:
    """Rates are in bits per token; distortion is cross-entropy in nats per token."""

    distortion: torch.Tensor
    rate_y: torch.Tensor
    rate_w: torch.Tensor
    lmbda: float
    loss: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.lmbda < 0:
            raise ValueError("lambda must be non-negative")
        if self.lmbda == 0:
            self.rate_y, self.rate_w = self.rate_y.detach(), self.rate_w.detach()
            self.loss = self.distortion
        else:
            self.loss = self.distortion + self.lmbda * (self.rate_y + self.rate_w)

    @property
    def rate(self) -> torch.Tensor:
        return self.rate_y + self.rate_w


def rd_loss(batch: tuple[torch.Tensor, torch.Tensor], model: CodecModel, lmbda: float) -> RDLossTerms:
    """Rate-distortion objective on a batch of (inputs, next-token targets)."""
    if lmbda < 0:
        raise ValueError("lambda must be non-negative")
    inputs, targets = batch
    out = model(inputs)
    d = F.cross_entropy(out.logits.reshape(-1, out.logits.shape[-1]), targets.reshape(-1))
    t = inputs.shape[-1]
    bpt_y = out.bits_y.sum(dim=(-2, -1)).mean() / t
    bpt_w = out.bits_w.sum(dim=(-2, -1)).mean() / t
    return RDLossTerms(d, bpt_y, bpt_w, float(lmbda))


# ---------------------------------------------------------------- tables


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray) -> list[rc.CdfTable]:
    """One table per element of the flattened (mu, sigma) arrays.

    Each table is centred at ``round(mu)`` with half-width
    ``R = min(64, ceil(8 sigma))`` and an escape slot for the tails.
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if mu.shape != sigma.shape:
        raise ValueError("mu and sigma must have the same size")
    if mu.size == 0:
        return []
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
        raise ValueError("Gaussian parameters must be finite with sigma > 0")
    center = np.rint(mu).astype(np.int64)
    radius = np.clip(np.ceil(GAUSS_TAIL_SIGMAS * sigma), 1, GAUSS_MAX_RADIUS).astype(np.int64)
    k = np.arange(-GAUSS_MAX_RADIUS, GAUSS_MAX_RADIUS + 1)
    v = np.abs(center[:, None] + k[None, :] - mu[:, None])
    s = sigma[:, None]
    probs = ndtr((0.5 - v) / s) - ndtr((-0.5 - v) / s)
    valid = np.abs(k)[None, :] <= radius[:, None]
    left = center - radius - 0.5 - mu
    right = center + radius + 0.5 - mu
    escape = ndtr(left / sigma) + ndtr(-right / sigma)
    probs = np.concatenate([probs, escape[:, None]], axis=1)
    valid = np.concatenate([valid, np.ones((mu.size, 1), dtype=bool)], axis=1)
    counts = rc.quantize_pmf(probs, valid)
    cum = np.zeros((mu.size, counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cum[:, 1:])
    cum_rows = cum.tolist()
    tables = []
    m = GAUSS_MAX_RADIUS
    for row, r, c in zip(cum_rows, radius.tolist(), center.tolist()):
        # bins outside the window hold zero counts, so the window slice is already a valid CDF
        cdf = tuple(row[m - r: m + r + 2]) + (rc.TOTAL,)
        tables.append(rc.CdfTable(cdf, -r, r, c, True))
    return tables


def hyper_tables(density: nn.Module) -> list[rc.CdfTable]:
    """Static per-channel tables for ``W`` evaluated in float64."""
    d64 = copy.deepcopy(density).double().eval()
    grid = torch.arange(-W_GRID, W_GRID + 1, dtype=torch.float64)
    edges = torch.cat([grid - 0.5, grid[-1:] + 0.5])
    with torch.no_grad():
        cdf = d64.cdf(edges[:, None].expand(-1, d64.channels).contiguous()).numpy().T  # C x (G+1)
    tables = []
    for ch in range(cdf.shape[0]):
        c = np.clip(cdf[ch], 0.0, 1.0)
        c = np.maximum.accumulate(c)
        inside = np.nonzero((c[1:] > W_TAIL) & (c[:-1] < 1.0 - W_TAIL))[0]
        if inside.size == 0:
            inside = np.array([int(np.argmax(np.diff(c)))])
        lo_i, hi_i = int(inside[0]), int(inside[-1])
        if hi_i - lo_i + 1 > rc.MAX_ALPHABET - 1:
            mid = int(np.searchsorted(c, 0.5))
            lo_i = max(lo_i, mid - rc.MAX_ALPHABET // 2 + 1)
            hi_i = lo_i + rc.MAX_ALPHABET - 2
        probs = c[lo_i + 1: hi_i + 2] - c[lo_i: hi_i + 1]
        escape = c[lo_i] + (1.0 - c[hi_i + 1])
        tables.append(rc.build_cdf_table(probs, lo=int(grid[lo_i]), escape_mass=max(escape, 0.0)))
    return tables


# ---------------------------------------------------------------- packets


@dataclass(frozen=True)
class FramePacket:
    index: int
    w_chunk: bytes
    y_chunk: bytes

    def to_bytes(self) -> bytes:
        return (FRAME_MAGIC + bytes([FORMAT_VERSION]) + rc.write_varint(self.index)
                + rc.write_chunk(self.w_chunk) + rc.write_chunk(self.y_chunk))

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.w_chunk) + len(self.y_chunk))

    @classmethod
    def from_bytes(cls, data: bytes) -> "FramePacket":
        data = bytes(data)
        if data[:4] != FRAME_MAGIC:
            raise CodecError("not a frame packet (bad magic)")
        if len(data) < 5 or data[4] != FORMAT_VERSION:
            raise CodecError("unsupported frame packet version")
        try:
            index, pos = rc.read_varint(data, 5)
        except rc.CorruptStreamError as exc:
            raise CodecError(f"truncated frame packet header: {exc}") from exc
        try:
            w_chunk, pos = rc.read_chunk(data, pos)
            y_chunk, pos = rc.read_chunk(data, pos)
        except rc.CorruptStreamError as exc:
            raise CodecError(f"frame {index}: truncated packet ({exc})") from exc
        if pos != len(data):
            raise CodecError(f"frame {index}: {len(data) - pos} trailing bytes")
        return cls(index, w_chunk, y_chunk)


@dataclass(frozen=True)
class SequencePacket:
    """Whole-sequence container: one W chunk and one Y chunk for all frames."""

    n_tokens: int
    w_chunk: bytes
    y_chunk: bytes

    def to_bytes(self) -> bytes:
        return (SEQUENCE_MAGIC + bytes([FORMAT_VERSION]) + rc.write_varint(self.n_tokens)
                + rc.write_chunk(self.w_chunk) + rc.write_chunk(self.y_chunk))

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.w_chunk) + len(self.y_chunk))

    @classmethod
    def from_bytes(cls, data: bytes) -> "SequencePacket":
        data = bytes(data)
        if data[:4] != SEQUENCE_MAGIC or len(data) < 5 or data[4] != FORMAT_VERSION:
            raise CodecError("not a sequence packet")
        try:
            n, pos = rc.read_varint(data, 5)
            w_chunk, pos = rc.read_chunk(data, pos)
            y_chunk, pos = rc.read_chunk(data, pos)
        except rc.CorruptStreamError as exc:
            raise CodecError(f"truncated sequence packet ({exc})") from exc
        if pos != len(data):
            raise CodecError("trailing bytes after sequence packet")
        return cls(n, w_chunk, y_chunk)


def write_packet_stream(packets: list[FramePacket], fingerprint: bytes) -> bytes:
    """File format: magic, version, 32-byte model fingerprint, count, then one chunk per packet."""
    out = bytearray(STREAM_MAGIC + bytes([FORMAT_VERSION]) + fingerprint + rc.write_varint(len(packets)))
    for p in packets:
        out += rc.write_chunk(p.to_bytes())
    return bytes(out)


def read_packet_stream(data: bytes, fingerprint: bytes | None = None) -> list[FramePacket]:
    data = bytes(data)
    if data[:4] != STREAM_MAGIC or len(data) < 37 or data[4] != FORMAT_VERSION:
        raise CodecError("not a packet stream")
    stored = data[5:37]
    if fingerprint is not None and stored != fingerprint:
        raise CodecError("model fingerprint mismatch: the stream was written with a different checkpoint")
    try:
        n, pos = rc.read_varint(data, 37)
        packets = []
        for _ in range(n):
            raw, pos = rc.read_chunk(data, pos)
            packets.append(FramePacket.from_bytes(raw))
    except rc.CorruptStreamError as exc:
        raise CodecError(f"truncated packet stream after {len(packets)} packets ({exc})") from exc
    if pos != len(data):
        raise CodecError("trailing bytes after packet stream")
    return packets


def measure_bpt(packets, n_tokens: int) -> float:
    """Payload bits of all W and Y chunks divided by the token count."""
    if isinstance(packets, (FramePacket, SequencePacket)):
        packets = [packets]
    bits = sum(p.payload_bits for p in packets)
    if bits == 0:
        return 0.0
    if n_tokens <= 0:
        raise ValueError("token count must be positive")
    return bits / n_tokens


# ---------------------------------------------------------------- coding engine


@dataclass
class DecodedSequence:
    y: np.ndarray  # n x E int64
    logits: torch.Tensor  # n x vocab


class SequenceCodec:
    """Encoder and decoder around a trained ``CodecModel`` (evaluation mode, batch 1)."""

    def __init__(self, model: CodecModel):
        self.model = model.eval()
        cfg = model.config
        self.seq_len = cfg.model.seq_len
        self.n_embd = cfg.model.n_embd
        self.channels = cfg.codec.channels
        self.vocab_size = cfg.model.vocab_size
        self.direct = model.variant == "direct_access"
        self.w_tables = hyper_tables(model.hyper)

    # ---- shared helpers

    def _check_tokens(self, tokens) -> torch.Tensor:
        t = torch.as_tensor(tokens, dtype=torch.long).reshape(-1)
        if t.numel() > self.seq_len:
            raise CodecError(f"sequence of {t.numel()} tokens exceeds context {self.seq_len}")
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.vocab_size):
            raise CodecError("token id outside the model vocabulary")
        return t

    def _pad(self, tokens: torch.Tensor) -> torch.Tensor:
        x = torch.zeros(1, self.seq_len, dtype=torch.long)
        x[0, : tokens.numel()] = tokens
        return x

    def _params(self, w_buf: torch.Tensor, y_buf: torch.Tensor | None) -> GaussianParams:
        return self.model.entropy_params(w_buf, y_buf)

    def _y_tables(self, params: GaussianParams, rows: slice | int) -> list[rc.CdfTable]:
        mu = params.mu[0, rows].double().numpy()
        sigma = params.sigma[0, rows].double().numpy()
        return gaussian_tables(mu, sigma)

    # ---- encoder side

    @torch.no_grad()
    def analyze(self, tokens) -> tuple[np.ndarray, np.ndarray, GaussianParams, torch.Tensor]:
        """Encoder-side latents: Y (n x E), W (n x C), Gaussian parameters and W-bits for all rows."""
        t = self._check_tokens(tokens)
        x = self._pad(t)
        y = self.model.latent(x)
        w = self.model.analysis.analyze(y)
        params = self._params(w, y)
        n = t.numel()
        y_int = y[0, :n].to(torch.int64).numpy()
        w_int = w[0, :n].to(torch.int64).numpy()
        return y_int, w_int, params, y

    def encode_frames(self, tokens) -> list[FramePacket]:
        y, w, params, _ = self.analyze(tokens)
        n = y.shape[0]
        packets = []
        for i in range(n):
            w_bytes = rc.encode(w[i].tolist(), self.w_tables)
            y_bytes = rc.encode(y[i].tolist(), self._y_tables(params, i))
            packets.append(FramePacket(i, w_bytes, y_bytes))
        return packets

    def encode_whole(self, tokens) -> SequencePacket:
        y, w, params, _ = self.analyze(tokens)
        n = y.shape[0]
        w_bytes = rc.encode(w.ravel().tolist(), self.w_tables * n)
        y_bytes = rc.encode(y.ravel().tolist(), self._y_tables(params, slice(0, n)))
        return SequencePacket(n, w_bytes, y_bytes)

    def estimate_bpt(self, tokens) -> tuple[float, float]:
        """Model-estimated (rate_y, rate_w) in bits per token under the float32 networks."""
        t = self._check_tokens(tokens)
        n = t.numel()
        with torch.no_grad():
            out = self.model(self._pad(t))
        return float(out.bits_y[0, :n].double().sum()) / n, float(out.bits_w[0, :n].double().sum()) / n

    @torch.no_grad()
    def reference(self, tokens) -> DecodedSequence:
        """In-process split inference without any coding."""
        t = self._check_tokens(tokens)
        n = t.numel()
        y = self.model.latent(self._pad(t))
        logits = self.model.backbone.tail_forward(y)
        return DecodedSequence(y[0, :n].to(torch.int64).numpy(), logits[0, :n].clone())

    # ---- decoder side

    def frame_decoder(self) -> "FrameDecoder":
        return FrameDecoder(self)

    def decode_frames(self, packets, streaming: bool = False) -> DecodedSequence:
        """Decode frame packets; ``streaming=False`` decodes W first and batches the networks."""
        packets = [p if isinstance(p, FramePacket) else FramePacket.from_bytes(p) for p in packets]
        if streaming or self.direct:
            dec = self.frame_decoder()
            for p in packets:
                dec.push(p)
            return dec.result()
        n = len(packets)
        if n > self.seq_len:
            raise CodecError(f"{n} frames exceed context {self.seq_len}")
        w_buf = torch.zeros(1, self.seq_len, self.channels)
        for i, p in enumerate(packets):
            _expect_index(p, i)
            w_buf[0, i] = torch.tensor(_decode_chunk(p.w_chunk, self.w_tables, i, "W"), dtype=torch.float32)
        with torch.no_grad():
            params = self._params(w_buf, None)
        y_buf = torch.zeros(1, self.seq_len, self.n_embd)
        for i, p in enumerate(packets):
            y_buf[0, i] = torch.tensor(_decode_chunk(p.y_chunk, self._y_tables(params, i), i, "Y"),
                                       dtype=torch.float32)
        with torch.no_grad():
            logits = self.model.backbone.tail_forward(y_buf)
        return DecodedSequence(y_buf[0, :n].to(torch.int64).numpy(), logits[0, :n].clone())

    @torch.no_grad()
    def decode_whole(self, packet: SequencePacket | bytes) -> DecodedSequence:
        if not isinstance(packet, SequencePacket):
            packet = SequencePacket.from_bytes(packet)
        n = packet.n_tokens
        if n > self.seq_len:
            raise CodecError(f"{n} tokens exceed context {self.seq_len}")
        w_sym = _decode_chunk(packet.w_chunk, self.w_tables * n, None, "W")
        w_buf = torch.zeros(1, self.seq_len, self.channels)
        w_buf[0, :n] = torch.tensor(w_sym, dtype=torch.float32).reshape(n, self.channels)
        y_buf = torch.zeros(1, self.seq_len, self.n_embd)
        if self.direct:
            dec = rc.RangeDecoder(packet.y_chunk)
            try:
                for i in range(n):
                    params = self._params(w_buf, y_buf)
                    y_buf[0, i] = torch.tensor([dec.decode_symbol(tb) for tb in self._y_tables(params, i)],
                                               dtype=torch.float32)
                dec.finish()
            except rc.CorruptStreamError as exc:
                raise CodecError(f"corrupt Y chunk ({exc})") from exc
        else:
            params = self._params(w_buf, None)
            y_sym = _decode_chunk(packet.y_chunk, self._y_tables(params, slice(0, n)), None, "Y")
            y_buf[0, :n] = torch.tensor(y_sym, dtype=torch.float32).reshape(n, self.n_embd)
        logits = self.model.backbone.tail_forward(y_buf)
        return DecodedSequence(y_buf[0, :n].to(torch.int64).numpy(), logits[0, :n].clone())


def _expect_index(packet: FramePacket, expected: int) -> None:
    if packet.index != expected:
        if packet.index > expected:
            raise CodecError(f"missing frame {expected} (received frame {packet.index})")
        raise CodecError(f"frame {packet.index} received again or out of order (expected frame {expected})")


def _decode_chunk(data: bytes, tables, frame: int | None, kind: str) -> list[int]:
    try:
        return rc.decode(data, tables)
    except rc.CorruptStreamError as exc:
        where = f"frame {frame}: " if frame is not None else ""
        raise CodecError(f"{where}corrupt {kind} chunk ({exc})") from exc


class FrameDecoder:
    """Streaming decoder: each pushed frame yields that frame's latent row and prediction."""

    def __init__(self, codec: SequenceCodec):
        self.codec = codec
        self.w_buf = torch.zeros(1, codec.seq_len, codec.channels)
        self.y_buf = torch.zeros(1, codec.seq_len, codec.n_embd)
        self.logits: list[torch.Tensor] = []
        self.next_index = 0

    @torch.no_grad()
    def push(self, packet: FramePacket | bytes) -> tuple[np.ndarray, torch.Tensor]:
        if not isinstance(packet, FramePacket):
            packet = FramePacket.from_bytes(packet)
        i = self.next_index
        _expect_index(packet, i)
        c = self.codec
        if i >= c.seq_len:
            raise CodecError(f"frame {i} exceeds context {c.seq_len}")
        self.w_buf[0, i] = torch.tensor(_decode_chunk(packet.w_chunk, c.w_tables, i, "W"), dtype=torch.float32)
        params = c._params(self.w_buf, self.y_buf if c.direct else None)
        y_row = _decode_chunk(packet.y_chunk, c._y_tables(params, i), i, "Y")
        self.y_buf[0, i] = torch.tensor(y_row, dtype=torch.float32)
        logits = c.model.backbone.tail_forward(self.y_buf)[0, i].clone()
        self.logits.append(logits)
        self.next_index += 1
        return np.asarray(y_row, dtype=np.int64), logits

    def result(self) -> DecodedSequence:
        n = self.next_index
        logits = torch.stack(self.logits) if self.logits else torch.zeros(0, self.codec.vocab_size)
        return DecodedSequence(self.y_buf[0, :n].to(torch.int64).numpy(), logits)


def encode_sequence(codec: SequenceCodec, tokens, mode: str = "frames"):
    """Per-frame packets (``mode="frames"``) or one whole-sequence packet (``mode="whole"``)."""
    if mode == "frames":
        return codec.encode_frames(tokens)
    if mode == "whole":
        return codec.encode_whole(tokens)
    raise ValueError(f"unknown mode {mode!r}")


def decode_sequence(codec: SequenceCodec, packets, streaming: bool = False) -> DecodedSequence:
    if isinstance(packets, (SequencePacket, bytes)) and not isinstance(packets, list):
        if isinstance(packets, bytes) and packets[:4] == FRAME_MAGIC:
            return codec.decode_frames([packets], streaming)
        return codec.decode_whole(packets)
    return codec.decode_frames(list(packets), streaming)


def perplexity(cross_entropy_nats: float) -> float:
    return math.exp(cross_entropy_nats)
