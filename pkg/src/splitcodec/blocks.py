"""Causal transformer blocks and the networks built from them.

Every attention mask here is causal, and all dense layers inside blocks are
bias-free. For a fixed sequence length, row ``i`` of any network output is
bit-identical no matter what (finite) values the rows after ``i`` hold; the
coder relies on this to rebuild probability tables on the receiving side.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .entropy_models import SIGMA_MIN, GaussianParams
from .quantization import quantize_ste


def heads_for(width: int, n_head: int) -> int:
    """Largest head count <= n_head dividing ``width`` with head size >= 2."""
    for h in range(min(n_head, width), 0, -1):
        if width % h == 0 and (width // h >= 2 or h == 1):
            return h
    return 1


def causal_attention(q, k, v, n_head: int) -> torch.Tensor:
    """Multi-head attention over (B, T, *) inputs with a lower-triangular mask."""
    b, t, dk = q.shape
    dv = v.shape[-1]
    q = q.view(b, t, n_head, dk // n_head).transpose(1, 2)
    k = k.view(b, t, n_head, dk // n_head).transpose(1, 2)
    v = v.view(b, t, n_head, dv // n_head).transpose(1, 2)
    att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(dk // n_head))
    mask = torch.ones(t, t, dtype=torch.bool, device=q.device).tril()
    att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
    return (att @ v).transpose(1, 2).reshape(b, t, dv)


class SelfAttention(nn.Module):
    def __init__(self, width: int, n_head: int):
        super().__init__()
        if width % n_head:
            raise ValueError(f"width {width} not divisible by {n_head} heads")
        self.n_head = n_head
        self.qkv = nn.Linear(width, 3 * width, bias=False)
        self.out = nn.Linear(width, width, bias=False)

    def forward(self, x):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.out(causal_attention(q, k, v, self.n_head))


class MLP(nn.Module):
    def __init__(self, width: int, ratio: int = 4):
        super().__init__()
        self.fc = nn.Linear(width, ratio * width, bias=False)
        self.out = nn.Linear(ratio * width, width, bias=False)

    def forward(self, x):
        return self.out(F.gelu(self.fc(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block; a bias-free projection between attention and MLP changes the width."""

    def __init__(self, d_in: int, d_out: int, n_head: int):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.ln_attn = nn.LayerNorm(d_in)
        self.attn = SelfAttention(d_in, n_head)
        self.proj = nn.Linear(d_in, d_out, bias=False) if d_in != d_out else nn.Identity()
        self.ln_mlp = nn.LayerNorm(d_out)
        self.mlp = MLP(d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"block expects width {self.d_in}, got {x.shape[-1]}")
        x = x + self.attn(self.ln_attn(x))
        x = self.proj(x)
        return x + self.mlp(self.ln_mlp(x))


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=std)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class SplitModel(nn.Module):
    """Decoder-only LM whose blocks are partitioned at ``split``.

    ``head_forward`` runs embeddings and blocks 1..S (the sending side);
    ``tail_forward`` runs blocks S+1..L and the output head.
    """

    def __init__(self, vocab_size: int, n_layer: int, n_embd: int, n_head: int, seq_len: int, split: int,
                 embed_std: float = 1.0):
        super().__init__()
        if not 1 <= split < n_layer:
            raise ValueError(f"split must satisfy 1 <= S < L, got S={split}, L={n_layer}")
        self.vocab_size, self.n_layer, self.n_embd, self.seq_len, self.split = vocab_size, n_layer, n_embd, seq_len, split
        self.tok_emb = nn.Embedding(vocab_size, n_embd)
        self.pos_emb = nn.Embedding(seq_len, n_embd)
        self.blocks = nn.ModuleList(TransformerBlock(n_embd, n_embd, n_head) for _ in range(n_layer))
        self.ln_f = nn.LayerNorm(n_embd)
        self.lm_head = nn.Linear(n_embd, vocab_size, bias=False)
        init_weights(self)
        nn.init.normal_(self.tok_emb.weight, std=embed_std)
        nn.init.normal_(self.pos_emb.weight, std=embed_std * 0.1)
        for blk in self.blocks:
            nn.init.normal_(blk.attn.out.weight, std=0.02 / math.sqrt(2 * n_layer))
            nn.init.normal_(blk.mlp.out.weight, std=0.02 / math.sqrt(2 * n_layer))

    def head_forward(self, tokens: torch.Tensor) -> torch.Tensor:
        t = tokens.shape[-1]
        if t > self.seq_len:
            raise ValueError(f"sequence of {t} tokens exceeds context {self.seq_len}")
        pos = torch.arange(t, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)
        for blk in self.blocks[: self.split]:
            x = blk(x)
        return x

    def tail_forward(self, y: torch.Tensor) -> torch.Tensor:
        x = y
        for blk in self.blocks[self.split:]:
            x = blk(x)
        return self.lm_head(self.ln_f(x))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.tail_forward(self.head_forward(tokens))


class AnalysisNetwork(nn.Module):
    """Hyper-prior transform ``h``: blocks narrowing E down to C."""

    def __init__(self, n_embd: int, widths: list[int], n_head: int, seq_len: int):
        super().__init__()
        dims = [n_embd, *widths]
        self.pos_emb = nn.Parameter(torch.zeros(seq_len, n_embd))
        self.blocks = nn.ModuleList(
            TransformerBlock(a, b, heads_for(a, n_head)) for a, b in zip(dims[:-1], dims[1:]))
        init_weights(self)
        self.channels = dims[-1]

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        x = y + self.pos_emb[: y.shape[-2]]
        for blk in self.blocks:
            x = blk(x)
        return x

    def analyze(self, y: torch.Tensor) -> torch.Tensor:
        """``W = round(h(Y))`` with a straight-through gradient."""
        return quantize_ste(self(y))


def split_gaussian(out: torch.Tensor, n_embd: int) -> GaussianParams:
    mu, raw = out[..., :n_embd], out[..., n_embd:]
    sigma = torch.exp(raw.clamp(max=20.0)).clamp_min(SIGMA_MIN)
    return GaussianParams(mu, sigma)


class SynthesisNetwork(nn.Module):
    """Entropy-parameter transform ``g_y``: blocks widening C up to 2E, split into (mu, sigma)."""

    def __init__(self, channels: int, widths: list[int], n_embd: int, n_head: int, seq_len: int):
        super().__init__()
        if widths[-1] != 2 * n_embd:
            raise ValueError("the last synthesis width must be 2 * n_embd")
        dims = [channels, *widths]
        self.n_embd = n_embd
        self.pos_emb = nn.Parameter(torch.zeros(seq_len, channels))
        self.blocks = nn.ModuleList(
            TransformerBlock(a, b, heads_for(a, n_head)) for a, b in zip(dims[:-1], dims[1:]))
        init_weights(self)

    def forward(self, w: torch.Tensor) -> GaussianParams:
        x = w + self.pos_emb[: w.shape[-2]]
        for blk in self.blocks:
            x = blk(x)
        return split_gaussian(x, self.n_embd)


class FusionBlock(nn.Module):
    """Cross block of the direct-access model.

    Queries come from the hyper-prior features; keys and values come from the
    (one-step delayed) latent concatenated with those features.
    """

    def __init__(self, channels: int, n_embd: int, n_head: int):
        super().__init__()
        if channels % n_head == 0 and n_embd % n_head == 0:
            self.n_head = n_head
        else:
            self.n_head = heads_for(math.gcd(channels, n_embd), n_head)
        self.ln_w = nn.LayerNorm(channels)
        self.ln_y = nn.LayerNorm(n_embd)
        self.query = nn.Linear(channels, channels, bias=False)
        self.key = nn.Linear(n_embd + channels, channels, bias=False)
        self.value = nn.Linear(n_embd + channels, n_embd, bias=False)
        self.out = nn.Linear(n_embd, n_embd, bias=False)
        self.ln_mlp = nn.LayerNorm(n_embd)
        self.mlp = MLP(n_embd)

    def forward(self, w_feat: torch.Tensor, y_shift: torch.Tensor) -> torch.Tensor:
        wn = self.ln_w(w_feat)
        kv_in = torch.cat([self.ln_y(y_shift), wn], dim=-1)
        att = causal_attention(self.query(wn), self.key(kv_in), self.value(kv_in), self.n_head)
        x = y_shift + self.out(att)
        return x + self.mlp(self.ln_mlp(x))


class DirectAccessModel(nn.Module):
    """Baseline entropy model for ``Y`` that also sees previously coded rows of ``Y``.

    Row ``i`` of the output depends only on ``w[:i+1]`` and ``y[:i]``.
    """

    def __init__(self, channels: int, n_embd: int, n_head: int, seq_len: int, n_w_blocks: int = 4, n_y_blocks: int = 3):
        super().__init__()
        self.n_embd = n_embd
        self.pos_emb = nn.Parameter(torch.zeros(seq_len, channels))
        self.w_blocks = nn.ModuleList(
            TransformerBlock(channels, channels, heads_for(channels, n_head)) for _ in range(n_w_blocks))
        self.start = nn.Parameter(torch.zeros(n_embd))
        self.fusion = FusionBlock(channels, n_embd, n_head)
        widths = [n_embd] * n_y_blocks + [2 * n_embd]
        self.y_blocks = nn.ModuleList(
            TransformerBlock(a, b, heads_for(a, n_head)) for a, b in zip(widths[:-1], widths[1:]))
        init_weights(self)
        nn.init.normal_(self.start, std=0.02)

    def shift(self, y: torch.Tensor) -> torch.Tensor:
        start = self.start.expand(*y.shape[:-2], 1, self.n_embd)
        return torch.cat([start, y[..., :-1, :]], dim=-2)

    def forward(self, w: torch.Tensor, y: torch.Tensor) -> GaussianParams:
        """Predict parameters for ``y`` from ``w`` and the unshifted latent."""
        return self.predict_shifted(w, self.shift(y))

    def predict_shifted(self, w: torch.Tensor, y_shift: torch.Tensor) -> GaussianParams:
        x = w + self.pos_emb[: w.shape[-2]]
        for blk in self.w_blocks:
            x = blk(x)
        x = self.fusion(x, y_shift)
        for blk in self.y_blocks:
            x = blk(x)
        return split_gaussian(x, self.n_embd)
