"""Complexity estimators for latent representations and rate-distortion metrics.

* ``rademacher_estimate``: empirical Rademacher complexity of a set of latents.
* ``arnoldi_cov_logdet``: scaled log-determinant of the sample covariance from
  the Hessenberg matrix of an Arnoldi run on the implicit covariance operator.
* ``lipschitz_power``: Jacobian spectral norm by power iteration with
  Jacobian-vector and vector-Jacobian products only.
* ``pearson`` and ``bd_rate`` (Bjontegaard delta rate, cubic fit).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import jvp, vjp

EPS_EIG = 1e-12


# ---------------------------------------------------------------- Rademacher


def rademacher_estimate(samples, draws: int, seed: int = 0, chunk: int = 256) -> float:
    """``(1/(M N)) sum_a max_{i,j} |sum_k a_k D_k|_{ij}`` over M seeded sign vectors."""
    d = np.asarray(samples, dtype=np.float64)
    if d.ndim < 1 or d.shape[0] == 0:
        raise ValueError("rademacher_estimate needs at least one sample")
    if draws < 1:
        raise ValueError("need at least one draw")
    n = d.shape[0]
    flat = d.reshape(n, -1)
    rng = np.random.default_rng(seed)
    total = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        signs = rng.integers(0, 2, size=(m, n)).astype(np.float64) * 2.0 - 1.0
        total += float(np.abs(signs @ flat).max(axis=1).sum())
        done += m
    return total / (draws * n)


# ---------------------------------------------------------------- Arnoldi


@dataclass
class ArnoldiResult:
    value: float  # (1/2D) sum log max(eig, eps)
    eigenvalues: np.ndarray
    krylov_dim: int
    dimension: int

    @property
    def sum_log(self) -> float:
        return 2.0 * self.dimension * self.value


def arnoldi_cov_logdet(samples, iterations: int, seed: int = 0, eps_eig: float = EPS_EIG,
                       breakdown_tol: float = 1e-10) -> ArnoldiResult:
    """Arnoldi on ``v -> A^T (A v) / (N - 1)`` with ``A`` the centred N x D sample matrix."""
    a = np.asarray(samples, dtype=np.float64)
    n = a.shape[0]
    a = a.reshape(n, -1)
    dim = a.shape[1]
    if n < 2:
        raise ValueError("need at least two samples for a covariance")
    if not 1 <= iterations <= dim:
        raise ValueError(f"iterations must be in [1, D={dim}], got {iterations}")
    a = a - a.mean(axis=0, keepdims=True)

    def op(v):
        return a.T @ (a @ v) / (n - 1)

    rng = np.random.default_rng(seed)
    q = np.zeros((dim, iterations + 1))
    h = np.zeros((iterations + 1, iterations))
    v0 = rng.standard_normal(dim)
    q[:, 0] = v0 / np.linalg.norm(v0)
    k = iterations
    scale = None
    for j in range(iterations):
        w = op(q[:, j])
        if scale is None:
            scale = max(np.linalg.norm(w), 1e-300)
        for _ in range(2):  # classical Gram-Schmidt, applied twice
            coeff = q[:, : j + 1].T @ w
            w = w - q[:, : j + 1] @ coeff
            h[: j + 1, j] += coeff
        h[j + 1, j] = np.linalg.norm(w)
        if h[j + 1, j] <= breakdown_tol * scale:
            k = j + 1
            break
        q[:, j + 1] = w / h[j + 1, j]
    eig = np.linalg.eigvals(h[:k, :k]).real
    value = float(np.log(np.maximum(eig, eps_eig)).sum() / (2.0 * dim))
    return ArnoldiResult(value, np.sort(eig)[::-1], k, dim)


# ---------------------------------------------------------------- Lipschitz


def _power_norm(fn: Callable[[torch.Tensor], torch.Tensor], y: torch.Tensor, iterations: int,
                generator: torch.Generator) -> float:
    b = torch.randn(y.shape, generator=generator, dtype=y.dtype)
    b = b / b.norm()
    _, pullback = vjp(fn, y)
    for _ in range(iterations):
        _, jb = jvp(fn, (y,), (b,))
        (jtjb,) = pullback(jb)
        jtjb = jtjb.detach()
        if not bool(torch.isfinite(jtjb).all()):
            raise FloatingPointError("non-finite Jacobian product in power iteration")
        norm = jtjb.norm()
        if norm == 0:
            return 0.0
        b = jtjb / norm
    _, jb = jvp(fn, (y,), (b,))
    if not bool(torch.isfinite(jb).all()):
        raise FloatingPointError("non-finite Jacobian product in power iteration")
    return float(jb.detach().reshape(-1).norm())


def lipschitz_power(fn: Callable[[torch.Tensor], torch.Tensor], samples, iterations: int,
                    seed: int = 0) -> float:
    """Mean over samples of ``sqrt(b_K^T J^T J b_K)`` with ``b`` from power iteration on ``J^T J``."""
    if iterations < 1:
        raise ValueError("need at least one iteration")
    if torch.is_tensor(samples) and samples.dim() == 1:
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise ValueError("lipschitz_power needs at least one sample")
    gen = torch.Generator().manual_seed(seed)
    values = [_power_norm(fn, torch.as_tensor(y), iterations, gen) for y in samples]
    return float(np.mean(values))


# ---------------------------------------------------------------- metrics


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson is undefined for zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def bd_rate(curve_ref: Sequence[tuple[float, float]], curve_test: Sequence[tuple[float, float]]) -> float:
    """Average rate difference of ``curve_test`` relative to ``curve_ref`` in percent.

    Points are (rate, quality) with higher quality better. A cubic in quality is
    fitted to log-rate for each curve and integrated over the common quality range.
    """
    ref = np.asarray(curve_ref, dtype=np.float64)
    test = np.asarray(curve_test, dtype=np.float64)
    for name, c in (("reference", ref), ("test", test)):
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 4:
            raise ValueError(f"{name} curve needs at least 4 (rate, quality) points")
        if np.any(c[:, 0] <= 0):
            raise ValueError(f"{name} curve has non-positive rates")
    lo = max(ref[:, 1].min(), test[:, 1].min())
    hi = min(ref[:, 1].max(), test[:, 1].max())
    if hi <= lo:
        raise ValueError("quality ranges of the two curves do not overlap")
    p_ref = np.polyint(np.polyfit(ref[:, 1], np.log(ref[:, 0]), 3))
    p_test = np.polyint(np.polyfit(test[:, 1], np.log(test[:, 0]), 3))
    area_ref = np.polyval(p_ref, hi) - np.polyval(p_ref, lo)
    area_test = np.polyval(p_test, hi) - np.polyval(p_test, lo)
    avg = (area_test - area_ref) / (hi - lo)
    return float((math.exp(avg) - 1.0) * 100.0)


# ---------------------------------------------------------------- reports

REPORT_COLUMNS = ("model", "split", "lambda", "bpt", "distortion", "rademacher", "cov_logdet_scaled", "lipschitz_log")
CORRELATION_PAIRS = (("bpt", "rademacher"), ("bpt", "cov_logdet_scaled"))

# measured quantity standing in for each bound ingredient
PROXIES = {
    "bpt": "rate of the target representation (empirical V-entropy objective)",
    "rademacher": "empirical Rademacher complexity of the quantized latents",
    "cov_logdet_scaled": "half log-determinant of the latent covariance, scaled by 1/D",
    "lipschitz_log": "log Lipschitz constant of the log-likelihood under the entropy model",
}


@dataclass
class ComplexityRow:
    model: str
    split: int
    lmbda: float
    bpt: float
    distortion: float
    rademacher: float
    cov_logdet_scaled: float
    lipschitz_log: float

    def __post_init__(self):
        values = (self.bpt, self.distortion, self.rademacher, self.cov_logdet_scaled, self.lipschitz_log)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite estimate in report row for split {self.split}")
        if self.rademacher < 0:
            raise ValueError("Rademacher estimate must be non-negative")

    def as_record(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lmbda")
        return {k: d[k] for k in REPORT_COLUMNS}


@dataclass
class ComplexityReport:
    rows: list[ComplexityRow]
    correlations: dict[str, float] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    @classmethod
    def build(cls, rows: list[ComplexityRow], settings: dict | None = None) -> "ComplexityReport":
        report = cls(list(rows), settings=dict(settings or {}))
        if len(rows) < 2:
            report.notices.append("fewer than 2 split points: correlations omitted")
            return report
        for a, b in CORRELATION_PAIRS:
            key = f"{a}~{b}"
            try:
                report.correlations[key] = pearson([getattr(r, a) for r in rows], [getattr(r, b) for r in rows])
            except ValueError as exc:
                report.notices.append(f"{key}: {exc}")
        return report

    def to_json(self) -> dict:
        return {"schema": "complexity-report/1", "columns": list(REPORT_COLUMNS),
                "rows": [r.as_record() for r in self.rows],
                "correlations": dict(self.correlations), "notices": list(self.notices),
                "proxies": PROXIES, "settings": self.settings}

    def write(self, out_dir: str | Path, stem: str = "complexity") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        with csv_path.open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for r in self.rows:
                rec = r.as_record()
                writer.writerow([rec[k] if isinstance(rec[k], str) else repr(rec[k]) for k in REPORT_COLUMNS])
            for key, value in self.correlations.items():
                writer.writerow([f"pearson:{key}", "", "", "", "", "", "", repr(value)])
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def validate_report(doc: dict) -> None:
    """Check a JSON report against the documented schema."""
    if doc.get("schema") != "complexity-report/1":
        raise ValueError("unknown report schema")
    if list(doc.get("columns", [])) != list(REPORT_COLUMNS):
        raise ValueError("unexpected report columns")
    for row in doc["rows"]:
        if set(row) != set(REPORT_COLUMNS):
            raise ValueError("row keys differ from the report columns")
        for k in REPORT_COLUMNS[1:]:
            if not isinstance(row[k], (int, float)) or not math.isfinite(row[k]):
                raise ValueError(f"column {k} must be a finite number")
    for key, value in doc.get("correlations", {}).items():
        if not -1.0 <= value <= 1.0:
            raise ValueError(f"correlation {key} outside [-1, 1]")
