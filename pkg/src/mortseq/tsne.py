"""Exact t-SNE and a dependency-free SVG scatter writer.

Cost is O(n^2) per iteration, intended for a few thousand points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import CalibrationFailure, NonFiniteEmbedding


@dataclass(frozen=True)
class EmbeddingConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    init_scale: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.perplexity <= 0 or self.iterations < 1 or self.learning_rate <= 0:
            raise ValueError("perplexity, iterations and learning_rate must be positive")
        if self.exaggeration <= 0:
            raise ValueError("exaggeration must be positive")


@dataclass(frozen=True)
class EmbeddingPoint:
    x: float
    y: float
    infectious: bool
    id: str = ""


def squared_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d: np.ndarray, beta: float):
    """Entropy (nats) and probabilities of exp(-beta * d), d shifted to min 0."""
    w = np.exp(-beta * d)
    s = w.sum()
    p = w / s
    H = math.log(s) + beta * float((d * p).sum())
    return H, p


def perplexity_calibration(X, perplexity: float = 30.0, tol: float = 1e-5, max_steps: int = 50):
    """Conditional affinities ``p_{j|i}`` with per-row bandwidth bisection.

    Each row's Gaussian precision is searched until ``2**H(P_i)`` is within
    ``tol`` of ``perplexity``. Returns ``(P, betas)``; rows sum to 1 and the
    diagonal is zero.
    """
    D = squared_distances(X)
    n = D.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    if not 0 < perplexity < n:
        raise ValueError(f"perplexity must lie in (0, {n}), got {perplexity}")
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.zeros(n)
    for i in range(n):
        d = np.delete(D[i], i)
        # bandwidth starts at the row's median distance; the shift only guards exp()
        scale = float(np.median(d[d > 0])) if (d > 0).any() else 1.0
        d = d - d.min()
        beta, lo, hi = 1.0 / scale, 0.0, math.inf
        H, p = _row_entropy(d, beta)
        for _ in range(max_steps):
            if abs(math.exp(H) - perplexity) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2.0 if hi == math.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            H, p = _row_entropy(d, beta)
        if abs(math.exp(H) - perplexity) >= tol:
            raise CalibrationFailure(
                f"row {i}: perplexity {math.exp(H):.6g} after {max_steps} steps, target {perplexity}"
            )
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


def symmetrize(P_cond: np.ndarray) -> np.ndarray:
    n = P_cond.shape[0]
    P = (P_cond + P_cond.T) / (2.0 * n)
    np.fill_diagonal(P, 0.0)
    return P


def joint_affinities(X, perplexity: float = 30.0) -> np.ndarray:
    return symmetrize(perplexity_calibration(X, perplexity)[0])


def _embedding_distances(Y):
    # per-axis accumulation keeps the result invariant under axis swaps
    D = np.zeros((Y.shape[0], Y.shape[0]))
    for d in range(Y.shape[1]):
        col = Y[:, d]
        D += (col[:, None] - col[None, :]) ** 2
    return D


def _student(Y):
    num = 1.0 / (1.0 + _embedding_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = _student(Y)
    Q = num / num.sum()
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))).sum())


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``dKL(P||Q)/dY = 4 sum_j (p_ij - q_ij)(y_i - y_j) / (1 + |y_i - y_j|^2)``."""
    num = _student(Y)
    Q = num / num.sum()
    W = (P - Q) * num
    rows = W.sum(axis=1)
    grad = np.empty_like(Y)
    for d in range(Y.shape[1]):
        grad[:, d] = 4.0 * (rows * Y[:, d] - W @ Y[:, d])
    return grad


def optimize(P: np.ndarray, config: EmbeddingConfig = EmbeddingConfig(), Y0=None):
    """Momentum gradient descent on KL(P||Q) in two dimensions.

    ``trace[0]`` is the KL of the initial layout and ``trace[t]`` the KL
    after iteration ``t``, always measured against the un-exaggerated P.
    """
    n = P.shape[0]
    if Y0 is None:
        Y = np.random.default_rng(config.seed).normal(0.0, config.init_scale, size=(n, 2))
    else:
        Y = np.array(Y0, dtype=np.float64)
    V = np.zeros_like(Y)
    trace = [kl_divergence(P, Y)]
    for it in range(config.iterations):
        P_eff = P * config.exaggeration if it < config.exaggeration_iters else P
        mom = config.momentum if it < config.momentum_switch else config.final_momentum
        grad = kl_gradient(P_eff, Y)
        V = mom * V - config.learning_rate * grad
        Y = Y + V
        Y = Y - Y.mean(axis=0)
        if not np.isfinite(Y).all():
            raise NonFiniteEmbedding(f"embedding diverged at iteration {it + 1}")
        trace.append(kl_divergence(P, Y))
    return Y, trace


def embed(features, flags, ids=None, config: EmbeddingConfig = EmbeddingConfig()):
    P = joint_affinities(features, config.perplexity)
    Y, trace = optimize(P, config)
    ids = ids if ids is not None else [str(i) for i in range(len(flags))]
    points = [EmbeddingPoint(float(x), float(y), bool(f), str(i)) for (x, y), f, i in zip(Y, flags, ids)]
    return points, trace


# --- output ------------------------------------------------------------------

COLORS = {True: "#d62728", False: "#1f77b4"}
LABELS = {True: "infectious or parasitic (A/B)", False: "other causes"}


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    return [first + k * step for k in range(int((hi - first) / step) + 1)]


def render_svg(points: Sequence[EmbeddingPoint], title: str = "t-SNE of intermediate features") -> str:
    W, H, m = 640, 520, 60
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    pad_x = (x1 - x0) * 0.05 or 1.0
    pad_y = (y1 - y0) * 0.05 or 1.0
    x0, x1, y0, y1 = x0 - pad_x, x1 + pad_x, y0 - pad_y, y1 + pad_y

    def sx(v):
        return m + (v - x0) / (x1 - x0) * (W - 2 * m)

    def sy(v):
        return H - m - (v - y0) / (y1 - y0) * (H - 2 * m)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<title>{escape(title)}</title>',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<g class="axes" stroke="black" stroke-width="1">'
        f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}"/>'
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}"/></g>',
    ]
    ticks = ['<g class="ticks" font-family="sans-serif" font-size="10">']
    for t in _ticks(x0, x1):
        ticks.append(f'<line x1="{sx(t):.2f}" y1="{H - m}" x2="{sx(t):.2f}" y2="{H - m + 4}" stroke="black"/>'
                     f'<text x="{sx(t):.2f}" y="{H - m + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        ticks.append(f'<line x1="{m - 4}" y1="{sy(t):.2f}" x2="{m}" y2="{sy(t):.2f}" stroke="black"/>'
                     f'<text x="{m - 6}" y="{sy(t) + 3:.2f}" text-anchor="end">{t:g}</text>')
    ticks.append("</g>")
    out.extend(ticks)
    out.append(f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle" font-family="sans-serif" font-size="12">t-SNE 1</text>')
    out.append(f'<text x="15" y="{H / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 15 {H / 2})">t-SNE 2</text>')
    out.append('<g class="points">')
    for p in points:
        cls = "infectious" if p.infectious else "other"
        out.append(f'<circle class="marker {cls}" cx="{sx(p.x):.2f}" cy="{sy(p.y):.2f}" r="3" '
                   f'fill="{COLORS[p.infectious]}" fill-opacity="0.7"><title>{escape(p.id)}</title></circle>')
    out.append("</g>")
    present = [flag for flag in (True, False) if any(p.infectious == flag for p in points)]
    out.append('<g class="legend" font-family="sans-serif" font-size="11">')
    for k, flag in enumerate(present):
        y = m - 30 + 16 * k
        out.append(f'<circle class="legend-marker" cx="{W - m - 190}" cy="{y}" r="4" fill="{COLORS[flag]}"/>'
                   f'<text x="{W - m - 180}" y="{y + 4}">{escape(LABELS[flag])}</text>')
    out.append("</g></svg>")
    return "\n".join(out) + "\n"


def write_coordinates(points: Sequence[EmbeddingPoint], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            fh.write(f"{p.id},{p.x!r},{p.y!r},{int(p.infectious)}\n")


def read_coordinates(path) -> list[EmbeddingPoint]:
    points = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            pid, x, y, flag = line.rstrip("\n").rsplit(",", 3)
            points.append(EmbeddingPoint(float(x), float(y), flag == "1", pid))
    return points


def emit_scatter(points: Sequence[EmbeddingPoint], path, coords_path=None):
    """Write the SVG scatter to ``path`` and coordinates next to it (``.csv``)."""
    if not points:
        raise ValueError("no points to plot")
    path = Path(path)
    coords_path = Path(coords_path) if coords_path else path.with_suffix(".csv")
    path.write_text(render_svg(points))
    write_coordinates(points, coords_path)
    return path, coords_path
