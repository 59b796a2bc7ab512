import math
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mortseq import tsne
from mortseq.errors import CalibrationFailure
from mortseq.gradcheck import check_tsne


def planted_clusters(n=25, d=30, gap=10.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, size=(n, d))
    b = rng.normal(0, 1, size=(n, d))
    b[:, 0] += gap
    return np.vstack([a, b])


def test_rows_and_perplexity():
    X = np.random.default_rng(0).normal(size=(40, 5))
    P, betas = tsne.perplexity_calibration(X, 10.0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert (np.diag(P) == 0).all() and (betas > 0).all()
    for row in P:
        p = row[row > 0]
        H2 = -(p * np.log2(p)).sum()
        assert abs(2 ** H2 - 10.0) < 1e-4


def test_equidistant_points():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    P, _ = tsne.perplexity_calibration(X, 2.0)
    off = P[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, 0.5, atol=1e-12)


def test_calibration_failure_and_preconditions():
    X = np.random.default_rng(1).normal(size=(30, 3))
    with pytest.raises(CalibrationFailure):
        tsne.perplexity_calibration(X, 20.0, max_steps=1)
    with pytest.raises(ValueError):
        tsne.perplexity_calibration(X, 30.0)
    with pytest.raises(ValueError):
        tsne.perplexity_calibration(X[:2], 1.0)


def test_symmetrize():
    rng = np.random.default_rng(2)
    S = rng.uniform(size=(6, 6))
    S = S + S.T
    np.fill_diagonal(S, 0)
    S /= S.sum(axis=1, keepdims=True)
    Ssym = (S + S.T) / 2
    np.testing.assert_allclose(tsne.symmetrize(Ssym), Ssym / 6, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 30))
def test_affinity_invariants(seed, n):
    X = np.random.default_rng(seed).normal(size=(n, 4))
    P = tsne.joint_affinities(X, perplexity=min(5.0, n - 1.5))
    assert (P >= 0).all() and (np.diag(P) == 0).all()
    assert abs(P.sum() - 1.0) < 1e-9
    assert (P == P.T).all()


@pytest.mark.parametrize("seed", range(3))
def test_kl_gradient_vs_finite_differences(seed):
    assert check_tsne(seed) < 1e-4


def test_optimize_trace_and_separation():
    X = planted_clusters()
    P = tsne.joint_affinities(X, 10.0)
    cfg = tsne.EmbeddingConfig(perplexity=10.0, iterations=1000, seed=0)
    Y, trace = tsne.optimize(P, cfg)
    assert len(trace) == 1001 and min(trace) >= 0
    assert trace[-1] < trace[0]
    assert trace[-1] < trace[cfg.exaggeration_iters]
    ca, cb = Y[:25].mean(axis=0), Y[25:].mean(axis=0)
    radius = np.mean(np.r_[np.linalg.norm(Y[:25] - ca, axis=1), np.linalg.norm(Y[25:] - cb, axis=1)])
    assert np.linalg.norm(ca - cb) > 3 * radius
    Y2, trace2 = tsne.optimize(P, cfg)
    np.testing.assert_array_equal(Y, Y2)
    assert trace == trace2


def test_rotation_equivariance():
    X = planted_clusters(n=15, seed=3)
    P = tsne.joint_affinities(X, 5.0)
    cfg = tsne.EmbeddingConfig(perplexity=5.0, iterations=300)
    Y0 = np.random.default_rng(4).normal(0, 1e-4, size=(30, 2))
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    Ya, ta = tsne.optimize(P, cfg, Y0)
    Yb, tb = tsne.optimize(P, cfg, Y0 @ R.T)
    assert ta == tb
    np.testing.assert_array_equal(Yb, Ya @ R.T)


def test_embed_and_emit(tmp_path):
    X = planted_clusters(n=10, seed=5)
    flags = [True] * 10 + [False] * 10
    ids = [f"r{i}" for i in range(20)]
    points, trace = tsne.embed(X, flags, ids, tsne.EmbeddingConfig(perplexity=5.0, iterations=200))
    svg, coords = tsne.emit_scatter(points, tmp_path / "f.svg")
    text = svg.read_text()
    assert len(re.findall(r'<circle class="marker ', text)) == 20
    assert len(re.findall(r'class="marker infectious"', text)) == 10
    assert len(re.findall(r'class="legend-marker"', text)) == 2
    assert 'class="axes"' in text
    lines = coords.read_text().splitlines()
    assert len(lines) == 20 and lines[0].startswith("r0,") and lines[0].endswith(",1")
    assert tsne.read_coordinates(coords) == points


def test_single_legend_class(tmp_path):
    pts = [tsne.EmbeddingPoint(float(i), float(-i), True, str(i)) for i in range(4)]
    svg, coords = tsne.emit_scatter(pts, tmp_path / "a.svg", tmp_path / "a.txt")
    assert svg.read_text().count('class="legend-marker"') == 1
    assert tsne.read_coordinates(coords) == pts
    with pytest.raises(ValueError):
        tsne.emit_scatter([], tmp_path / "b.svg")


def test_coordinate_precision(tmp_path):
    pts = [tsne.EmbeddingPoint(0.1 + 0.2, -1e-300, False, "a,b"), tsne.EmbeddingPoint(1 / 3, 2.5e17, True, "c")]
    tsne.write_coordinates(pts, tmp_path / "c.csv")
    assert tsne.read_coordinates(tmp_path / "c.csv") == pts


def test_config_validation():
    with pytest.raises(ValueError):
        tsne.EmbeddingConfig(perplexity=0)
    with pytest.raises(ValueError):
        tsne.EmbeddingConfig(iterations=0)
