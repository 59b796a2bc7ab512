"""Central finite-difference checks for the LSTM and t-SNE gradients."""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import lstm, tsne
from .errors import CheckFailed
from .icd import ABSENT_SLOT, ETIOLOGY_OFFSET, MAJOR_OFFSET, ONE_HOT_DIM

STEP = 1e-5
TOLERANCE = 1e-4
# entries whose analytic and numeric magnitudes are both below this are
# compared on an absolute scale (FD round-off is ~1e-11 at STEP)
FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return np.abs(analytic - numeric) / den


def numeric_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + step
        up = f()
        flat[j] = old - step
        down = f()
        flat[j] = old
        gflat[j] = (up - down) / (2.0 * step)
    return g


def random_chain(rng, length: int) -> np.ndarray:
    X = np.zeros((length, ONE_HOT_DIM))
    for t in range(length):
        X[t, rng.integers(26)] = 1.0
        X[t, MAJOR_OFFSET + rng.integers(100)] = 1.0
        X[t, ETIOLOGY_OFFSET + rng.integers(ABSENT_SLOT - ETIOLOGY_OFFSET + 1)] = 1.0
    return X


def lstm_instance(seed: int, n_samples: int = 5, hidden: int = 4, max_len: int = 4):
    rng = np.random.default_rng([seed, 1])
    k = int(rng.integers(2, 6))
    cfg = lstm.NetworkConfig(n_classes=k, hidden=hidden, dropout=0.0, seed=seed)
    params = lstm.init_params(cfg, rng)
    for name in params:
        # larger than the default init so every gate is exercised off its linear regime
        params[name] = rng.normal(0.0, 0.5, size=params[name].shape)
    seqs = [random_chain(rng, int(rng.integers(1, max_len + 1))) for _ in range(n_samples)]
    labels = rng.integers(0, k, size=n_samples)
    return cfg, params, seqs, labels


def check_lstm(seed: int, corrupt: Optional[str] = None) -> dict:
    """Max relative error per gate tensor (``l1.W_i`` ... ``fc.b``) for one instance."""
    cfg, params, seqs, labels = lstm_instance(seed)
    _, grads, _ = lstm.batch_loss_and_grad(seqs, labels, params, cfg)

    def loss():
        return lstm.batch_loss_and_grad(seqs, labels, params, cfg, need_grad=False)[0]

    numeric = {name: numeric_gradient(loss, params[name]) for name in params}
    a_views = lstm.split_gates(grads, cfg.hidden)
    n_views = lstm.split_gates(numeric, cfg.hidden)
    if corrupt is not None:
        if corrupt not in a_views:
            raise KeyError(f"unknown tensor {corrupt!r}")
        a_views[corrupt] = a_views[corrupt] + 1e-2
    return {name: float(relative_error(a_views[name], n_views[name]).max()) for name in a_views}


def tsne_instance(seed: int, n: int = 10):
    rng = np.random.default_rng([seed, 2])
    X = rng.normal(size=(n, 5))
    P = tsne.joint_affinities(X, perplexity=3.0)
    Y = rng.normal(size=(n, 2))
    return P, Y


def check_tsne(seed: int, n: int = 10) -> float:
    P, Y = tsne_instance(seed, n)
    analytic = tsne.kl_gradient(P, Y)
    numeric = numeric_gradient(lambda: tsne.kl_divergence(P, Y), Y)
    return float(relative_error(analytic, numeric).max())


def run(instances: int = 10, seed: int = 0, corrupt: Optional[str] = None, tol: float = TOLERANCE,
        raise_on_failure: bool = True) -> dict:
    """Worst relative error per tensor over ``instances`` seeded cases."""
    worst: dict = {}
    for s in range(seed, seed + instances):
        for name, err in check_lstm(s, corrupt).items():
            worst[name] = max(worst.get(name, 0.0), err)
        worst["tsne.Y"] = max(worst.get("tsne.Y", 0.0), check_tsne(s))
    failed = [name for name, err in worst.items() if not err < tol]
    if failed and raise_on_failure:
        raise CheckFailed(failed, {k: worst[k] for k in failed})
    return worst
