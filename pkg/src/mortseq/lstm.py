"""Two-layer LSTM classifier with hand-written BPTT.

Gate pre-activations of a layer are stacked as rows ``[i | f | o | g]`` of
``W`` (4H x D_in), ``U`` (4H x H) and ``b`` (4H). Per time step::

    i = sigmoid(W_i x + U_i h + b_i)    f = sigmoid(W_f x + U_f h + b_f)
    o = sigmoid(W_o x + U_o h + b_o)    g = tanh(W_g x + U_g h + b_g)
    c' = f * c + i * g                  h' = o * tanh(c')

The last layer's final hidden vector is the intermediate feature; inverted
dropout (training only) is applied to it before the fully connected head.
Sequences are never padded: a mini-batch is evaluated as groups of equal
length, which is exactly per-sample recursion.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (DivergenceDetected, EmptySequence, MissingCache, ModelFormatError,
                     NonFiniteActivation, SequenceTooLong, ShapeMismatch)
from .icd import ONE_HOT_DIM
from .rmsprop import RmsPropState, rmsprop_step

GATES = ("i", "f", "o", "g")
FORMAT = "mortseq-lstm"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    n_classes: int
    input_dim: int = ONE_HOT_DIM
    hidden: int = 30
    layers: int = 2
    dropout: float = 0.1
    lr: float = 0.003
    epochs: int = 40
    batch_size: int = 64
    max_len: int = 20
    seed: int = 0
    rho: float = 0.9
    eps: float = 1e-8
    forget_bias: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_classes", "input_dim", "hidden", "layers", "epochs", "batch_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


def sigmoid(z):
    # split branches keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tensor_shapes(cfg: NetworkConfig) -> dict:
    H = cfg.hidden
    shapes = {}
    for layer in range(1, cfg.layers + 1):
        d_in = cfg.input_dim if layer == 1 else H
        shapes[f"l{layer}.W"] = (4 * H, d_in)
        shapes[f"l{layer}.U"] = (4 * H, H)
        shapes[f"l{layer}.b"] = (4 * H,)
    shapes["fc.W"] = (cfg.n_classes, H)
    shapes["fc.b"] = (cfg.n_classes,)
    return shapes


def init_params(cfg: NetworkConfig, rng=None) -> dict:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, forget bias 1."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    H = cfg.hidden
    params = {}
    for name, shape in tensor_shapes(cfg).items():
        if len(shape) == 2:
            r = 1.0 / math.sqrt(shape[1])
            params[name] = rng.uniform(-r, r, size=shape)
        else:
            params[name] = np.zeros(shape)
    for layer in range(1, cfg.layers + 1):
        params[f"l{layer}.b"][H:2 * H] = cfg.forget_bias
    dt = np.dtype(cfg.dtype)
    return {k: v.astype(dt) for k, v in params.items()}


def gate_view(tensor: np.ndarray, gate: str, hidden: int) -> np.ndarray:
    k = GATES.index(gate)
    return tensor[k * hidden:(k + 1) * hidden]


def split_gates(params: dict, hidden: int) -> dict:
    """Per-gate views ``l1.W_i``, ``l1.U_f``, ... plus the head tensors."""
    out = {}
    for name, t in params.items():
        if name.startswith("fc."):
            out[name] = t
            continue
        for gate in GATES:
            out[f"{name}_{gate}"] = gate_view(t, gate, hidden)
    return out


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray
    cache: Optional[dict] = None


def _step(x, h_prev, c_prev, W, U, b):
    H = h_prev.shape[-1]
    z = x @ W.T + h_prev @ U.T + b
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def cell_forward(x_t, prev: LstmState, params: dict, layer: int) -> LstmState:
    """One LSTM step for ``layer`` (1-based); caches gate activations."""
    W, U, b = params[f"l{layer}.W"], params[f"l{layer}.U"], params[f"l{layer}.b"]
    x_t = np.asarray(x_t, dtype=W.dtype)
    H = U.shape[1]
    if x_t.shape[-1] != W.shape[1] or prev.h.shape[-1] != H or prev.c.shape[-1] != H:
        raise ShapeMismatch(
            f"layer {layer}: expected input {W.shape[1]} and state {H}, "
            f"got {x_t.shape[-1]}, {prev.h.shape[-1]}, {prev.c.shape[-1]}"
        )
    h, c, cache = _step(x_t, prev.h, prev.c, W, U, b)
    if not (np.isfinite(h).all() and np.isfinite(c).all()):
        raise NonFiniteActivation(f"non-finite LSTM state in layer {layer}")
    names = ("x", "h_prev", "c_prev", "i", "f", "o", "g", "tanh_c")
    return LstmState(h, c, dict(zip(names, cache)))


def _check_length(T, cfg):
    if T < 1:
        raise EmptySequence("cannot run the network on an empty chain")
    if T > cfg.max_len:
        raise SequenceTooLong(f"chain of length {T} exceeds max_len={cfg.max_len}")


def _forward_group(X, params, cfg, mask=None, keep_cache=False):
    """X: (B, T, D) equal-length group. Returns logits, feature, caches."""
    B, T, _ = X.shape
    H = cfg.hidden
    dt = params["fc.W"].dtype
    inputs = [X[:, t, :] for t in range(T)]
    caches = []
    for layer in range(1, cfg.layers + 1):
        W, U, b = params[f"l{layer}.W"], params[f"l{layer}.U"], params[f"l{layer}.b"]
        h = np.zeros((B, H), dtype=dt)
        c = np.zeros((B, H), dtype=dt)
        outs, layer_cache = [], []
        for x in inputs:
            h, c, cache = _step(x, h, c, W, U, b)
            outs.append(h)
            if keep_cache:
                layer_cache.append(cache)
        caches.append(layer_cache)
        inputs = outs
    feat = inputs[-1]
    dropped = feat if mask is None else feat * mask
    logits = dropped @ params["fc.W"].T + params["fc.b"]
    return logits, feat, {"layers": caches, "feat": feat, "dropped": dropped, "mask": mask}


def sequence_forward(chain, params, cfg: NetworkConfig, mode: str = "eval", rng=None):
    """Run one chain (``(T, D)`` oldest-first one-hot rows) through the net.

    Returns ``(logits, feature)``; ``feature`` is the undropped final hidden
    vector of the top layer.
    """
    X = np.asarray(chain, dtype=params["fc.W"].dtype)
    if X.ndim != 2 or X.shape[0] < 1:
        raise EmptySequence("cannot run the network on an empty chain")
    _check_length(X.shape[0], cfg)
    if X.shape[1] != cfg.input_dim:
        raise ShapeMismatch(f"expected input width {cfg.input_dim}, got {X.shape[1]}")
    mask = None
    if mode == "train" and cfg.dropout > 0:
        rng = rng if rng is not None else np.random.default_rng()
        mask = dropout_mask(rng, (1, cfg.hidden), cfg.dropout, X.dtype)
    elif mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    logits, feat, _ = _forward_group(X[None], params, cfg, mask)
    if not np.isfinite(logits).all():
        raise NonFiniteActivation("non-finite logits")
    return logits[0], feat[0]


def dropout_mask(rng, shape, p, dtype=np.float64):
    """Inverted dropout: zero with probability ``p``, else scale by 1/(1-p)."""
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, label: int):
    """``(loss, dloss/dlogits)`` for one sample; max-subtracted for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside [0, {logits.shape[-1]})")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def _backward_group(dlogits, params, cfg, cache):
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["fc.W"] += dlogits.T @ cache["dropped"]
    grads["fc.b"] += dlogits.sum(axis=0)
    dfeat = dlogits @ params["fc.W"]
    if cache["mask"] is not None:
        dfeat = dfeat * cache["mask"]
    layers = cache["layers"]
    T = len(layers[0])
    H = cfg.hidden
    # upstream gradient w.r.t. each output h_t of the current layer
    dh_out = [None] * T
    dh_out[-1] = dfeat
    for layer in range(cfg.layers, 0, -1):
        W, U = params[f"l{layer}.W"], params[f"l{layer}.U"]
        gW, gU, gb = grads[f"l{layer}.W"], grads[f"l{layer}.U"], grads[f"l{layer}.b"]
        B = dfeat.shape[0]
        dh_rec = np.zeros((B, H), dtype=dfeat.dtype)
        dc_next = np.zeros((B, H), dtype=dfeat.dtype)
        dx = [None] * T
        for t in range(T - 1, -1, -1):
            x, h_prev, c_prev, i, f, o, g, tc = layers[layer - 1][t]
            dh = dh_rec if dh_out[t] is None else dh_out[t] + dh_rec
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next = dc * f
            dz = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)],
                axis=1,
            )
            gW += dz.T @ x
            gU += dz.T @ h_prev
            gb += dz.sum(axis=0)
            dh_rec = dz @ U
            if layer > 1:
                dx[t] = dz @ W
        dh_out = dx
    return grads


def _group_by_length(seqs):
    groups = defaultdict(list)
    for n, s in enumerate(seqs):
        groups[len(s)].append(n)
    return sorted(groups.items())


def batch_loss_and_grad(seqs, labels, params, cfg: NetworkConfig, mode="eval", rng=None,
                        need_grad=True):
    """Mean cross-entropy over a batch and its gradient.

    ``seqs`` is a list of ``(T, D)`` arrays. Returns ``(loss, grads, logits)``
    with ``logits`` in input order.
    """
    N = len(seqs)
    labels = np.asarray(labels, dtype=np.int64)
    dt = params["fc.W"].dtype
    grads = {k: np.zeros_like(v) for k, v in params.items()} if need_grad else None
    all_logits = np.zeros((N, cfg.n_classes), dtype=dt)
    total = 0.0
    for T, idx in _group_by_length(seqs):
        _check_length(T, cfg)
        X = np.stack([seqs[n] for n in idx]).astype(dt, copy=False)
        mask = None
        if mode == "train" and cfg.dropout > 0:
            mask = dropout_mask(rng, (len(idx), cfg.hidden), cfg.dropout, dt)
        logits, _, cache = _forward_group(X, params, cfg, mask, keep_cache=need_grad)
        logp = log_softmax(logits)
        y = labels[idx]
        total += float(-logp[np.arange(len(idx)), y].sum())
        all_logits[idx] = logits
        if need_grad:
            dlogits = np.exp(logp)
            dlogits[np.arange(len(idx)), y] -= 1.0
            dlogits /= N
            g = _backward_group(dlogits, params, cfg, cache)
            for k in grads:
                grads[k] += g[k]
    return total / N, grads, all_logits


def backward(seqs, labels, params, cfg: NetworkConfig):
    """Gradient of the mean batch loss w.r.t. every tensor (dropout off)."""
    _, grads, _ = batch_loss_and_grad(seqs, labels, params, cfg, mode="eval")
    return grads


def backward_from_logits(dlogits, params, cfg: NetworkConfig, cache):
    """BPTT for one equal-length group given upstream ``dloss/dlogits``."""
    if cache is None or not cache.get("layers") or not cache["layers"][0]:
        raise MissingCache("run the forward pass with keep_cache=True first")
    return _backward_group(np.asarray(dlogits, dtype=params["fc.W"].dtype), params, cfg, cache)


def forward_group(X, params, cfg: NetworkConfig, mask=None):
    """Batched forward of equal-length sequences keeping the BPTT cache."""
    return _forward_group(np.asarray(X, dtype=params["fc.W"].dtype), params, cfg, mask, keep_cache=True)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float = float("nan")

    def line(self) -> str:
        return f"{self.epoch},{self.loss!r},{self.train_acc!r},{self.test_acc!r}"


def predict_logits(seqs, params, cfg: NetworkConfig) -> np.ndarray:
    if not seqs:
        return np.zeros((0, cfg.n_classes))
    _, _, logits = batch_loss_and_grad(seqs, np.zeros(len(seqs), np.int64), params, cfg,
                                       need_grad=False)
    return logits


def features(seqs, params, cfg: NetworkConfig) -> np.ndarray:
    """Eval-mode top-layer final hidden vectors, one row per sequence."""
    dt = params["fc.W"].dtype
    out = np.zeros((len(seqs), cfg.hidden), dtype=dt)
    for T, idx in _group_by_length(seqs):
        _check_length(T, cfg)
        X = np.stack([seqs[n] for n in idx]).astype(dt, copy=False)
        _, feat, _ = _forward_group(X, params, cfg)
        out[idx] = feat
    return out


def accuracy(seqs, labels, params, cfg) -> float:
    if not seqs:
        return float("nan")
    pred = np.argmax(predict_logits(seqs, params, cfg), axis=1)
    return float((pred == np.asarray(labels)).mean())


def train(seqs, labels, cfg: NetworkConfig, eval_seqs=None, eval_labels=None, params=None,
          log=None):
    """Mini-batch RMSProp over ``cfg.epochs`` epochs.

    Separate seeded streams drive initialisation, epoch shuffling and
    dropout masks, so a given ``(data, cfg)`` always yields the same
    parameters. Returns ``(params, trace)``.
    """
    if not seqs:
        raise ValueError("empty training set")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError("labels must lie in [0, n_classes)")
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if params is None:
        params = init_params(cfg, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    state = RmsPropState(cfg.rho, cfg.eps)
    dt = np.dtype(cfg.dtype)
    seqs = [np.asarray(s, dtype=dt) for s in seqs]
    if eval_seqs is not None:
        eval_seqs = [np.asarray(s, dtype=dt) for s in eval_seqs]
    n = len(seqs)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, grads, _ = batch_loss_and_grad(
                [seqs[i] for i in idx], labels[idx], params, cfg, mode="train", rng=drop_rng
            )
            if not math.isfinite(loss):
                raise DivergenceDetected(epoch, loss)
            loss_sum += loss * len(idx)
            rmsprop_step(params, grads, state, cfg.lr)
        stats = EpochStats(epoch, loss_sum / n, accuracy(seqs, labels, params, cfg))
        if eval_seqs is not None and len(eval_seqs):
            stats.test_acc = accuracy(eval_seqs, eval_labels, params, cfg)
        trace.append(stats)
        if log is not None:
            log(stats)
    return params, trace


# --- model file --------------------------------------------------------------

def params_to_obj(params: dict, cfg: NetworkConfig) -> list:
    out = []
    for name, shape in tensor_shapes(cfg).items():
        t = params[name]
        out.append({
            "name": name,
            "shape": list(shape),
            "data": [float(v) for v in t.reshape(-1)],
        })
    return out


def params_from_obj(tensors: list, cfg: NetworkConfig) -> dict:
    shapes = tensor_shapes(cfg)
    dt = np.dtype(cfg.dtype)
    params = {}
    for t in tensors:
        shape = tuple(t["shape"])
        if shapes.get(t["name"]) != shape:
            raise ModelFormatError(f"tensor {t['name']} has unexpected shape {shape}")
        params[t["name"]] = np.array(t["data"], dtype=dt).reshape(shape)
    if set(params) != set(shapes):
        raise ModelFormatError("model file is missing tensors")
    return params


def save_model(path, params, cfg: NetworkConfig, meta: Optional[dict] = None) -> None:
    """JSON with the config and every tensor flattened row-major."""
    obj = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": asdict(cfg),
        "gate_order": list(GATES),
        "tensors": params_to_obj(params, cfg),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")))


def load_model(path):
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != FORMAT:
        raise ModelFormatError(f"{path} is not an LSTM model file (format={obj.get('format')!r})")
    if obj.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported LSTM model version {obj.get('version')!r}")
    cfg = NetworkConfig(**obj["config"])
    return params_from_obj(obj["tensors"], cfg), cfg, obj.get("meta", {})
