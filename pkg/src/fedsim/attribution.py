"""Per-parameter influence attribution via the empirical Fisher diagonal.

For each round, the diagonal of the empirical Fisher information matrix is
computed on the patterned validation images twice: once labeled as the
attack's target class (the adversarial objective) and once as the base
class (the honest objective). Each objective's top-k parameters are then
split into a minimize set (the round's applied update moved them against
that objective's loss gradient) and a maximize set (moved them up the
gradient). The L2 mass of the exclusive index sets measures which
objective the round's update favored; positive net influence means the
honest objective won the round.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn_core import (
    Batch,
    Dense,
    Dropout,
    Flatten,
    ModelSpec,
    ParamVector,
    Relu,
    _bind_layers,
    _BoundDense,
    _layer_forward,
    backward,
)


@dataclass
class InfluenceRecord:
    round: int
    i_adv: float
    i_hon: float
    net: float
    cumulative_net: float


def _fim_batched_mlp(params, spec, x, y):
    """Exact per-sample squared-gradient means for dense-only models.

    Per-sample gradient of W[j, k] is x_i[j] * delta_i[k] (one term, no
    inner sum), so its square factorizes and the mean over samples is a
    single matmul of squares. Invalid for conv layers, where per-sample
    gradients sum over spatial positions before squaring.
    """
    bound = _bind_layers(params, spec)
    inputs_of, caches = [], []
    h = x
    for layer in bound:
        inputs_of.append(h)
        h, cache = _layer_forward(layer, h, train_mode=False, rng=None)
        caches.append(cache)
    logits = h
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    d = e / e.sum(axis=1, keepdims=True)
    d[np.arange(n), y] -= 1.0  # per-sample dloss_i/dlogits, no 1/n
    sq_parts = []
    for i in range(len(bound) - 1, -1, -1):
        layer = bound[i]
        if isinstance(layer, Relu):
            d = d * caches[i]
        elif isinstance(layer, Dropout):
            pass  # eval mode: identity
        elif isinstance(layer, Flatten):
            d = d.reshape(caches[i])
        elif isinstance(layer, _BoundDense):
            fim_w = (inputs_of[i] ** 2).T @ (d**2) / n
            fim_b = (d**2).mean(axis=0)
            sq_parts.append((fim_w, fim_b))
            d = d @ layer.w.T
        else:
            raise ConfigError(f"fast Fisher path cannot handle layer {layer!r}")
    sq_parts.reverse()
    flat = [t.reshape(-1) for pair in sq_parts for t in pair]
    return np.concatenate(flat)


def fim_diagonal(params: ParamVector, spec: ModelSpec, inputs, labels) -> np.ndarray:
    """Mean over samples of the squared per-sample loss gradient.

    Dense-only models use a closed-form batched pass; models with conv or
    pool layers fall back to one backward pass per sample.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ConfigError("fim_diagonal needs a non-empty sample set")
    dense_only = all(isinstance(l, (Dense, Relu, Dropout, Flatten)) for l in spec.layers)
    if dense_only:
        out = np.zeros(params.values.size)
        for lo in range(0, n, 512):
            batch = Batch(inputs[lo : lo + 512], labels[lo : lo + 512])
            x, y = batch.inputs, batch.labels
            out += _fim_batched_mlp(params, spec, x.reshape(x.shape[0], *spec.input_shape), y) * len(y)
        return out / n
    # conv/pool models: exact but one backward pass per sample
    out = np.zeros(params.values.size)
    for i in range(n):
        g = backward(params, spec, Batch(inputs[i : i + 1], labels[i : i + 1]), train_mode=False)
        out += g.values**2
    return out / n


def top_k_params(fim: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties break toward the lower index."""
    if not 1 <= k <= fim.size:
        raise ConfigError(f"k must be in [1, {fim.size}], got {k}")
    return np.argsort(-fim, kind="stable")[:k]


def _masked_norm(fim, include, exclude):
    keep = np.setdiff1d(include, exclude, assume_unique=True)
    return float(np.linalg.norm(fim[keep])) if keep.size else 0.0


def _split_by_direction(top, applied, grad):
    """Partition top-k indices by whether the applied update descends grad.

    A parameter moved against the gradient (applied * grad < 0) shrinks
    that objective's loss to first order, so it lands in the minimize set;
    moving with the gradient lands it in the maximize set. Parameters with
    a zero product (the round left them untouched, or the objective is
    flat there) belong to neither: the round did no work on the objective
    at those coordinates, so they carry no influence mass.
    """
    top = np.asarray(top)
    product = applied[top] * grad[top]
    return top[product < 0], top[product > 0]


def net_influence(fim_adv, fim_hon, adv_top, hon_top, applied, grad_adv, grad_hon) -> tuple:
    """Compare how much the round's update favored each objective.

    With S1/S3 the adversarial top-k split into minimize/maximize against
    grad_adv, and S2/S4 the honest top-k split against grad_hon:
      i_adv = ||fim_adv[S1 \\ S2]|| - ||fim_adv[S3 \\ S4]||
      i_hon = ||fim_hon[S2 \\ S1]|| - ||fim_hon[S4 \\ S3]||
    Returns (i_adv, i_hon, net) with net = i_hon - i_adv; swapping the
    adversarial and honest inputs swaps i_adv and i_hon exactly.
    """
    s1, s3 = _split_by_direction(adv_top, applied, grad_adv)
    s2, s4 = _split_by_direction(hon_top, applied, grad_hon)
    i_adv = _masked_norm(fim_adv, s1, s2) - _masked_norm(fim_adv, s3, s4)
    i_hon = _masked_norm(fim_hon, s2, s1) - _masked_norm(fim_hon, s4, s3)
    return i_adv, i_hon, i_hon - i_adv
