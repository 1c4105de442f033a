"""Server-side aggregation rules and the sign-vote robust learning rate.

All rules consume a list of Updates (flat float64 deltas plus sample
counts) and produce one aggregate delta. The robust learning rate (RLR)
composes with any base rule: per coordinate, if fewer than theta agents
agree on the update's sign, the server learning rate for that coordinate
is negated, turning would-be descent into ascent for directions that lack
consensus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn_core import ParamVector, Update

__all__ = [
    "Update",
    "ServerConfig",
    "LrVector",
    "FoolsGoldState",
    "fedavg",
    "clip_update",
    "add_gaussian_noise",
    "comed",
    "sign_agg",
    "rlr_vector",
    "aggregate_with_rlr",
    "foolsgold",
    "BASE_RULES",
]


@dataclass
class ServerConfig:
    """Knobs of the server-side aggregation step.

    eta: server learning rate applied to the aggregate.
    theta: sign-agreement threshold for the robust learning rate.
    clip_norm: per-update L2 bound applied before aggregation; 0 disables.
    noise_sigma: Gaussian noise scale; the applied std is sigma * clip_norm.
    rule: base aggregation rule name.
    rlr_enabled: whether the robust learning rate wraps the base rule.
    """

    eta: float = 1.0
    theta: int = 1
    clip_norm: float = 0.0
    noise_sigma: float = 0.0
    rule: str = "fedavg"
    rlr_enabled: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.theta < 1:
            raise ConfigError(f"theta must be >= 1, got {self.theta}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.noise_sigma > 0 and self.clip_norm <= 0:
            raise ConfigError("noise_sigma > 0 requires clip_norm > 0 (noise std is sigma * clip_norm)")


@dataclass
class LrVector:
    """Per-coordinate server learning rate; every entry is +eta or -eta."""

    values: np.ndarray
    eta: float


@dataclass
class FoolsGoldState:
    """Cumulative per-agent update histories across rounds."""

    histories: dict = field(default_factory=dict)


def _stack(updates):
    """Validate a round's updates and return (matrix [K, d], weights, spec)."""
    if not updates:
        raise ConfigError("aggregation needs at least one update")
    spec = updates[0].delta.shape_spec
    d = updates[0].delta.values.size
    for u in updates:
        if u.delta.values.size != d or u.delta.shape_spec != spec:
            raise ConfigError(f"update from agent {u.agent_id} has mismatched dimensions")
        if u.num_samples < 1:
            raise ConfigError(f"update from agent {u.agent_id} has num_samples < 1")
    mat = np.stack([u.delta.values for u in updates])
    if not np.all(np.isfinite(mat)):
        bad = [u.agent_id for u in updates if not np.all(np.isfinite(u.delta.values))]
        raise ConfigError(f"non-finite update values from agents {bad}")
    weights = np.array([u.num_samples for u in updates], dtype=np.float64)
    return mat, weights, spec


def fedavg(updates) -> ParamVector:
    """Sample-count weighted mean of the deltas."""
    mat, weights, spec = _stack(updates)
    return ParamVector(weights @ mat / weights.sum(), spec)


def clip_update(update: Update, clip_norm: float) -> Update:
    """Scale the delta by 1 / max(1, ||delta|| / clip_norm)."""
    if clip_norm <= 0:
        raise ConfigError(f"clip_norm must be > 0, got {clip_norm}")
    nrm = np.linalg.norm(update.delta.values)
    if nrm <= clip_norm:
        return update
    scaled = update.delta.values * (clip_norm / nrm)
    return Update(update.agent_id, ParamVector(scaled, update.delta.shape_spec), update.num_samples)


def add_gaussian_noise(agg: ParamVector, sigma: float, clip_norm: float, rng) -> ParamVector:
    """Add iid N(0, (sigma * clip_norm)^2) noise per coordinate."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return agg
    if clip_norm <= 0:
        raise ConfigError("noise scale is sigma * clip_norm; clip_norm must be > 0")
    noise = rng.normal(0.0, sigma * clip_norm, size=agg.values.shape)
    return ParamVector(agg.values + noise, agg.shape_spec)


def comed(updates) -> ParamVector:
    """Unweighted coordinate-wise median (even count: mean of middle two)."""
    mat, _, spec = _stack(updates)
    return ParamVector(np.median(mat, axis=0), spec)


def sign_agg(updates) -> ParamVector:
    """Sign of the sum of per-update signs; sign(0) = 0 throughout."""
    mat, _, spec = _stack(updates)
    return ParamVector(np.sign(np.sign(mat).sum(axis=0)), spec)


BASE_RULES = {"fedavg": fedavg, "comed": comed, "sign": sign_agg}


def rlr_vector(updates, theta: int, eta: float) -> LrVector:
    """Per-coordinate learning rate from the sign-agreement vote.

    Coordinate i gets +eta when |sum_k sign(delta_k_i)| >= theta, else
    -eta. Zero-valued coordinates cast no vote.
    """
    mat, _, spec = _stack(updates)
    if not 1 <= theta <= len(updates):
        raise ConfigError(f"theta must be in [1, {len(updates)}], got {theta}")
    if eta <= 0:
        raise ConfigError(f"eta must be > 0, got {eta}")
    votes = np.abs(np.sign(mat).sum(axis=0))
    return LrVector(np.where(votes >= theta, eta, -eta), eta)


def aggregate_with_rlr(updates, base_rule: str, cfg: ServerConfig, rng=None) -> ParamVector:
    """Full robust-learning-rate composition; returns the applied delta.

    Stages: per-update clip (if clip_norm > 0), base rule, elementwise
    product with the sign-vote learning rate, then Gaussian noise with std
    sigma * clip_norm * eta. The sign vote is taken on the clipped updates
    (clipping preserves signs, so the vote is unchanged either way).
    """
    if base_rule not in BASE_RULES:
        raise ConfigError(f"base rule must be one of {sorted(BASE_RULES)}, got {base_rule!r}")
    if cfg.clip_norm > 0:
        updates = [clip_update(u, cfg.clip_norm) for u in updates]
    lr = rlr_vector(updates, cfg.theta, cfg.eta)
    base = BASE_RULES[base_rule](updates)
    out = ParamVector(lr.values * base.values, base.shape_spec)
    if cfg.noise_sigma > 0:
        if rng is None:
            raise ConfigError("noise_sigma > 0 requires an rng")
        out = add_gaussian_noise(out, cfg.noise_sigma, cfg.clip_norm * cfg.eta, rng)
    return out


def foolsgold(updates, state: FoolsGoldState):
    """Similarity-based reweighting of a round's updates.

    Maintains one cumulative history vector per agent; agents whose
    histories stay pairwise-similar (coordinated attackers) are driven to
    zero weight, dissimilar ones keep weight 1. Returns (alphas in input
    order, aggregate delta, new state); the aggregate carries no server
    learning rate. Two identical histories zero each other out.
    """
    mat, weights, spec = _stack(updates)
    histories = dict(state.histories)
    for u in updates:
        prev = histories.get(u.agent_id)
        histories[u.agent_id] = u.delta.values.copy() if prev is None else prev + u.delta.values
    hist = np.stack([histories[u.agent_id] for u in updates])

    norms = np.linalg.norm(hist, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cs = (hist / safe[:, None]) @ (hist / safe[:, None]).T
    np.fill_diagonal(cs, 0.0)
    v = cs.max(axis=1)
    # pardoning: scale cs[i, j] down when agent i looks more honest than j
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(v[None, :] > v[:, None], v[:, None] / v[None, :], 1.0)
    cs = cs * ratio
    alpha = 1.0 - cs.max(axis=1)
    alpha = np.clip(alpha, 0.0, 1.0)
    if alpha.max() > 0:
        alpha = alpha / alpha.max()
    # logit sharpening; the clip turns alpha=1 (+inf) into 1 and alpha=0 into 0
    with np.errstate(divide="ignore"):
        alpha = np.log(alpha / (1.0 - alpha)) + 0.5
    alpha = np.clip(alpha, 0.0, 1.0)

    agg = (alpha * weights) @ mat / weights.sum()
    return alpha, ParamVector(agg, spec), FoolsGoldState(histories)
