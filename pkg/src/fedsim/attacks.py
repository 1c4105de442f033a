"""Adversary planning and shard corruption.

Four attack modes:
  trojan             stamp a pixel pattern on base-class samples, relabel target
  distributed_trojan split the pattern into segments, one per corrupt agent
  label_flip_boosted relabel base-class samples (no pattern), scale the update
  negate_loss        keep the trojaned shard but ascend the loss during training
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import Update
from .data import LabeledDataset, TrojanSpec, plus_pattern, poison_shard
from .errors import ConfigError
from .nn_core import ParamVector

ATTACK_MODES = ("none", "trojan", "distributed_trojan", "label_flip_boosted", "negate_loss")


def split_plus_segments():
    """The canonical 4-way split of the plus pattern.

    Segments: upper column arm (center pixel included), lower column arm,
    left row arm, right row arm. They partition the 9 plus pixels.
    """
    return (
        tuple((r, 2, 1.0) for r in range(3)),
        tuple((r, 2, 1.0) for r in range(3, 5)),
        tuple((2, c, 1.0) for c in range(2)),
        tuple((2, c, 1.0) for c in range(3, 5)),
    )


@dataclass(frozen=True)
class AdversaryPlan:
    corrupt_ids: tuple  # ascending agent ids under adversary control
    mode: str
    boost_factor: float = 1.0
    # pattern each corrupt agent stamps; None for non-trojan modes
    pattern_of: dict = None

    def is_corrupt(self, agent_id):
        return agent_id in self.corrupt_ids


def plan_adversary(num_agents, corrupt_frac, mode, rng, trojan: TrojanSpec = None,
                   boost_factor=1.0) -> AdversaryPlan:
    """Pick floor(corrupt_frac * num_agents) agents and assign their attack.

    distributed_trojan splits the pattern into segments (the canonical plus
    split, or trojan.segments when given) and deals them round-robin; the
    segment and agent counts must divide evenly so every agent stamps the
    same number of pixels.
    """
    if mode not in ATTACK_MODES:
        raise ConfigError(f"attack mode must be one of {ATTACK_MODES}, got {mode!r}")
    if not 0.0 <= corrupt_frac < 1.0:
        raise ConfigError(f"corrupt_frac must be in [0, 1), got {corrupt_frac}")
    if boost_factor <= 0:
        raise ConfigError(f"boost_factor must be > 0, got {boost_factor}")
    m = int(np.floor(corrupt_frac * num_agents))
    if mode == "none" or m == 0:
        return AdversaryPlan(corrupt_ids=(), mode="none")
    ids = tuple(sorted(int(a) for a in rng.choice(num_agents, size=m, replace=False)))

    pattern_of = None
    if mode in ("trojan", "negate_loss"):
        pattern_of = {a: trojan.pattern for a in ids}
    elif mode == "distributed_trojan":
        if trojan.segments is not None:
            segments = trojan.segments
        elif sorted(trojan.pattern) == sorted(plus_pattern()):
            segments = split_plus_segments()
        else:
            raise ConfigError(
                "distributed_trojan needs explicit trojan segments for non-plus patterns"
            )
        if len(segments) % m and m % len(segments):
            raise ConfigError(
                f"{len(segments)} trojan segments cannot be dealt evenly to {m} corrupt agents"
            )
        pattern_of = {}
        for a_idx, agent in enumerate(ids):
            if m <= len(segments):
                mine = segments[a_idx::m]  # agent a_idx takes segments a_idx, a_idx+m, ...
            else:
                mine = (segments[a_idx % len(segments)],)
            pattern_of[agent] = tuple(px for seg in mine for px in seg)
    return AdversaryPlan(corrupt_ids=ids, mode=mode, boost_factor=boost_factor,
                         pattern_of=pattern_of)


def corrupt_shard(shard: LabeledDataset, plan: AdversaryPlan, trojan: TrojanSpec,
                  agent_id, rng) -> LabeledDataset:
    """Apply the planned corruption to one corrupt agent's shard."""
    if not plan.is_corrupt(agent_id):
        return shard
    if plan.mode in ("trojan", "negate_loss", "distributed_trojan"):
        return poison_shard(shard, trojan, rng, pattern=plan.pattern_of[agent_id])
    if plan.mode == "label_flip_boosted":
        base_idx = np.flatnonzero(shard.labels == trojan.base_class)
        k = int(np.floor(trojan.poison_fraction * len(base_idx)))
        if k == 0:
            return LabeledDataset(shard.images.copy(), shard.labels.copy())
        chosen = np.sort(rng.choice(base_idx, size=k, replace=False))
        labels = shard.labels.copy()
        labels[chosen] = trojan.target_class
        return LabeledDataset(shard.images.copy(), labels)
    raise ConfigError(f"no shard corruption defined for mode {plan.mode!r}")


def boost_update(update: Update, factor: float) -> Update:
    """Scale an update's delta; models a model-replacement style boost."""
    if factor <= 0:
        raise ConfigError(f"boost factor must be > 0, got {factor}")
    delta = ParamVector(update.delta.values * factor, update.delta.shape_spec)
    return Update(update.agent_id, delta, update.num_samples)
