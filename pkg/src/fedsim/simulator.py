"""Round loop: sample agents, train locally, aggregate, evaluate, record.

Determinism contract: every random decision draws from its own stream
keyed by (seed, role, round, agent), so reruns of the same config+seed
produce byte-identical metrics CSVs regardless of the worker count used
for local training.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .aggregation import (
    BASE_RULES,
    FoolsGoldState,
    ServerConfig,
    add_gaussian_noise,
    aggregate_with_rlr,
    clip_update,
    foolsgold,
)
from .attacks import AdversaryPlan, boost_update, corrupt_shard, plan_adversary
from .attribution import fim_diagonal, net_influence, top_k_params
from .config import ExperimentConfig, parse_pixel_list, validate_config
from .data import (
    LabeledDataset,
    TrojanSpec,
    build_backdoor_valset,
    class_subset,
    load_idx,
    partition_iid,
    partition_label_skew,
    plus_pattern,
    square_pattern,
)
from .errors import ConfigError
from .nn_core import (
    Batch,
    ModelSpec,
    ParamVector,
    backward,
    cnn_spec,
    forward,
    init_params,
    local_train,
    mlp_spec,
)

# stream tags for per-role rngs; never reuse one across roles
_PARTITION, _PLAN, _POISON, _INIT, _SAMPLE, _TRAIN, _SERVER = range(1, 8)


def _rng(seed, *tags):
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


@dataclass
class RoundMetrics:
    round: int
    validation_acc: float
    base_class_acc: float
    backdoor_acc: float
    mean_update_norm: float
    i_adv: float = None
    i_hon: float = None
    net: float = None
    cumulative_net: float = None


@dataclass
class EvalSuite:
    val: LabeledDataset       # full clean validation set
    base: LabeledDataset      # clean base-class samples only
    backdoor: LabeledDataset  # base-class samples, patterned, labeled target


@dataclass
class SimState:
    cfg: ExperimentConfig
    spec: ModelSpec
    w: ParamVector
    shards: list
    plan: AdversaryPlan
    trojan: TrojanSpec
    eval_suite: EvalSuite
    fg_state: FoolsGoldState
    acc_latch: bool = False
    cumulative_net: float = 0.0


def sample_agents(num_agents, sample_frac, rng) -> np.ndarray:
    """ceil(sample_frac * num_agents) distinct ids, ascending."""
    m = int(math.ceil(sample_frac * num_agents))
    if not 1 <= m <= num_agents:
        raise ConfigError(f"cannot sample {m} of {num_agents} agents")
    return np.sort(rng.choice(num_agents, size=m, replace=False))


def evaluate(w: ParamVector, spec: ModelSpec, ds: LabeledDataset, batch=2048) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if len(ds) == 0:
        return 0.0
    hits = 0
    for lo in range(0, len(ds), batch):
        b = Batch(ds.images[lo : lo + batch], ds.labels[lo : lo + batch])
        _, logits = forward(w, spec, b, train_mode=False)
        hits += int((logits.argmax(axis=1) == b.labels).sum())
    return hits / len(ds)


def _trojan_from_config(cfg: ExperimentConfig, side: int) -> TrojanSpec:
    if cfg.trojan_pattern == "plus":
        pattern = plus_pattern()
    elif cfg.trojan_pattern == "square":
        pattern = square_pattern(side)
    else:
        pattern = parse_pixel_list(cfg.trojan_pixels)
    return TrojanSpec(
        pattern=pattern,
        base_class=cfg.base_class,
        target_class=cfg.target_class,
        poison_fraction=cfg.poison_frac,
    )


def build_experiment(cfg: ExperimentConfig) -> SimState:
    """Load data, partition, corrupt the adversary's shards, init the model."""
    train = load_idx(cfg.train_images, cfg.train_labels)
    val = load_idx(cfg.val_images, cfg.val_labels)
    if train.images.shape[1:] != val.images.shape[1:]:
        raise ConfigError(
            f"train images are {train.images.shape[1:]}, val images are {val.images.shape[1:]}"
        )
    n_classes = int(max(train.labels.max(), val.labels.max())) + 1
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    for name in ("base_class", "target_class"):
        if getattr(cfg, name) >= n_classes:
            raise ConfigError(f"{name}={getattr(cfg, name)} outside the {n_classes} data classes")
    h, w_px = train.images.shape[1:]
    if cfg.model == "mlp":
        spec = mlp_spec((h, w_px), (128, 64), n_classes, dropout=0.25)
    else:
        spec = cnn_spec((1, h, w_px), n_classes, dropout=0.5)

    if cfg.partition == "iid":
        parts = partition_iid(len(train), cfg.num_agents, _rng(cfg.seed, _PARTITION))
    else:
        parts = partition_label_skew(
            train.labels, cfg.num_agents, cfg.labels_per_agent, _rng(cfg.seed, _PARTITION)
        )
    shards = [train.subset(p) for p in parts]

    trojan = _trojan_from_config(cfg, h)
    plan = plan_adversary(
        cfg.num_agents, cfg.corrupt_frac, cfg.attack, _rng(cfg.seed, _PLAN),
        trojan=trojan, boost_factor=cfg.boost_factor,
    )
    for k in plan.corrupt_ids:
        shards[k] = corrupt_shard(shards[k], plan, trojan, k, _rng(cfg.seed, _POISON, k))

    w0 = init_params(spec, _rng(cfg.seed, _INIT))
    suite = EvalSuite(
        val=val,
        base=class_subset(val, cfg.base_class),
        backdoor=build_backdoor_valset(val, trojan),
    )
    return SimState(
        cfg=cfg, spec=spec, w=w0, shards=shards, plan=plan, trojan=trojan,
        eval_suite=suite, fg_state=FoolsGoldState(),
    )


def _rlr_active(state: SimState, t: int) -> bool:
    cfg = state.cfg
    if not cfg.rlr_enabled:
        return False
    if cfg.rlr_activation_acc is not None:
        return state.acc_latch  # set once validation accuracy crossed the bar
    return t >= cfg.rlr_activation_round


def run_round(state: SimState, t: int, workers=1, on_round=None) -> RoundMetrics:
    """Advance the global model by one federated round (mutates state.w)."""
    cfg = state.cfg
    eta = cfg.resolved_server_lr()
    sampled = sample_agents(cfg.num_agents, cfg.sample_frac, _rng(cfg.seed, _SAMPLE, t))
    if cfg.rlr_enabled and cfg.theta > len(sampled):
        raise ConfigError(
            f"theta={cfg.theta} exceeds the {len(sampled)} agents sampled in round {t}"
        )

    def train_one(k):
        k = int(k)
        shard = state.shards[k]
        negate = state.plan.mode == "negate_loss" and state.plan.is_corrupt(k)
        u = local_train(
            state.w, state.spec, shard.images, shard.labels,
            epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr_local=cfg.local_lr,
            negate_loss=negate, rng=_rng(cfg.seed, _TRAIN, t, k), agent_id=k,
        )
        if state.plan.mode == "label_flip_boosted" and state.plan.is_corrupt(k):
            u = boost_update(u, state.plan.boost_factor)
        return u

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(train_one, sampled))
    else:
        updates = [train_one(k) for k in sampled]

    if cfg.clip_norm > 0:
        updates = [clip_update(u, cfg.clip_norm) for u in updates]
    mean_norm = float(np.mean([np.linalg.norm(u.delta.values) for u in updates]))
    if on_round is not None:
        on_round(t, updates)

    rlr_on = _rlr_active(state, t)
    server_rng = _rng(cfg.seed, _SERVER, t)
    if cfg.rule == "foolsgold":
        _, agg, state.fg_state = foolsgold(updates, state.fg_state)
        if cfg.noise_sigma > 0:
            agg = add_gaussian_noise(agg, cfg.noise_sigma, cfg.clip_norm, server_rng)
        applied = agg.values  # similarity weighting carries no server lr
    elif rlr_on:
        scfg = ServerConfig(
            eta=eta, theta=cfg.theta, clip_norm=cfg.clip_norm,
            noise_sigma=cfg.noise_sigma, rule=cfg.rule, rlr_enabled=True,
        )
        applied = aggregate_with_rlr(updates, cfg.rule, scfg, server_rng).values
    else:
        agg = BASE_RULES[cfg.rule](updates)
        if cfg.noise_sigma > 0:
            agg = add_gaussian_noise(agg, cfg.noise_sigma, cfg.clip_norm, server_rng)
        applied = eta * agg.values
    state.w.values += applied

    suite = state.eval_suite
    val_acc = evaluate(state.w, state.spec, suite.val)
    base_acc = evaluate(state.w, state.spec, suite.base)
    backdoor_acc = evaluate(state.w, state.spec, suite.backdoor)
    if cfg.rlr_activation_acc is not None and val_acc >= cfg.rlr_activation_acc:
        state.acc_latch = True

    metrics = RoundMetrics(
        round=t, validation_acc=val_acc, base_class_acc=base_acc,
        backdoor_acc=backdoor_acc, mean_update_norm=mean_norm,
    )
    if cfg.attribution:
        images = suite.backdoor.images
        n = len(suite.backdoor)
        adv_labels = np.full(n, state.trojan.target_class, dtype=np.int64)
        hon_labels = np.full(n, state.trojan.base_class, dtype=np.int64)
        fim_adv = fim_diagonal(state.w, state.spec, images, adv_labels)
        fim_hon = fim_diagonal(state.w, state.spec, images, hon_labels)
        grad_adv = backward(state.w, state.spec, Batch(images, adv_labels), train_mode=False)
        grad_hon = backward(state.w, state.spec, Batch(images, hon_labels), train_mode=False)
        k = min(cfg.attribution_top_k, state.w.values.size)
        adv_top = top_k_params(fim_adv, k)
        hon_top = top_k_params(fim_hon, k)
        i_adv, i_hon, net = net_influence(
            fim_adv, fim_hon, adv_top, hon_top, applied, grad_adv.values, grad_hon.values
        )
        state.cumulative_net += net
        metrics.i_adv, metrics.i_hon, metrics.net = i_adv, i_hon, net
        metrics.cumulative_net = state.cumulative_net
    return metrics


def run_experiment(cfg: ExperimentConfig, workers=1, on_round=None) -> list:
    """Run all rounds; returns the per-round metrics."""
    validate_config(cfg, check_files=True)
    state = build_experiment(cfg)
    return [run_round(state, t, workers=workers, on_round=on_round) for t in range(1, cfg.rounds + 1)]


# ---------------------------------------------------------------------------
# metrics CSV

_BASE_COLS = ("round", "validation_acc", "base_class_acc", "backdoor_acc", "mean_update_norm")
_ATTR_COLS = ("I_adv", "I_hon", "net", "cumulative_net")


def _fmt(x):
    return f"{x:.8f}"


def _row(label, m: RoundMetrics, attribution: bool) -> str:
    cells = [str(label), _fmt(m.validation_acc), _fmt(m.base_class_acc),
             _fmt(m.backdoor_acc), _fmt(m.mean_update_norm)]
    if attribution:
        cells += [_fmt(m.i_adv), _fmt(m.i_hon), _fmt(m.net), _fmt(m.cumulative_net)]
    return ",".join(cells)


def metrics_to_csv(metrics, attribution: bool) -> str:
    """Render rows plus a trailing summary row repeating the final round."""
    if not metrics:
        raise ConfigError("no metrics to write")
    cols = _BASE_COLS + _ATTR_COLS if attribution else _BASE_COLS
    lines = [",".join(cols)]
    lines += [_row(m.round, m, attribution) for m in metrics]
    lines.append(_row("final", metrics[-1], attribution))
    return "\n".join(lines) + "\n"


def write_metrics_csv(metrics, path, attribution: bool):
    with open(path, "w", newline="\n") as f:
        f.write(metrics_to_csv(metrics, attribution))
