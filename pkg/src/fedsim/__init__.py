"""Deterministic federated-learning simulator with backdoor attacks,
robust aggregation rules, and a sign-vote robust learning rate defense."""

from .aggregation import (
    FoolsGoldState,
    LrVector,
    ServerConfig,
    Update,
    add_gaussian_noise,
    aggregate_with_rlr,
    clip_update,
    comed,
    fedavg,
    foolsgold,
    rlr_vector,
    sign_agg,
)
from .attacks import (
    AdversaryPlan,
    boost_update,
    corrupt_shard,
    plan_adversary,
    split_plus_segments,
)
from .attribution import InfluenceRecord, fim_diagonal, net_influence, top_k_params
from .config import ExperimentConfig, load_config, load_preset, preset_names, validate_config
from .data import (
    LabeledDataset,
    TrojanSpec,
    apply_trojan,
    build_backdoor_valset,
    load_idx,
    partition_iid,
    partition_label_skew,
    plus_pattern,
    poison_shard,
    square_pattern,
    write_idx,
)
from .errors import ConfigError, IngestionError
from .nn_core import (
    Batch,
    ModelSpec,
    ParamVector,
    backward,
    cnn_spec,
    flatten,
    forward,
    init_params,
    local_train,
    loss_and_grad,
    mlp_spec,
    unflatten,
)
from .simulator import (
    EvalSuite,
    RoundMetrics,
    SimState,
    build_experiment,
    evaluate,
    metrics_to_csv,
    run_experiment,
    run_round,
    sample_agents,
    write_metrics_csv,
)
from .synth import make_corpus, write_corpus

__version__ = "0.1.0"
