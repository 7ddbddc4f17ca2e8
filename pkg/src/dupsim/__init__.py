"""dupsim: desk-scale simulator for weight-duplication fault attacks on
int8-quantized neural networks.

Quantized inference (:mod:`dupsim.qnn`) runs behind a simulated
weight-transmission channel (:mod:`dupsim.channel`) that injects
duplication faults with a configurable success rate; a progressive
differential-evolution search (:mod:`dupsim.search`) drives white-box and
black-box attack campaigns (:mod:`dupsim.attack`), with a defense harness
(:mod:`dupsim.defense`) and a config-driven campaign runner
(:mod:`dupsim.campaign` / the ``dupsim`` CLI).
"""

from dupsim.qnn import (
    QuantLayer,
    QuantModel,
    accuracy,
    clone_and_overwrite,
    cross_entropy_loss,
    forward,
    load_model,
    quantize_weights,
    save_model,
)
from dupsim.channel import (
    LRO_SUCCESS_RATE,
    RO_SUCCESS_RATE,
    ChannelConfig,
    FaultOutcomeLog,
    PackageStream,
    StrategyFile,
    build_strategy,
    deserialize,
    package_index_of,
    serialize,
    transmit,
)
from dupsim.search import (
    Candidate,
    FitnessOracle,
    Population,
    SearchConfig,
    crossover,
    denormalize,
    init_population,
    mutate,
    run_iteration,
    select,
)
from dupsim.attack import (
    AttackReport,
    Objective,
    ThreatModel,
    VictimEndpoint,
    black_box_attack,
    compute_asr,
    random_attack_baseline,
    targeted_objective,
    untargeted_objective,
    white_box_attack,
)
from dupsim.defense import DefenseConfig, protect, shuffle_transmission, widen
from dupsim.datasets import load_dataset, make_bar_images, make_blobs
from dupsim.train import train_toy

__version__ = "0.1.0"
