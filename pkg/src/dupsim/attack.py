"""End-to-end attack loops: objectives, threat models, the white-box and
black-box campaigns, and the random-fault baseline.

A white-box attacker replicates the victim offline and scores candidates on
a simulated channel with an assumed injection success rate; the winner of
each search iteration is then deployed over the true channel. A black-box
attacker sees only the victim endpoint -- submit a strategy file with an
input batch, read back output scores, reload weights -- and pays one query
per evaluation.

Accumulated winners are replayed on every transmission; duplicates and
gap-violating triggers are dropped in arrival order when the trigger set is
materialized into a strategy file.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, replace

import numpy as np

from . import channel, defense, qnn
from .search import (
    BLACK_BOX_1D,
    WHITE_BOX_2D,
    Candidate,
    FitnessOracle,
    SearchConfig,
    denormalize,
    init_population,
    run_iteration,
)

WHITE_BOX = "white_box"
BLACK_BOX = "black_box"

UNTARGETED = "untargeted"
TARGETED = "targeted"

MAX_DEPLOY_ATTEMPTS = 3


class NoTargetSamples(ValueError):
    """The dataset holds no sample of the requested target class."""


@dataclass
class Objective:
    """kind, fitness batch (targeted: target-class samples only), the
    labeled set used for TA / ASR measurement, and the stop threshold
    (untargeted: post-attack TA ceiling; targeted: ASR floor)."""

    kind: str
    eval_x: np.ndarray
    eval_y: np.ndarray
    metric_x: np.ndarray
    metric_y: np.ndarray
    stop_threshold: float
    target_class: int = None

    def __post_init__(self):
        if self.kind not in (UNTARGETED, TARGETED):
            raise ValueError(f"objective kind must be {UNTARGETED} or {TARGETED}")
        if self.kind == TARGETED:
            if self.target_class is None:
                raise ValueError("targeted objective needs a target_class")
            if not np.all(np.asarray(self.eval_y) == self.target_class):
                raise ValueError("targeted eval batch must hold only the target class")


def untargeted_objective(x, y, num_classes, eval_batch_size=256,
                         stop_threshold=None, seed=0) -> Objective:
    """Mixed-class fitness batch; default stop is TA <= 1/C + 0.01."""
    if stop_threshold is None:
        stop_threshold = 1.0 / num_classes + 0.01
    rng = np.random.default_rng(seed)
    sel = rng.permutation(len(y))[:eval_batch_size]
    return Objective(UNTARGETED, x[sel], np.asarray(y)[sel], x, np.asarray(y),
                     float(stop_threshold))


def targeted_objective(x, y, target_class, eval_batch_size=64,
                       stop_threshold=0.99, seed=0) -> Objective:
    """Fitness batch drawn from the target class only; default stop is
    ASR >= 0.99."""
    y = np.asarray(y)
    idx = np.flatnonzero(y == target_class)
    if idx.size == 0:
        raise NoTargetSamples(f"no samples of class {target_class}")
    rng = np.random.default_rng(seed)
    sel = idx[rng.permutation(idx.size)[:eval_batch_size]]
    return Objective(TARGETED, x[sel], y[sel], x, y, float(stop_threshold),
                     target_class=int(target_class))


@dataclass
class ThreatModel:
    """kind; assumed_f_p parameterizes the white-box offline simulator;
    query_budget caps black-box victim evaluations (None = unlimited)."""

    kind: str
    assumed_f_p: float = 1.0
    query_budget: int = None

    def __post_init__(self):
        if self.kind not in (WHITE_BOX, BLACK_BOX):
            raise ValueError(f"threat kind must be {WHITE_BOX} or {BLACK_BOX}")
        if not 0.0 <= self.assumed_f_p <= 1.0:
            raise ValueError("assumed_f_p must lie in [0, 1]")


@dataclass
class AttackReport:
    winners: list
    fitness_trajectory: list
    iterations_used: int
    queries_used: int
    clean_ta: float
    post_attack_ta: float
    asr: float = None
    success: bool = False
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "winners": [int(w) for w in self.winners],
            "fitness_trajectory": [float(f) for f in self.fitness_trajectory],
            "iterations_used": int(self.iterations_used),
            "queries_used": int(self.queries_used),
            "clean_ta": float(self.clean_ta),
            "post_attack_ta": float(self.post_attack_ta),
            "asr": None if self.asr is None else float(self.asr),
            "success": bool(self.success),
            "stop_reason": self.stop_reason,
        }


def fitness_untargeted(model, objective: Objective) -> float:
    """Mean cross-entropy of the (possibly faulted) model on the fitness batch."""
    if objective.kind != UNTARGETED:
        raise ValueError("objective is not untargeted")
    return qnn.cross_entropy_loss(qnn.forward(model, objective.eval_x),
                                  objective.eval_y)


def fitness_targeted(model, objective: Objective) -> float:
    """Mean cross-entropy over the target-class batch only."""
    if objective.kind != TARGETED:
        raise ValueError("objective is not targeted")
    return qnn.cross_entropy_loss(qnn.forward(model, objective.eval_x),
                                  objective.eval_y)


def objective_fitness(model, objective: Objective) -> float:
    if objective.kind == UNTARGETED:
        return fitness_untargeted(model, objective)
    return fitness_targeted(model, objective)


def accuracy_from_scores(scores, labels) -> float:
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise qnn.EmptyDataset("no samples")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def asr_from_scores(scores, labels, target_class) -> float:
    labels = np.asarray(labels).ravel()
    mask = labels == target_class
    if not mask.any():
        raise NoTargetSamples(f"no samples of class {target_class}")
    return float(np.mean(np.argmax(scores, axis=1)[mask] != target_class))


def compute_asr(model, target_class, x, y) -> float:
    """Fraction of target-class samples misclassified by the model."""
    return asr_from_scores(qnn.forward(model, x), y, target_class)


def fits_gap(kept_sorted, t, gap) -> bool:
    """True if t is not a duplicate and sits >= gap from every kept trigger."""
    pos = bisect.bisect_left(kept_sorted, t)
    if pos < len(kept_sorted) and kept_sorted[pos] - t < max(gap, 1):
        return False
    if pos > 0 and t - kept_sorted[pos - 1] < max(gap, 1):
        return False
    return True


def effective_targets(indexes, gap, n_packages, is_allowed=None) -> list:
    """Materialize an accumulated trigger list into a valid target set.

    Triggers are kept in arrival order: duplicates, out-of-range or
    disallowed indexes, and triggers within ``gap`` of an already-kept one
    are dropped. Returns the kept triggers sorted ascending, ready for
    :func:`channel.build_strategy`.
    """
    kept = []
    for t in indexes:
        t = int(t)
        if not 0 <= t < n_packages - 1:
            continue
        if is_allowed is not None and not is_allowed(t):
            continue
        if not fits_gap(kept, t, gap):
            continue
        bisect.insort(kept, t)
    return kept


class ChannelPath:
    """One party's view of the weight transmission: the serialized stream,
    an injection success rate, optional package shuffling, and an optional
    corruptible-package mask from layer protection.

    ``shuffle_mode``: "none", "predefined" (one fixed permutation reused on
    every transmission) or "random" (a fresh permutation per transmission).
    The receiver always inverts the permutation, so an unfaulted
    transmission reproduces the clean model exactly.
    """

    def __init__(self, model, cfg: channel.ChannelConfig, f_p, rng,
                 shuffle_mode="none", shuffle_seed=0, corruptible_mask=None):
        self.template = model
        self.cfg = replace(cfg, fault_success_rate=float(f_p))
        self.rng = rng
        self.stream = channel.serialize(model, cfg)
        n = self.stream.n_packages
        self.mask = (np.ones(n, dtype=bool) if corruptible_mask is None
                     else np.asarray(corruptible_mask, dtype=bool))
        self.shuffle_mode = shuffle_mode
        self.shuffle_seed = int(shuffle_seed)
        if shuffle_mode == "predefined":
            _, self.permutation = defense.shuffle_transmission(
                self.stream, "predefined", self.shuffle_seed)
        elif shuffle_mode == "random":
            self.permutation = None
            self._perm_seed_rng = np.random.default_rng(self.shuffle_seed)
        elif shuffle_mode == "none":
            self.permutation = None
        else:
            raise ValueError(f"unknown shuffle mode {shuffle_mode!r}")

    @property
    def n_packages(self) -> int:
        return self.stream.n_packages

    def allowed_triggers(self, knows_permutation=True) -> np.ndarray:
        """Trigger indexes whose corruption target is a corruptible package.

        Under random shuffling the slot-to-package map changes every
        transmission, so the search space cannot be narrowed and every
        trigger slot is allowed.
        """
        n = self.n_packages
        triggers = np.arange(n - 1)
        if self.shuffle_mode == "random" or not self.mask[1:].any():
            return triggers
        if self.shuffle_mode == "predefined" and knows_permutation:
            ok = self.mask[self.permutation[triggers + 1]]
        elif self.shuffle_mode == "predefined":
            return triggers
        else:
            ok = self.mask[triggers + 1]
        return triggers[ok]

    def deploy(self, trigger_indexes, prefiltered=False):
        """One transmission of the clean weights under the given triggers.

        Returns (received model, fault outcome log). Faults apply to the
        transmitted (possibly permuted) slot order; corruption lands
        wherever the receiver maps that slot. Triggers whose corruption
        target is protected are dropped, as are gap violations --
        ``prefiltered=True`` skips that pass when the caller already
        composed a valid sorted target set for this path.
        """
        n = self.n_packages
        if self.shuffle_mode == "none":
            perm = None
            sent = self.stream
        else:
            if self.shuffle_mode == "predefined":
                perm = self.permutation
                sent = channel.PackageStream(self.stream.packages[perm],
                                             self.stream.layer_spans,
                                             self.stream.weight_count)
            else:
                seed = int(self._perm_seed_rng.integers(0, 2**63))
                sent, perm = defense.shuffle_transmission(self.stream, "random", seed)
        if prefiltered:
            targets = list(trigger_indexes)
        else:
            if perm is None:
                allowed = lambda i: bool(self.mask[i + 1])
            else:
                allowed = lambda i: bool(self.mask[perm[i + 1]])
            targets = effective_targets(trigger_indexes, self.cfg.min_attack_gap,
                                        n, allowed)
        strat = channel.build_strategy(targets, n, self.cfg)
        received, log = channel.transmit(sent, strat, self.cfg, self.rng)
        if perm is not None:
            received = defense.invert_shuffle(received, perm)
        return channel.deserialize(received, self.template), log

    @property
    def stochastic(self) -> bool:
        return 0.0 < self.cfg.fault_success_rate < 1.0 or self.shuffle_mode == "random"


class VictimEndpoint:
    """In-process victim accelerator with a deliberately narrow surface:
    submit a strategy file plus an input batch and read back output scores,
    ask for a weight reload, and observe the transmission schedule length.
    Weights are re-streamed from the clean master on every query, so each
    evaluation sees exactly the submitted fault set."""

    def __init__(self, model, cfg: channel.ChannelConfig, rng=None,
                 shuffle_mode="none", shuffle_seed=0, corruptible_mask=None):
        rng = cfg.rng() if rng is None else rng
        self._path = ChannelPath(model, cfg, cfg.fault_success_rate, rng,
                                 shuffle_mode=shuffle_mode,
                                 shuffle_seed=shuffle_seed,
                                 corruptible_mask=corruptible_mask)
        self.query_count = 0

    @property
    def schedule_length(self) -> int:
        """Number of weight packages per transmission (observable timing)."""
        return self._path.n_packages

    def submit(self, strategy: channel.StrategyFile, batch) -> np.ndarray:
        """Run one inference behind a faulted transmission; returns scores."""
        faulted, _ = self._path.deploy(strategy.target_indexes)
        self.query_count += 1
        return qnn.forward(faulted, batch)

    def reload_weights(self) -> None:
        """Restore the clean model (a no-op here: every query re-streams)."""


class _ProgressiveOracle(FitnessOracle):
    """Shared bookkeeping: compose 'accumulated winners + candidate' into a
    valid target set, caching the filtered winner prefix (winners only grow
    between iterations, never during one)."""

    refresh_population = True

    def __init__(self, objective: Objective, search_cfg: SearchConfig,
                 channel_cfg, winners: list, allowed_triggers):
        self.objective = objective
        self.search_cfg = search_cfg
        self.channel_cfg = channel_cfg
        self.winners = winners
        self.allowed = np.asarray(allowed_triggers)
        self._allowed_set = set(int(a) for a in self.allowed)
        self._prefix = []
        self._prefix_for = -1

    def _winner_prefix(self) -> list:
        if self._prefix_for != len(self.winners):
            gap = self.channel_cfg.min_attack_gap
            self._prefix = effective_targets(
                self.winners, gap, self._n_packages(),
                lambda t: t in self._allowed_set)
            self._prefix_for = len(self.winners)
        return self._prefix

    def targets_with(self, trigger: int) -> list:
        kept = self._winner_prefix()
        if trigger in self._allowed_set and fits_gap(
                kept, trigger, self.channel_cfg.min_attack_gap):
            merged = list(kept)
            bisect.insort(merged, trigger)
            return merged
        return kept

    def _n_packages(self) -> int:
        raise NotImplementedError


class WhiteBoxOracle(_ProgressiveOracle):
    """Scores a candidate on the offline replica: the candidate's trigger is
    added to the accumulated winners and the joint fault set is transmitted
    through the simulated channel at the assumed success rate. The
    per-iteration population refresh already re-draws every member's
    fitness in the current fault context, which covers stochastic
    simulators without a second re-draw inside selection."""

    def __init__(self, sim_path: ChannelPath, objective: Objective,
                 search_cfg: SearchConfig, channel_cfg, winners: list,
                 allowed_triggers):
        super().__init__(objective, search_cfg, channel_cfg, winners,
                         allowed_triggers)
        self.sim = sim_path
        self.evaluations = 0

    def _n_packages(self) -> int:
        return self.sim.n_packages

    def trigger_of(self, cand: Candidate) -> int:
        return denormalize(cand, self.sim.template, self.search_cfg.mode,
                           self.channel_cfg, self.allowed)

    def evaluate(self, cand: Candidate) -> float:
        targets = self.targets_with(self.trigger_of(cand))
        faulted, _ = self.sim.deploy(targets, prefiltered=True)
        self.evaluations += 1
        return objective_fitness(faulted, self.objective)

    def restore(self) -> None:
        pass  # the clean master is never mutated; deploy works on copies


class BlackBoxOracle(_ProgressiveOracle):
    """Scores a candidate on the live victim. Every evaluation costs one
    query. Members are re-scored at each iteration start -- the accumulated
    fault set changed and the attacker cannot see whether injection is even
    deterministic -- otherwise a stale lucky score can pin the same winner
    forever. Selection itself then trusts the fresh caches, so an iteration
    spends exactly z refresh queries plus 4z trial queries."""

    def __init__(self, victim: VictimEndpoint, objective: Objective,
                 search_cfg: SearchConfig, channel_cfg, winners: list,
                 allowed_triggers):
        super().__init__(objective, search_cfg, channel_cfg, winners,
                         allowed_triggers)
        self.victim = victim

    def _n_packages(self) -> int:
        return self.victim.schedule_length

    def trigger_of(self, cand: Candidate) -> int:
        return denormalize(cand, None, BLACK_BOX_1D, self.channel_cfg,
                           self.allowed)

    def _strategy(self, targets) -> channel.StrategyFile:
        return channel.build_strategy(targets, self.victim.schedule_length,
                                      self.channel_cfg)

    def evaluate(self, cand: Candidate) -> float:
        targets = self.targets_with(self.trigger_of(cand))
        scores = self.victim.submit(self._strategy(targets), self.objective.eval_x)
        return qnn.cross_entropy_loss(scores, self.objective.eval_y)

    def restore(self) -> None:
        self.victim.reload_weights()


def _deployment_metrics(objective: Objective, scores) -> tuple:
    """(threshold met, post-attack TA, ASR or None) from metric-set scores."""
    ta = accuracy_from_scores(scores, objective.metric_y)
    if objective.kind == UNTARGETED:
        return ta <= objective.stop_threshold, ta, None
    asr = asr_from_scores(scores, objective.metric_y, objective.target_class)
    return asr >= objective.stop_threshold, ta, asr


def white_box_attack(model, objective: Objective, threat: ThreatModel,
                     search_cfg: SearchConfig, channel_cfg: channel.ChannelConfig,
                     defense_cfg: defense.DefenseConfig = None,
                     trace=None) -> AttackReport:
    """Progressive white-box campaign against an offline replica.

    Per iteration the search evolves against the simulated channel at
    ``threat.assumed_f_p``; the iteration winner is appended and the full
    winner set is deployed over the true channel, retrying a stochastic
    deployment up to three times before the iteration counts as spent.
    Stops when the objective threshold holds on the deployed model or the
    iteration budget runs out. ``queries_used`` counts true-channel
    deployments only.
    """
    if threat.kind != WHITE_BOX:
        raise ValueError("threat model is not white_box")
    defense_cfg = defense_cfg or defense.DefenseConfig()
    mask, shuffle_mode, shuffle_seed = _defense_channel_args(
        model, channel_cfg, defense_cfg)

    seeds = np.random.SeedSequence(search_cfg.rng_seed).spawn(3)
    rng_search = np.random.default_rng(seeds[0])
    sim_path = ChannelPath(model, channel_cfg, threat.assumed_f_p,
                           np.random.default_rng(seeds[1]),
                           shuffle_mode=shuffle_mode,
                           shuffle_seed=(shuffle_seed if shuffle_mode != "random"
                                         else int(seeds[2].generate_state(1)[0])),
                           corruptible_mask=mask)
    deploy_path = ChannelPath(model, channel_cfg, channel_cfg.fault_success_rate,
                              channel_cfg.rng(), shuffle_mode=shuffle_mode,
                              shuffle_seed=shuffle_seed, corruptible_mask=mask)

    allowed = sim_path.allowed_triggers(knows_permutation=True)
    winners, trajectory = [], []
    oracle = WhiteBoxOracle(sim_path, objective, search_cfg, channel_cfg,
                            winners, allowed)
    pop = init_population(search_cfg, rng_search)

    clean_ta = qnn.accuracy(model, objective.metric_x, objective.metric_y)
    deployed = model
    queries = 0
    met, post_ta, asr = False, clean_ta, None
    iterations = 0
    for _ in range(search_cfg.max_iterations):
        winner, pop = run_iteration(pop, oracle, search_cfg, rng_search, trace)
        winners.append(oracle.trigger_of(winner))
        trajectory.append(winner.fitness)
        iterations += 1
        attempts = MAX_DEPLOY_ATTEMPTS if deploy_path.stochastic else 1
        for _ in range(attempts):
            deployed, _ = deploy_path.deploy(winners)
            queries += 1
            met, post_ta, asr = _deployment_metrics(
                objective, qnn.forward(deployed, objective.metric_x))
            if met:
                break
        if met:
            break
    return AttackReport(
        winners=winners, fitness_trajectory=trajectory,
        iterations_used=iterations, queries_used=queries,
        clean_ta=clean_ta, post_attack_ta=post_ta, asr=asr, success=met,
        stop_reason="objective_met" if met else "max_iterations",
    )


def black_box_attack(victim: VictimEndpoint, objective: Objective,
                     threat: ThreatModel, search_cfg: SearchConfig,
                     channel_cfg: channel.ChannelConfig,
                     trace=None) -> AttackReport:
    """Progressive black-box campaign against a live victim endpoint.

    The loop touches only the endpoint's public surface (submit / reload /
    schedule length); the true injection success rate stays hidden inside
    the victim. Each iteration spends 4z trial queries plus deployment
    checks; stops on the objective threshold, the query budget, or the
    iteration budget.
    """
    if threat.kind != BLACK_BOX:
        raise ValueError("threat model is not black_box")
    cfg = replace(search_cfg, mode=BLACK_BOX_1D)
    rng_search = np.random.default_rng(
        np.random.SeedSequence(cfg.rng_seed).spawn(1)[0])
    n = victim.schedule_length
    allowed = np.arange(n - 1)
    winners, trajectory = [], []
    oracle = BlackBoxOracle(victim, objective, cfg, channel_cfg, winners, allowed)
    pop = init_population(cfg, rng_search)

    def deployed_scores(targets):
        strat = channel.build_strategy(targets, n, channel_cfg)
        return victim.submit(strat, objective.metric_x)

    clean_ta = accuracy_from_scores(deployed_scores([]), objective.metric_y)
    met, post_ta, asr = False, clean_ta, None
    iterations = 0
    stop_reason = "max_iterations"
    for _ in range(cfg.max_iterations):
        if threat.query_budget is not None and victim.query_count >= threat.query_budget:
            stop_reason = "query_budget"
            break
        winner, pop = run_iteration(pop, oracle, cfg, rng_search, trace)
        winners.append(oracle.trigger_of(winner))
        trajectory.append(winner.fitness)
        iterations += 1
        targets = effective_targets(winners, channel_cfg.min_attack_gap, n)
        for _ in range(MAX_DEPLOY_ATTEMPTS):
            met, post_ta, asr = _deployment_metrics(objective, deployed_scores(targets))
            if met:
                break
        if met:
            stop_reason = "objective_met"
            break
    return AttackReport(
        winners=winners, fitness_trajectory=trajectory,
        iterations_used=iterations, queries_used=victim.query_count,
        clean_ta=clean_ta, post_attack_ta=post_ta, asr=asr, success=met,
        stop_reason=stop_reason,
    )


def sample_gap_respecting(rng, n_triggers, n_packages, gap) -> list:
    """Uniform sorted triggers from [0, n_packages - 1) with pairwise
    distance >= gap, via the reduced-space combination trick."""
    usable = n_packages - 1
    step = max(int(gap), 1) - 1
    reduced = usable - (n_triggers - 1) * step
    if n_triggers > 0 and reduced < n_triggers:
        raise ValueError(
            f"cannot place {n_triggers} triggers with gap {gap} in {usable} slots")
    if n_triggers == 0:
        return []
    base = np.sort(rng.choice(reduced, size=n_triggers, replace=False))
    return [int(b + i * step) for i, b in enumerate(base)]


def random_attack_baseline(model, objective: Objective, n_attacks,
                           channel_cfg: channel.ChannelConfig,
                           seed=None) -> AttackReport:
    """Uniformly random gap-respecting triggers, deployed once over the true
    channel; the no-search comparison point for the progressive attack."""
    seed = channel_cfg.rng_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    path = ChannelPath(model, channel_cfg, channel_cfg.fault_success_rate, rng)
    targets = sample_gap_respecting(rng, int(n_attacks), path.n_packages,
                                    channel_cfg.min_attack_gap)
    clean_ta = qnn.accuracy(model, objective.metric_x, objective.metric_y)
    deployed, _ = path.deploy(targets)
    met, post_ta, asr = _deployment_metrics(
        objective, qnn.forward(deployed, objective.metric_x))
    return AttackReport(
        winners=targets, fitness_trajectory=[],
        iterations_used=len(targets), queries_used=1,
        clean_ta=clean_ta, post_attack_ta=post_ta, asr=asr, success=met,
        stop_reason="objective_met" if met else "budget",
    )


def _defense_channel_args(model, channel_cfg, defense_cfg):
    """(corruptible mask, shuffle mode, shuffle seed) for a defense config."""
    mask = None
    shuffle_mode, shuffle_seed = "none", 0
    if defense_cfg.kind == "protect_layers":
        stream = channel.serialize(model, channel_cfg)
        mask = defense.protect(stream, defense_cfg.protected_layers)
    elif defense_cfg.kind == "shuffle_predefined":
        shuffle_mode, shuffle_seed = "predefined", defense_cfg.shuffle_seed
    elif defense_cfg.kind == "shuffle_random":
        shuffle_mode, shuffle_seed = "random", defense_cfg.shuffle_seed
    return mask, shuffle_mode, shuffle_seed


def make_victim(model, channel_cfg, defense_cfg=None, rng=None) -> VictimEndpoint:
    """Victim endpoint with any channel-side defense applied."""
    defense_cfg = defense_cfg or defense.DefenseConfig()
    mask, shuffle_mode, shuffle_seed = _defense_channel_args(
        model, channel_cfg, defense_cfg)
    return VictimEndpoint(model, channel_cfg, rng=rng,
                          shuffle_mode=shuffle_mode, shuffle_seed=shuffle_seed,
                          corruptible_mask=mask)
