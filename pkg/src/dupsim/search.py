"""Progressive differential-evolution search over weight-package indexes.

Each attack iteration sweeps a population of normalized candidates once:
every member spawns four mutants (one per mutation strategy), mutants are
crossed over with the member into trial vectors, trials are scored by a
fitness oracle, and the best of {member, trials} survives. After the sweep
the highest-fitness member is the iteration winner.

Candidates live in [0, 1]^2 -- normalized (layer, within-layer) coordinates
in white-box mode -- or in [0, 1] as a single normalized position over the
flattened package schedule in black-box mode (``q`` is carried but unused).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import channel

WHITE_BOX_2D = "white_box_2d"
BLACK_BOX_1D = "black_box_1d"
MODES = (WHITE_BOX_2D, BLACK_BOX_1D)

# Strategies 2-4 draw five distinct peers, so a member needs at least
# five others: population size >= 6.
MIN_POPULATION = 6

_NEG_INF = float("-inf")


class PopulationTooSmall(ValueError):
    """Mutation needs five distinct peers besides the current member."""


@dataclass
class Candidate:
    """One attack-location proposal with an optional cached fitness."""

    p: float
    q: float = 0.0
    fitness: float = None

    def copy(self) -> "Candidate":
        return Candidate(self.p, self.q, self.fitness)


def _key(member: Candidate) -> float:
    return _NEG_INF if member.fitness is None else member.fitness


@dataclass
class Population:
    members: list

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i) -> Candidate:
        return self.members[i]

    @property
    def best_index(self) -> int:
        # ties resolve to the lowest index; unevaluated members rank lowest
        return max(range(len(self.members)), key=lambda i: (_key(self.members[i]), -i))

    @property
    def worst_index(self) -> int:
        return min(range(len(self.members)), key=lambda i: (_key(self.members[i]), i))

    @property
    def best_fitness(self) -> float:
        return _key(self.members[self.best_index])


@dataclass
class SearchConfig:
    """z: population size / evolutions per iteration; mode: coordinate
    space; max_iterations: attack-iteration budget."""

    z: int
    mode: str = WHITE_BOX_2D
    max_iterations: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.z < MIN_POPULATION:
            raise ValueError(f"z must be >= {MIN_POPULATION}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    def rng(self):
        return np.random.default_rng(self.rng_seed)


class FitnessOracle:
    """Scores a candidate and restores the victim afterwards.

    ``reevaluate_cached``: ignore cached member fitness in selection and
    measure it afresh (used by stochastic offline simulators where
    evaluations are free). ``refresh_population``: re-score every member at
    the start of an iteration (the accumulated fault set has changed, so
    old scores are stale). Budget-metered black-box oracles leave both off
    and spend queries on trial vectors only.
    """

    reevaluate_cached = False
    refresh_population = False

    def evaluate(self, candidate: Candidate) -> float:
        raise NotImplementedError

    def restore(self) -> None:
        """Undo any victim-side state left by the last evaluation."""


def init_population(cfg: SearchConfig, rng) -> Population:
    """z members with coordinates drawn uniformly from [0, 1], unscored.

    Draw order per member: p, then q (white-box mode only).
    """
    members = []
    for _ in range(cfg.z):
        p = float(rng.random())
        q = float(rng.random()) if cfg.mode == WHITE_BOX_2D else 0.0
        members.append(Candidate(p, q))
    return Population(members)


def _draw_distinct(rng, size: int, exclude: int) -> list:
    """Five distinct indexes != exclude, by rejection sampling.

    Draw order is part of the contract: repeatedly draw integers(0, size),
    discarding the excluded index and duplicates, until five are kept.
    """
    chosen = []
    while len(chosen) < 5:
        k = int(rng.integers(0, size))
        if k == exclude or k in chosen:
            continue
        chosen.append(k)
    return chosen


def mutate(pop: Population, member_index: int, rng) -> list:
    """Four mutant candidates for one member, one per mutation strategy.

    RNG consumption order: five distinct peer indexes a, b, c, d, e via
    :func:`_draw_distinct`, then three mutation factors alpha1, alpha2,
    alpha3 as single uniform draws. The same factors apply to both
    coordinates and are shared across the four strategies:

      1. a + alpha1 * (b - c)
      2. a + alpha1 * (b - c) + alpha2 * (d - e)
      3. a + alpha1 * (best - a) + alpha2 * (b - c) + alpha3 * (d - e)
      4. a + alpha1 * (best - worst)

    where best/worst are the members with the highest/lowest cached
    fitness. Mutant coordinates may leave [0, 1]; crossover handles that.
    """
    z = len(pop)
    if z < MIN_POPULATION:
        raise PopulationTooSmall(f"population of {z} cannot mutate (need >= {MIN_POPULATION})")
    a, b, c, d, e = (pop[i] for i in _draw_distinct(rng, z, member_index))
    alpha1 = float(rng.random())
    alpha2 = float(rng.random())
    alpha3 = float(rng.random())
    best = pop[pop.best_index]
    worst = pop[pop.worst_index]
    return [
        Candidate(a.p + alpha1 * (b.p - c.p),
                  a.q + alpha1 * (b.q - c.q)),
        Candidate(a.p + alpha1 * (b.p - c.p) + alpha2 * (d.p - e.p),
                  a.q + alpha1 * (b.q - c.q) + alpha2 * (d.q - e.q)),
        Candidate(a.p + alpha1 * (best.p - a.p) + alpha2 * (b.p - c.p) + alpha3 * (d.p - e.p),
                  a.q + alpha1 * (best.q - a.q) + alpha2 * (b.q - c.q) + alpha3 * (d.q - e.q)),
        Candidate(a.p + alpha1 * (best.p - worst.p),
                  a.q + alpha1 * (best.q - worst.q)),
    ]


def crossover(mutant: Candidate, current: Candidate) -> Candidate:
    """Per coordinate, keep the mutant feature only if it lies in [0, 1];
    otherwise fall back to the current member's coordinate."""
    p = mutant.p if 0.0 <= mutant.p <= 1.0 else current.p
    q = mutant.q if 0.0 <= mutant.q <= 1.0 else current.q
    return Candidate(p, q)


def select(current: Candidate, trials, oracle: FitnessOracle) -> Candidate:
    """Score the trial vectors and keep the best of {current} | trials.

    Each trial is evaluated in strategy order, with the oracle's restore
    hook invoked after every evaluation. The current member keeps its
    cached fitness unless the oracle demands re-evaluation (an unscored
    member ranks below any scored trial). Ties go to the current member,
    then to the lowest strategy number.
    """
    if oracle.reevaluate_cached:
        current.fitness = oracle.evaluate(current)
        oracle.restore()
    for trial in trials:
        trial.fitness = oracle.evaluate(trial)
        oracle.restore()
    winner = current
    for trial in trials:
        if trial.fitness > _key(winner):
            winner = trial
    return winner


def run_iteration(pop: Population, oracle: FitnessOracle, cfg: SearchConfig,
                  rng, trace=None) -> tuple:
    """One attack iteration: sweep mutate -> crossover -> select over all z
    members, then return (winner copy, population).

    If the oracle requests it, every member is re-scored first so selection
    compares against fitness measured in the current fault context. When
    ``trace`` is a list, one record per select call is appended.
    """
    if oracle.refresh_population:
        for member in pop.members:
            member.fitness = oracle.evaluate(member)
            oracle.restore()
    for i in range(len(pop)):
        current = pop[i]
        mutants = mutate(pop, i, rng)
        trials = [crossover(m, current) for m in mutants]
        survivor = select(current, trials, oracle)
        pop.members[i] = survivor
        if trace is not None:
            trace.append({
                "member": i,
                "trial_fitness": [t.fitness for t in trials],
                "survivor": [survivor.p, survivor.q],
                "survivor_fitness": survivor.fitness,
            })
    return pop[pop.best_index].copy(), pop


def denormalize(cand: Candidate, model, mode: str, cfg: channel.ChannelConfig,
                allowed_triggers=None) -> int:
    """Map a normalized candidate to a trigger (package) index.

    White-box: floor p into the parameterized-layer list and q into that
    layer's flattened weights (clamped at the top boundary), look up the
    weight's package, then snap to the nearest allowed trigger. Black-box:
    floor the single coordinate straight into the allowed trigger list.
    ``allowed_triggers`` defaults to every package except the last (which
    cannot trigger); defenses may shrink it further.
    """
    if allowed_triggers is None:
        n_pkg = max(1, -(-model.total_weights // cfg.package_width))
        allowed_triggers = np.arange(n_pkg - 1)
    allowed = np.asarray(allowed_triggers)
    if allowed.size == 0:
        raise ValueError("no allowed trigger indexes")
    if mode == BLACK_BOX_1D:
        k = min(int(cand.p * allowed.size), allowed.size - 1)
        return int(allowed[k])
    param_layers = model.param_layer_indexes
    li = param_layers[min(int(cand.p * len(param_layers)), len(param_layers) - 1)]
    n_l = model.layers[li].weight_count
    wi = min(int(cand.q * n_l), n_l - 1)
    pkg = channel.package_index_of(model, li, wi, cfg)
    pos = int(np.searchsorted(allowed, pkg))
    if pos == allowed.size:
        return int(allowed[-1])
    if pos == 0:
        return int(allowed[0])
    below, above = int(allowed[pos - 1]), int(allowed[pos])
    return below if (pkg - below) <= (above - pkg) else above
