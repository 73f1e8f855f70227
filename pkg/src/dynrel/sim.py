"""Spring-coupled particle simulation with time-varying connectivity.

Particles live in a 2-D box, connected pairwise by ideal springs
according to a hidden adjacency matrix that a relation schedule flips
over time.  Trajectories are integrated at a fine raw step, subsampled,
and min-max normalized; the hidden labels are recorded at the sampled
resolution so models can be scored against them.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, SimulationError
from . import seeding

STATE_DIM = 4  # position x, y, velocity x, y


@dataclass(frozen=True)
class SimConfig:
    n_agents: int = 5
    box_half_width: float = 5.0
    spring_constant: float = 0.1
    raw_steps: int = 5000
    raw_dt: float = 0.001
    sample_every: int = 100
    seed: int = 0
    initial_speed_scale: float = 0.5

    def __post_init__(self):
        if self.n_agents < 2:
            raise ConfigurationError(f"n_agents must be >= 2, got {self.n_agents}")
        if self.raw_dt <= 0:
            raise ConfigurationError(f"raw_dt must be > 0, got {self.raw_dt}")
        if self.spring_constant < 0:
            raise ConfigurationError(
                f"spring_constant must be >= 0, got {self.spring_constant}")
        if self.sample_every < 1 or self.raw_steps % self.sample_every != 0:
            raise ConfigurationError(
                f"raw_steps ({self.raw_steps}) must be a positive multiple of "
                f"sample_every ({self.sample_every})")

    @property
    def n_samples(self):
        return self.raw_steps // self.sample_every


@dataclass
class RelationSchedule:
    """Ground-truth flip plan: which sampled steps change the graph and,
    per flip, which pairs participate."""

    kind: str
    params: dict
    base_graph: np.ndarray          # [N, N] uint8, symmetric, zero diagonal
    flip_times: np.ndarray          # sorted sample indices, strictly increasing
    flip_masks: np.ndarray          # [F, N, N] uint8, pairs flipped at each time

    def __post_init__(self):
        g = self.base_graph
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ConfigurationError(f"base_graph must be square, got {g.shape}")
        if np.any(g != g.T) or np.any(np.diag(g) != 0):
            raise ConfigurationError("base_graph must be symmetric with zero diagonal")

    def labels(self, T):
        """Relation labels [T, N, N]: base graph XOR accumulated flips."""
        n = self.base_graph.shape[0]
        out = np.empty((T, n, n), dtype=np.uint8)
        current = self.base_graph.copy()
        t0 = 0
        for ft, mask in zip(self.flip_times, self.flip_masks):
            if ft >= T:
                break
            out[t0:ft] = current
            current = current ^ mask
            t0 = int(ft)
        out[t0:T] = current
        return out

    def describe(self):
        return {"kind": self.kind, **self.params}


def _additive_times(start, step, T):
    times, t, gap = [], 0, start
    while True:
        t += gap
        if t >= T:
            return times
        times.append(t)
        gap += step


def build_schedule(kind, T, base_graph, rng_seed=0, **params):
    """Construct a flip plan over T sampled steps.

    kind: "static", "periodic" (period), "additive" (start, step), or
    "stochastic" (block, flip_prob).  Stochastic schedules flip each
    pair independently with flip_prob at every block boundary; the other
    kinds flip all pairs together.
    """
    if T < 1:
        raise ConfigurationError(f"schedule horizon must be >= 1, got {T}")
    base = np.asarray(base_graph, dtype=np.uint8)
    n = base.shape[0]

    if kind == "static":
        times = []
    elif kind == "periodic":
        period = int(params.get("period", 0))
        if period <= 0:
            raise ConfigurationError(f"periodic schedule needs period >= 1, got {period}")
        times = list(range(period, T, period))
    elif kind == "additive":
        start = int(params.get("start", 4))
        step = int(params.get("step", 4))
        if start <= 0 or step < 0:
            raise ConfigurationError(
                f"additive schedule needs start >= 1 and step >= 0, "
                f"got start={start}, step={step}")
        times = _additive_times(start, step, T)
    elif kind == "stochastic":
        block = int(params.get("block", 4))
        p = float(params.get("flip_prob", 0.5))
        if block <= 0:
            raise ConfigurationError(f"stochastic schedule needs block >= 1, got {block}")
        if not 0.0 <= p <= 1.0:
            raise ConfigurationError(f"flip_prob must be in [0,1], got {p}")
        times = list(range(block, T, block))
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")

    ft = np.asarray(times, dtype=np.int64)
    if kind == "stochastic":
        rng = seeding.stream(rng_seed, seeding.GRAPH, 1)
        iu = np.triu_indices(n, k=1)
        masks = np.zeros((len(times), n, n), dtype=np.uint8)
        for f in range(len(times)):
            draw = (rng.random(len(iu[0])) < p).astype(np.uint8)
            masks[f][iu] = draw
            masks[f] += masks[f].T
    else:
        masks = np.ones((len(times), n, n), dtype=np.uint8)
        masks[:, np.arange(n), np.arange(n)] = 0
    return RelationSchedule(kind=kind, params=dict(params), base_graph=base,
                            flip_times=ft, flip_masks=masks)


def spring_forces(positions, adjacency, k):
    """Hooke forces: agent i feels -k * sum_j A[i,j] * (r_i - r_j)."""
    diff = positions[:, None, :] - positions[None, :, :]   # [N, N, 2]
    return -k * (adjacency[:, :, None] * diff).sum(axis=1)


def _reflect(positions, velocities, half_width):
    over = positions > half_width
    positions[over] = 2.0 * half_width - positions[over]
    velocities[over] = -np.abs(velocities[over])
    under = positions < -half_width
    positions[under] = -2.0 * half_width - positions[under]
    velocities[under] = np.abs(velocities[under])
    return positions, velocities


def _batch_forces(positions, adjacency, k):
    diff = positions[:, :, None, :] - positions[:, None, :, :]  # [S, N, N, 2]
    return -k * (adjacency[:, :, :, None] * diff).sum(axis=2)


def _batch_step(pos, vel, adjacency, cfg, step_index):
    """Velocity-Verlet with wall reflection on [S, N, 2] state arrays."""
    k, dt = cfg.spring_constant, cfg.raw_dt
    with np.errstate(invalid="ignore"):
        half_kick = vel + 0.5 * dt * _batch_forces(pos, adjacency, k)
        pos = pos + dt * half_kick
        pos, half_kick = _reflect(pos, half_kick, cfg.box_half_width)
        vel = half_kick + 0.5 * dt * _batch_forces(pos, adjacency, k)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise SimulationError("non-finite state", step=step_index)
    return pos, vel


def step_leapfrog(positions, velocities, adjacency, cfg, step_index=0):
    """One velocity-Verlet step with elastic wall reflection.

    positions, velocities: [N, 2] float64 (not modified in place).
    """
    pos = positions.astype(np.float64, copy=True)[None]
    vel = velocities.astype(np.float64, copy=True)[None]
    adj = np.asarray(adjacency, dtype=np.float64)[None]
    pos, vel = _batch_step(pos, vel, adj, cfg, step_index)
    return pos[0], vel[0]


def initial_conditions(cfg, rng):
    pos = rng.standard_normal((cfg.n_agents, 2)) * 0.5
    vel = rng.standard_normal((cfg.n_agents, 2))
    norm = np.sqrt((vel ** 2).sum(axis=1, keepdims=True))
    vel = vel * cfg.initial_speed_scale / norm
    return pos, vel


def _simulate_batch(cfg, labels, pos, vel):
    """Integrate S trajectories in lockstep.

    labels: [S, T, N, N]; pos, vel: [S, N, 2].  Elementwise updates keep
    every example bit-identical to a standalone run.
    """
    S, T = labels.shape[:2]
    states = np.empty((S, T, cfg.n_agents, STATE_DIM), dtype=np.float64)
    for t in range(T):
        states[:, t, :, :2] = pos
        states[:, t, :, 2:] = vel
        if t == T - 1:
            break
        adjacency = labels[:, t].astype(np.float64)
        for r in range(cfg.sample_every):
            pos, vel = _batch_step(pos, vel, adjacency, cfg,
                                   step_index=t * cfg.sample_every + r)
    return states


def simulate_trajectory(cfg, schedule, rng=None):
    """Integrate one trajectory and subsample it.

    Returns (states [T, N, 4] float64 raw units, labels [T, N, N] uint8).
    Sample t is the state at raw step t * sample_every; labels[t] is the
    adjacency in force while integrating from sample t toward t + 1.
    """
    labels = schedule.labels(cfg.n_samples)
    if rng is None:
        rng = seeding.stream(cfg.seed, seeding.INIT)
    pos, vel = initial_conditions(cfg, rng)
    states = _simulate_batch(cfg, labels[None], pos[None], vel[None])
    return states[0], labels


@dataclass
class NormalizationBounds:
    lo: np.ndarray  # [STATE_DIM] float64
    hi: np.ndarray

    @classmethod
    def from_states(cls, states):
        flat = states.reshape(-1, states.shape[-1])
        return cls(lo=flat.min(axis=0).astype(np.float64),
                   hi=flat.max(axis=0).astype(np.float64))

    def normalize(self, states):
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return ((states - self.lo) / span).astype(np.float32)

    def denormalize(self, states):
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return states.astype(np.float64) * span + self.lo


@dataclass
class TrajectoryBatch:
    states: np.ndarray   # [S, T, N, STATE_DIM] float32, normalized
    labels: np.ndarray   # [S, T, N, N] uint8

    def __len__(self):
        return self.states.shape[0]


@dataclass
class DatasetSplit:
    train: TrajectoryBatch
    valid: TrajectoryBatch
    test: TrajectoryBatch
    bounds: NormalizationBounds
    config: SimConfig
    schedule_kind: str
    schedule_params: dict = field(default_factory=dict)

    def split(self, name):
        try:
            return getattr(self, name)
        except AttributeError:
            raise ConfigurationError(f"unknown split {name!r}") from None


def random_base_graph(n_agents, rng, p=0.5):
    iu = np.triu_indices(n_agents, k=1)
    g = np.zeros((n_agents, n_agents), dtype=np.uint8)
    g[iu] = (rng.random(len(iu[0])) < p).astype(np.uint8)
    return g + g.T


def _generate_split(cfg, schedule_kind, schedule_params, count, split_tag):
    T = cfg.n_samples
    labels = np.empty((count, T, cfg.n_agents, cfg.n_agents), dtype=np.uint8)
    pos = np.empty((count, cfg.n_agents, 2))
    vel = np.empty((count, cfg.n_agents, 2))
    for s in range(count):
        graph_rng = seeding.stream(cfg.seed, split_tag, s, seeding.GRAPH)
        base = random_base_graph(cfg.n_agents, graph_rng)
        schedule = build_schedule(schedule_kind, T, base,
                                  rng_seed=seeding.derive(cfg.seed, split_tag, s),
                                  **schedule_params)
        labels[s] = schedule.labels(T)
        init_rng = seeding.stream(cfg.seed, split_tag, s, seeding.INIT)
        pos[s], vel[s] = initial_conditions(cfg, init_rng)
    states = _simulate_batch(cfg, labels, pos, vel)
    return states, labels


def generate_dataset(cfg, schedule_kind, n_train, n_valid, n_test, **schedule_params):
    """Simulate all three splits with disjoint RNG streams.

    Normalization bounds come from the training split and are reused for
    validation and test, so those may stray marginally outside [0,1].
    """
    for name, n in (("n_train", n_train), ("n_valid", n_valid), ("n_test", n_test)):
        if n < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {n}")
    raw = {}
    for name, count, tag in (("train", n_train, seeding.SPLIT_TRAIN),
                             ("valid", n_valid, seeding.SPLIT_VALID),
                             ("test", n_test, seeding.SPLIT_TEST)):
        raw[name] = _generate_split(cfg, schedule_kind, schedule_params, count, tag)
    bounds = NormalizationBounds.from_states(raw["train"][0])
    batches = {name: TrajectoryBatch(states=bounds.normalize(st), labels=lb)
               for name, (st, lb) in raw.items()}
    return DatasetSplit(train=batches["train"], valid=batches["valid"],
                        test=batches["test"], bounds=bounds, config=cfg,
                        schedule_kind=schedule_kind,
                        schedule_params=dict(schedule_params))
