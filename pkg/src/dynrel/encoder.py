"""Convolutional encoder from pairwise trajectories to per-block
relation logits.

Four stages: per-pair feature extraction (residual conv stacks), pyramid
pooling (2x and 5x average-pool branches), aggregation down to K logit
channels, and interpolation (average-pool over the inference period,
then nearest-neighbour upsampling back to full length).
"""

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .errors import ConfigurationError


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 64
    n_extract_blocks: int = 2
    skip_connections_per_block: int = 4   # 4 for the C variant, 2 for S
    pyramid_factors: tuple = (2, 5)
    inference_period: int = 10
    edge_types: int = 2
    use_interpolation_avg_pool: bool = True

    def __post_init__(self):
        if self.edge_types < 2:
            raise ConfigurationError(f"edge_types must be >= 2, got {self.edge_types}")
        if self.inference_period < 1:
            raise ConfigurationError(
                f"inference_period must be >= 1, got {self.inference_period}")
        if self.channels < 1 or self.n_extract_blocks < 1 \
                or self.skip_connections_per_block < 1:
            raise ConfigurationError("encoder sizes must all be >= 1")


def pair_indices(n_agents):
    """Ordered pairs (i, j), i != j, lexicographic: (0,1), (0,2), ..."""
    first, second = [], []
    for i in range(n_agents):
        for j in range(n_agents):
            if i != j:
                first.append(i)
                second.append(j)
    return np.asarray(first, dtype=np.int64), np.asarray(second, dtype=np.int64)


def block_edges(T, period):
    """Segment boundaries [0, P, 2P, ..., T]; the last block may be short."""
    if period < 1:
        raise ConfigurationError(f"period must be >= 1, got {period}")
    edges = list(range(0, T, period)) + [T]
    return np.asarray(edges, dtype=np.int64)


def step_to_block(T, edges):
    """For each step t, the index of the block containing it."""
    return np.searchsorted(edges, np.arange(T), side="right") - 1


def build_edge_features(trajectory):
    """[... T, N, D] -> [... N(N-1), 2D, T]: per ordered pair (i, j), the
    channel-major concatenation of both agents' sequences."""
    traj = nn.as_tensor(trajectory)
    if traj.data.shape[-2] < 2:
        raise ConfigurationError(
            f"need at least 2 agents, got {traj.data.shape[-2]}")
    first, second = pair_indices(traj.data.shape[-2])
    xi = nn.take(traj, first, axis=-2)   # [..., T, pairs, D]
    xj = nn.take(traj, second, axis=-2)
    feats = nn.concat([xi, xj], axis=-1)  # [..., T, pairs, 2D]
    ndim = traj.data.ndim
    # [..., T, pairs, 2D] -> [..., pairs, 2D, T]
    axes = tuple(range(ndim - 3)) + (ndim - 2, ndim - 1, ndim - 3)
    return nn.transpose(feats, axes)


class SkipUnit(nn.Module):
    """x + conv(elu(conv(x))), both width 3, length-preserving."""

    def __init__(self, channels, rng):
        self.conv1 = nn.Conv1d(channels, channels, 3, rng, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, rng, padding=1)

    def __call__(self, x):
        return x + self.conv2(nn.elu(self.conv1(x)))


class ResidualBlock(nn.Module):
    def __init__(self, channels, n_units, rng):
        self.units = [SkipUnit(channels, rng) for _ in range(n_units)]

    def __call__(self, x):
        for unit in self.units:
            x = unit(x)
        return x


class DyariEncoder(nn.Module):
    def __init__(self, n_agents, state_dim, cfg, rng):
        self.cfg = cfg
        C = cfg.channels
        self.project = nn.Conv1d(2 * state_dim, C, 3, rng, padding=1)
        self.extract = [ResidualBlock(C, cfg.skip_connections_per_block, rng)
                        for _ in range(cfg.n_extract_blocks)]
        self.pyramid = [ResidualBlock(C, cfg.skip_connections_per_block, rng)
                        for _ in cfg.pyramid_factors]
        n_scales = 1 + len(cfg.pyramid_factors)
        self.aggregate_conv = nn.Conv1d(n_scales * C, cfg.edge_types, 3, rng,
                                        padding=1)
        # keep starting posteriors near uniform: tame the logit scale
        self.aggregate_conv.weight.data *= 0.1
        self.aggregate_conv.bias.data *= 0.1
        self._pair_count = n_agents * (n_agents - 1)

    def feature_extract(self, features):
        h = self.project(features)
        for block in self.extract:
            h = block(h)
        return h

    def pyramid_pool(self, hidden):
        T = hidden.shape[-1]
        for f in self.cfg.pyramid_factors:
            if T % f != 0:
                raise ConfigurationError(
                    f"sequence length {T} not divisible by pyramid factor {f}; "
                    f"choose a length divisible by "
                    f"{int(np.prod(self.cfg.pyramid_factors))}")
        branches = [hidden]
        for f, block in zip(self.cfg.pyramid_factors, self.pyramid):
            down = nn.avg_pool1d(hidden, f)
            branches.append(nn.upsample_nearest(block(down), f))
        return nn.concat(branches, axis=-2)

    def aggregate(self, multi_scale):
        return self.aggregate_conv(multi_scale)

    def interpolate_latent(self, logits):
        if not self.cfg.use_interpolation_avg_pool:
            return logits
        T = logits.shape[-1]
        edges = block_edges(T, self.cfg.inference_period)
        pooled = nn.segment_mean(logits, edges)
        lengths = np.diff(edges)
        if len(set(lengths.tolist())) == 1:
            return nn.upsample_nearest(pooled, int(lengths[0]))
        return nn.take(pooled, step_to_block(T, edges), axis=-1)

    def per_step_logits(self, trajectory):
        """Full pipeline up to per-step logits [..., pairs, K, T]."""
        feats = build_edge_features(trajectory)
        shape = feats.shape
        flat = nn.reshape(feats, (-1,) + shape[-2:])
        h = self.feature_extract(flat)
        h = self.pyramid_pool(h)
        h = self.aggregate(h)
        h = self.interpolate_latent(h)
        return nn.reshape(h, shape[:-2] + h.shape[-2:])

    def __call__(self, trajectory):
        """LatentPosterior over blocks of the inference period."""
        stepwise = self.per_step_logits(trajectory)
        T = stepwise.shape[-1]
        if self.cfg.use_interpolation_avg_pool:
            edges = block_edges(T, self.cfg.inference_period)
        else:
            edges = np.arange(T + 1, dtype=np.int64)  # per-step blocks
        block_logits = nn.segment_mean(stepwise, edges)
        return LatentPosterior(logits=block_logits, edges=edges, horizon=T)


@dataclass
class LatentPosterior:
    """Per-pair, per-block relation logits.

    logits: Tensor [..., pairs, K, B]; edges: [B+1] step boundaries with
    edges[0]=0 and edges[-1]=horizon.
    """

    logits: object
    edges: np.ndarray
    horizon: int

    @property
    def n_blocks(self):
        return len(self.edges) - 1

    def stepwise(self):
        """Broadcast block logits back to per-step resolution."""
        return nn.take(self.logits, step_to_block(self.horizon, self.edges),
                       axis=-1)

    def probabilities(self):
        return nn.softmax(self.logits, axis=-2)

    def hard_labels(self):
        """Argmax edge type per pair per block (numpy, no gradient)."""
        return np.argmax(self.logits.data, axis=-2)
