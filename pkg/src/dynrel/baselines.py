"""Baseline models sharing the relational decoder and training loop.

Three families: a flattened-window MLP message-passing encoder producing
one relation per pair over the whole trajectory (static) or per uniform
sub-window (adaptive), and a supervised model that skips inference
entirely by decoding with the ground-truth relations.
"""

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .decoder import FixedRelations, RelationalDecoder, one_hot_relations
from .encoder import LatentPosterior, block_edges, pair_indices, step_to_block
from .errors import ConfigurationError, DimensionError, UsageError
from .objective import RelationalVae


@dataclass(frozen=True)
class BaselineKind:
    name: str
    sub_lengths: tuple = ()

    def __post_init__(self):
        if self.name not in ("nri_static", "nri_adaptive", "in_supervised"):
            raise ConfigurationError(f"unknown baseline {self.name!r}")
        if self.name == "nri_adaptive" and not self.sub_lengths:
            raise ConfigurationError(
                "nri_adaptive needs at least one sub-window length")


def _blockify(traj, edges):
    """[B, T, N, D] -> [B, nB, N, L*D] with short tail blocks right-padded
    by repeating their last step (L = longest block)."""
    lengths = np.diff(edges)
    L = int(lengths.max())
    blocks = []
    for b in range(len(lengths)):
        lo, hi = int(edges[b]), int(edges[b + 1])
        piece = nn.take(traj, np.arange(lo, hi), axis=1)
        if hi - lo < L:
            pad = nn.take(traj, np.full(L - (hi - lo), hi - 1), axis=1)
            piece = nn.concat([piece, pad], axis=1)
        blocks.append(nn.reshape(piece, (traj.shape[0], 1) + piece.shape[1:]))
    stacked = nn.concat(blocks, axis=1)            # [B, nB, L, N, D]
    ordered = nn.transpose(stacked, (0, 1, 3, 2, 4))
    return nn.reshape(ordered, ordered.shape[:3] + (L * traj.shape[-1],))


class NriEncoder(nn.Module):
    """node -> edge -> node -> edge MLP stack over one flattened window."""

    def __init__(self, n_agents, window_len, state_dim, edge_types, rng,
                 hidden=256, extra_hidden=0):
        H = hidden
        self.embed = nn.MLP([window_len * state_dim]
                            + [H] * (2 + extra_hidden), rng)
        self.edge1 = nn.MLP([2 * H, H, H], rng)
        self.node = nn.MLP([H, H, H], rng)
        self.edge2 = nn.MLP([2 * H, H, edge_types], rng)
        # near-uniform starting posterior, matching the other encoder
        self.edge2.layers[-1].weight.data *= 0.1
        self.edge2.layers[-1].bias.data *= 0.1
        self.n_agents = n_agents
        self.window_len = window_len
        first, second = pair_indices(n_agents)
        self._first, self._second = first, second
        # receiver-contiguous ordering so incoming sums are a reshape
        self._by_receiver = np.argsort(second, kind="stable")

    def _pairwise(self, h):
        hi = nn.take(h, self._first, axis=-2)
        hj = nn.take(h, self._second, axis=-2)
        return nn.concat([hi, hj], axis=-1)

    def __call__(self, windows):
        """windows: [..., N, L*D] -> logits [..., pairs, K]."""
        h = self.embed(windows)
        e = self.edge1(self._pairwise(h))           # [..., pairs, H]
        N = self.n_agents
        grouped = nn.take(e, self._by_receiver, axis=-2)
        shape = e.shape[:-2] + (N, N - 1, e.shape[-1])
        h2 = self.node(nn.tsum(nn.reshape(grouped, shape), axis=-2))
        return self.edge2(self._pairwise(h2))


class NriModel(RelationalVae):
    """Flattened-window encoder + relational decoder.

    period=None encodes the whole trajectory as one block (static);
    period=P encodes uniform length-P sub-windows (adaptive), with the
    final shorter block padded.
    """

    def __init__(self, n_agents, state_dim, horizon, dec_cfg, rng,
                 period=None, hidden=256, extra_hidden=0):
        if period is not None and not 1 <= period <= horizon:
            raise ConfigurationError(
                f"period must be in [1, {horizon}], got {period}")
        self.kind = "nri-static" if period is None else "nri-adaptive"
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.horizon = horizon
        self.period = period
        self.edges = block_edges(horizon, period or horizon)
        self.encoder = NriEncoder(n_agents, period or horizon, state_dim,
                                  dec_cfg.edge_types, rng, hidden=hidden,
                                  extra_hidden=extra_hidden)
        self.decoder = RelationalDecoder(n_agents, state_dim, dec_cfg, rng)

    def posterior(self, traj):
        traj = nn.as_tensor(traj)
        if traj.shape[1] != self.horizon:
            raise DimensionError(
                f"model encodes length-{self.horizon} trajectories, "
                f"got {traj.shape[1]}")
        windows = _blockify(traj, self.edges)       # [B, nB, N, L*D]
        logits = self.encoder(windows)              # [B, nB, pairs, K]
        return LatentPosterior(logits=nn.transpose(logits, (0, 2, 3, 1)),
                               edges=self.edges, horizon=self.horizon)


class InSupervisedModel(nn.Module):
    """Decoder trained on MSE with relations fixed to the ground truth."""

    kind = "in"
    requires_labels = True

    def __init__(self, n_agents, state_dim, dec_cfg, rng):
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.decoder = RelationalDecoder(n_agents, state_dim, dec_cfg, rng)

    def posterior(self, traj):
        raise UsageError(
            "the supervised model has no posterior; it decodes with the "
            "ground-truth relations")


def nri_mlp_encode(model, trajectory):
    """Single whole-trajectory relation logits per pair: [B, pairs, K, 1]."""
    post = model.posterior(trajectory)
    if post.n_blocks != 1:
        raise UsageError(
            f"expected a whole-trajectory encoder, got {post.n_blocks} blocks")
    return post.logits


def assign_members(periods, segment_lengths):
    """Member index for each segment: nearest encoding length, ties
    toward the shorter one."""
    out = []
    for L in segment_lengths:
        best = min(range(len(periods)),
                   key=lambda m: (abs(periods[m] - L), periods[m]))
        out.append(best)
    return out


def nri_adaptive_infer(members, trajectory, segment_edges=None):
    """Per-step relation labels from adaptive encoders.

    One model: its own uniform blocks are used directly.  Several
    models plus segment_edges: each segment's steps take the argmax
    labels of the member whose encoding length is closest to the
    segment length (the additive-schedule ensemble).
    """
    from .eval import RelationSequence

    if isinstance(members, (list, tuple)):
        if segment_edges is None:
            raise ConfigurationError(
                "an ensemble needs explicit segment edges to stitch")
        if not members:
            raise ConfigurationError("empty ensemble")
        T = members[0].horizon
        lengths = np.diff(segment_edges)
        owners = assign_members([m.period or m.horizon for m in members],
                                lengths.tolist())
        with nn.no_grad():
            stepwise = [m.posterior(trajectory).stepwise().data.argmax(axis=-2)
                        for m in members]           # each [B, pairs, T]
        if int(segment_edges[-1]) != T:
            raise ConfigurationError(
                f"segments end at {segment_edges[-1]}, trajectory has {T} steps")
        out = np.empty_like(stepwise[0])
        for s, owner in enumerate(owners):
            lo, hi = int(segment_edges[s]), int(segment_edges[s + 1])
            out[..., lo:hi] = stepwise[owner][..., lo:hi]
        return RelationSequence(labels=out, n_agents=members[0].n_agents)
    with nn.no_grad():
        post = members.posterior(trajectory)
    labels = post.hard_labels()[..., step_to_block(post.horizon, post.edges)]
    return RelationSequence(labels=labels, n_agents=members.n_agents)


def in_supervised_predict(model, trajectory, labels, scheme, context, horizon):
    """Decode with ground-truth relations; returns mu [B, horizon, N, D]."""
    if labels is None:
        raise UsageError("ground-truth relations are required")
    z = one_hot_relations(labels, model.n_agents, model.decoder.cfg.edge_types)
    rel = FixedRelations(z=z, horizon=labels.shape[1])
    with nn.no_grad():
        mu = model.decoder.rollout(nn.as_tensor(trajectory), rel, scheme,
                                   context, horizon)
    return mu.data
