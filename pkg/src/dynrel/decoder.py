"""Edge-conditioned message-passing decoder with a GRU backbone.

Per step: each ordered pair mixes K per-type MLP messages by its
relation weights, each node sums its incoming messages, a GRU carries
node state through time, and an output MLP produces a residual delta on
the current state.  Rollout feeds either ground truth (teacher forcing)
or the model's own predictions (autoregressive) back as input.
"""

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .encoder import pair_indices, step_to_block
from .errors import ConfigurationError, DimensionError, UsageError


@dataclass(frozen=True)
class DecoderConfig:
    edge_types: int = 2
    msg_hidden: int = 256
    gru_hidden: int = 256
    sigma2: float = 5e-5
    skip_first_edge_type: bool = False

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ConfigurationError(f"sigma2 must be > 0, got {self.sigma2}")
        if self.edge_types < 2:
            raise ConfigurationError(
                f"edge_types must be >= 2, got {self.edge_types}")


@dataclass(frozen=True)
class RolloutScheme:
    """teacher_forcing, autoregressive, or hybrid(tf_steps)."""

    kind: str
    tf_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("teacher_forcing", "autoregressive", "hybrid"):
            raise ConfigurationError(f"unknown rollout scheme {self.kind!r}")
        if self.kind == "hybrid" and self.tf_steps < 1:
            raise ConfigurationError("hybrid scheme needs tf_steps >= 1")

    def feeds_truth_at(self, step_in_window):
        if self.kind == "teacher_forcing":
            return True
        if self.kind == "autoregressive":
            return step_in_window == 0
        return step_in_window < self.tf_steps


TEACHER_FORCING = RolloutScheme("teacher_forcing")
AUTOREGRESSIVE = RolloutScheme("autoregressive")


def hybrid(tf_steps):
    return RolloutScheme("hybrid", tf_steps=tf_steps)


class RelationalDecoder(nn.Module):
    def __init__(self, n_agents, state_dim, cfg, rng):
        self.cfg = cfg
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.edge_mlps = [nn.MLP([2 * state_dim, cfg.msg_hidden, cfg.msg_hidden], rng)
                          for _ in range(cfg.edge_types)]
        self.gru = nn.GRUCell(state_dim + cfg.msg_hidden, cfg.gru_hidden, rng)
        self.out_mlp = nn.MLP([cfg.gru_hidden, cfg.msg_hidden, state_dim], rng)
        # start near the identity map: mu ~= x_t at initialization
        last = self.out_mlp.layers[-1]
        last.weight.data *= 0.01
        last.bias.data *= 0.0
        self._first, self._second = pair_indices(n_agents)

    def _dtype(self):
        # zeros created here must match the parameters, not whatever the
        # ambient default happens to be when a checkpoint is evaluated
        return self.gru.w_ir.weight.data.dtype

    def initial_state(self, batch):
        return nn.Tensor(np.zeros((batch, self.n_agents, self.cfg.gru_hidden),
                                  dtype=self._dtype()))

    def edge_messages(self, x_t, z_t):
        """x_t: [B, N, D]; z_t: [B, pairs, K] -> [B, pairs, msg_hidden]."""
        if z_t.shape[-1] != self.cfg.edge_types:
            raise DimensionError(
                f"relation weights have {z_t.shape[-1]} types, "
                f"decoder expects {self.cfg.edge_types}")
        xi = nn.take(x_t, self._first, axis=-2)
        xj = nn.take(x_t, self._second, axis=-2)
        pair_in = nn.concat([xi, xj], axis=-1)           # [B, pairs, 2D]
        start = 1 if self.cfg.skip_first_edge_type else 0
        total = None
        for k in range(start, self.cfg.edge_types):
            u_k = self.edge_mlps[k](pair_in)             # [B, pairs, H]
            w_k = nn.reshape(nn.take(z_t, [k], axis=-1), z_t.shape[:-1] + (1,))
            term = u_k * w_k
            total = term if total is None else total + term
        return total

    def predict_step(self, x_t, z_t, gru_state):
        """One prediction: (mu_{t+1} [B, N, D], next state [B, N, H])."""
        B, N = x_t.shape[0], self.n_agents
        messages = self.edge_messages(x_t, z_t)
        incoming = nn.tsum(
            nn.reshape(messages, (B, N, N - 1, self.cfg.msg_hidden)), axis=2) \
            if N > 1 else nn.Tensor(np.zeros((B, N, self.cfg.msg_hidden),
                                             dtype=self._dtype()))
        gru_in = nn.reshape(nn.concat([x_t, incoming], axis=-1), (B * N, -1))
        state = self.gru(gru_in, nn.reshape(gru_state, (B * N, -1)))
        delta = self.out_mlp(state)
        mu = x_t + nn.reshape(delta, (B, N, self.state_dim))
        return mu, nn.reshape(state, (B, N, self.cfg.gru_hidden))

    def rollout(self, trajectory, posterior, scheme, context, horizon):
        """Predict steps [context, context + horizon).

        trajectory: [B, T, N, D] Tensor or array; posterior: a
        LatentPosterior (or any object with .stepwise() and .horizon).
        Returns mu [B, horizon, N, D].  The relation block covering the
        step being left governs each transition.
        """
        traj = nn.as_tensor(trajectory)
        B, T = traj.shape[0], traj.shape[1]
        if horizon < 1 or context < 1 or context + horizon > T:
            raise UsageError(
                f"decode window [{context}, {context + horizon}) does not fit "
                f"a length-{T} trajectory")
        if posterior.horizon < context + horizon - 1:
            raise UsageError(
                f"relations cover {posterior.horizon} steps, "
                f"decode needs {context + horizon - 1}")
        z_steps = posterior.stepwise()                   # [B, pairs, K, T']
        state = self.initial_state(B)
        outputs = []
        mu = None
        for w in range(horizon):
            t = context + w                              # step being predicted
            if w == 0 or scheme.feeds_truth_at(w):
                x_in = nn.reshape(nn.take(traj, [t - 1], axis=1),
                                  (B,) + traj.shape[2:])
            else:
                x_in = mu
            z_t = nn.reshape(nn.take(z_steps, [t - 1], axis=-1),
                             z_steps.shape[:-1])         # [B, pairs, K]
            mu, state = self.predict_step(x_in, z_t, state)
            outputs.append(nn.reshape(mu, (B, 1) + mu.shape[1:]))
        return nn.concat(outputs, axis=1)


def one_hot_relations(labels, n_agents, edge_types):
    """Ground-truth per-step labels [B, T, N, N] -> the posterior-shaped
    one-hot array [B, pairs, K, T] (an array, not a Tensor)."""
    first, second = pair_indices(n_agents)
    per_pair = labels[:, :, first, second]               # [B, T, pairs]
    out = np.zeros(per_pair.shape[:1] + (len(first), edge_types, labels.shape[1]),
                   dtype=np.float32)
    B, T = labels.shape[0], labels.shape[1]
    b_idx, t_idx, p_idx = np.meshgrid(np.arange(B), np.arange(T),
                                      np.arange(len(first)), indexing="ij")
    out[b_idx, p_idx, per_pair.astype(np.int64), t_idx] = 1.0
    return out


@dataclass
class FixedRelations:
    """Posterior stand-in carrying known per-step relations."""

    z: np.ndarray        # [B, pairs, K, T]
    horizon: int

    def stepwise(self):
        return nn.Tensor(self.z)
