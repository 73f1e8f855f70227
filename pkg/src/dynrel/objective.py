"""Variational objective and training loop.

The trainable unit pairs an encoder (posterior over per-block relations)
with the relational decoder.  The objective is the evidence lower bound
with fixed-variance Gaussian reconstruction and an entropy bonus:
ELBO = -sum (mu - x)^2 / (2 sigma^2) + beta * sum H(q), maximized by
minibatch Adam on a single Gumbel-softmax sample per example.
"""

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import nncore as nn
from . import seeding
from .dataio import Checkpoint
from .decoder import (
    AUTOREGRESSIVE,
    DecoderConfig,
    FixedRelations,
    RelationalDecoder,
    RolloutScheme,
    one_hot_relations,
)
from .encoder import DyariEncoder, EncoderConfig
from .errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    beta: float = 1.0
    scheme: RolloutScheme = AUTOREGRESSIVE
    context_steps: int = 10
    decode_horizon: int = 40
    seed: int = 0
    temperature: float = 0.5

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.context_steps < 1 or self.decode_horizon < 1:
            raise ConfigurationError(
                "context_steps and decode_horizon must be >= 1")
        if self.temperature <= 0:
            raise ConfigurationError(
                f"temperature must be > 0, got {self.temperature}")

    def as_dict(self):
        d = {k: getattr(self, k) for k in (
            "epochs", "batch_size", "learning_rate", "weight_decay", "beta",
            "context_steps", "decode_horizon", "seed", "temperature")}
        d["scheme"] = {"kind": self.scheme.kind, "tf_steps": self.scheme.tf_steps}
        return d


def train_config_from_dict(d):
    d = dict(d)
    s = d.pop("scheme")
    return TrainConfig(scheme=RolloutScheme(s["kind"], tf_steps=s["tf_steps"]), **d)


# -- objective pieces -------------------------------------------------

def reconstruction_nll(mu, x, sigma2):
    """Sum of squared errors over everything, scaled by 1/(2 sigma^2)."""
    diff = mu - nn.as_tensor(x)
    return nn.tsum(diff * diff) * (1.0 / (2.0 * sigma2))


def entropy_sum(logits):
    """Sum over pairs and blocks of the categorical entropy H(softmax(l)).

    logits: Tensor [..., K, B] with edge types on axis -2.
    """
    logp = nn.log_softmax(logits, axis=-2)
    p = nn.softmax(logits, axis=-2)
    return -nn.tsum(p * logp)


def kl_uniform(logits):
    """KL(q || Uniform(K)) summed over pairs and blocks: B*log K - sum H.

    Diagnostic only, no gradient: computed in float64 from the raw
    logits so near-uniform posteriors cannot round below zero when the
    model itself runs in float32.
    """
    z = np.asarray(logits.data, dtype=np.float64)
    K = z.shape[-2]
    count = z.size // K
    with np.errstate(invalid="ignore"):  # NaN logits stay NaN for the caller
        zs = z - z.max(axis=-2, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=-2, keepdims=True))
        h = -float(np.sum(np.exp(logp) * logp))
    return count * math.log(K) - h


class SampledRelations:
    """Stepwise relation sample carried alongside its posterior."""

    def __init__(self, z_steps, horizon):
        self._z = z_steps
        self.horizon = horizon

    def stepwise(self):
        return self._z


class RelationalVae(nn.Module):
    """Shared plumbing for models trained on the ELBO: a posterior over
    per-block relations plus the message-passing decoder."""

    requires_labels = False

    def posterior(self, traj):
        raise NotImplementedError

    def sample_relations(self, post, temperature, rng=None, noise=None, hard=False):
        """Draw z per block and broadcast it to per-step resolution."""
        logits = nn.transpose(post.logits, (0, 1, 3, 2))  # [B, pairs, Bk, K]
        if hard:
            idx = np.argmax(logits.data, axis=-1)
            z = np.zeros_like(logits.data)
            np.put_along_axis(z, idx[..., None], 1.0, axis=-1)
            block_z = nn.Tensor(z)
        else:
            block_z = nn.gumbel_softmax_sample(logits, temperature, rng=rng,
                                               noise=noise)
        z_blocks = nn.transpose(block_z, (0, 1, 3, 2))    # [B, pairs, K, Bk]
        post_like = replace_logits(post, z_blocks)
        return SampledRelations(post_like.stepwise(), post.horizon)


class DyariModel(RelationalVae):
    """Convolutional encoder + decoder pair, one latent per block."""

    kind = "dyari"

    def __init__(self, n_agents, state_dim, enc_cfg, dec_cfg, rng):
        if enc_cfg.edge_types != dec_cfg.edge_types:
            raise ConfigurationError(
                f"encoder has {enc_cfg.edge_types} edge types, "
                f"decoder has {dec_cfg.edge_types}")
        self.encoder = DyariEncoder(n_agents, state_dim, enc_cfg, rng)
        self.decoder = RelationalDecoder(n_agents, state_dim, dec_cfg, rng)
        self.n_agents = n_agents
        self.state_dim = state_dim

    def posterior(self, traj):
        return self.encoder(traj)


def replace_logits(post, new_logits):
    from .encoder import LatentPosterior
    return LatentPosterior(logits=new_logits, edges=post.edges,
                           horizon=post.horizon)


def elbo(states, model, cfg, rng=None, noise=None, hard=False):
    """ELBO of one batch: (scalar Tensor, diagnostics dict).

    states: [B, T, N, D] array.  One Gumbel sample per example unless
    ``hard`` (argmax relations, used for validation and scoring).
    The scalar is a per-example mean so batch size does not rescale
    gradients; diagnostics carry the same normalization.
    """
    B, T = states.shape[:2]
    if cfg.context_steps + cfg.decode_horizon > T:
        raise ConfigurationError(
            f"context {cfg.context_steps} + horizon {cfg.decode_horizon} "
            f"exceeds trajectory length {T}")
    traj = nn.Tensor(states)
    post = model.posterior(traj)
    relations = model.sample_relations(post, cfg.temperature, rng=rng,
                                       noise=noise, hard=hard)
    mu = model.decoder.rollout(traj, relations, cfg.scheme,
                               cfg.context_steps, cfg.decode_horizon)
    target = states[:, cfg.context_steps:cfg.context_steps + cfg.decode_horizon]
    sigma2 = model.decoder.cfg.sigma2
    recon = reconstruction_nll(mu, target, sigma2) * (1.0 / B)
    ent = entropy_sum(post.logits) * (1.0 / B)
    bound = recon * (-1.0) + ent * cfg.beta
    n_elem = target.size / B
    # recombine in python floats: the logged elbo must equal
    # -recon + beta * entropy exactly, independent of training dtype
    diag = {
        "recon": float(recon.data),
        "entropy": float(ent.data),
        "elbo": -float(recon.data) + cfg.beta * float(ent.data),
        "kl": kl_uniform(post.logits) / B,
        "mse": float(recon.data) * 2.0 * sigma2 / n_elem,
    }
    return bound, diag


def supervised_mse(states, labels, model, cfg):
    """Reconstruction-only objective with ground-truth relations."""
    B, T = states.shape[:2]
    traj = nn.Tensor(states)
    z = one_hot_relations(labels, model.n_agents, model.decoder.cfg.edge_types)
    relations = FixedRelations(z=z, horizon=T)
    mu = model.decoder.rollout(traj, relations, cfg.scheme,
                               cfg.context_steps, cfg.decode_horizon)
    target = states[:, cfg.context_steps:cfg.context_steps + cfg.decode_horizon]
    sigma2 = model.decoder.cfg.sigma2
    recon = reconstruction_nll(mu, target, sigma2) * (1.0 / B)
    n_elem = target.size / B
    diag = {
        "recon": float(recon.data),
        "entropy": 0.0,
        "elbo": -float(recon.data),
        "kl": 0.0,
        "mse": float(recon.data) * 2.0 * sigma2 / n_elem,
    }
    return recon * (-1.0), diag


def batch_objective(model, states, labels, cfg, rng=None, noise=None, hard=False):
    if getattr(model, "requires_labels", False):
        if labels is None:
            raise UsageError(f"model {model.kind} needs ground-truth relations")
        return supervised_mse(states, labels, model, cfg)
    return elbo(states, model, cfg, rng=rng, noise=noise, hard=hard)


# -- training loop ----------------------------------------------------

def evaluate_split(model, batch, cfg, batch_size=None):
    """Mean diagnostics over a split with hard (argmax) relations."""
    bs = batch_size or cfg.batch_size
    totals, count = {}, 0
    with nn.no_grad():
        for lo in range(0, len(batch), bs):
            states = batch.states[lo:lo + bs]
            labels = batch.labels[lo:lo + bs]
            _, diag = batch_objective(model, states, labels, cfg, hard=True)
            w = states.shape[0]
            for k, v in diag.items():
                totals[k] = totals.get(k, 0.0) + v * w
            count += w
    return {k: v / count for k, v in totals.items()}


def _snapshot(model, opt, cfg, epoch, best_elbo, fingerprint):
    return Checkpoint(
        model_kind=model.kind,
        params={k: v.copy() for k, v in model.state_arrays().items()},
        optimizer_state={k: np.array(v, copy=True)
                         for k, v in opt.state_arrays().items()},
        train_config=cfg.as_dict(),
        dataset_fingerprint=fingerprint,
        best_valid_elbo=best_elbo,
        epoch=epoch,
    )


def train(dataset, model, cfg, log_path=None, fingerprint="", resume=None,
          progress=None):
    """Minibatch Adam over the training split.

    Returns (best Checkpoint by validation ELBO, history list).  Every
    epoch appends one record {epoch, train_elbo, val_elbo, val_accuracy,
    scheme}; with ``log_path`` records are also written as one JSON line
    each.  A non-finite training loss aborts and returns the best
    checkpoint so far.  Passing a prior Checkpoint as ``resume``
    continues bit-identically with the run that produced it.
    """
    from . import eval as evaluation

    opt = nn.Adam(model.parameters(), lr=cfg.learning_rate,
                  weight_decay=cfg.weight_decay)
    start_epoch = 0
    best_elbo, best_ckpt = -np.inf, None
    if resume is not None:
        model.load_state_arrays(resume.params)
        opt.load_state_arrays(resume.optimizer_state)
        start_epoch = resume.epoch
        if resume.best_valid_elbo is not None:
            best_elbo = resume.best_valid_elbo
        best_ckpt = resume

    history = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = seeding.stream(cfg.seed, seeding.SHUFFLE, epoch) \
                .permutation(len(dataset.train))
            epoch_elbo, seen, diverged = 0.0, 0, False
            for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[lo:lo + cfg.batch_size]
                states = dataset.train.states[idx]
                labels = dataset.train.labels[idx]
                rng = seeding.stream(cfg.seed, seeding.GUMBEL, epoch, bi)
                loss, diag = batch_objective(model, states, labels, cfg, rng=rng)
                if not np.isfinite(diag["elbo"]):
                    diverged = True
                    break
                model.zero_grad()
                (loss * (-1.0)).backward()   # maximize the bound
                opt.step()
                epoch_elbo += diag["elbo"] * len(idx)
                seen += len(idx)
            if diverged:
                break
            val = evaluate_split(model, dataset.valid, cfg)
            val_acc = evaluation.posterior_accuracy(model, dataset.valid, cfg)
            record = {
                "epoch": epoch,
                "train_elbo": epoch_elbo / max(seen, 1),
                "val_elbo": val["elbo"],
                "val_accuracy": val_acc,
                "val_mse": val["mse"],
                "scheme": cfg.scheme.kind,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if val["elbo"] >= best_elbo:
                best_elbo = val["elbo"]
                best_ckpt = _snapshot(model, opt, cfg, epoch + 1, best_elbo,
                                      fingerprint)
            if progress:
                progress(record)
    finally:
        if log_fh:
            log_fh.close()
    if best_ckpt is None:
        best_ckpt = _snapshot(model, opt, cfg, start_epoch, None, fingerprint)
    return best_ckpt, history
