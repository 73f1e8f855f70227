"""Metrics and experiment recipes.

Metrics: label-permutation edge accuracy at per-step resolution,
trajectory MSE in normalized space, and negative ELBO with argmax
relations.  The recipe layer trains every cell of a named table on
cached datasets and renders the results as CSV plus aligned text.
"""

import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, dataio, nncore as nn, objective, seeding, sim
from .decoder import AUTOREGRESSIVE, DecoderConfig, RolloutScheme
from .encoder import EncoderConfig, pair_indices, step_to_block
from .errors import ConfigurationError, DimensionError, UsageError


# -- relation sequences and metrics -----------------------------------

@dataclass(frozen=True)
class RelationSequence:
    """Per-step edge-type labels for a set of examples: [E, pairs, T]."""

    labels: np.ndarray
    n_agents: int

    def __post_init__(self):
        expected = self.n_agents * (self.n_agents - 1)
        if self.labels.ndim != 3 or self.labels.shape[1] != expected:
            raise DimensionError(
                f"labels must be [examples, {expected}, steps], "
                f"got {self.labels.shape}")

    @property
    def horizon(self):
        return self.labels.shape[-1]

    @classmethod
    def from_ground_truth(cls, labels, n_agents):
        """Dataset labels [E, T, N, N] -> ordered-pair sequence."""
        first, second = pair_indices(n_agents)
        per_pair = labels[:, :, first, second]         # [E, T, pairs]
        return cls(labels=np.ascontiguousarray(per_pair.transpose(0, 2, 1)),
                   n_agents=n_agents)

    @classmethod
    def from_posterior(cls, post, n_agents):
        """Argmax block labels broadcast to per-step resolution."""
        hard = post.hard_labels()
        steps = hard[..., step_to_block(post.horizon, post.edges)]
        return cls(labels=steps, n_agents=n_agents)

    def window(self, lo, hi):
        if not 0 <= lo < hi <= self.horizon:
            raise UsageError(f"window [{lo}, {hi}) outside 0..{self.horizon}")
        return RelationSequence(labels=self.labels[..., lo:hi],
                                n_agents=self.n_agents)


def edge_accuracy(pred, truth, n_classes=2):
    """Fraction of (example, pair, step) labels matching, maximized over
    global relabelings of the predicted classes; ties keep the identity."""
    if pred.labels.shape != truth.labels.shape:
        raise DimensionError(
            f"prediction shape {pred.labels.shape} does not match "
            f"truth shape {truth.labels.shape}")
    best = -1.0
    for perm in itertools.permutations(range(n_classes)):
        mapped = np.asarray(perm)[pred.labels]
        score = float(np.mean(mapped == truth.labels))
        if score > best:
            best = score
    return best


def trajectory_mse(pred, true):
    """Mean squared error over all entries, in normalized space."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} does not match {true.shape}")
    diff = pred.astype(np.float64) - true.astype(np.float64)
    return float(np.mean(diff * diff))


def nelbo(batch, model, cfg, batch_size=None):
    """Negative ELBO per example, argmax relations, averaged over a split."""
    stats = objective.evaluate_split(model, batch, cfg, batch_size=batch_size)
    return -stats["elbo"]


def model_step_labels(model, batch, cfg, batch_size=None):
    """Predicted per-step relation labels for a whole split."""
    if getattr(model, "requires_labels", False):
        return RelationSequence.from_ground_truth(batch.labels, model.n_agents)
    bs = batch_size or cfg.batch_size
    parts = []
    with nn.no_grad():
        for lo in range(0, len(batch), bs):
            post = model.posterior(nn.Tensor(batch.states[lo:lo + bs]))
            parts.append(RelationSequence.from_posterior(
                post, model.n_agents).labels)
    return RelationSequence(labels=np.concatenate(parts, axis=0),
                            n_agents=model.n_agents)


def posterior_accuracy(model, batch, cfg, batch_size=None):
    """Edge accuracy on the decode window of a split."""
    lo, hi = cfg.context_steps, cfg.context_steps + cfg.decode_horizon
    pred = model_step_labels(model, batch, cfg, batch_size=batch_size)
    truth = RelationSequence.from_ground_truth(batch.labels, model.n_agents)
    return edge_accuracy(pred.window(lo, hi), truth.window(lo, hi))


def predict_trajectories(model, states, labels, cfg):
    """Autoregressive decode-window predictions with argmax relations.

    Returns mu [B, decode_horizon, N, D] as a plain array.  Supervised
    models take the true ``labels``; latent-relation models infer.
    """
    if getattr(model, "requires_labels", False):
        return baselines.in_supervised_predict(
            model, states, labels, AUTOREGRESSIVE, cfg.context_steps,
            cfg.decode_horizon)
    post = model.posterior(nn.Tensor(states))
    rel = model.sample_relations(post, cfg.temperature, hard=True)
    return model.decoder.rollout(nn.Tensor(states), rel, AUTOREGRESSIVE,
                                 cfg.context_steps, cfg.decode_horizon).data


def split_mse(model, batch, cfg, batch_size=None):
    """Autoregressive decode-window MSE with argmax relations."""
    bs = batch_size or cfg.batch_size
    lo, hi = cfg.context_steps, cfg.context_steps + cfg.decode_horizon
    total, count = 0.0, 0
    with nn.no_grad():
        for i in range(0, len(batch), bs):
            states = batch.states[i:i + bs]
            mu = predict_trajectories(model, states, batch.labels[i:i + bs],
                                      cfg)
            diff = mu.astype(np.float64) - states[:, lo:hi].astype(np.float64)
            total += float((diff * diff).sum())
            count += diff.size
    return total / count


# -- scales, presets, dataset cache -----------------------------------

@dataclass(frozen=True)
class ScalePreset:
    name: str
    n_train: int
    n_valid: int
    n_test: int
    epochs: int


SCALES = {
    "desk": ScalePreset("desk", 1000, 200, 200, 60),
    "paper": ScalePreset("paper", 50000, 10000, 10000, 300),
}


@dataclass(frozen=True)
class ModelPreset:
    channels: int
    skip_units: int
    msg_hidden: int
    gru_hidden: int
    nri_hidden: int


# desk widths were tuned for one CPU core: the S-style encoder (skip
# depth 2) at 16 channels trains in about a minute per epoch and still
# separates the relation classes cleanly at desk data sizes
MODEL_PRESETS = {
    "desk": ModelPreset(channels=16, skip_units=2, msg_hidden=32,
                        gru_hidden=32, nri_hidden=128),
    "paper": ModelPreset(channels=64, skip_units=4, msg_hidden=256,
                         gru_hidden=256, nri_hidden=256),
}


@dataclass(frozen=True)
class DatasetSpec:
    schedule_kind: str
    schedule_params: tuple = ()       # sorted (key, value) pairs
    n_agents: int = 5
    seed: int = 0

    @classmethod
    def make(cls, kind, n_agents=5, seed=0, **params):
        return cls(schedule_kind=kind,
                   schedule_params=tuple(sorted(params.items())),
                   n_agents=n_agents, seed=seed)

    @property
    def params(self):
        return dict(self.schedule_params)

    def slug(self, scale):
        bits = [self.schedule_kind]
        bits += [f"{k}{v}" for k, v in self.schedule_params]
        bits += [f"n{self.n_agents}", scale, f"d{self.seed}"]
        return "-".join(str(b) for b in bits)

    def label(self):
        p = self.params
        if self.schedule_kind == "periodic":
            return str(p["period"])
        if self.schedule_kind == "static":
            return "40"
        if self.schedule_kind == "additive":
            return "Add"
        if self.schedule_kind == "stochastic":
            return str(p.get("flip_prob"))
        return self.schedule_kind


def dataset_dir(root, spec, scale):
    return os.path.join(root, "datasets", spec.slug(scale))


def ensure_dataset(spec, scale_name, root):
    """Load the cached dataset for (spec, scale), generating it first if
    the cache is empty.  Returns (DatasetSplit, fingerprint)."""
    scale = SCALES[scale_name]
    out = dataset_dir(root, spec, scale_name)
    marker = os.path.join(out, "train.bin")
    if not os.path.exists(marker):
        cfg = sim.SimConfig(n_agents=spec.n_agents, seed=spec.seed)
        ds = sim.generate_dataset(cfg, spec.schedule_kind, scale.n_train,
                                  scale.n_valid, scale.n_test, **spec.params)
        os.makedirs(out, exist_ok=True)
        dataio.write_dataset(out, ds)
    ds = dataio.read_dataset(out)
    return ds, dataio.dataset_fingerprint(out)


# -- experiment cells -------------------------------------------------

VALID_MODELS = ("dyari", "nri-static", "nri-adaptive", "in")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    dataset: DatasetSpec
    model_kind: str
    inference_period: int = 0         # 0: single whole-window block
    scheme_kind: str = "autoregressive"
    tf_steps: int = 0
    decode_horizon: int = 40
    context_steps: int = 10
    disable_interp_pool: bool = False
    extra_encoder_layers: int = 0
    members: tuple = ()               # adaptive ensemble encoding lengths
    epochs_override: int = 0

    def __post_init__(self):
        if self.model_kind not in VALID_MODELS:
            raise ConfigurationError(
                f"model must be one of {VALID_MODELS}, got {self.model_kind!r}")
        if self.inference_period < 0:
            raise ConfigurationError("inference_period must be >= 0")
        if self.inference_period and \
                self.decode_horizon % self.inference_period != 0:
            raise ConfigurationError(
                f"inference period {self.inference_period} does not divide "
                f"the decode horizon {self.decode_horizon}")

    @property
    def scheme(self):
        return RolloutScheme(self.scheme_kind, tf_steps=self.tf_steps)

    def cell_slug(self, scale, seed):
        bits = [self.dataset.slug(scale), self.model_kind]
        if self.inference_period:
            bits.append(f"P{self.inference_period}")
        bits.append({"teacher_forcing": "tf", "autoregressive": "ar",
                     "hybrid": f"hy{self.tf_steps}"}[self.scheme_kind])
        if self.decode_horizon != 40:
            bits.append(f"h{self.decode_horizon}")
        if self.disable_interp_pool:
            bits.append("nopool")
        if self.extra_encoder_layers:
            bits.append(f"x{self.extra_encoder_layers}")
        if self.members:
            bits.append("m" + "_".join(map(str, self.members)))
        if self.epochs_override:
            bits.append(f"e{self.epochs_override}")
        bits.append(f"s{seed}")
        return "__".join(bits)


def build_model(spec, scale_name, horizon, state_dim, seed, period=None):
    """Fresh model for one cell; `period` overrides for ensemble members."""
    preset = MODEL_PRESETS[scale_name]
    rng = seeding.stream(seed, seeding.INIT)
    dec_cfg = DecoderConfig(msg_hidden=preset.msg_hidden,
                            gru_hidden=preset.gru_hidden)
    n = spec.dataset.n_agents
    if spec.model_kind == "dyari":
        enc_cfg = EncoderConfig(
            channels=preset.channels,
            skip_connections_per_block=preset.skip_units,
            inference_period=spec.inference_period or horizon,
            use_interpolation_avg_pool=not spec.disable_interp_pool)
        return objective.DyariModel(n, state_dim, enc_cfg, dec_cfg, rng)
    if spec.model_kind == "in":
        return baselines.InSupervisedModel(n, state_dim, dec_cfg, rng)
    if spec.model_kind == "nri-static":
        use_period = None
    else:
        use_period = period or spec.inference_period or None
    return baselines.NriModel(n, state_dim, horizon, dec_cfg, rng,
                              period=use_period, hidden=preset.nri_hidden,
                              extra_hidden=spec.extra_encoder_layers)


def _train_config(spec, scale, seed):
    epochs = spec.epochs_override or scale.epochs
    return objective.TrainConfig(epochs=epochs, scheme=spec.scheme,
                                 context_steps=spec.context_steps,
                                 decode_horizon=spec.decode_horizon, seed=seed)


def _atomic_write_json(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _train_cell(run_dir, dataset, fingerprint, model, cfg):
    os.makedirs(run_dir, exist_ok=True)
    log_path = os.path.join(run_dir, "history.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    ckpt, history = objective.train(dataset, model, cfg, log_path=log_path,
                                    fingerprint=fingerprint)
    dataio.write_checkpoint(os.path.join(run_dir, "checkpoint.bin"), ckpt)
    return ckpt, history


def run_experiment(spec, seed, root, scale_name, force=False):
    """Train and score one cell; cached by its metrics.json."""
    scale = SCALES[scale_name]
    cell = spec.cell_slug(scale_name, seed)
    run_dir = os.path.join(root, "runs", cell)
    metrics_path = os.path.join(run_dir, "metrics.json")
    if os.path.exists(metrics_path) and not force:
        with open(metrics_path) as fh:
            return json.load(fh)

    t0 = time.time()
    dataset, fingerprint = ensure_dataset(spec.dataset, scale_name, root)
    horizon = dataset.train.states.shape[1]
    state_dim = dataset.train.states.shape[-1]
    cfg = _train_config(spec, scale, seed)

    # cells train and score in float32: trajectories are stored float32
    # anyway, and halving the GEMM width nearly doubles throughput on
    # the single core these runs get
    with nn.precision(np.float32):
        if spec.model_kind == "nri-adaptive" and spec.members:
            metrics = _run_adaptive_ensemble(spec, seed, root, scale_name,
                                             dataset, fingerprint, cfg)
        else:
            model = build_model(spec, scale_name, horizon, state_dim, seed)
            ckpt, history = _train_cell(run_dir, dataset, fingerprint,
                                        model, cfg)
            model.load_state_arrays(ckpt.params)
            metrics = {
                "accuracy": posterior_accuracy(model, dataset.test, cfg),
                "mse": split_mse(model, dataset.test, cfg),
                "nelbo": nelbo(dataset.test, model, cfg),
                "best_valid_elbo": ckpt.best_valid_elbo,
                "epochs_run": len(history) and history[-1]["epoch"] + 1,
            }
    metrics.update({"cell": cell, "seed": seed, "model": spec.model_kind,
                    "dataset": spec.dataset.slug(scale_name),
                    "wall_seconds": round(time.time() - t0, 1)})
    os.makedirs(run_dir, exist_ok=True)
    _atomic_write_json(metrics_path, metrics)
    return metrics


def _run_adaptive_ensemble(spec, seed, root, scale_name, dataset,
                           fingerprint, cfg):
    """Separately trained uniform-period members, stitched per segment."""
    horizon = dataset.train.states.shape[1]
    state_dim = dataset.train.states.shape[-1]
    models, elbos = [], []
    for L in spec.members:
        member_spec = replace(spec, members=(), inference_period=0)
        cell = member_spec.cell_slug(scale_name, seed) + f"__L{L}"
        run_dir = os.path.join(root, "runs", cell)
        ckpt_path = os.path.join(run_dir, "checkpoint.bin")
        model = build_model(member_spec, scale_name, horizon, state_dim,
                            seed, period=L)
        if os.path.exists(ckpt_path):
            ckpt = dataio.read_checkpoint(ckpt_path)
        else:
            ckpt, _ = _train_cell(run_dir, dataset, fingerprint, model, cfg)
        model.load_state_arrays(ckpt.params)
        models.append(model)
        elbos.append(ckpt.best_valid_elbo)

    metrics = adaptive_scores(models, elbos, dataset.test, spec.dataset, cfg)
    metrics["member_periods"] = list(spec.members)
    metrics["selected_member"] = int(spec.members[int(np.argmax(elbos))])
    return metrics


def adaptive_scores(models, elbos, batch, ds_spec, cfg):
    """Score a member ensemble on one split: accuracy from the stitched
    sequence (per true segment), MSE and NELBO from the member with the
    best validation bound."""
    horizon = batch.states.shape[1]
    schedule = sim.build_schedule(
        ds_spec.schedule_kind, horizon,
        np.zeros((ds_spec.n_agents,) * 2, np.uint8), **ds_spec.params)
    edges = np.concatenate([[0], schedule.flip_times, [horizon]])
    pred_parts = []
    bs = cfg.batch_size
    for lo in range(0, len(batch), bs):
        pred_parts.append(baselines.nri_adaptive_infer(
            models, nn.Tensor(batch.states[lo:lo + bs]),
            segment_edges=edges).labels)
    pred = RelationSequence(labels=np.concatenate(pred_parts, axis=0),
                            n_agents=ds_spec.n_agents)
    truth = RelationSequence.from_ground_truth(batch.labels,
                                               ds_spec.n_agents)
    w0, w1 = cfg.context_steps, cfg.context_steps + cfg.decode_horizon
    best = int(np.argmax(elbos))
    return {
        "accuracy": edge_accuracy(pred.window(w0, w1), truth.window(w0, w1)),
        "mse": split_mse(models[best], batch, cfg),
        "nelbo": nelbo(batch, models[best], cfg),
        "best_valid_elbo": elbos[best],
    }


# -- recipes ----------------------------------------------------------

PERIODIC_DATASETS = {
    40: DatasetSpec.make("static"),
    20: DatasetSpec.make("periodic", period=20),
    8: DatasetSpec.make("periodic", period=8),
    4: DatasetSpec.make("periodic", period=4),
}
ADDITIVE_DATASET = DatasetSpec.make("additive", start=4, step=4)


def _table1_specs():
    ds = PERIODIC_DATASETS[40]
    specs = []
    for extra, mname in ((0, "nri"), (2, "nri++")):
        for scheme in ("teacher_forcing", "autoregressive"):
            for length in (40, 20, 8, 4):
                specs.append(ExperimentSpec(
                    name=f"{mname}|{scheme}|{length}", dataset=ds,
                    model_kind="nri-static", scheme_kind=scheme,
                    decode_horizon=length, extra_encoder_layers=extra))
    return specs


def _table1_table(results):
    cols = [40, 20, 8, 4]
    header = (["Output Length"]
              + [f"TF {c}" for c in cols] + [f"AR {c}" for c in cols])
    rows = []
    for mname in ("nri", "nri++"):
        row = [mname.upper()]
        for scheme in ("teacher_forcing", "autoregressive"):
            for length in cols:
                row.append(results.get(f"{mname}|{scheme}|{length}",
                                       {}).get("accuracy"))
        rows.append(row)
    return {"title": "Inference accuracy by decode length and scheme",
            "header": header, "rows": rows}


def _table2_specs():
    specs = []
    for label, ds in list(PERIODIC_DATASETS.items()) + [("Add", ADDITIVE_DATASET)]:
        period = label if isinstance(label, int) else 0
        specs.append(ExperimentSpec(
            name=f"nri-static|{label}", dataset=ds, model_kind="nri-static"))
        if label == "Add":
            specs.append(ExperimentSpec(
                name=f"nri-adaptive|{label}", dataset=ds,
                model_kind="nri-adaptive", members=(4, 8, 12, 16)))
        else:
            specs.append(ExperimentSpec(
                name=f"nri-adaptive|{label}", dataset=ds,
                model_kind="nri-adaptive", inference_period=period))
        specs.append(ExperimentSpec(
            name=f"dyari|{label}", dataset=ds, model_kind="dyari",
            inference_period=period or 40))
        specs.append(ExperimentSpec(
            name=f"in|{label}", dataset=ds, model_kind="in"))
    return specs


def _table2_table(results):
    cols = [40, 20, 8, 4, "Add"]
    header = (["Dynamic Period"] + [f"MSE {c}" for c in cols]
              + [f"Acc {c}" for c in cols])
    rows = []
    for model in ("nri-static", "nri-adaptive", "dyari", "in"):
        row = [model]
        for metric in ("mse", "accuracy"):
            for c in cols:
                row.append(results.get(f"{model}|{c}", {}).get(metric))
        rows.append(row)
    return {"title": "Trajectory MSE and relation accuracy by dynamic period",
            "header": header, "rows": rows}


def _grid_specs(periods):
    specs = []
    for dyn in periods:
        ds = PERIODIC_DATASETS.get(dyn) or \
            DatasetSpec.make("periodic", period=dyn)
        for inf in periods:
            specs.append(ExperimentSpec(
                name=f"grid|{dyn}|{inf}", dataset=ds, model_kind="dyari",
                inference_period=inf))
    return specs


def _grid_table(results, periods):
    header = ["Inference \\ Dynamic"] + [str(d) for d in periods]
    rows = []
    for inf in periods:
        row = [str(inf)]
        for dyn in periods:
            cell = results.get(f"grid|{dyn}|{inf}", {})
            acc = cell.get("accuracy")
            mark = "*" if (dyn == inf and acc is not None) else ""
            row.append(None if acc is None else f"{acc:.3f}{mark}")
        rows.append(row)
    return {"title": "Accuracy by dynamic and inference period "
                     "(* = matched periods)",
            "header": header, "rows": rows}


def _stochastic_specs():
    specs = []
    for p in (0.8, 0.9):
        ds = DatasetSpec.make("stochastic", block=4, flip_prob=p)
        specs.append(ExperimentSpec(
            name=f"nri-static|{p}", dataset=ds, model_kind="nri-static"))
        specs.append(ExperimentSpec(
            name=f"dyari|{p}", dataset=ds, model_kind="dyari",
            inference_period=4))
        specs.append(ExperimentSpec(
            name=f"in|{p}", dataset=ds, model_kind="in"))
    return specs


def _stochastic_table(results):
    header = ["Flip probability", "MSE 0.8", "MSE 0.9", "Acc 0.8", "Acc 0.9"]
    rows = []
    for model in ("nri-static", "dyari", "in"):
        row = [model]
        for metric in ("mse", "accuracy"):
            for p in (0.8, 0.9):
                row.append(results.get(f"{model}|{p}", {}).get(metric))
        rows.append(row)
    return {"title": "Stochastic relation flips", "header": header,
            "rows": rows}


def _avgpool_specs():
    ds = PERIODIC_DATASETS[20]
    return [
        ExperimentSpec(name="with-pool", dataset=ds, model_kind="dyari",
                       inference_period=20),
        ExperimentSpec(name="without-pool", dataset=ds, model_kind="dyari",
                       inference_period=20, disable_interp_pool=True),
    ]


def _avgpool_table(results):
    header = ["Variant", "MSE", "Accuracy"]
    rows = [[name,
             results.get(name, {}).get("mse"),
             results.get(name, {}).get("accuracy")]
            for name in ("with-pool", "without-pool")]
    return {"title": "Interpolation average-pooling ablation",
            "header": header, "rows": rows}


RECIPES = {
    "table1": (_table1_specs, _table1_table),
    "table2": (_table2_specs, _table2_table),
    "table3": (lambda: _grid_specs((40, 8, 4)),
               lambda r: _grid_table(r, (40, 8, 4))),
    "table3-corrected": (lambda: _grid_specs((40, 20, 10, 5)),
                         lambda r: _grid_table(r, (40, 20, 10, 5))),
    "stochastic": (_stochastic_specs, _stochastic_table),
    "avgpool-ablation": (_avgpool_specs, _avgpool_table),
}


def recipe_specs(name):
    try:
        make_specs, _ = RECIPES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown recipe {name!r}; available: {sorted(RECIPES)}") from None
    return make_specs()


def _seed_mean(per_seed):
    """Mean numeric metrics over seeds, keeping shared fields."""
    out = dict(per_seed[0])
    for key in ("accuracy", "mse", "nelbo", "best_valid_elbo"):
        vals = [m[key] for m in per_seed if m.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    out["seeds"] = [m["seed"] for m in per_seed]
    out.pop("seed", None)
    return out


def _run_cell_job(args):
    spec, seed, root, scale_name = args
    return spec.name, seed, run_experiment(spec, seed, root, scale_name)


def run_grid(recipe, root, scale_name="desk", seeds=(0, 1, 2), workers=1,
             progress=None):
    """Run every cell of a named recipe and render its table.

    Cells already present in the results store are reused; fresh cells
    are trained (optionally across a process pool) and written with
    atomic per-cell files.  Returns the assembled table dict.
    """
    specs = recipe_specs(recipe)
    jobs = [(spec, seed, root, scale_name) for spec in specs for seed in seeds]
    by_name = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for name, seed, metrics in pool.map(_run_cell_job, jobs):
                by_name.setdefault(name, []).append(metrics)
                if progress:
                    progress(name, seed, metrics)
    else:
        for job in jobs:
            name, seed, metrics = _run_cell_job(job)
            by_name.setdefault(name, []).append(metrics)
            if progress:
                progress(name, seed, metrics)

    results = {name: _seed_mean(runs) for name, runs in by_name.items()}
    _, make_table = RECIPES[recipe]
    table = make_table(results)
    table["recipe"] = recipe
    table["scale"] = scale_name
    table["seeds"] = list(seeds)
    out_dir = os.path.join(root, "results", recipe)
    os.makedirs(out_dir, exist_ok=True)
    write_table_csv(table, os.path.join(out_dir, "table.csv"))
    with open(os.path.join(out_dir, "table.txt"), "w") as fh:
        fh.write(render_table_text(table))
    _atomic_write_json(os.path.join(out_dir, "table.json"),
                       {"table": {k: v for k, v in table.items()},
                        "cells": results})
    return table


# -- rendering --------------------------------------------------------

def _fmt(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        if value != 0 and abs(value) < 1e-2:
            return f"{value:.1e}"
        return f"{value:.3f}".rstrip("0").rstrip(".")
    return str(value)


def write_table_csv(table, path):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table["header"])
        for row in table["rows"]:
            writer.writerow(["" if v is None else v for v in row])


def render_table_text(table):
    cells = [[_fmt(v) for v in row] for row in table["rows"]]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(table["header"])]
    widths = [max(w, len(h)) for w, h in zip(widths, table["header"])]
    lines = [table["title"]]
    lines.append("  ".join(h.ljust(w)
                           for h, w in zip(table["header"], widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"
