"""Command line front end: simulate, train, eval, grid, export.

Every command writes its outputs under one directory together with a
manifest.json recording the resolved configuration, input fingerprints,
output paths, and wall time.  Rerunning a command against the same
manifest reproduces the same bytes (generation and training are fully
seeded; finished work is cached and reused).

Configuration precedence, highest first: explicit command line flags,
then a --config JSON file, then built-in defaults.  The default output
root comes from the DYNREL_OUT environment variable when set.

Exit codes: 0 success, 1 usage error, 2 runtime failure (the failure
manifest still lists whatever partial outputs were produced).
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, dataio, objective, sim
from . import eval as engine
from . import nncore as nn
from .encoder import pair_indices
from .errors import ConfigurationError, UsageError

ENV_OUT = "DYNREL_OUT"
# argparse sentinel; must not be a string or argparse would run it
# through each option's type converter
_UNSET = object()

SCHEME_FLAGS = {"tf": "teacher_forcing", "ar": "autoregressive",
                "hybrid": "hybrid"}


class CliUsage(Exception):
    """Bad invocation; dispatch turns this into exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract here is exit 1
    def error(self, message):
        raise CliUsage(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)     # name -> content hash
    outputs: list = field(default_factory=list)    # paths relative to dir
    duration_seconds: float = 0.0
    status: str = "ok"
    error: str = ""

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


class _Tracker:
    """Collects manifest state as a command runs so a crash can still
    leave a manifest of the partial outputs behind."""

    def __init__(self):
        self.manifest = None
        self.out_dir = None
        self.t0 = time.time()

    def start(self, out_dir, command, argv, config, seed):
        self.out_dir = out_dir
        self.manifest = RunManifest(command=command, argv=list(argv),
                                    config=config, seed=seed)

    def finish(self, status="ok", error=""):
        if self.manifest is None:
            return
        self.manifest.duration_seconds = round(time.time() - self.t0, 3)
        self.manifest.status = status
        self.manifest.error = error
        self.manifest.write(self.out_dir)


# -- configuration plumbing -------------------------------------------

DATASET_DEFAULTS = {
    "dynamic": "static",
    "period": 20,
    "start": 4,
    "step": 4,
    "flip_prob": 0.9,
    "block": 4,
    "agents": 5,
    "data_seed": 0,
}

COMMON_DEFAULTS = {
    "out": "",
    "scale": "desk",
    "force": False,
}

TRAIN_DEFAULTS = dict(DATASET_DEFAULTS, **COMMON_DEFAULTS, **{
    "model": "dyari",
    "scheme": "ar",
    "tf_steps": 30,
    "inference_period": 0,
    "horizon": 40,
    "context": 10,
    "epochs": 0,
    "seed": 0,
    "members": "",
    "extra_layers": 0,
    "no_interp_pool": False,
})

SIMULATE_DEFAULTS = dict(DATASET_DEFAULTS, **COMMON_DEFAULTS)
EVAL_DEFAULTS = dict(DATASET_DEFAULTS, **COMMON_DEFAULTS, **{
    "run": "", "split": "test", "on": ""})
EXPORT_DEFAULTS = dict(COMMON_DEFAULTS, **{
    "run": "", "split": "test", "examples": 8, "format": "csv"})
GRID_DEFAULTS = dict(COMMON_DEFAULTS, **{
    "recipe": "", "seeds": 3, "workers": 1})


def _all_known_keys():
    keys = set()
    for d in (SIMULATE_DEFAULTS, TRAIN_DEFAULTS, EVAL_DEFAULTS,
              EXPORT_DEFAULTS, GRID_DEFAULTS):
        keys.update(d)
    return keys


def _resolve(args, defaults):
    """Merge defaults <- config file <- explicit flags.

    A config file may carry keys for several subcommands; keys no
    subcommand understands are rejected, keys this one does not use are
    ignored.
    """
    cfg = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except OSError as e:
            raise CliUsage(f"cannot read config file: {e}")
        except json.JSONDecodeError as e:
            raise CliUsage(f"config file is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise CliUsage("config file must hold a JSON object")
        unknown = sorted(set(loaded) - _all_known_keys())
        if unknown:
            raise CliUsage(f"config file sets unknown options: {unknown}")
        cfg.update({k: v for k, v in loaded.items() if k in defaults})
    for key in defaults:
        val = getattr(args, key, _UNSET)
        if val is not _UNSET:
            cfg[key] = val
    return cfg


def _out_root(cfg):
    return cfg["out"] or os.environ.get(ENV_OUT) or "dynrel-out"


def _dataset_spec(cfg):
    kind = cfg["dynamic"]
    if kind == "static":
        params = {}
    elif kind == "periodic":
        params = {"period": int(cfg["period"])}
    elif kind == "additive":
        params = {"start": int(cfg["start"]), "step": int(cfg["step"])}
    elif kind == "stochastic":
        params = {"flip_prob": float(cfg["flip_prob"]),
                  "block": int(cfg["block"])}
    else:
        raise CliUsage(f"unknown --dynamic kind {kind!r}")
    return engine.DatasetSpec.make(kind, n_agents=int(cfg["agents"]),
                                   seed=int(cfg["data_seed"]), **params)


def _simulate_hint(cfg, root):
    """The exact command that generates the missing dataset."""
    bits = [f"dynrel simulate --dynamic {cfg['dynamic']}"]
    if cfg["dynamic"] == "periodic":
        bits.append(f"--period {cfg['period']}")
    elif cfg["dynamic"] == "additive":
        bits.append(f"--start {cfg['start']} --step {cfg['step']}")
    elif cfg["dynamic"] == "stochastic":
        bits.append(f"--flip-prob {cfg['flip_prob']} --block {cfg['block']}")
    if int(cfg["agents"]) != DATASET_DEFAULTS["agents"]:
        bits.append(f"--agents {cfg['agents']}")
    if int(cfg["data_seed"]) != DATASET_DEFAULTS["data_seed"]:
        bits.append(f"--data-seed {cfg['data_seed']}")
    bits.append(f"--scale {cfg['scale']} --out {root}")
    return " ".join(bits)


def _require_dataset(spec, cfg, root):
    marker = os.path.join(engine.dataset_dir(root, spec, cfg["scale"]),
                          "train.bin")
    if not os.path.exists(marker):
        raise CliUsage(
            f"dataset {spec.slug(cfg['scale'])} not found under "
            f"{os.path.join(root, 'datasets')}; generate it first:\n"
            f"  {_simulate_hint(cfg, root)}")


def _experiment_spec(cfg, ds_spec):
    members = tuple(int(m) for m in str(cfg["members"]).split(",") if m)
    try:
        return engine.ExperimentSpec(
            name=f"cli|{cfg['model']}",
            dataset=ds_spec,
            model_kind=cfg["model"],
            inference_period=int(cfg["inference_period"]),
            scheme_kind=SCHEME_FLAGS[cfg["scheme"]],
            tf_steps=int(cfg["tf_steps"]) if cfg["scheme"] == "hybrid" else 0,
            decode_horizon=int(cfg["horizon"]),
            context_steps=int(cfg["context"]),
            disable_interp_pool=bool(cfg["no_interp_pool"]),
            extra_encoder_layers=int(cfg["extra_layers"]),
            members=members,
            epochs_override=int(cfg["epochs"]))
    except KeyError:
        raise CliUsage(f"unknown --scheme {cfg['scheme']!r} "
                       f"(choose from {sorted(SCHEME_FLAGS)})")
    except ConfigurationError as e:
        raise CliUsage(str(e))


def _file_sha(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- subcommands ------------------------------------------------------

def _cmd_simulate(args, argv, tracker):
    cfg = _resolve(args, SIMULATE_DEFAULTS)
    root = _out_root(cfg)
    spec = _dataset_spec(cfg)
    out = engine.dataset_dir(root, spec, cfg["scale"])
    tracker.start(out, "simulate", argv, cfg, int(cfg["data_seed"]))

    marker = os.path.join(out, "train.bin")
    if cfg["force"] and os.path.exists(marker):
        for name in ("train.bin", "valid.bin", "test.bin"):
            path = os.path.join(out, name)
            if os.path.exists(path):
                os.remove(path)
    existed = os.path.exists(marker)
    ds, fingerprint = engine.ensure_dataset(spec, cfg["scale"], root)
    tracker.manifest.inputs["dataset"] = fingerprint
    tracker.manifest.outputs = ["train.bin", "valid.bin", "test.bin"]
    tracker.finish()
    verb = "reused" if existed else "wrote"
    print(f"{verb} {spec.slug(cfg['scale'])}: "
          f"{len(ds.train)}/{len(ds.valid)}/{len(ds.test)} trajectories, "
          f"T={ds.train.states.shape[1]}  -> {out}")
    print(f"fingerprint {fingerprint}")


def _cmd_train(args, argv, tracker):
    cfg = _resolve(args, TRAIN_DEFAULTS)
    root = _out_root(cfg)
    ds_spec = _dataset_spec(cfg)
    _require_dataset(ds_spec, cfg, root)
    spec = _experiment_spec(cfg, ds_spec)
    seed = int(cfg["seed"])
    run_dir = os.path.join(root, "runs", spec.cell_slug(cfg["scale"], seed))
    tracker.start(run_dir, "train", argv, cfg, seed)

    metrics = engine.run_experiment(spec, seed, root, cfg["scale"],
                                    force=bool(cfg["force"]))
    _, fingerprint = engine.ensure_dataset(ds_spec, cfg["scale"], root)
    tracker.manifest.inputs["dataset"] = fingerprint
    tracker.manifest.outputs = sorted(
        p for p in ("metrics.json", "history.jsonl", "checkpoint.bin")
        if os.path.exists(os.path.join(run_dir, p)))
    tracker.finish()
    print(f"cell {metrics['cell']}")
    for key in ("accuracy", "mse", "nelbo", "best_valid_elbo", "epochs_run"):
        if key in metrics:
            print(f"  {key}: {metrics[key]}")


def _load_run(run_dir):
    """Manifest + checkpoint of a finished training run."""
    man_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(man_path):
        raise CliUsage(f"{run_dir} has no manifest.json; point --run at a "
                       f"directory produced by `dynrel train`")
    with open(man_path) as fh:
        manifest = json.load(fh)
    if manifest.get("command") != "train":
        raise CliUsage(f"{run_dir} was produced by "
                       f"`dynrel {manifest.get('command')}`, not train")
    return manifest


def _member_models(spec, cfg, root, dataset, seed, expect_fp="", force=False):
    """Load the per-period ensemble members trained beside this cell."""
    horizon = dataset.train.states.shape[1]
    state_dim = dataset.train.states.shape[-1]
    models, elbos = [], []
    for L in spec.members:
        member_spec = replace(spec, members=(), inference_period=0)
        cell = member_spec.cell_slug(cfg["scale"], seed) + f"__L{L}"
        path = os.path.join(root, "runs", cell, "checkpoint.bin")
        if not os.path.exists(path):
            raise CliUsage(f"ensemble member checkpoint missing: {path}; "
                           f"rerun `dynrel train` for this cell first")
        ckpt = dataio.read_checkpoint(path)
        if expect_fp and ckpt.dataset_fingerprint != expect_fp and not force:
            raise CliUsage(
                f"member {cell} was trained on fingerprint "
                f"{ckpt.dataset_fingerprint[:12]}..., this dataset is "
                f"{expect_fp[:12]}...; pass --force to score anyway")
        model = engine.build_model(member_spec, cfg["scale"], horizon,
                                   state_dim, seed, period=L)
        model.load_state_arrays(ckpt.params)
        models.append(model)
        elbos.append(ckpt.best_valid_elbo)
    return models, elbos


def _cmd_eval(args, argv, tracker):
    cfg = _resolve(args, EVAL_DEFAULTS)
    if not cfg["run"]:
        raise CliUsage("eval needs --run RUNDIR")
    run_dir = cfg["run"].rstrip("/")
    manifest = _load_run(run_dir)
    train_cfg = manifest["config"]
    root = _out_root(cfg)
    if cfg["split"] not in ("train", "valid", "test"):
        raise CliUsage(f"--split must be train, valid or test, "
                       f"got {cfg['split']!r}")

    # the dataset defaults to the one the checkpoint was trained on;
    # --on "dynamic=periodic,period=8,..." scores it somewhere else
    ds_cfg = dict(train_cfg)
    overridden = False
    if cfg["on"]:
        overridden = True
        for pair in str(cfg["on"]).split(","):
            if "=" not in pair:
                raise CliUsage(f"--on expects key=value pairs, got {pair!r}")
            key, val = pair.split("=", 1)
            if key not in DATASET_DEFAULTS:
                raise CliUsage(f"--on key {key!r} is not a dataset option "
                               f"(one of {sorted(DATASET_DEFAULTS)})")
            ds_cfg[key] = val
    ds_spec = _dataset_spec(ds_cfg)
    _require_dataset(ds_spec, ds_cfg, root)

    spec = _experiment_spec(train_cfg, ds_spec)
    seed = int(train_cfg["seed"])
    dataset, fingerprint = engine.ensure_dataset(ds_spec, ds_cfg["scale"],
                                                 root)
    tag = f"{os.path.basename(run_dir)}__{cfg['split']}"
    if overridden:
        tag += f"__on_{ds_spec.slug(ds_cfg['scale'])}"
    out_dir = os.path.join(root, "evals", tag)
    tracker.start(out_dir, "eval", argv, dict(cfg, on=cfg["on"]), seed)
    tracker.manifest.inputs["dataset"] = fingerprint

    batch = getattr(dataset, cfg["split"])
    run_cfg = _train_run_config(spec, train_cfg, seed)
    with nn.precision(np.float32):
        if spec.members:
            models, elbos = _member_models(spec, train_cfg, root, dataset,
                                           seed, expect_fp=fingerprint,
                                           force=bool(cfg["force"]))
            metrics = engine.adaptive_scores(models, elbos, batch, ds_spec,
                                             run_cfg)
        else:
            ckpt_path = os.path.join(run_dir, "checkpoint.bin")
            if not os.path.exists(ckpt_path):
                raise CliUsage(f"no checkpoint.bin in {run_dir}")
            ckpt = dataio.read_checkpoint(ckpt_path)
            if ckpt.dataset_fingerprint != fingerprint and not cfg["force"]:
                raise CliUsage(
                    f"checkpoint was trained on fingerprint "
                    f"{ckpt.dataset_fingerprint[:12]}..., this dataset is "
                    f"{fingerprint[:12]}...; pass --force to score anyway")
            tracker.manifest.inputs["checkpoint"] = _file_sha(ckpt_path)
            horizon = batch.states.shape[1]
            state_dim = batch.states.shape[-1]
            model = engine.build_model(spec, train_cfg["scale"], horizon,
                                       state_dim, seed)
            model.load_state_arrays(ckpt.params)
            metrics = {
                "accuracy": engine.posterior_accuracy(model, batch, run_cfg),
                "mse": engine.split_mse(model, batch, run_cfg),
                "nelbo": engine.nelbo(batch, model, run_cfg),
            }
    metrics.update({"split": cfg["split"], "run": run_dir,
                    "dataset": ds_spec.slug(ds_cfg["scale"])})
    os.makedirs(out_dir, exist_ok=True)
    engine._atomic_write_json(os.path.join(out_dir, "metrics.json"), metrics)
    tracker.manifest.outputs = ["metrics.json"]
    tracker.finish()
    for key, val in sorted(metrics.items()):
        print(f"  {key}: {val}")


def _train_run_config(spec, train_cfg, seed):
    scale = engine.SCALES[train_cfg["scale"]]
    return objective.TrainConfig(
        epochs=spec.epochs_override or scale.epochs, scheme=spec.scheme,
        context_steps=spec.context_steps, decode_horizon=spec.decode_horizon,
        seed=seed)


def _cmd_export(args, argv, tracker):
    cfg = _resolve(args, EXPORT_DEFAULTS)
    if not cfg["run"]:
        raise CliUsage("export needs --run RUNDIR")
    if cfg["format"] not in ("csv", "json"):
        raise CliUsage(f"--format must be csv or json, got {cfg['format']!r}")
    run_dir = cfg["run"].rstrip("/")
    manifest = _load_run(run_dir)
    train_cfg = manifest["config"]
    root = _out_root(cfg)
    ds_spec = _dataset_spec(train_cfg)
    _require_dataset(ds_spec, train_cfg, root)
    spec = _experiment_spec(train_cfg, ds_spec)
    seed = int(train_cfg["seed"])
    dataset, fingerprint = engine.ensure_dataset(ds_spec, train_cfg["scale"],
                                                 root)
    batch = getattr(dataset, cfg["split"])
    n = min(int(cfg["examples"]), len(batch))
    states = batch.states[:n]
    labels = batch.labels[:n]

    out_dir = os.path.join(root, "exports",
                           f"{os.path.basename(run_dir)}__{cfg['split']}")
    tracker.start(out_dir, "export", argv, cfg, seed)
    tracker.manifest.inputs["dataset"] = fingerprint

    run_cfg = _train_run_config(spec, train_cfg, seed)
    horizon = states.shape[1]
    state_dim = states.shape[-1]
    with nn.precision(np.float32):
        if spec.members:
            models, elbos = _member_models(spec, train_cfg, root, dataset,
                                           seed)
            best = models[int(np.argmax(elbos))]
            mu = engine.predict_trajectories(best, states, labels, run_cfg)
            pred_rel = _stitched_relations(models, states, ds_spec)
        else:
            ckpt_path = os.path.join(run_dir, "checkpoint.bin")
            ckpt = dataio.read_checkpoint(ckpt_path)
            tracker.manifest.inputs["checkpoint"] = _file_sha(ckpt_path)
            model = engine.build_model(spec, train_cfg["scale"], horizon,
                                       state_dim, seed)
            model.load_state_arrays(ckpt.params)
            mu = engine.predict_trajectories(model, states, labels, run_cfg)
            if getattr(model, "requires_labels", False):
                pred_rel = None
            else:
                post = model.posterior(nn.Tensor(states))
                pred_rel = engine.RelationSequence.from_posterior(
                    post, ds_spec.n_agents).labels

    truth_rel = engine.RelationSequence.from_ground_truth(
        labels, ds_spec.n_agents).labels
    traj_rows, rel_rows = _export_rows(states, mu, truth_rel, pred_rel,
                                       ds_spec.n_agents, run_cfg)
    os.makedirs(out_dir, exist_ok=True)
    if cfg["format"] == "csv":
        outputs = ["trajectories.csv", "relations.csv"]
        _write_csv(os.path.join(out_dir, "trajectories.csv"),
                   ("example", "kind", "t", "agent")
                   + tuple(f"x{d}" for d in range(state_dim)), traj_rows)
        _write_csv(os.path.join(out_dir, "relations.csv"),
                   ("example", "t", "agent_i", "agent_j", "truth", "pred"),
                   rel_rows)
    else:
        outputs = ["export.json"]
        payload = {
            "trajectories": [dict(zip(("example", "kind", "t", "agent"),
                                      row[:4]),
                                  state=list(row[4:])) for row in traj_rows],
            "relations": [dict(zip(("example", "t", "agent_i", "agent_j",
                                    "truth", "pred"), row))
                          for row in rel_rows],
        }
        engine._atomic_write_json(os.path.join(out_dir, "export.json"),
                                  payload)
    tracker.manifest.outputs = outputs
    tracker.finish()
    print(f"exported {n} {cfg['split']} examples -> {out_dir}")


def _stitched_relations(models, states, ds_spec):
    horizon = states.shape[1]
    schedule = sim.build_schedule(
        ds_spec.schedule_kind, horizon,
        np.zeros((ds_spec.n_agents,) * 2, np.uint8), **ds_spec.params)
    edges = np.concatenate([[0], schedule.flip_times, [horizon]])
    return baselines.nri_adaptive_infer(models, nn.Tensor(states),
                                        segment_edges=edges).labels


def _export_rows(states, mu, truth_rel, pred_rel, n_agents, run_cfg):
    first, second = pair_indices(n_agents)
    lo = run_cfg.context_steps
    traj_rows, rel_rows = [], []
    for e in range(states.shape[0]):
        for t in range(states.shape[1]):
            for a in range(n_agents):
                traj_rows.append((e, "truth", t, a)
                                 + tuple(float(v) for v in states[e, t, a]))
        for t in range(mu.shape[1]):
            for a in range(n_agents):
                traj_rows.append((e, "pred", lo + t, a)
                                 + tuple(float(v) for v in mu[e, t, a]))
        for t in range(truth_rel.shape[-1]):
            for p in range(truth_rel.shape[1]):
                pred = "" if pred_rel is None else int(pred_rel[e, p, t])
                rel_rows.append((e, t, int(first[p]), int(second[p]),
                                 int(truth_rel[e, p, t]), pred))
    return traj_rows, rel_rows


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _cmd_grid(args, argv, tracker):
    cfg = _resolve(args, GRID_DEFAULTS)
    recipe = cfg["recipe"]
    if recipe not in engine.RECIPES:
        raise CliUsage(f"unknown recipe {recipe!r} "
                       f"(choose from {sorted(engine.RECIPES)})")
    root = _out_root(cfg)
    out_dir = os.path.join(root, "results", recipe)
    tracker.start(out_dir, "grid", argv, cfg, 0)

    done = []

    def progress(name, seed, metrics):
        done.append((name, seed))
        acc = metrics.get("accuracy")
        acc_txt = "-" if acc is None else f"{acc:.3f}"
        print(f"[{len(done)}] {name} seed {seed}: acc {acc_txt} "
              f"({metrics.get('wall_seconds', 0.0)}s)", flush=True)

    table = engine.run_grid(recipe, root, cfg["scale"],
                            seeds=tuple(range(int(cfg["seeds"]))),
                            workers=int(cfg["workers"]), progress=progress)
    tracker.manifest.outputs = ["table.csv", "table.txt", "table.json"]
    tracker.finish()
    print()
    print(engine.render_table_text(table))


# -- parser -----------------------------------------------------------

def _add_common(p):
    p.add_argument("--out", default=_UNSET, metavar="DIR",
                   help=f"output root (default: ${ENV_OUT} or ./dynrel-out)")
    p.add_argument("--config", default=None, metavar="FILE",
                   help="JSON file of option defaults; explicit flags win")
    p.add_argument("--scale", default=_UNSET,
                   choices=tuple(sorted(engine.SCALES)),
                   help="dataset sizes and epochs: desk = 1000 train "
                        "trajectories / 60 epochs, paper = 50000 / 300 "
                        "(default: desk)")
    p.add_argument("--force", action="store_const", const=True,
                   default=_UNSET, help="redo cached work (default: off)")


def _add_dataset_flags(p):
    p.add_argument("--dynamic", default=_UNSET,
                   choices=("static", "periodic", "additive", "stochastic"),
                   help="relation schedule kind (default: static)")
    p.add_argument("--period", type=int, default=_UNSET,
                   help="flip period for --dynamic periodic (default: 20)")
    p.add_argument("--start", type=int, default=_UNSET,
                   help="first additive flip time (default: 4)")
    p.add_argument("--step", type=int, default=_UNSET,
                   help="additive gap growth per segment (default: 4)")
    p.add_argument("--flip-prob", dest="flip_prob", type=float,
                   default=_UNSET,
                   help="per-block pair flip probability for --dynamic "
                        "stochastic (default: 0.9)")
    p.add_argument("--block", type=int, default=_UNSET,
                   help="stochastic block length (default: 4)")
    p.add_argument("--agents", type=int, default=_UNSET,
                   help="number of particles (default: 5)")
    p.add_argument("--data-seed", dest="data_seed", type=int, default=_UNSET,
                   help="dataset generation seed (default: 0)")


def build_parser():
    parser = _Parser(
        prog="dynrel",
        description="Spring-particle relational inference workbench.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", help="generate a dataset",
                       description="Generate train/valid/test trajectory "
                                   "splits for one relation schedule.")
    _add_dataset_flags(p)
    _add_common(p)

    p = sub.add_parser("train", help="train one model cell",
                       description="Train a model on a simulated dataset "
                                   "and score it on the test split.")
    _add_dataset_flags(p)
    _add_common(p)
    p.add_argument("--model", default=_UNSET,
                   choices=("dyari", "nri-static", "nri-adaptive", "in"),
                   help="model kind (default: dyari)")
    p.add_argument("--scheme", default=_UNSET, choices=("tf", "ar", "hybrid"),
                   help="decoder feeding: teacher forcing, autoregressive, "
                        "or tf then ar (default: ar)")
    p.add_argument("--tf-steps", dest="tf_steps", type=int, default=_UNSET,
                   help="teacher-forced prefix length for --scheme hybrid "
                        "(default: 30)")
    p.add_argument("--inference-period", dest="inference_period", type=int,
                   default=_UNSET,
                   help="relation block length; 0 holds one relation over "
                        "the whole window (default: 0)")
    p.add_argument("--horizon", type=int, default=_UNSET,
                   help="decode window length (default: 40)")
    p.add_argument("--context", type=int, default=_UNSET,
                   help="context steps before the decode window "
                        "(default: 10)")
    p.add_argument("--epochs", type=int, default=_UNSET,
                   help="override the scale's epoch budget (default: 0 = "
                        "use the scale)")
    p.add_argument("--seed", type=int, default=_UNSET,
                   help="training seed (default: 0)")
    p.add_argument("--members", default=_UNSET, metavar="L1,L2,...",
                   help="encoding lengths of an nri-adaptive ensemble "
                        "(default: none)")
    p.add_argument("--extra-layers", dest="extra_layers", type=int,
                   default=_UNSET,
                   help="extra embedding layers in the relation encoder "
                        "(default: 0)")
    p.add_argument("--no-interp-pool", dest="no_interp_pool",
                   action="store_const", const=True, default=_UNSET,
                   help="disable latent interpolation averaging "
                        "(default: enabled)")

    p = sub.add_parser("eval", help="score a trained checkpoint",
                       description="Recompute metrics for a finished "
                                   "training run, optionally on another "
                                   "split or dataset.")
    _add_dataset_flags(p)
    _add_common(p)
    p.add_argument("--run", default=_UNSET, metavar="RUNDIR",
                   help="directory written by `dynrel train` (required)")
    p.add_argument("--split", default=_UNSET,
                   help="train, valid or test (default: test)")
    p.add_argument("--on", default=_UNSET, metavar="K=V,...",
                   help="dataset overrides, e.g. dynamic=periodic,period=8; "
                        "mismatched fingerprints then need --force "
                        "(default: the training dataset)")

    p = sub.add_parser("grid", help="run a full experiment recipe",
                       description="Train every cell of a named recipe "
                                   "across seeds and render its table.")
    p.add_argument("recipe", nargs="?", default=_UNSET,
                   help="one of: " + ", ".join(sorted(engine.RECIPES)))
    _add_common(p)
    p.add_argument("--seeds", type=int, default=_UNSET,
                   help="number of seeds per cell, 0..n-1 (default: 3)")
    p.add_argument("--workers", type=int, default=_UNSET,
                   help="parallel cell processes (default: 1)")

    p = sub.add_parser("export", help="dump plot-ready predictions",
                       description="Write trajectories (truth and model "
                                   "rollout) and per-step relations for a "
                                   "few examples as CSV or JSON.")
    _add_common(p)
    p.add_argument("--run", default=_UNSET, metavar="RUNDIR",
                   help="directory written by `dynrel train` (required)")
    p.add_argument("--split", default=_UNSET,
                   help="train, valid or test (default: test)")
    p.add_argument("--examples", type=int, default=_UNSET,
                   help="how many examples to export (default: 8)")
    p.add_argument("--format", default=_UNSET, choices=("csv", "json"),
                   help="output format (default: csv)")
    return parser


RUNNERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grid": _cmd_grid,
    "export": _cmd_export,
}


def dispatch(argv=None):
    """Run one command line; returns the process exit code."""
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsage as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:      # -h/--help
        return 0 if not e.code else int(e.code)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("dynrel: a command is required", file=sys.stderr)
        return 1

    tracker = _Tracker()
    try:
        RUNNERS[args.command](args, argv, tracker)
        return 0
    except (CliUsage, UsageError, ConfigurationError) as e:
        print(f"dynrel {args.command}: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        tracker.finish("failed", error="interrupted")
        return 2
    except Exception as e:
        tracker.finish("failed", error=f"{type(e).__name__}: {e}")
        print(f"dynrel {args.command}: {type(e).__name__}: {e}",
              file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
