"""Persistent formats: dataset containers, checkpoints, and ingestion of
external trajectory CSVs.

Container layout (shared by datasets and checkpoints):

    DYNRELBIN 1\\n              magic + format version
    <header bytes>\\n           decimal byte count of the JSON header
    {...}\\n                    UTF-8 JSON header, sorted keys
    crc32 xxxxxxxx\\n           checksum of the header bytes
    <array bytes>               arrays back to back, order per header

Arrays are little-endian, row-major, each with a declared dtype, shape,
byte count, and crc32 in the header.  Everything needed to interpret or
validate the file without loading arrays lives in the header.
"""

import csv
import fcntl
import hashlib
import json
import os
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumError,
    ConfigurationError,
    FormatVersionError,
    IngestionError,
    TruncatedFileError,
)
from . import sim

MAGIC = b"DYNRELBIN"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"),
           "|u1": np.dtype("|u1"), "<i8": np.dtype("<i8")}
_SPLIT_FILES = {"train": "train.bin", "valid": "valid.bin", "test": "test.bin"}


def _dtype_token(arr):
    kind = arr.dtype.kind + str(arr.dtype.itemsize)
    token = {"f4": "<f4", "f8": "<f8", "u1": "|u1", "i8": "<i8"}.get(kind)
    if token is None:
        raise ConfigurationError(f"unsupported array dtype {arr.dtype}")
    return token


def write_container(path, kind, meta, arrays):
    """Write one container file under an exclusive advisory lock.

    arrays: {name: ndarray}; insertion order is the on-disk order.
    """
    descriptors = []
    payloads = []
    for name, arr in arrays.items():
        token = _dtype_token(arr)
        data = np.ascontiguousarray(arr).astype(_DTYPES[token], copy=False)
        raw = data.tobytes()
        descriptors.append({"name": name, "dtype": token,
                            "shape": list(arr.shape), "nbytes": len(raw),
                            "crc32": zlib.crc32(raw)})
        payloads.append(raw)
    header = {"format_version": FORMAT_VERSION, "kind": kind,
              "meta": meta, "arrays": descriptors}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            fh.write(MAGIC + b" %d\n" % FORMAT_VERSION)
            fh.write(b"%d\n" % len(header_bytes))
            fh.write(header_bytes)
            fh.write(b"crc32 %08x\n" % zlib.crc32(header_bytes))
            for raw in payloads:
                fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def _read_line(fh, path, what):
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise TruncatedFileError(f"{path}: file ends inside {what}")
    return line[:-1]


def read_container(path, expect_kind=None, load_arrays=True):
    """Parse a container; returns (header dict, {name: array} or None)."""
    with open(path, "rb") as fh:
        magic = _read_line(fh, path, "magic line")
        parts = magic.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise FormatVersionError(f"{path}: not a container file")
        if int(parts[1]) != FORMAT_VERSION:
            raise FormatVersionError(
                f"{path}: format version {int(parts[1])}, expected {FORMAT_VERSION}")
        try:
            header_len = int(_read_line(fh, path, "header length"))
        except ValueError:
            raise TruncatedFileError(f"{path}: malformed header length") from None
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise TruncatedFileError(f"{path}: header shorter than declared")
        crc_line = _read_line(fh, path, "header checksum")
        declared = int(crc_line.split()[-1], 16)
        actual = zlib.crc32(header_bytes)
        if declared != actual:
            raise ChecksumError(
                f"{path}: header checksum mismatch "
                f"(declared {declared:08x}, computed {actual:08x})")
        header = json.loads(header_bytes.decode("utf-8"))
        if expect_kind is not None and header.get("kind") != expect_kind:
            raise FormatVersionError(
                f"{path}: container kind {header.get('kind')!r}, expected {expect_kind!r}")
        if not load_arrays:
            return header, None
        arrays = {}
        for desc in header["arrays"]:
            raw = fh.read(desc["nbytes"])
            if len(raw) != desc["nbytes"]:
                raise TruncatedFileError(
                    f"{path}: array {desc['name']!r} shorter than declared")
            crc = zlib.crc32(raw)
            if crc != desc["crc32"]:
                raise ChecksumError(
                    f"{path}: array {desc['name']!r} checksum mismatch")
            arr = np.frombuffer(raw, dtype=_DTYPES[desc["dtype"]])
            arrays[desc["name"]] = arr.reshape(desc["shape"]).astype(
                arr.dtype.newbyteorder("="), copy=False)
        return header, arrays


def header_bytes_of(path):
    """The raw JSON header of a container (validated), for fingerprinting."""
    with open(path, "rb") as fh:
        _read_line(fh, path, "magic line")
        header_len = int(_read_line(fh, path, "header length"))
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise TruncatedFileError(f"{path}: header shorter than declared")
        return header_bytes


# -- dataset containers ----------------------------------------------

def _dataset_meta(ds, split_name):
    cfg = ds.config
    return {
        "split": split_name,
        "split_sizes": {k: len(ds.split(k)) for k in _SPLIT_FILES},
        "schedule": {"kind": ds.schedule_kind, **ds.schedule_params},
        "config": {
            "n_agents": cfg.n_agents,
            "box_half_width": cfg.box_half_width,
            "spring_constant": cfg.spring_constant,
            "raw_steps": cfg.raw_steps,
            "raw_dt": cfg.raw_dt,
            "sample_every": cfg.sample_every,
            "seed": cfg.seed,
            "initial_speed_scale": cfg.initial_speed_scale,
        },
        "bounds": {"lo": ds.bounds.lo.tolist(), "hi": ds.bounds.hi.tolist()},
    }


def write_dataset(directory, ds):
    """Write a DatasetSplit as one container per split inside ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for name, fname in _SPLIT_FILES.items():
        batch = ds.split(name)
        write_container(os.path.join(directory, fname), "dataset-split",
                        _dataset_meta(ds, name),
                        {"states": batch.states, "labels": batch.labels})
    return directory


def read_dataset(directory):
    """Load all three splits back into a DatasetSplit."""
    batches, meta = {}, None
    for name, fname in _SPLIT_FILES.items():
        header, arrays = read_container(os.path.join(directory, fname),
                                        expect_kind="dataset-split")
        meta = header["meta"]
        batches[name] = sim.TrajectoryBatch(states=arrays["states"],
                                            labels=arrays["labels"])
    cfg = sim.SimConfig(**meta["config"])
    bounds = sim.NormalizationBounds(lo=np.asarray(meta["bounds"]["lo"]),
                                     hi=np.asarray(meta["bounds"]["hi"]))
    sched = dict(meta["schedule"])
    kind = sched.pop("kind")
    return sim.DatasetSplit(train=batches["train"], valid=batches["valid"],
                            test=batches["test"], bounds=bounds, config=cfg,
                            schedule_kind=kind, schedule_params=sched)


def read_dataset_metadata(directory):
    """Split sizes, schedule, config, and array descriptors without
    touching the array payloads."""
    out = {}
    for name, fname in _SPLIT_FILES.items():
        header, _ = read_container(os.path.join(directory, fname),
                                   expect_kind="dataset-split", load_arrays=False)
        out[name] = header
        counted = header["arrays"][0]["shape"][0]
        declared = header["meta"]["split_sizes"][name]
        if counted != declared:
            raise ChecksumError(
                f"{fname}: header declares {declared} examples, arrays hold {counted}")
    return out


def dataset_fingerprint(directory):
    """Stable identity of a stored dataset: hash over all split headers."""
    acc = hashlib.sha256()
    for fname in _SPLIT_FILES.values():
        acc.update(header_bytes_of(os.path.join(directory, fname)))
    return acc.hexdigest()[:16]


# -- checkpoints ------------------------------------------------------

@dataclass
class Checkpoint:
    model_kind: str
    params: dict                 # name -> ndarray
    optimizer_state: dict        # name -> ndarray
    train_config: dict
    dataset_fingerprint: str
    best_valid_elbo: float = None
    epoch: int = 0


def write_checkpoint(path, ckpt):
    names = list(ckpt.params)
    if len(names) != len(set(names)):
        raise ConfigurationError("duplicate parameter names in checkpoint")
    meta = {
        "model_kind": ckpt.model_kind,
        "train_config": ckpt.train_config,
        "dataset_fingerprint": ckpt.dataset_fingerprint,
        "best_valid_elbo": ckpt.best_valid_elbo,
        "epoch": ckpt.epoch,
    }
    arrays = {}
    for name, arr in ckpt.params.items():
        arrays[f"param.{name}"] = arr
    for name, arr in ckpt.optimizer_state.items():
        arrays[f"opt.{name}"] = arr
    write_container(path, "checkpoint", meta, arrays)


def read_checkpoint(path):
    header, arrays = read_container(path, expect_kind="checkpoint")
    meta = header["meta"]
    params, opt_state = {}, {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("opt."):
            opt_state[name[len("opt."):]] = arr
    return Checkpoint(model_kind=meta["model_kind"], params=params,
                      optimizer_state=opt_state,
                      train_config=meta["train_config"],
                      dataset_fingerprint=meta["dataset_fingerprint"],
                      best_valid_elbo=meta["best_valid_elbo"],
                      epoch=meta["epoch"])


# -- external trajectory ingestion -----------------------------------

@dataclass
class ExternalTrajectorySet:
    states: np.ndarray           # [S, T, N, D] float32
    n_agents: int
    feature_dim: int
    horizon: int
    source_interval: float       # timestep spacing in the source file
    stride: int
    bounds: sim.NormalizationBounds = None

    def __len__(self):
        return self.states.shape[0]


def load_external_trajectories(path, resample_every=1, normalize=True):
    """Ingest a trajectory CSV with columns (example_id, t, agent_id, f0, f1, ...).

    Every example must cover the same agents, the same uniformly spaced
    timesteps, and the same feature count.  Rows may appear in any order.
    Timesteps are subsampled by ``resample_every`` after sorting.
    """
    if resample_every < 1:
        raise ConfigurationError(
            f"resample_every must be >= 1, got {resample_every}")
    rows = {}
    feature_dim = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip().lower() == "example_id":
                continue
            if len(row) < 4:
                raise IngestionError(
                    f"{path}:{lineno}: need at least example_id,t,agent_id,f0")
            ex, t, agent = row[0].strip(), float(row[1]), row[2].strip()
            feats = [float(v) for v in row[3:]]
            if feature_dim is None:
                feature_dim = len(feats)
            elif len(feats) != feature_dim:
                raise IngestionError(
                    f"{path}:{lineno}: feature count {len(feats)} != {feature_dim}",
                    example_ids=(ex,))
            rows.setdefault(ex, {}).setdefault(t, {})[agent] = feats
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    example_ids = sorted(rows)
    ref_times = None
    ref_agents = None
    ragged, nonuniform = [], []
    for ex in example_ids:
        times = sorted(rows[ex])
        agents_per_t = {frozenset(rows[ex][t]) for t in times}
        if len(agents_per_t) != 1:
            ragged.append(ex)
            continue
        agents = sorted(next(iter(agents_per_t)))
        if ref_times is None:
            ref_times, ref_agents = times, agents
        elif times != ref_times or agents != ref_agents:
            ragged.append(ex)
            continue
        if len(times) > 1:
            gaps = np.diff(times)
            if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-9):
                nonuniform.append(ex)
    if ragged:
        raise IngestionError("examples disagree on agents or timesteps",
                             example_ids=tuple(ragged))
    if nonuniform:
        raise IngestionError("non-uniform timestamps", example_ids=tuple(nonuniform))

    kept = ref_times[::resample_every]
    states = np.empty((len(example_ids), len(kept), len(ref_agents), feature_dim),
                      dtype=np.float32)
    for s, ex in enumerate(example_ids):
        for ti, t in enumerate(kept):
            for ai, agent in enumerate(ref_agents):
                states[s, ti, ai] = rows[ex][t][agent]

    interval = float(ref_times[1] - ref_times[0]) if len(ref_times) > 1 else 0.0
    bounds = None
    if normalize:
        bounds = sim.NormalizationBounds.from_states(states.astype(np.float64))
        states = bounds.normalize(states)
    return ExternalTrajectorySet(states=states, n_agents=len(ref_agents),
                                 feature_dim=feature_dim, horizon=len(kept),
                                 source_interval=interval,
                                 stride=resample_every, bounds=bounds)
