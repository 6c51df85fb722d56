"""Dataset plumbing: the FEA1 feature container, JSON manifests, a
planted-prototype synthetic generator, and stratified k-shot splits.

FEA1 container layout (little-endian throughout):

    magic   4 bytes  b"FEA1"
    version u32      1
    count   u32      number of entries
    entry*  name_len u16, name UTF-8 bytes, rows u32, cols u32,
            rows*cols float32 values, row-major

Matrices are stored as float32 and promoted to float64 on load. A JSON
manifest ties bag ids to container entries and labels:

    {"format": "otmil-dataset", "version": 1,
     "class_names": [...], "features": "<container path>",
     "priors": "<container path>",
     "bags": [{"id": ..., "entry": ..., "label": ...}, ...]}

The priors container must hold the entries "instance_priors" (K_t x d)
and "bag_priors" (c x d). Paths are relative to the manifest.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConsistencyError, FormatError
from .kernel import as_matrix

FEATURE_MAGIC = b"FEA1"
CONTAINER_VERSION = 1


@dataclass
class Bag:
    """One sample: an instance-embedding matrix plus its bag label."""

    id: str
    label: int
    features: np.ndarray  # (n, d)

    def __post_init__(self):
        self.features = as_matrix(self.features, f"bag {self.id!r} features")
        if self.features.shape[0] < 1:
            raise ValueError(f"bag {self.id!r} has no instances")
        if self.label < 0:
            raise ValueError(f"bag {self.id!r} has negative label {self.label}")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


@dataclass
class Priors:
    """Ingested text-prior embeddings: per-prototype and per-class."""

    instance: np.ndarray  # (K_t, d)
    bag: np.ndarray  # (c, d)

    def __post_init__(self):
        self.instance = as_matrix(self.instance, "instance priors")
        self.bag = as_matrix(self.bag, "bag priors")
        if self.instance.shape[1] != self.bag.shape[1]:
            raise ValueError("instance and bag priors disagree on width")


@dataclass
class Dataset:
    bags: list
    class_names: list
    dim: int
    instance_priors: np.ndarray
    bag_priors: np.ndarray

    def __post_init__(self):
        c = len(self.class_names)
        if c < 1:
            raise ValueError("dataset needs at least one class")
        for bag in self.bags:
            if bag.features.shape[1] != self.dim:
                raise ConsistencyError(
                    f"bag {bag.id!r} width {bag.features.shape[1]} != dataset dim {self.dim}"
                )
            if bag.label >= c:
                raise ConsistencyError(
                    f"bag {bag.id!r} label {bag.label} out of range for {c} classes"
                )
        self.instance_priors = as_matrix(self.instance_priors, "instance priors")
        self.bag_priors = as_matrix(self.bag_priors, "bag priors")
        if self.instance_priors.shape[1] != self.dim or self.bag_priors.shape[1] != self.dim:
            raise ConsistencyError("prior width does not match dataset dim")
        if self.bag_priors.shape[0] != c:
            raise ConsistencyError(
                f"bag priors have {self.bag_priors.shape[0]} rows for {c} classes"
            )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def priors(self) -> Priors:
        return Priors(self.instance_priors, self.bag_priors)

    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def bag_by_id(self, bag_id: str) -> Bag:
        for bag in self.bags:
            if bag.id == bag_id:
                return bag
        raise ValueError(f"unknown bag id {bag_id!r}")


# ---------------------------------------------------------------------------
# binary containers


def _write_named_arrays(path, entries, magic: bytes, dtype: str) -> None:
    items = list(entries.items()) if isinstance(entries, dict) else list(entries)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(items)))
        for name, matrix in items:
            matrix = as_matrix(matrix, f"entry {name!r}")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"entry name too long: {name!r}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
            f.write(np.ascontiguousarray(matrix, dtype=dtype).tobytes())


def _read_exact(f, n: int, what: str, path) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise FormatError(f"{path}: truncated while reading {what}")
    return chunk


def _read_named_arrays(path, magic: bytes, dtype: str) -> dict:
    itemsize = np.dtype(dtype).itemsize
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic", path) != magic:
            raise FormatError(f"{path}: bad magic, expected {magic!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header", path))
        if version != CONTAINER_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length", path))
            name = _read_exact(f, name_len, "name", path).decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(f, 8, "shape", path))
            payload = _read_exact(f, rows * cols * itemsize, f"entry {name!r}", path)
            out[name] = np.frombuffer(payload, dtype=dtype).astype(np.float64).reshape(rows, cols)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last entry")
    return out


def write_container(path, entries) -> None:
    """Write named matrices to a FEA1 container (float32 payload)."""
    _write_named_arrays(path, entries, FEATURE_MAGIC, "<f4")


def read_container(path) -> dict:
    """Read a FEA1 container; values come back as float64 matrices."""
    return _read_named_arrays(path, FEATURE_MAGIC, "<f4")


# ---------------------------------------------------------------------------
# manifests


def write_dataset(ds: Dataset, out_dir, stem: str = "dataset") -> Path:
    """Write features, priors and manifest into `out_dir`; returns the
    manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features_name = f"{stem}_features.fea"
    priors_name = f"{stem}_priors.fea"
    write_container(out_dir / features_name, {b.id: b.features for b in ds.bags})
    write_container(out_dir / priors_name, {
        "instance_priors": ds.instance_priors,
        "bag_priors": ds.bag_priors,
    })
    manifest = {
        "format": "otmil-dataset",
        "version": 1,
        "class_names": list(ds.class_names),
        "features": features_name,
        "priors": priors_name,
        "bags": [{"id": b.id, "entry": b.id, "label": int(b.label)} for b in ds.bags],
    }
    manifest_path = out_dir / f"{stem}_manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


def read_priors_container(path) -> Priors:
    entries = read_container(path)
    for key in ("instance_priors", "bag_priors"):
        if key not in entries:
            raise ConsistencyError(f"{path}: priors container lacks entry {key!r}")
    return Priors(entries["instance_priors"], entries["bag_priors"])


def read_dataset(manifest_path, priors_path=None) -> Dataset:
    """Load and fully validate a dataset from its manifest.

    `priors_path` overrides the manifest's priors container when given.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest_path}: invalid JSON manifest: {e}") from e
    for key in ("class_names", "features", "priors", "bags"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: manifest lacks key {key!r}")

    root = manifest_path.parent
    entries = read_container(root / manifest["features"])
    priors_file = Path(priors_path) if priors_path else root / manifest["priors"]
    priors = read_priors_container(priors_file)

    bags = []
    for record in manifest["bags"]:
        bag_id, entry, label = record["id"], record["entry"], int(record["label"])
        if entry not in entries:
            raise ConsistencyError(
                f"manifest references missing container entry {entry!r} for bag {bag_id!r}"
            )
        bags.append(Bag(bag_id, label, entries[entry]))
    if not bags:
        raise ConsistencyError(f"{manifest_path}: manifest lists no bags")
    return Dataset(
        bags=bags,
        class_names=list(manifest["class_names"]),
        dim=bags[0].features.shape[1],
        instance_priors=priors.instance,
        bag_priors=priors.bag,
    )


def read_bag_csv(path) -> np.ndarray:
    """Slow-path import: header row, then one instance per line."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    return as_matrix(rows, f"csv {path}")


# ---------------------------------------------------------------------------
# synthetic benchmark generator


@dataclass
class SynthSpec:
    """Planted-prototype generator settings (desk-scale benchmark)."""

    classes: int = 3
    bags_per_class: int = 40
    n_min: int = 8
    n_max: int = 24
    dim: int = 32
    prototypes_per_class: int = 3
    noise_sigma: float = 0.1
    witness_rate: float = 0.3
    prior_mode: str = "perfect"  # "perfect" | "biased"
    prior_sigma: float = 0.2  # perturbation scale in "biased" mode

    def validate(self) -> "SynthSpec":
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.bags_per_class < 1:
            raise ValueError("bags_per_class must be >= 1")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.prototypes_per_class < 1:
            raise ValueError("prototypes_per_class must be >= 1")
        if not 0.0 <= self.witness_rate <= 1.0:
            raise ValueError("witness_rate must lie in [0, 1]")
        if self.noise_sigma < 0 or self.prior_sigma < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.prior_mode not in ("perfect", "biased"):
            raise ValueError("prior_mode must be 'perfect' or 'biased'")
        return self


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Generate a planted-prototype dataset, deterministic in `seed`.

    Each class owns `prototypes_per_class` ground-truth unit directions
    (mutually orthogonal when they all fit in `dim`); each bag mixes
    witness instances (a class prototype plus Gaussian noise) at the
    witness rate with random unit background instances. Every bag keeps
    at least one witness whenever the rate is positive.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    total = spec.classes * spec.prototypes_per_class
    if total <= spec.dim:
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, total)))
        protos = q.T.copy()
    else:
        protos = _unit_rows(rng.standard_normal((total, spec.dim)))

    bags = []
    for k in range(spec.classes):
        class_protos = protos[k * spec.prototypes_per_class:(k + 1) * spec.prototypes_per_class]
        for i in range(spec.bags_per_class):
            n = int(rng.integers(spec.n_min, spec.n_max + 1))
            n_wit = int(round(spec.witness_rate * n))
            if spec.witness_rate > 0.0:
                n_wit = max(1, n_wit)
            picks = rng.integers(spec.prototypes_per_class, size=n_wit)
            witnesses = class_protos[picks] + spec.noise_sigma * rng.standard_normal((n_wit, spec.dim))
            background = _unit_rows(rng.standard_normal((n - n_wit, spec.dim))) \
                if n > n_wit else np.empty((0, spec.dim))
            feats = np.concatenate([witnesses, background], axis=0)
            feats = feats[rng.permutation(n)]
            bags.append(Bag(f"c{k}-b{i:03d}", k, feats))

    if spec.prior_mode == "perfect":
        instance_priors = protos.copy()
    else:
        instance_priors = _unit_rows(
            protos + spec.prior_sigma * rng.standard_normal(protos.shape)
        )
    bag_priors = _unit_rows(np.stack([
        protos[k * spec.prototypes_per_class:(k + 1) * spec.prototypes_per_class].mean(axis=0)
        for k in range(spec.classes)
    ]))
    return Dataset(
        bags=bags,
        class_names=[f"class{k}" for k in range(spec.classes)],
        dim=spec.dim,
        instance_priors=instance_priors,
        bag_priors=bag_priors,
    )


# ---------------------------------------------------------------------------
# k-shot cross-validation splits


class FoldSplit(NamedTuple):
    train: list
    val: list
    test: list


@dataclass
class SplitPlan:
    folds: list
    k_shot: int
    seed: int
    n_folds: int = field(init=False)

    def __post_init__(self):
        self.n_folds = len(self.folds)
        for f, fold in enumerate(self.folds):
            groups = (set(fold.train), set(fold.val), set(fold.test))
            if groups[0] & groups[2] or groups[0] & groups[1] or groups[1] & groups[2]:
                raise ValueError(f"fold {f} has overlapping splits")


def kshot_split(ds: Dataset, k: int, seed: int, folds: int = 5) -> SplitPlan:
    """Stratified folds: 1/folds of each class as test, exactly k train
    bags per class from the remainder, everything else as validation.

    Deterministic in `seed`. Classes short of k remainder bags contribute
    all they have, with a warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    labels = ds.labels()
    rng = np.random.default_rng(seed)

    class_chunks = []
    for c, name in enumerate(ds.class_names):
        idx = np.flatnonzero(labels == c)
        if idx.size < k + 2:
            raise ValueError(
                f"class {name!r} has {idx.size} bags; k={k} needs at least {k + 2}"
            )
        class_chunks.append(np.array_split(rng.permutation(idx), folds))

    plan_folds = []
    for f in range(folds):
        test = np.concatenate([chunks[f] for chunks in class_chunks])
        test_set = set(test.tolist())
        train, val = [], []
        for c, name in enumerate(ds.class_names):
            rest = np.array([i for i in np.flatnonzero(labels == c) if i not in test_set])
            if rest.size < k:
                warnings.warn(
                    f"fold {f}: class {name!r} has only {rest.size} non-test bags "
                    f"for k={k}; using all of them",
                    stacklevel=2,
                )
                chosen = rest
            else:
                chosen = rng.choice(rest, size=k, replace=False)
            chosen_set = set(chosen.tolist())
            train.extend(sorted(chosen_set))
            val.extend(i for i in rest.tolist() if i not in chosen_set)
        plan_folds.append(FoldSplit(sorted(train), sorted(val), sorted(test.tolist())))
    return SplitPlan(plan_folds, k_shot=k, seed=seed)
