"""Synthetic paired-feature data, file I/O, and deterministic splits.

Each synthetic instance is a (visual, text) feature pair built from its
class's unit prototypes plus scaled noise. The two modalities share one
per-instance latent vector (injected through fixed orthonormal maps), so a
pair carries instance-level mutual information across modalities, not just
class membership; cross-modal retrieval of held-out pairs is therefore
learnable. With probability ``rho`` the text side is replaced by a fresh
draw around a uniformly chosen *other* class's text prototype, modeling
irrelevant captions.

The on-disk format is line-oriented UTF-8 text (see :func:`save`); splits
live in a JSON sidecar next to the data file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetParseError, DatasetSchemaError, InvalidConfigError

Array = np.ndarray

SPLIT_NAMES = ("train", "val", "test")
_HEADER_PREFIX = "cpdpairs v1"


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic paired-feature generator."""

    n_classes: int = 10
    per_class: int = 60
    d_v: int = 64
    d_t: int = 48
    sigma: float = 0.1
    rho: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.per_class < 1:
            raise InvalidConfigError(f"per_class must be >= 1, got {self.per_class}")
        if self.d_v < 1 or self.d_t < 1:
            raise InvalidConfigError(f"feature dims must be >= 1, got d_v={self.d_v}, d_t={self.d_t}")
        if self.sigma < 0:
            raise InvalidConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidConfigError(f"rho must be in [0, 1], got {self.rho}")


@dataclass
class PairedInstance:
    """One training pair; ``label`` is -1 when unlabeled."""

    id: int
    visual: Array
    text: Array
    label: int = -1


@dataclass
class PairedDataset:
    """A set of paired feature vectors with optional class labels and splits."""

    ids: Array
    labels: Array
    visual: Array
    text: Array
    splits: dict[str, Array] = field(default_factory=dict)
    provenance: str = "synthetic"

    def __post_init__(self):
        if len({self.ids.shape[0], self.labels.shape[0], self.visual.shape[0], self.text.shape[0]}) != 1:
            raise DatasetSchemaError("ids, labels, visual, and text must have equal length")
        if len(set(self.ids.tolist())) != self.ids.shape[0]:
            raise DatasetSchemaError("instance ids must be unique")

    def __len__(self) -> int:
        return self.visual.shape[0]

    @property
    def d_v(self) -> int:
        return self.visual.shape[1]

    @property
    def d_t(self) -> int:
        return self.text.shape[1]

    @property
    def labeled(self) -> bool:
        return bool(np.all(self.labels >= 0))

    def instance(self, i: int) -> PairedInstance:
        return PairedInstance(
            id=int(self.ids[i]),
            visual=self.visual[i].copy(),
            text=self.text[i].copy(),
            label=int(self.labels[i]),
        )


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> Array:
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _orthonormal(rng: np.random.Generator, d: int, k: int) -> Array:
    q, _ = np.linalg.qr(rng.normal(size=(d, k)))
    return q


def prototypes(spec: SyntheticSpec) -> tuple[Array, Array]:
    """The clean class prototype pairs a spec would generate (deterministic)."""
    rng = np.random.default_rng(spec.seed)
    proto_v = _unit_rows(rng, spec.n_classes, spec.d_v)
    proto_t = _unit_rows(rng, spec.n_classes, spec.d_t)
    return proto_v, proto_t


def generate(spec: SyntheticSpec) -> PairedDataset:
    """Generate a labeled synthetic dataset, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    proto_v = _unit_rows(rng, spec.n_classes, spec.d_v)
    proto_t = _unit_rows(rng, spec.n_classes, spec.d_t)
    latent_dim = min(spec.d_v, spec.d_t)
    map_v = _orthonormal(rng, spec.d_v, latent_dim)
    map_t = _orthonormal(rng, spec.d_t, latent_dim)

    n = spec.n_classes * spec.per_class
    visual = np.empty((n, spec.d_v))
    text = np.empty((n, spec.d_t))
    labels = np.empty(n, dtype=int)
    row = 0
    for c in range(spec.n_classes):
        for _ in range(spec.per_class):
            z = rng.normal(size=latent_dim)
            visual[row] = proto_v[c] + spec.sigma * (map_v @ z)
            swap = rng.uniform() < spec.rho
            if swap:
                other = int(rng.integers(spec.n_classes - 1))
                if other >= c:
                    other += 1
                z_swap = rng.normal(size=latent_dim)
                text[row] = proto_t[other] + spec.sigma * (map_t @ z_swap)
            else:
                text[row] = proto_t[c] + spec.sigma * (map_t @ z)
            labels[row] = c
            row += 1
    return PairedDataset(
        ids=np.arange(n),
        labels=labels,
        visual=visual,
        text=text,
        provenance="synthetic",
    )


def split(dataset: PairedDataset, fractions: tuple[float, float, float], seed: int) -> PairedDataset:
    """Assign train/val/test splits by seeded shuffle, stratified when labeled.

    Fractions must be positive and sum to at most 1; any remainder is left
    unassigned. Split sizes follow largest-remainder rounding so they add up
    exactly.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise InvalidConfigError(f"need {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise InvalidConfigError(f"fractions must be positive, got {fractions}")
    if sum(fractions) > 1.0 + 1e-9:
        raise InvalidConfigError(f"fractions sum to {sum(fractions)}, must be <= 1")

    rng = np.random.default_rng(seed)
    groups: list[Array]
    if dataset.labeled:
        groups = [np.flatnonzero(dataset.labels == c) for c in np.unique(dataset.labels)]
    else:
        groups = [np.arange(len(dataset))]

    parts: dict[str, list[Array]] = {name: [] for name in SPLIT_NAMES}
    for group in groups:
        order = group[rng.permutation(group.shape[0])]
        sizes = _largest_remainder(group.shape[0], fractions)
        start = 0
        for name, size in zip(SPLIT_NAMES, sizes):
            parts[name].append(order[start : start + size])
            start += size
    splits = {name: np.sort(np.concatenate(chunks)) for name, chunks in parts.items()}
    for name in SPLIT_NAMES:
        if splits[name].size == 0:
            raise InvalidConfigError(f"requested fractions leave the {name!r} split empty")
    return PairedDataset(
        ids=dataset.ids,
        labels=dataset.labels,
        visual=dataset.visual,
        text=dataset.text,
        splits=splits,
        provenance=dataset.provenance,
    )


def _largest_remainder(n: int, fractions: tuple[float, ...]) -> list[int]:
    raw = [n * f for f in fractions]
    sizes = [math.floor(r) for r in raw]
    total = round(n * sum(fractions))
    leftovers = sorted(range(len(raw)), key=lambda k: (raw[k] - sizes[k], -k), reverse=True)
    for k in leftovers[: total - sum(sizes)]:
        sizes[k] += 1
    return sizes


def save(dataset: PairedDataset, path: str | Path) -> None:
    """Write the dataset file plus (when present) a splits sidecar.

    The float formatting round-trips exactly, so regeneration with the same
    spec yields a byte-identical file.
    """
    path = Path(path)
    labeled = 1 if dataset.labeled else 0
    lines = [f"{_HEADER_PREFIX} N={len(dataset)} dv={dataset.d_v} dt={dataset.d_t} labeled={labeled}"]
    for i in range(len(dataset)):
        fields = [str(int(dataset.ids[i])), str(int(dataset.labels[i]))]
        fields.extend(repr(float(x)) for x in dataset.visual[i])
        fields.extend(repr(float(x)) for x in dataset.text[i])
        lines.append(",".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if dataset.splits:
        sidecar = {name: idx.tolist() for name, idx in dataset.splits.items()}
        splits_path(path).write_text(json.dumps(sidecar), encoding="utf-8")


def splits_path(path: str | Path) -> Path:
    return Path(str(path) + ".splits.json")


def load(path: str | Path) -> PairedDataset:
    """Read a dataset file written by :func:`save`, validating the schema."""
    path = Path(path)
    text_content = path.read_text(encoding="utf-8")
    lines = text_content.splitlines()
    if not lines:
        raise DatasetParseError("file is empty", line=1)
    header = lines[0]
    if not header.startswith(_HEADER_PREFIX):
        raise DatasetParseError(f"bad header {header!r}, expected '{_HEADER_PREFIX} ...'", line=1)
    try:
        meta = dict(part.split("=", 1) for part in header[len(_HEADER_PREFIX) :].split())
        n = int(meta["N"])
        d_v = int(meta["dv"])
        d_t = int(meta["dt"])
        labeled = int(meta["labeled"])
    except (KeyError, ValueError) as exc:
        raise DatasetParseError(f"malformed header {header!r} ({exc})", line=1) from None

    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != n:
        raise DatasetParseError(
            f"header declares {n} records but file contains {len(records)}",
            line=len(lines),
        )
    expected_fields = 2 + d_v + d_t
    ids = np.empty(n, dtype=int)
    labels = np.empty(n, dtype=int)
    visual = np.empty((n, d_v))
    text = np.empty((n, d_t))
    for row, line in enumerate(records):
        lineno = row + 2
        fields = line.split(",")
        if len(fields) != expected_fields:
            raise DatasetSchemaError(
                f"line {lineno}: expected {expected_fields} fields (2 + {d_v} + {d_t}), got {len(fields)}"
            )
        try:
            ids[row] = int(fields[0])
            labels[row] = int(fields[1])
            visual[row] = [float(x) for x in fields[2 : 2 + d_v]]
            text[row] = [float(x) for x in fields[2 + d_v :]]
        except ValueError as exc:
            raise DatasetParseError(f"unparseable record ({exc})", line=lineno) from None
    if labeled and np.any(labels < 0):
        raise DatasetSchemaError("header says labeled=1 but some labels are negative")

    splits: dict[str, Array] = {}
    sidecar = splits_path(path)
    if sidecar.exists():
        try:
            raw = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"bad splits sidecar: {exc}", line=exc.lineno) from None
        splits = {name: np.asarray(idx, dtype=int) for name, idx in raw.items()}
        for name, idx in splits.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetSchemaError(f"split {name!r} has out-of-range indices")
    return PairedDataset(
        ids=ids,
        labels=labels,
        visual=visual,
        text=text,
        splits=splits,
        provenance="file",
    )
