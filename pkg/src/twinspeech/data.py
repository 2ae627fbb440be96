"""Dataset manifests, in-memory feature sets and stratified fraction subsampling."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .dsp import FrontendConfig, featurize_clip, read_features, read_wav
from .exceptions import DataError, InvalidAudio

SPLITS = ("train", "test")
ROLES = ("upstream", "downstream")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    """Audio (or feature) files with labels and train/test assignment.

    ``classes`` maps label -> class index; by default labels are indexed in
    sorted order. Relative paths resolve against ``base_dir``.
    """

    entries: tuple
    classes: dict = field(default_factory=dict)
    role: str = "downstream"
    base_dir: str = "."
    name: str = ""

    def __post_init__(self):
        entries = tuple(e if isinstance(e, ManifestEntry) else ManifestEntry(*e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        if not self.classes:
            labels = sorted({e.label for e in entries if e.label != ""})
            object.__setattr__(self, "classes", {lab: i for i, lab in enumerate(labels)})
        self.validate()

    def validate(self):
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"{e.path}: split must be one of {SPLITS}, got {e.split!r}")
            if (e.path, e.split) in seen:
                raise DataError(f"duplicate path {e.path!r} in split {e.split!r}")
            seen.add((e.path, e.split))
            if self.role == "downstream" and e.label not in self.classes:
                raise DataError(f"{e.path}: label {e.label!r} not in class map")
        if self.role == "downstream" and self.entries and not any(e.split == "test" for e in self.entries):
            raise DataError("downstream manifest needs at least one test entry")

    def __len__(self):
        return len(self.entries)

    def split(self, which: str) -> "DatasetManifest":
        return replace(self, entries=tuple(e for e in self.entries if e.split == which),
                       role="upstream" if which == "train" else self.role)

    def resolve(self, entry: ManifestEntry) -> str:
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.base_dir, entry.path)

    def labels(self) -> np.ndarray:
        return np.array([self.classes.get(e.label, -1) for e in self.entries], dtype=int)

    # -- io ---------------------------------------------------------------

    @classmethod
    def read(cls, path, role: str | None = None) -> "DatasetManifest":
        """Read a CSV (``path,label,split`` header) or JSON manifest."""
        base = os.path.dirname(os.path.abspath(path))
        name = os.path.splitext(os.path.basename(path))[0]
        try:
            with open(path, newline="") as fh:
                if str(path).endswith(".json"):
                    doc = json.load(fh)
                    entries = [ManifestEntry(d["path"], str(d.get("label", "")), d.get("split", "train"))
                               for d in doc["entries"]]
                    return cls(tuple(entries), doc.get("classes") or {}, role or doc.get("role", "downstream"),
                               base, doc.get("name", name))
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or "path" not in reader.fieldnames:
                    raise DataError(f"{path}: manifest CSV needs a 'path,label,split' header")
                entries = [ManifestEntry(r["path"], (r.get("label") or "").strip(), (r.get("split") or "train").strip())
                           for r in reader]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read manifest ({exc})") from exc
        if role is None:
            role = "downstream" if any(e.split == "test" for e in entries) else "upstream"
        return cls(tuple(entries), {}, role, base, name)

    def write(self, path) -> None:
        if str(path).endswith(".json"):
            doc = {"name": self.name, "role": self.role, "classes": self.classes,
                   "entries": [{"path": e.path, "label": e.label, "split": e.split} for e in self.entries]}
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=1)
            return
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label", "split"])
            for e in self.entries:
                w.writerow([e.path, e.label, e.split])


@dataclass
class FeatureSet:
    """Log-mel items with integer labels. ``source`` holds the manifest entry
    index each item came from (a long file yields several 1 s items)."""

    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    classes: tuple = ()
    source: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=int)
        self.split = np.asarray(self.split)
        if self.source is None:
            self.source = np.arange(len(self.y))
        if not (self.X.shape[0] == self.y.shape[0] == self.split.shape[0]):
            raise DataError("feature, label and split arrays disagree in length")

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=int)
        return FeatureSet(self.X[idx], self.y[idx], self.split[idx], self.classes, self.source[idx])

    def where(self, which: str) -> "FeatureSet":
        return self.subset(np.flatnonzero(self.split == which))

    @property
    def n_classes(self) -> int:
        return len(self.classes) if self.classes else int(self.y.max()) + 1


def load_features(manifest: DatasetManifest, frontend: FrontendConfig | None = None) -> FeatureSet:
    """Materialise a manifest: ``.feat`` files are read, anything else is
    decoded as WAV and run through the frontend."""
    xs, ys, splits, sources = [], [], [], []
    labels = manifest.labels()
    for i, entry in enumerate(manifest.entries):
        path = manifest.resolve(entry)
        try:
            feats = read_features(path) if path.endswith(".feat") else featurize_clip(read_wav(path), frontend)
        except (OSError, InvalidAudio) as exc:
            raise DataError(f"{path}: {exc}") from exc
        xs.append(feats)
        ys.extend([labels[i]] * len(feats))
        splits.extend([entry.split] * len(feats))
        sources.extend([i] * len(feats))
    if not xs:
        raise DataError("manifest is empty")
    classes = tuple(sorted(manifest.classes, key=manifest.classes.get))
    return FeatureSet(np.concatenate(xs), np.array(ys, dtype=int), np.array(splits), classes, np.array(sources))


def as_feature_set(data, frontend: FrontendConfig | None = None) -> FeatureSet:
    if isinstance(data, FeatureSet):
        return data
    if isinstance(data, DatasetManifest):
        return load_features(data, frontend)
    raise DataError(f"expected a DatasetManifest or FeatureSet, got {type(data).__name__}")


# ---------------------------------------------------------------------------
# subsampling


def round_half_up(x) -> int:
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def class_quota(fraction: float, count: int) -> int:
    """Items kept from a class of ``count``: round-half-up, at least one."""
    if count == 0:
        return 0
    return min(count, max(1, round_half_up(Decimal(str(fraction)) * count)))


def stratified_indices(labels, fraction: float, seed: int, nested: bool = False) -> np.ndarray:
    """Per-class sampling without replacement; returns sorted positions into ``labels``.

    With ``nested=True`` each class uses one permutation for every fraction,
    so smaller fractions select subsets of larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot subsample an empty training split")
    keep = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        key = [int(seed), int(cls)] if nested else [int(seed), int(cls), round_half_up(fraction * 1e6)]
        perm = np.random.default_rng(key).permutation(members.size)
        keep.append(members[perm[:class_quota(fraction, members.size)]])
    return np.sort(np.concatenate(keep))


def subsample(data, fraction: float, seed: int = 0, nested: bool = False):
    """Stratified subsample of the train split; the test split is kept whole.

    Works on a :class:`DatasetManifest` (entry level) or a :class:`FeatureSet`.
    """
    if isinstance(data, DatasetManifest):
        if data.role != "downstream":
            raise DataError("subsampling needs a downstream (labeled) manifest")
        train = [i for i, e in enumerate(data.entries) if e.split == "train"]
        if not train:
            raise DataError("manifest has no training entries")
        labels = data.labels()[train]
        chosen = {train[i] for i in stratified_indices(labels, fraction, seed, nested)}
        entries = tuple(e for i, e in enumerate(data.entries) if e.split == "test" or i in chosen)
        return replace(data, entries=entries)
    fs = as_feature_set(data)
    train = np.flatnonzero(fs.split == "train")
    if train.size == 0:
        raise DataError("feature set has no training items")
    chosen = train[stratified_indices(fs.y[train], fraction, seed, nested)]
    return fs.subset(np.sort(np.concatenate([chosen, np.flatnonzero(fs.split == "test")])))
