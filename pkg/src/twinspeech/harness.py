"""Top-1 evaluation and the fraction x seed x checkpoint grid behind the report tables."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import as_feature_set
from .exceptions import DataError, TwinSpeechError

DEFAULT_FRACTIONS = (0.05, 0.10, 0.50, 1.00)
BASELINE = "baseline"


def top1_accuracy(model, test) -> float:
    """Percentage of test items whose highest logit is the true class.

    ``model`` needs ``decision_function(X)``; ``test`` is a FeatureSet (only
    its test split is used when it carries both) or an ``(X, y)`` pair.
    Logit ties resolve to the lowest class index.
    """
    if isinstance(test, tuple):
        X, y = test
    else:
        fs = as_feature_set(test)
        if (fs.split == "test").any():
            fs = fs.where("test")
        X, y = fs.X, fs.y
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("empty test set")
    logits = np.asarray(model.decision_function(X))
    n_classes = getattr(model, "n_classes", logits.shape[1])
    if logits.shape[1] != n_classes or (y.max() >= n_classes):
        raise DataError(f"model has {logits.shape[1]} classes but test labels reach {int(y.max())}")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == y))


def fingerprint(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class GridCell:
    upstream: str
    variant: str
    fraction: float
    seed: int
    accuracy: float | None = None
    fingerprint: str = ""
    n_train: int = 0
    error: str = ""

    @property
    def key(self):
        return (self.upstream, self.variant, self.fraction, self.seed)


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        return isinstance(other, EvalReport) and self.cells == other.cells and self.meta == other.meta

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c.error]

    def fractions(self) -> list:
        return sorted({c.fraction for c in self.cells})

    def columns(self) -> list:
        """(upstream, variant) pairs in first-seen order, baseline first."""
        seen = []
        for c in self.cells:
            if (c.upstream, c.variant) not in seen:
                seen.append((c.upstream, c.variant))
        return sorted(seen, key=lambda k: k[0] != BASELINE)

    def mean(self, upstream, variant, fraction) -> float | None:
        vals = [c.accuracy for c in self.cells
                if (c.upstream, c.variant, c.fraction) == (upstream, variant, fraction) and not c.error]
        return float(np.mean(vals)) if vals else None

    # -- serialisation ------------------------------------------------------

    _FIELDS = ("upstream", "variant", "fraction", "seed", "accuracy", "fingerprint", "n_train", "error")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self._FIELDS)
        for c in self.cells:
            w.writerow([getattr(c, f) if getattr(c, f) is not None else "" for f in self._FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> "EvalReport":
        cells = []
        for row in csv.DictReader(io.StringIO(text)):
            cells.append(GridCell(row["upstream"], row["variant"], float(row["fraction"]), int(row["seed"]),
                                  float(row["accuracy"]) if row["accuracy"] else None, row["fingerprint"],
                                  int(row["n_train"] or 0), row["error"]))
        return cls(cells, meta or {})

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "cells": [asdict(c) for c in self.cells]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls([GridCell(**c) for c in doc["cells"]], doc.get("meta", {}))

    def to_markdown(self, title: str = "") -> str:
        """Fraction rows; Baseline then one BT / MBT column group per upstream dataset."""
        cols = self.columns()
        groups = []
        for up, var in cols:
            if up == BASELINE:
                continue
            if up not in groups:
                groups.append(up)
        header = ["Fraction (%)", "Baseline"] if (BASELINE, "scratch") in cols else ["Fraction (%)"]
        layout = [(BASELINE, "scratch")] if (BASELINE, "scratch") in cols else []
        for up in groups:
            for var in sorted({v for u, v in cols if u == up}):
                header.append(f"{up} {var.upper()}")
                layout.append((up, var))
        lines = []
        if title:
            lines += [f"**{title}**", ""]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for f in self.fractions():
            row = [f"{100 * f:g}"]
            for up, var in layout:
                m = self.mean(up, var, f)
                row.append("error" if m is None else f"{m:.2f}")
            lines.append("| " + " | ".join(row) + " |")
        if self.failed:
            lines += ["", "Failed cells:"]
            lines += [f"- {c.upstream}/{c.variant} fraction={c.fraction} seed={c.seed}: {c.error}" for c in self.failed]
        return "\n".join(lines) + "\n"


def run_grid(checkpoints: dict, downstream, fractions=DEFAULT_FRACTIONS, seeds=(0, 1, 2),
             finetune_config=None, mode: str | None = None, baseline: bool = True, workers: int = 1,
             progress=None) -> EvalReport:
    """Fine-tune every checkpoint at every (fraction, seed), plus a scratch baseline.

    ``checkpoints`` maps an upstream dataset id to a list (or single)
    Checkpoint; the objective variant is read from each checkpoint's config.
    Cells that fail are kept with their error message.
    """
    from .pipeline import FinetuneConfig, TrainConfig, finetune, train_scratch_baseline

    if not checkpoints:
        raise DataError("run_grid needs at least one checkpoint")
    fs = as_feature_set(downstream)
    test = fs.where("test")
    finetune_config = finetune_config or FinetuneConfig()
    if mode is not None:
        from dataclasses import replace
        finetune_config = replace(finetune_config, mode=mode)
    ft_dict = finetune_config.to_dict()

    jobs = []
    for upstream, ckpts in checkpoints.items():
        for ckpt in (ckpts if isinstance(ckpts, (list, tuple)) else [ckpts]):
            for f in fractions:
                for s in seeds:
                    jobs.append((upstream, ckpt, f, s))
    first = next(iter(checkpoints.values()))
    first = first[0] if isinstance(first, (list, tuple)) else first
    base_config = TrainConfig.from_dict(first.config)
    if baseline:
        jobs += [(BASELINE, None, f, s) for f in fractions for s in seeds]

    def run(job):
        upstream, ckpt, f, s = job
        if ckpt is None:
            cell = GridCell(BASELINE, "scratch", f, s,
                            fingerprint=fingerprint(base_config.arch.to_dict(), base_config.seed, ft_dict, f, s))
        else:
            cell = GridCell(upstream, ckpt.config["variant"], f, s,
                            fingerprint=fingerprint(ckpt.config, ft_dict, f, s))
        try:
            if ckpt is None:
                model, info = train_scratch_baseline(base_config, fs, f, s, finetune_config)
            else:
                model, info = finetune(ckpt, fs, f, seed=s, config=finetune_config)
            cell.accuracy = top1_accuracy(model, (test.X, test.y))
            cell.n_train = info["n_train"]
        except TwinSpeechError as exc:
            cell.error = f"{type(exc).__name__}: {exc}"
        if progress:
            progress(cell)
        return cell

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(run, jobs))
    else:
        cells = [run(j) for j in jobs]
    meta = {"finetune": ft_dict, "fractions": list(fractions), "seeds": list(seeds),
            "baseline": "scratch training, same architecture and head",
            "reductions": sorted({c.config.get("reduction", "") for c in _flatten(checkpoints)})}
    return EvalReport(cells, meta)


def _flatten(checkpoints):
    for v in checkpoints.values():
        yield from (v if isinstance(v, (list, tuple)) else [v])
