"""MAE and coverage metrics, per-subset reports and the camera generalization matrix."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np

from .data import ColorSignalSequence, SignalSample, SplitSets, stack, window_sequence
from .grid import GRID
from .model import Model

log = logging.getLogger(__name__)

COVERAGE_BPM = 3.0
COVERAGE_LABELS = 4
SUBSETS = ("Stationary", "MixedMotion", "Cam1", "Cam2", "Cam3", "Full")
_SCENARIO_SUBSET = {"stationary": "Stationary", "mixed_motion": "MixedMotion"}


def mae(preds, refs) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if preds.shape != refs.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {refs.shape}")
    if preds.size == 0:
        raise ValueError("MAE of an empty set is undefined")
    return float(np.mean(np.abs(preds - refs)))


def coverage(preds, refs, task: str = "regression") -> float:
    """Fraction of hits.

    regression: ``preds`` and ``refs`` in bpm, hit when |error| < 3 bpm.
    classification: ``preds`` and ``refs`` are labels, hit when |Δlabel| <= 4.
    """
    preds = np.asarray(preds)
    refs = np.asarray(refs)
    if preds.shape != refs.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {refs.shape}")
    if preds.size == 0:
        raise ValueError("coverage of an empty set is undefined")
    if task == "regression":
        hits = np.abs(preds.astype(np.float64) - refs) < COVERAGE_BPM
    elif task == "classification":
        hits = np.abs(preds.astype(np.int64) - refs.astype(np.int64)) <= COVERAGE_LABELS
    else:
        raise ValueError(f"unknown task {task!r}")
    return float(np.mean(hits))


def subset_tags(sample: SignalSample) -> tuple[str, ...]:
    tags = []
    if sample.scenario in _SCENARIO_SUBSET:
        tags.append(_SCENARIO_SUBSET[sample.scenario])
    if sample.camera in ("Cam1", "Cam2", "Cam3"):
        tags.append(sample.camera)
    tags.append("Full")
    return tuple(tags)


@dataclass
class ReportRow:
    subset: str
    n: int
    mae: float | None
    coverage: float | None


@dataclass
class EvalReport:
    task: str
    rows: dict[str, ReportRow] = field(default_factory=dict)
    pairs: list[dict] = field(default_factory=list)

    def to_json(self, path) -> None:
        doc = {"task": self.task,
               "rows": [vars(r) for r in self.rows.values()]}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subset", "n", "mae_bpm", "coverage"])
            for r in self.rows.values():
                w.writerow([r.subset, r.n, "" if r.mae is None else f"{r.mae:.4f}",
                            "" if r.coverage is None else f"{r.coverage:.4f}"])

    def pairs_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ref_bpm", "pred_bpm", "camera", "scenario", "seq_id", "start"])
            for p in self.pairs:
                w.writerow([f"{p['ref_bpm']:.4f}", f"{p['pred_bpm']:.4f}", p["camera"],
                            p["scenario"], p["seq_id"], p["start"]])


def _row(subset, task, pred_bpm, ref_bpm, pred_lab, ref_lab) -> ReportRow:
    n = len(ref_bpm)
    if n == 0:
        return ReportRow(subset, 0, None, None)
    if task == "classification":
        cov = coverage(pred_lab, ref_lab, "classification")
    else:
        cov = coverage(pred_bpm, ref_bpm, "regression")
    return ReportRow(subset, n, mae(pred_bpm, ref_bpm), cov)


def evaluate(model: Model, samples: list[SignalSample]) -> EvalReport:
    """Per-subset MAE / coverage plus per-sample (reference, prediction) pairs."""
    task = model.spec.task
    x, ref_bpm, ref_lab = stack(samples, model.dtype)
    if len(samples):
        raw = model.predict(x)
        pred_bpm = GRID.hr_of(raw) if task == "classification" else raw
        pred_lab = raw if task == "classification" else None
    else:
        pred_bpm = np.zeros(0)
        pred_lab = np.zeros(0, dtype=np.int64)
    tags = [subset_tags(s) for s in samples]
    report = EvalReport(task=task)
    for subset in SUBSETS:
        idx = np.array([i for i, t in enumerate(tags) if subset in t], dtype=np.int64)
        report.rows[subset] = _row(
            subset, task, pred_bpm[idx], ref_bpm[idx],
            None if pred_lab is None else pred_lab[idx], ref_lab[idx])
    for s, p in zip(samples, pred_bpm):
        report.pairs.append({"ref_bpm": s.ref_hr_bpm, "pred_bpm": float(p), "camera": s.camera,
                             "scenario": s.scenario, "seq_id": s.seq_id, "start": s.start})
    return report


CAMERA_SET = ("Cam1", "Cam2", "Cam3")


@dataclass
class GeneralizationMatrix:
    rows: list[str]
    columns: list[str]
    mae: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", *self.columns])
            for name, row in zip(self.rows, self.mae):
                w.writerow([name, *("" if math.isnan(v) else f"{v:.4f}" for v in row)])

    def value(self, row: str, column: str) -> float:
        return float(self.mae[self.rows.index(row), self.columns.index(column)])


def training_subsets(cameras) -> list[tuple[str, ...]]:
    cams = sorted(cameras)
    return [(c,) for c in cams] + list(combinations(cams, 2))


def generalization_matrix(splits: SplitSets, train_fn: Callable[[SplitSets], Model],
                          seed: int = 0, label: str = "CL+F") -> GeneralizationMatrix:
    """Train one model per camera and per camera pair; tabulate test MAE per camera.

    Pair subsets drop a random half of their training and validation
    samples so every model sees about as much data as a single-camera one.
    """
    present = sorted({s.camera for s in splits.train} & set(CAMERA_SET))
    if len(present) < 2:
        log.warning("fewer than two cameras in the data; the matrix degenerates")
    rng = np.random.default_rng([seed, 3])
    rows, values = [], []
    columns = [*present, "Full"]
    for subset in training_subsets(present):
        part = splits.filter(cameras=set(subset), which=("train", "val"))
        if len(subset) > 1:
            part = SplitSets(train=_halve(part.train, rng), val=_halve(part.val, rng), test=part.test)
        model = train_fn(part)
        row = []
        for cam in columns:
            test = splits.test if cam == "Full" else [s for s in splits.test if s.camera == cam]
            if not test:
                row.append(math.nan)
                continue
            x, hr, _ = stack(test, model.dtype)
            row.append(mae(model.predict_bpm(x), hr))
        rows.append(f"({label})_" + ",".join(c[-1] for c in subset))
        values.append(row)
    return GeneralizationMatrix(rows, columns, np.asarray(values, dtype=np.float64))


def _halve(samples, rng):
    if len(samples) < 2:
        return list(samples)
    keep = np.sort(rng.choice(len(samples), size=len(samples) // 2, replace=False))
    return [samples[i] for i in keep]


def all_samples(sequences: list[ColorSignalSequence]) -> list[SignalSample]:
    """All windows of the given sequences (for evaluating a whole directory)."""
    return [s for seq in sequences for s in window_sequence(seq)]
