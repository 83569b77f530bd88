"""Task vectors ``tau_i = theta_i - theta_0`` and their magnitude diagnostics."""

from __future__ import annotations

import csv
import enum
import fnmatch
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, validate_compat
from .errors import ConfigError, IncompatibleCheckpointsError
from .tensor import compute_dtype, frobenius_norm

log = logging.getLogger(__name__)


class KeyKind(str, enum.Enum):
    LINEAR = "LinearMatrix"
    OTHER = "Other"

    @classmethod
    def parse(cls, text) -> "KeyKind":
        if isinstance(text, KeyKind):
            return text
        norm = str(text).strip().lower()
        if norm in ("linearmatrix", "linear"):
            return cls.LINEAR
        if norm == "other":
            return cls.OTHER
        raise ConfigError(f"unknown key label {text!r}; expected LinearMatrix or Other")


def _check_glob(pattern: str) -> str:
    if not pattern:
        raise ConfigError("empty glob pattern")
    depth = 0
    for ch in pattern:
        if ch == "[":
            if depth:
                raise ConfigError(f"nested '[' in glob {pattern!r}")
            depth = 1
        elif ch == "]" and depth:
            depth = 0
    if depth:
        raise ConfigError(f"unterminated '[' in glob {pattern!r}")
    return pattern


def parse_overrides(overrides) -> list[tuple[str, KeyKind]]:
    """Accept ``"glob=Label"`` strings or ``(glob, label)`` pairs."""
    parsed = []
    for item in overrides or ():
        if isinstance(item, str):
            pattern, sep, label = item.rpartition("=")
            if not sep:
                raise ConfigError(f"override {item!r} must look like 'glob=Label'")
        else:
            pattern, label = item
        parsed.append((_check_glob(pattern.strip()), KeyKind.parse(label)))
    return parsed


def default_kind(name: str, shape) -> KeyKind:
    if len(shape) == 2 and name.endswith(".weight") and "embed" not in name:
        return KeyKind.LINEAR
    return KeyKind.OTHER


def classify_keys(tensors: Mapping[str, np.ndarray], overrides=(), keys=None) -> dict[str, KeyKind]:
    """Label every key LinearMatrix or Other; the first matching override wins."""
    rules = parse_overrides(overrides)
    out = {}
    for name in sorted(tensors if keys is None else keys):
        for pattern, kind in rules:
            if fnmatch.fnmatchcase(name, pattern):
                out[name] = kind
                break
        else:
            out[name] = default_kind(name, np.shape(tensors[name]))
    return out


def filter_keys(keys: Sequence[str], patterns) -> list[str]:
    if not patterns:
        return list(keys)
    patterns = [_check_glob(p) for p in patterns]
    return [k for k in keys if any(fnmatch.fnmatchcase(k, p) for p in patterns)]


@dataclass(frozen=True)
class TaskVectorSet:
    base: Checkpoint
    deltas: tuple  # one {key: ndarray} map per task
    partition: Mapping[str, KeyKind]

    @property
    def n_tasks(self) -> int:
        return len(self.deltas)

    @property
    def keys(self) -> list[str]:
        return sorted(self.partition)

    def linear_keys(self) -> list[str]:
        return [k for k in self.keys if self.partition[k] is KeyKind.LINEAR]

    def taus(self, key: str) -> list[np.ndarray]:
        return [d[key] for d in self.deltas]

    def with_deltas(self, deltas) -> "TaskVectorSet":
        return TaskVectorSet(self.base, tuple(deltas), self.partition)


def compute_task_vectors(base: Checkpoint, experts, overrides=(), key_filter=None) -> TaskVectorSet:
    """Deltas over the shared, shape-consistent keys (optionally name-filtered).

    Deltas are float32, or float64 where either side is stored as F64.
    """
    experts = list(experts)
    if not experts:
        raise IncompatibleCheckpointsError("need at least one expert checkpoint")
    report = validate_compat([base, *experts])
    for key, shapes in report.shape_mismatches:
        log.warning("skipping %s: shape mismatch %s", key, shapes)
    keys = filter_keys(report.mergeable_keys, key_filter)
    if not keys:
        raise IncompatibleCheckpointsError("no shared, shape-consistent keys to merge")
    deltas = []
    for expert in experts:
        delta = {}
        for key in keys:
            dt = compute_dtype(base[key], expert[key])
            delta[key] = expert[key].astype(dt) - base[key].astype(dt)
        deltas.append(delta)
    return TaskVectorSet(base, tuple(deltas), classify_keys(base, overrides, keys))


# -- diagnostics ----------------------------------------------------------


@dataclass
class MagnitudeHistogram:
    """Counts of ``|tau|`` per bin.

    ``edges`` has ``bins + 3`` entries: ``0``, the ``bins + 1`` log-spaced
    edges, then ``inf``.  Column 0 is the underflow bin (which holds exact
    zeros) and the last column is the overflow bin.
    """

    edges: np.ndarray
    per_key: dict
    aggregate: np.ndarray


@dataclass
class TaskVectorStats:
    histogram: MagnitudeHistogram
    norms: list


def _check_task(tv: TaskVectorSet, task: int):
    if not 0 <= task < tv.n_tasks:
        raise IndexError(f"task index {task} out of range for {tv.n_tasks} task(s)")


def log_edges(bins: int, low: float = 1e-8, high: float = 1.0) -> np.ndarray:
    if bins < 2:
        raise ConfigError(f"need at least 2 bins, got {bins}")
    return np.logspace(np.log10(low), np.log10(high), bins + 1)


def count_magnitudes(values, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, np.abs(np.asarray(values, dtype=np.float64)).ravel(), side="right")
    return np.bincount(idx, minlength=len(edges) + 1)


def magnitude_histogram(tv: TaskVectorSet, task: int, bins: int = 16, low=1e-8, high=1.0) -> MagnitudeHistogram:
    _check_task(tv, task)
    inner = log_edges(bins, low, high)
    per_key = {key: count_magnitudes(tv.deltas[task][key], inner) for key in tv.keys}
    aggregate = np.zeros(bins + 2, dtype=np.int64)
    for counts in per_key.values():
        aggregate += counts
    edges = np.concatenate([[0.0], inner, [np.inf]])
    return MagnitudeHistogram(edges, per_key, aggregate)


def normalized_fro_by_layer(tv: TaskVectorSet, task: int) -> list[tuple[str, float]]:
    """``||tau||_F / numel`` per key, in canonical key order."""
    _check_task(tv, task)
    out = []
    for key in tv.keys:
        t = tv.deltas[task][key]
        out.append((key, frobenius_norm(t) / t.size if t.size else 0.0))
    return out


def task_vector_stats(tv: TaskVectorSet, task: int, bins: int = 16) -> TaskVectorStats:
    return TaskVectorStats(magnitude_histogram(tv, task, bins), normalized_fro_by_layer(tv, task))


def write_histogram_csv(hist: MagnitudeHistogram, path) -> None:
    """Rows ``key, bin_low, bin_high, count``; key ``*`` is the aggregate."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "bin_low", "bin_high", "count"])
        for key, counts in [("*", hist.aggregate), *hist.per_key.items()]:
            for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], counts):
                w.writerow([key, repr(float(lo)), repr(float(hi)), int(c)])


def write_norms_csv(series, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "normalized_fro"])
        for key, value in series:
            w.writerow([key, repr(float(value))])
