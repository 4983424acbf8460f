"""Negative-patch mining by mini-batch k-means, plus class-balance helpers."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"TBFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQI")  # magic, version, n, d


class MiningError(ValueError):
    pass


class FeatureFileError(MiningError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


PatchId = tuple[str, int, int]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    ids: list[PatchId]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise MiningError("features must be a 2-D matrix")
        if len(self.ids) != v.shape[0]:
            raise MiningError(f"{len(self.ids)} ids for {v.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise MiningError("patch ids must be unique")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def write_features(path, fm: FeatureMatrix) -> None:
    vals = np.ascontiguousarray(fm.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fm.n, fm.d))
        fh.write(vals.tobytes())
        for sid, x, y in fm.ids:
            fh.write(f"{sid} {x} {y}\n".encode())


def read_features(path) -> FeatureMatrix:
    """Parse a feature file; structural problems raise with the byte offset."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFileError("truncated header", len(data))
    magic, version, n, d = _HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported version {version}", 4)
    start = _HEADER.size
    end = start + 4 * n * d
    if len(data) < end:
        raise FeatureFileError(f"truncated feature block: expected {n}x{d} floats", len(data))
    values = np.frombuffer(data, dtype="<f4", count=n * d, offset=start).reshape(n, d).astype(np.float64)
    ids: list[PatchId] = []
    offset = end
    for lineno, raw in enumerate(data[end:].split(b"\n")):
        if len(ids) == n:
            if raw.strip():
                raise FeatureFileError("trailing data after id table", offset)
            offset += len(raw) + 1
            continue
        parts = raw.decode("utf-8", errors="replace").split()
        if len(parts) != 3:
            raise FeatureFileError(f"malformed id record {lineno}", offset)
        try:
            ids.append((parts[0], int(parts[1]), int(parts[2])))
        except ValueError:
            raise FeatureFileError(f"malformed id record {lineno}", offset) from None
        offset += len(raw) + 1
    if len(ids) != n:
        raise FeatureFileError(f"id table has {len(ids)} of {n} records", len(data))
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0])
        raise FeatureFileError(f"non-finite feature in row {bad}", start + 4 * bad * d)
    return FeatureMatrix(values, ids)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ClusterModel:
    centroids: np.ndarray
    counts: np.ndarray
    seed: int
    iterations_run: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest centroid and squared distance for every row of ``x``."""
        return kernels.assign_nearest(np.ascontiguousarray(x, dtype=np.float64), self.centroids)


def wcss(x: np.ndarray, centroids: np.ndarray) -> float:
    _, d2 = kernels.assign_nearest(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(centroids))
    return float(d2.sum())


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator, n_trials: int | None = None) -> np.ndarray:
    """Greedy D^2-weighted seeding.

    Each step draws ``n_trials`` candidates (default ``2 + ln k``) with
    probability proportional to squared distance from the chosen centres
    and keeps the one that lowers the total squared distance the most.
    Duplicates of chosen points have zero weight and are never drawn again.
    """
    n = x.shape[0]
    trials = n_trials if n_trials is not None else 2 + int(math.log(k))
    first = int(rng.integers(n))
    centers = [x[first]]
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    x_sq = np.einsum("ij,ij->i", x, x)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k; any row will do
            idx = int(rng.integers(n))
        else:
            draws = rng.random(trials) * total
            cand = np.minimum(np.searchsorted(np.cumsum(d2), draws, side="right"), n - 1)
            c = x[cand]
            cd2 = x_sq[None, :] - 2.0 * (c @ x.T) + x_sq[cand][:, None]
            np.maximum(cd2, 0.0, out=cd2)
            potential = np.minimum(cd2, d2[None, :]).sum(axis=1)
            idx = int(cand[int(np.argmin(potential))])
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def minibatch_kmeans(
    f: FeatureMatrix | np.ndarray,
    k: int,
    batch_size: int = 1024,
    max_iters: int = 100,
    seed: int = 0,
    tol: float = 1e-4,
    init_factor: int = 10,
) -> ClusterModel:
    """Mini-batch k-means with per-centre learning rate ``1 / count``.

    Centres are seeded by greedy k-means++ on a random subsample of
    ``init_factor * k`` rows. Each iteration draws ``batch_size`` rows
    without replacement, assigns them to the nearest centre, then moves
    each centre towards its assigned rows. Iteration stops after
    ``max_iters`` batches or once no centre moves by more than
    ``tol * mean row norm``. Clusters that never receive points stay where
    they were seeded.
    """
    x = f.values if isinstance(f, FeatureMatrix) else np.asarray(f)
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise MiningError(f"k must be in [1, n={n}], got {k}")
    if batch_size < 1:
        raise MiningError("batch_size must be >= 1")
    if not np.all(np.isfinite(x)):
        raise MiningError("non-finite features")
    rng = np.random.default_rng(seed)
    m = min(n, init_factor * k)
    sub = x[np.sort(rng.choice(n, size=m, replace=False))] if m < n else x
    centroids = np.ascontiguousarray(kmeans_plus_plus(sub, k, rng))
    counts = np.zeros(k, dtype=np.int64)
    threshold = tol * float(np.linalg.norm(x, axis=1).mean())
    bs = min(batch_size, n)
    it = 0
    for it in range(1, max_iters + 1):
        idx = rng.choice(n, size=bs, replace=False) if bs < n else rng.permutation(n)
        batch = x[idx]
        labels, _ = kernels.assign_nearest(batch, centroids)
        before = centroids.copy()
        kernels.streaming_update(batch, labels, centroids, counts)
        shift = float(np.sqrt(((centroids - before) ** 2).sum(axis=1)).max())
        if shift < threshold:
            break
    empty = int((counts == 0).sum())
    if empty:
        log.info("%d of %d clusters received no points", empty, k)
    return ClusterModel(centroids, counts, seed, it)


# ---------------------------------------------------------------------------
# Sample plans
# ---------------------------------------------------------------------------


@dataclass
class SamplePlan:
    strategy: str
    selected: list[PatchId]
    multiplicities: dict[str, int] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.selected)


def sample_per_cluster(model: ClusterModel, f: FeatureMatrix, m: int = 7) -> SamplePlan:
    """The ``m`` rows nearest each centre among rows assigned to it.

    Distance ties go to the lower row index. Output is grouped by cluster,
    nearest first.
    """
    if f.d != model.centroids.shape[1]:
        raise MiningError(f"feature dimension {f.d} != model dimension {model.centroids.shape[1]}")
    if m < 0:
        raise MiningError("m must be >= 0")
    labels, d2 = model.predict(f.values)
    order = np.lexsort((np.arange(f.n), d2, labels))
    selected: list[PatchId] = []
    empty = 0
    bounds = np.searchsorted(labels[order], np.arange(model.k + 1))
    for c in range(model.k):
        rows = order[bounds[c]:bounds[c + 1]][:m]
        if rows.size == 0:
            empty += 1
        selected.extend(f.ids[int(r)] for r in rows)
    if empty:
        log.info("%d empty clusters contributed no samples", empty)
    return SamplePlan("kmeans", selected, params={"k": model.k, "m": m, "seed": model.seed})


def random_sample(pool_ids: Sequence[PatchId], m_total: int, seed: int = 0) -> SamplePlan:
    if not 0 <= m_total <= len(pool_ids):
        raise MiningError(f"cannot draw {m_total} from a pool of {len(pool_ids)}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(pool_ids), size=m_total, replace=False))
    return SamplePlan("random", [pool_ids[int(i)] for i in idx], params={"m_total": m_total, "seed": seed})


def no_sample() -> SamplePlan:
    return SamplePlan("none", [])


def class_weights(counts: Sequence[int], scheme: str = "equal") -> list[float]:
    """Per-class loss weights.

    ``prop``: class frequency. ``inv_prop``: inverse frequency scaled to a
    mean of 1. ``equal``: all ones.
    """
    counts = [int(c) for c in counts]
    if any(c <= 0 for c in counts):
        raise MiningError("every class needs a positive count")
    total = sum(counts)
    if scheme == "prop":
        return [c / total for c in counts]
    if scheme == "inv_prop":
        raw = [total / c for c in counts]
        mean = sum(raw) / len(raw)
        return [r / mean for r in raw]
    if scheme == "equal":
        return [1.0] * len(counts)
    raise MiningError(f"unknown weighting scheme {scheme!r}")


def oversampling_multiplicities(n_neg: int, n_pos: int, base: int = 2) -> tuple[int, int]:
    """Per-epoch repeats (negative, positive) that rebalance the minority class."""
    if not (n_neg >= n_pos > 0) or base < 1:
        raise MiningError("need n_neg >= n_pos > 0 and base >= 1")
    minority = max(1, int(math.floor(base * n_neg / n_pos + 0.5)))
    return base, minority


def write_plan(path, plan: SamplePlan) -> None:
    lines = [
        "# " + json.dumps(
            {"strategy": plan.strategy, "n": len(plan), "params": plan.params,
             "multiplicities": plan.multiplicities, "weights": plan.weights},
            sort_keys=True,
        )
    ]
    lines += [f"{sid} {x} {y}" for sid, x, y in plan.selected]
    Path(path).write_text("\n".join(lines) + "\n")


def read_plan(path) -> SamplePlan:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# "):
        raise MiningError(f"{path}: missing plan header")
    meta = json.loads(text[0][2:])
    selected = []
    for line in text[1:]:
        if line.strip():
            sid, x, y = line.split()
            selected.append((sid, int(x), int(y)))
    return SamplePlan(meta["strategy"], selected, meta.get("multiplicities", {}), meta.get("weights", {}), meta.get("params", {}))
