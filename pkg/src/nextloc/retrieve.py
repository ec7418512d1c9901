"""Exact top-k retrieval of candidate locations around a predicted coordinate.

The KD-tree splits at the median with alternating axes. Candidates are
ranked by squared Euclidean distance and, on equal distance, by ascending
location id, so results are deterministic and match a brute-force scan
exactly.
"""

from __future__ import annotations

import heapq
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geo import from_mercator, geodesic_distance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    xy_o: tuple
    topk: tuple  # ((location_id, distance_m), ...)
    truncated: bool = False


class LocationIndex:
    """Balanced 2-d KD-tree over location centers; immutable once built."""

    def __init__(self, centers, ids):
        centers = np.asarray(centers, dtype=float)
        ids = np.asarray(ids)
        if centers.ndim != 2 or centers.shape[1] != 2:
            raise ValueError(f"centers must have shape (n, 2), got {centers.shape}")
        if len(centers) == 0:
            raise ValueError("cannot index an empty set of locations")
        if len(ids) != len(centers):
            raise ValueError("ids and centers differ in length")
        if not np.all(np.isfinite(centers)):
            raise ValueError("location centers must be finite")
        self.centers = centers
        self.ids = ids
        n = len(centers)
        self._px = centers[:, 0].tolist()
        self._py = centers[:, 1].tolist()
        self._id = ids.tolist()
        self._point = [0] * n
        self._axis = [0] * n
        self._left = [-1] * n
        self._right = [-1] * n
        self._next = 0
        self.root = self._build(np.arange(n), 0)

    def __len__(self):
        return len(self.centers)

    def _build(self, idx: np.ndarray, depth: int) -> int:
        if len(idx) == 0:
            return -1
        axis = depth % 2
        # order by coordinate, then id, so the median choice is deterministic
        order = np.lexsort((self.ids[idx], self.centers[idx, axis]))
        idx = idx[order]
        mid = len(idx) // 2
        node = self._next
        self._next += 1
        self._point[node] = int(idx[mid])
        self._axis[node] = axis
        self._left[node] = self._build(idx[:mid], depth + 1)
        self._right[node] = self._build(idx[mid + 1 :], depth + 1)
        return node

    def query(self, xy, k: int) -> list:
        """k nearest as [(location_id, squared_distance)], nearest first."""
        if k < 1:
            raise ValueError("k must be at least 1")
        qx, qy = float(xy[0]), float(xy[1])
        k = min(k, len(self.centers))
        px, py, pid = self._px, self._py, self._id
        point, axis_of, left, right = self._point, self._axis, self._left, self._right
        heap: list = []  # max-heap on (d2, id) via negation
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node < 0:
                continue
            p = point[node]
            dx = px[p] - qx
            dy = py[p] - qy
            d2 = dx * dx + dy * dy
            lid = pid[p]
            if len(heap) < k:
                heapq.heappush(heap, (-d2, _Neg(lid)))
            else:
                worst_d2 = -heap[0][0]
                if d2 < worst_d2 or (d2 == worst_d2 and lid < heap[0][1].value):
                    heapq.heapreplace(heap, (-d2, _Neg(lid)))
            diff = (qx - px[p]) if axis_of[node] == 0 else (qy - py[p])
            near, far = (left[node], right[node]) if diff < 0 else (right[node], left[node])
            # far side can only help if the splitting plane is within the current worst radius
            if len(heap) < k or diff * diff <= -heap[0][0]:
                stack.append(far)
            stack.append(near)
        out = sorted(((-nd2, neg.value) for nd2, neg in heap))
        return [(lid, d2) for d2, lid in out]


class _Neg:
    """Reverses ordering of a location id inside the max-heap tuples."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def __lt__(self, other):
        return self.value > other.value

    def __eq__(self, other):
        return self.value == other.value


def build_index(locations) -> LocationIndex:
    """Index over ``Location`` objects (uses their Mercator centers)."""
    locations = list(locations)
    if not locations:
        raise ValueError("cannot index an empty set of locations")
    return LocationIndex([loc.center for loc in locations], [loc.id for loc in locations])


def query_topk(index: LocationIndex, xy_o, k: int) -> Prediction:
    """Top-k candidates with distances in the index's coordinate units."""
    hits = index.query(xy_o, k)
    truncated = k > len(index)
    if truncated:
        logger.warning("k=%d exceeds %d candidates; returning all", k, len(index))
    return Prediction(
        (float(xy_o[0]), float(xy_o[1])),
        tuple((lid, float(np.sqrt(d2))) for lid, d2 in hits),
        truncated,
    )


def brute_force_topk(centers, ids, xy, k: int) -> list:
    """Exhaustive scan with the same (distance, id) ordering as the tree."""
    centers = np.asarray(centers, dtype=float)
    d2 = (centers[:, 0] - xy[0]) ** 2 + (centers[:, 1] - xy[1]) ** 2
    order = np.lexsort((np.asarray(ids), d2))[:k]
    return [(np.asarray(ids)[i].item(), float(d2[i])) for i in order]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NEXTLOC_THREADS", "1")))
    except ValueError:
        return 1


def query_many(index: LocationIndex, queries, k: int) -> list:
    """Top-k id lists for many query points, fanned out over NEXTLOC_THREADS workers."""
    queries = np.asarray(queries, dtype=float)

    def run(chunk):
        return [[lid for lid, _ in index.query(q, k)] for q in chunk]

    workers = _threads()
    if workers == 1 or len(queries) < 2 * workers:
        return run(queries)
    chunks = np.array_split(queries, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, chunks))
    return [row for part in parts for row in part]


def hit_at_k(predictions, truths, k: int) -> float:
    """Fraction of cases whose true id is among the first k predicted ids."""
    predictions = list(predictions)
    truths = list(truths)
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not truths:
        return float("nan")
    hits = sum(1 for ranked, truth in zip(predictions, truths) if truth in list(ranked)[:k])
    return hits / len(truths)


def mean_distance(pred_xy, truth_xy, virtual: bool = False) -> float:
    """Mean error in meters: haversine after inverse projection, or planar for virtual grids."""
    pred_xy = np.asarray(pred_xy, dtype=float).reshape(-1, 2)
    truth_xy = np.asarray(truth_xy, dtype=float).reshape(-1, 2)
    if pred_xy.shape != truth_xy.shape:
        raise ValueError("predictions and truths differ in length")
    if len(pred_xy) == 0:
        return float("nan")
    if virtual:
        return float(np.mean(np.hypot(*(pred_xy - truth_xy).T)))
    lon1, lat1 = from_mercator(pred_xy[:, 0], pred_xy[:, 1])
    lon2, lat2 = from_mercator(truth_xy[:, 0], truth_xy[:, 1])
    return float(np.mean(geodesic_distance(lon1, lat1, lon2, lat2)))
