"""Point-set distances: first-order Chamfer, Earth Mover's, farthest point sampling."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geom import PointCloud, as_points

EXACT_EMD_THRESHOLD = 512


class EmptyCloud(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


class BadK(ValueError):
    pass


def _nonempty(points) -> np.ndarray:
    if not isinstance(points, PointCloud) and np.size(points) == 0:
        raise EmptyCloud("point cloud is empty")
    return as_points(points)


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances ``|a_i - b_j|^2`` computed from explicit differences.

    Components are added in x, y, z order so every entry is reproducible.
    """
    diff = a[:, None, :] - b[None, :, :]
    sq = diff * diff
    return (sq[..., 0] + sq[..., 1]) + sq[..., 2]


def chamfer(s1, s2, reduction: str = "sum"):
    """First-order Chamfer distance, returned as the two directed terms.

    ``d12`` sums, over points of ``s1``, the Euclidean (unsquared) distance to
    the nearest point of ``s2``; ``d21`` is the reverse. With
    ``reduction="mean"`` each term is divided by its point count instead.
    """
    a, b = _nonempty(s1), _nonempty(s2)
    d = np.sqrt(pairwise_sqdist(a, b))
    d12, d21 = d.min(axis=1), d.min(axis=0)
    # correctly rounded sums, independent of point order
    if reduction == "sum":
        return math.fsum(d12), math.fsum(d21)
    if reduction == "mean":
        return math.fsum(d12) / len(a), math.fsum(d21) / len(b)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class Matching:
    """A bijection ``s1[i] -> s2[assignment[i]]`` and its squared-distance cost.

    ``gap`` bounds ``cost - optimum``; it is 0 for the exact solver.
    """

    assignment: np.ndarray
    cost: float
    gap: float = 0.0


def _auction(cost: np.ndarray, eps_final: float, max_rounds: int = 100_000):
    """Forward auction with epsilon scaling (Jacobi bidding) for min-cost assignment.

    Returns ``(assignment, dual_lower_bound)``.
    """
    n = cost.shape[0]
    benefit = -cost
    prices = np.zeros(n)
    eps = max(float(np.ptp(cost)) / 4.0, eps_final)
    while True:
        owner = np.full(n, -1)
        assigned = np.full(n, -1)
        for _ in range(max_rounds):
            free = np.flatnonzero(assigned < 0)
            if free.size == 0:
                break
            values = benefit[free] - prices
            best = np.argmax(values, axis=1)
            best_val = values[np.arange(free.size), best]
            values[np.arange(free.size), best] = -np.inf
            second = values.max(axis=1) if n > 1 else best_val
            bids = prices[best] + best_val - second + eps
            # highest bid per object wins; ties go to the lowest bidder index
            order = np.lexsort((free, -bids, best))
            first = np.ones(order.size, dtype=bool)
            first[1:] = best[order][1:] != best[order][:-1]
            win = order[first]
            for k in win:
                obj, bidder = best[k], free[k]
                if owner[obj] >= 0:
                    assigned[owner[obj]] = -1
                owner[obj] = bidder
                assigned[bidder] = obj
                prices[obj] = bids[k]
        else:
            raise RuntimeError("auction did not converge")
        if eps <= eps_final:
            break
        eps = max(eps / 5.0, eps_final)
    profits = (benefit - prices).max(axis=1)
    lower_bound = -(profits.sum() + prices.sum())
    return assigned, lower_bound


def emd(s1, s2, exact_threshold: int = EXACT_EMD_THRESHOLD, eps: float | None = None) -> Matching:
    """Minimum-cost perfect matching under squared Euclidean cost.

    Exact (Hungarian-type solver) up to ``exact_threshold`` points; above
    that an epsilon-scaling auction is used and ``Matching.gap`` holds the
    primal-dual gap.
    """
    a, b = _nonempty(s1), _nonempty(s2)
    if a.shape[0] != b.shape[0]:
        raise SizeMismatch(f"EMD needs equal counts, got {a.shape[0]} and {b.shape[0]}")
    cost = pairwise_sqdist(a, b)
    n = a.shape[0]
    if n <= exact_threshold:
        _, cols = linear_sum_assignment(cost)
        return Matching(cols, float(cost[np.arange(n), cols].sum()), 0.0)
    if eps is None:
        eps = 1e-6 * max(float(cost.max()), 1e-12) / n
    cols, lower = _auction(cost, eps)
    total = float(cost[np.arange(n), cols].sum())
    return Matching(cols, total, max(total - lower, 0.0))


def fps_start(points) -> int:
    """Lowest index among the points farthest from the centroid."""
    pts = _nonempty(points)
    d = np.einsum("ij,ij->i", pts - pts.mean(axis=0), pts - pts.mean(axis=0))
    return int(np.argmax(d))


def fps(points, k: int, start: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling; ties resolve to the lowest index."""
    pts = _nonempty(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise BadK(f"k must lie in [1, {n}], got {k}")
    if start is None:
        start = fps_start(pts)
    if not 0 <= start < n:
        raise IndexError(f"start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    mind = np.einsum("ij,ij->i", pts - pts[start], pts - pts[start])
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        diff = pts - pts[nxt]
        mind = np.minimum(mind, np.einsum("ij,ij->i", diff, diff))
    return chosen


def fps_cd(pred, gt, reduction: str = "sum") -> float:
    """Chamfer distance after FPS-downsampling the larger cloud to the smaller count."""
    p, g = _nonempty(pred), _nonempty(gt)
    if p.shape[0] > g.shape[0]:
        p = p[fps(p, g.shape[0])]
    elif g.shape[0] > p.shape[0]:
        g = g[fps(g, p.shape[0])]
    return float(sum(chamfer(p, g, reduction=reduction)))


@dataclass(frozen=True)
class MetricReport:
    """Per-shape reconstruction error, per-point means of first-order distances."""

    gt_to_pred: float
    pred_to_gt: float
    cd: float
    fps_cd: float

    CSV_HEADER = ("shape_id", "gt_to_pred", "pred_to_gt", "cd_x100", "fps_cd_x100")

    def csv_row(self, shape_id) -> list:
        return [str(shape_id), repr(self.gt_to_pred), repr(self.pred_to_gt),
                repr(100.0 * self.cd), repr(100.0 * self.fps_cd)]


def metric_report(pred, gt) -> MetricReport:
    pred_to_gt, gt_to_pred = chamfer(pred, gt, reduction="mean")
    return MetricReport(gt_to_pred, pred_to_gt, gt_to_pred + pred_to_gt,
                        fps_cd(pred, gt, reduction="mean"))


def reports_to_csv(rows, header_lines=()) -> str:
    """Serialise ``[(shape_id, MetricReport), ...]`` with optional ``#`` comment lines."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricReport.CSV_HEADER)
    for shape_id, rep in rows:
        writer.writerow(rep.csv_row(shape_id))
    return buf.getvalue()
