"""Training and inference objectives built on the autodiff engine.

Nearest-neighbour indices (Chamfer), matchings (EMD) and view-based sampling
indices are all fixed during the forward pass; gradients flow through the
coordinates of whichever points they select.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import SizeMismatch, emd, fps
from .render import front_masks, view_based_sample

_BIG = 1e12


class EmptyFront(ValueError):
    pass


class TooFewViews(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2     # diversity margin scale
    beta: float = 10.0     # diversity weight
    gamma: float = 0.1     # adversarial weight
    lam: float = 10.0      # gradient-penalty weight

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")


STAGE1_WEIGHTS = LossWeights(alpha=0.2, beta=10.0, gamma=0.1, lam=10.0)
STAGE2_WEIGHTS = LossWeights(alpha=0.1, beta=1.0, gamma=0.1, lam=10.0)
DIVERSE_WEIGHTS = LossWeights(alpha=15.0, beta=0.5, gamma=0.1, lam=10.0)


@dataclass(frozen=True)
class LossReport:
    front: float
    div: float
    gan: float
    total: float
    consis: float = 0.0


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- Chamfer -------------------------------------------------------------------

def _sqdist_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # expanded form; only used to pick neighbours and matchings, the selected
    # distances are recomputed exactly inside the graph
    d = (a * a).sum(-1)[..., :, None] + (b * b).sum(-1)[..., None, :]
    for k in range(a.shape[-1]):      # batched matmul is slow for a 3-wide inner axis
        d -= 2.0 * a[..., :, None, k] * b[..., None, :, k]
    return np.maximum(d, 0.0)


def _batched_take(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b, i] = x[b, idx[b, i]]`` for ``x`` shaped ``(B, M, 3)``."""
    bsz, m, _ = x.shape
    flat = ad.reshape(x, (bsz * m, 3))
    return ad.gather(flat, np.arange(bsz)[:, None] * m + idx, axis=0)


def _nn_dist(a: Tensor, b: Tensor, nn: np.ndarray) -> Tensor:
    diff = ad.sub(a, _batched_take(b, nn))
    return ad.sqrt(ad.reduce_sum(ad.mul(diff, diff), axis=-1))


def chamfer_terms(a, b, mask_a=None, mask_b=None):
    """Directed first-order Chamfer sums for batched sets ``(..., N, 3)``, ``(..., M, 3)``.

    Optional boolean masks drop padded points. Nearest neighbours are found
    on the raw arrays (lowest index on ties) and only the selected pairs enter
    the graph. Returns ``(d_ab, d_ba)`` tensors of the batch shape.
    """
    a, b = _t(a), _t(b)
    lead = a.shape[:-2]
    if b.shape[:-2] != lead:
        raise ad.ShapeMismatch(f"chamfer of {a.shape} and {b.shape}")
    bsz = int(np.prod(lead)) if lead else 1
    n, m = a.shape[-2], b.shape[-2]
    a3, b3 = ad.reshape(a, (bsz, n, 3)), ad.reshape(b, (bsz, m, 3))
    d = _sqdist_np(a3.data, b3.data)
    ma = None if mask_a is None else np.asarray(mask_a, dtype=bool).reshape(bsz, n)
    mb = None if mask_b is None else np.asarray(mask_b, dtype=bool).reshape(bsz, m)
    nn_ab = np.argmin(d if mb is None else d + _BIG * ~mb[:, None, :], axis=2)
    nn_ba = np.argmin(d if ma is None else d + _BIG * ~ma[:, :, None], axis=1)
    near_ab = _nn_dist(a3, b3, nn_ab)
    near_ba = _nn_dist(b3, a3, nn_ba)
    if ma is not None:
        near_ab = ad.mul(near_ab, ma.astype(np.float64))
    if mb is not None:
        near_ba = ad.mul(near_ba, mb.astype(np.float64))
    return (ad.reshape(ad.reduce_sum(near_ab, axis=-1), lead),
            ad.reshape(ad.reduce_sum(near_ba, axis=-1), lead))


def chamfer_loss(s1, s2) -> Tensor:
    """Differentiable first-order Chamfer distance between two clouds."""
    d12, d21 = chamfer_terms(s1, s2)
    return ad.add(d12, d21)


# -- front constraint ----------------------------------------------------------

def emd_loss(s1, s2) -> Tensor:
    """Sum of squared distances under the optimal matching (matching held fixed)."""
    s1, s2 = _t(s1), _t(s2)
    match = emd(s1.data, s2.data)
    diff = ad.sub(s1, ad.gather(s2, match.assignment, axis=0))
    return ad.reduce_sum(ad.mul(diff, diff))


def front_loss(pred, gt, cam, metric: str = "cd") -> Tensor:
    """Distance between the view-sampled front of ``pred`` and of ``gt`` under ``cam``."""
    pred = _t(pred)
    gt = np.asarray(gt, dtype=np.float64)
    pf = view_based_sample(pred.data, cam).front_indices
    gf = view_based_sample(gt, cam).front_indices
    if pf.size == 0:
        raise EmptyFront("no predicted point is visible from this camera")
    if gf.size == 0:
        raise EmptyFront("no ground-truth point is visible from this camera")
    pred_front = ad.gather(pred, pf, axis=0)
    gt_front = gt[gf]
    if metric == "cd":
        return chamfer_loss(pred_front, gt_front)
    if metric == "emd":
        if pf.size > gf.size:
            pred_front = ad.gather(pred_front, fps(pred_front.data, gf.size), axis=0)
        elif gf.size > pf.size:
            gt_front = gt_front[fps(gt_front, pf.size)]
        return emd_loss(pred_front, gt_front)
    raise ValueError(f"unknown metric {metric!r}")


def pad_sets(sets):
    """Stack ragged ``(M_i, 3)`` arrays into ``(B, max M, 3)`` plus a validity mask."""
    m = max(1, max(len(s) for s in sets))
    out = np.zeros((len(sets), m, 3))
    mask = np.zeros((len(sets), m), dtype=bool)
    for i, s in enumerate(sets):
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask


def front_loss_batch(pred, gt_fronts, cams):
    """Mean front Chamfer over a batch.

    ``pred`` is ``(B, N, 3)``; ``gt_fronts[b]`` is the already-sampled ground
    truth front of item ``b`` and ``cams[b]`` its sampling camera. Items whose
    prediction has no visible point contribute zero. Returns ``(loss, per_item)``.
    """
    pred = _t(pred)
    bsz, n, _ = pred.shape
    mask_p = front_masks(pred.data, cams)
    counts = mask_p.sum(axis=1)
    f = max(1, int(counts.max()))
    # compact each item's front points to the left; padding repeats index 0
    order = np.argsort(~mask_p, axis=1, kind="stable")[:, :f]
    mask_f = np.arange(f)[None, :] < counts[:, None]
    pred_front = _batched_take(pred, np.where(mask_f, order, 0))
    gt, mask_g = pad_sets(gt_fronts)
    ok = mask_f.any(axis=1) & mask_g.any(axis=1)
    d_pg, d_gp = chamfer_terms(pred_front, gt, mask_f & ok[:, None], mask_g & ok[:, None])
    per_item = ad.add(d_pg, d_gp)
    return ad.mean(per_item), per_item.data


def occlusion_pair(cam, n: int = 16, shift: float = 0.3, seed: int = 0):
    """``(pred, gt)`` with identical fronts under ``cam`` but different backs.

    Both clouds hold ``n`` front points on distinct pixel rays plus one hidden
    point behind each of them on the same ray; ``pred`` pushes its hidden
    points ``shift`` further back. The front loss of the pair is exactly 0
    while the full Chamfer distance is positive.
    """
    rng = np.random.default_rng(seed)
    pix = rng.choice(cam.width * cam.height, size=n, replace=False)
    rows, cols = np.divmod(pix, cam.width)
    rays = np.stack([(cols + 0.5 - cam.cx) / cam.fx, (rows + 0.5 - cam.cy) / cam.fy, np.ones(n)], axis=1)
    base = float(np.linalg.norm(cam.translation))

    def world(depth):
        return (rays * depth[:, None] - cam.translation) @ cam.rotation

    front = world(np.full(n, base - 0.2))
    gt = np.concatenate([front, world(np.full(n, base + 0.1))])
    pred = np.concatenate([front, world(np.full(n, base + 0.1 + shift))])
    return pred, gt


# -- diversity -----------------------------------------------------------------

def diversity_loss(r1, r2, s1, s2, alpha: float) -> Tensor:
    """Hinge ``max(0, |r1 - r2| - alpha * EMD(s1, s2))``."""
    s1, s2 = _t(s1), _t(s2)
    if s1.shape != s2.shape:
        raise SizeMismatch(f"diversity needs equal-size clouds, got {s1.shape} and {s2.shape}")
    dr = ad.sub(_t(r1), _t(r2))
    margin = ad.sqrt(ad.reduce_sum(ad.mul(dr, dr)))
    return ad.relu(ad.sub(margin, ad.mul(emd_loss(s1, s2), alpha)))


def diversity_loss_groups(points, noises, alpha: float) -> Tensor:
    """Mean hinge over all unordered pairs inside each group.

    ``points`` is ``(G, K, N, 3)`` (K predictions of one image per group),
    ``noises`` the matching ``(G, K, d)`` input vectors (constants).
    """
    points = _t(points)
    g, k, n, _ = points.shape
    if k < 2:
        return Tensor(0.0)
    noises = np.asarray(noises, dtype=np.float64)
    pairs = np.array(list(combinations(range(k), 2)))
    ga = np.repeat(np.arange(g), len(pairs))
    ia = np.tile(pairs[:, 0], g) + ga * k
    ib = np.tile(pairs[:, 1], g) + ga * k
    flat = ad.reshape(points, (g * k, n, 3))
    costs = _sqdist_np(flat.data[ia], flat.data[ib])
    perm = np.stack([linear_sum_assignment(c)[1] for c in costs])
    sa = ad.gather(flat, ia, axis=0)
    sb = ad.gather(ad.reshape(flat, (g * k * n, 3)), (ib[:, None] * n + perm), axis=0)
    diff = ad.sub(sa, sb)
    cost = ad.reduce_sum(ad.mul(diff, diff), axis=(1, 2))
    nflat = noises.reshape(g * k, -1)
    margin = np.linalg.norm(nflat[ia] - nflat[ib], axis=1)
    return ad.mean(ad.relu(ad.sub(margin, ad.mul(cost, alpha))))


# -- latent-space adversarial term -----------------------------------------------

def gradient_penalty(critic, z_hat) -> Tensor:
    """``mean (|grad D(z_hat)| - 1)^2`` as a graph differentiable in critic weights."""
    g = critic.input_gradient_graph(z_hat)
    norm = ad.sqrt(ad.reduce_sum(ad.mul(g, g), axis=-1))
    dev = ad.sub(norm, 1.0)
    return ad.mean(ad.mul(dev, dev))


def interpolate(z_real, z_fake, rng: np.random.Generator) -> np.ndarray:
    z_real, z_fake = np.asarray(z_real), np.asarray(z_fake)
    eps = rng.uniform(size=(z_real.shape[0], 1))
    return eps * z_real + (1.0 - eps) * z_fake


def critic_objective(critic, z_real, z_fake, lam: float, z_hat) -> Tensor:
    """``-E D(z_fake) + E D(z_real) - lam * GP``; the critic ascends this."""
    fake = ad.mean(critic(_t(z_fake)))
    real = ad.mean(critic(_t(z_real)))
    obj = ad.add(ad.mul(fake, -1.0), real)
    if lam > 0:
        obj = ad.sub(obj, ad.mul(gradient_penalty(critic, z_hat), lam))
    return obj


def generator_gan_term(critic, z_fake) -> Tensor:
    """``-E D(z_fake)``: the part of the adversarial loss that depends on the generator."""
    return ad.mul(ad.mean(critic(_t(z_fake))), -1.0)


def gan_loss(critic, z_fake, z_real, lam: float, rng: np.random.Generator):
    """``(generator_term, critic_term)`` for a batch of paired fake/real latents."""
    z_hat = interpolate(_t(z_real).data, _t(z_fake).data, rng)
    return generator_gan_term(critic, z_fake), critic_objective(critic, z_real, z_fake, lam, z_hat)


# -- consistency ---------------------------------------------------------------

def consistency_loss(shapes) -> Tensor:
    """Mean first-order Chamfer distance over all unordered pairs of shapes."""
    if isinstance(shapes, Tensor):
        stacked = shapes
    else:
        shapes = [_t(s) for s in shapes]
        if len(shapes) < 2:
            raise TooFewViews(f"consistency needs at least 2 shapes, got {len(shapes)}")
        if len({s.shape for s in shapes}) != 1:
            total = Tensor(0.0)
            for a, b in combinations(shapes, 2):
                total = ad.add(total, chamfer_loss(a, b))
            return ad.mul(total, 2.0 / (len(shapes) * (len(shapes) - 1)))
        stacked = ad.concat([ad.reshape(s, (1,) + s.shape) for s in shapes], axis=0)
    n = stacked.shape[0]
    if n < 2:
        raise TooFewViews(f"consistency needs at least 2 shapes, got {n}")
    pairs = np.array(list(combinations(range(n), 2)))
    d12, d21 = chamfer_terms(ad.gather(stacked, pairs[:, 0], axis=0), ad.gather(stacked, pairs[:, 1], axis=0))
    return ad.mean(ad.add(d12, d21))


def consistency_value(shapes) -> float:
    return float(consistency_loss(np.asarray(shapes, dtype=np.float64)
                                  if not isinstance(shapes, list) else shapes).data)


# -- total ---------------------------------------------------------------------

def combined_loss(front, div, gan, weights: LossWeights, consis: float = 0.0) -> LossReport:
    f, d, g = (float(x.data) if isinstance(x, Tensor) else float(x) for x in (front, div, gan))
    return LossReport(f, d, g, f + weights.beta * d + weights.gamma * g, float(consis))
