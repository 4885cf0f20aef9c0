"""Multi-view reconstruction with a frozen conditional generator.

Each input view gets its own random input vector. A few independent groups of
vectors are drawn and the group whose per-view shapes agree best (lowest
consistency loss) is kept; the vectors are then refined by gradient descent
on that same loss while the generator stays frozen. The answer is the
concatenation of the per-view clouds. No camera pose is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geom import PointCloud
from .losses import consistency_loss
from .model import Generator


@dataclass(frozen=True)
class InferenceConfig:
    n_views: int = 8
    groups: int = 5
    opt_steps: int = 300
    opt_lr: float = 1.0
    convergence_tol: float = 1e-4   # relative decrease over ``window`` accepted steps
    window: int = 10
    max_halvings: int = 10
    heuristic: bool = True          # False: a single random group
    optimize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")


@dataclass
class InferenceTrace:
    group_index: int = 0
    group_losses: list = field(default_factory=list)
    init_noise: np.ndarray | None = None
    final_noise: np.ndarray | None = None
    init_consis: float = float("nan")
    steps: list = field(default_factory=list)     # (step, consis after step, accepted)
    points: np.ndarray | None = None

    @property
    def final_consis(self) -> float:
        return self.steps[-1][1] if self.steps else self.init_consis

    @property
    def accepted_steps(self) -> int:
        return sum(1 for s in self.steps if s[2])

    def to_csv(self, header_lines=()) -> str:
        lines = [f"# {h}" for h in header_lines] + ["step,consis,accepted"]
        lines.append(f"0,{self.init_consis!r},1")
        lines += [f"{i},{c!r},{int(a)}" for i, c, a in self.steps]
        return "\n".join(lines) + "\n"


def _images(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(len(images), -1)


def _consis(gen: Generator, images, noise) -> float:
    if len(images) < 2:
        return 0.0
    pts, _ = gen(images, noise)
    return float(consistency_loss(pts).data)


def heuristic_init(images, gen: Generator, cfg: InferenceConfig = InferenceConfig(), rng=None):
    """Pick the best of ``cfg.groups`` independent noise groups.

    Returns ``(noise (n, d), group_index, group_losses)``. With a single view
    the consistency loss is undefined: the first draw is returned and the
    losses are NaN.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    images = _images(images)
    n, d = len(images), gen.cfg.latent_dim
    groups = rng.standard_normal((cfg.groups if cfg.heuristic else 1, n, d))
    if n < 2:
        return groups[0], 0, [float("nan")] * len(groups)
    frozen = gen.frozen()
    pts, _ = frozen(np.tile(images, (len(groups), 1)), groups.reshape(-1, d))
    pts = ad.reshape(pts, (len(groups), n) + pts.shape[-2:])
    losses = [float(consistency_loss(pts[g]).data) for g in range(len(groups))]
    best = int(np.argmin(losses))
    return groups[best], best, losses


def optimize_latents(images, gen: Generator, noise, cfg: InferenceConfig = InferenceConfig()):
    """Gradient descent on the consistency loss w.r.t. the noise vectors only.

    Each step starts at twice the last accepted step size (capped at
    ``cfg.opt_lr``) and is halved until the loss does not increase, at most
    ``cfg.max_halvings`` times; if no step is accepted the search stops.
    Returns ``(noise, trace)``.
    """
    images = _images(images)
    r = np.array(noise, dtype=np.float64)
    before = gen.full_checksum()
    frozen = gen.frozen()
    trace = InferenceTrace(init_noise=r.copy())
    if len(images) < 2:
        trace.final_noise = r
        return r, trace

    def forward(x):
        rt = Tensor(x, requires_grad=True)
        return rt, consistency_loss(frozen(images, rt)[0])

    rt, loss = forward(r)
    cur, g = float(loss.data), ad.grad(loss, [rt])[0]
    trace.init_consis = cur
    history = [cur]
    lr = cfg.opt_lr
    for step in range(1, cfg.opt_steps + 1):
        if cur == 0.0 or not np.any(g):
            break
        lr, accepted = min(cfg.opt_lr, 2.0 * lr), False
        for _ in range(cfg.max_halvings + 1):
            cand = r - lr * g
            rt, loss = forward(cand)
            if float(loss.data) <= cur:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            trace.steps.append((step, cur, False))
            break
        r, cur, g = cand, float(loss.data), ad.grad(loss, [rt])[0]
        trace.steps.append((step, cur, True))
        history.append(cur)
        if len(history) > cfg.window:
            old = history[-1 - cfg.window]
            if old == 0.0 or (old - cur) / old < cfg.convergence_tol:
                break
    if gen.full_checksum() != before:
        raise RuntimeError("generator parameters changed during inference")
    trace.final_noise = r
    return r, trace


def reconstruct(images, gen: Generator, cfg: InferenceConfig = InferenceConfig(), rng=None):
    """Concatenated per-view clouds for views of one object; returns ``(PointCloud, trace)``."""
    images = _images(images)
    frozen = gen.frozen()
    if not gen.conditional:
        pts, _ = frozen(images, None)
        trace = InferenceTrace()
        trace.init_consis = _consis(frozen, images, None)
        trace.points = pts.data.reshape(-1, 3)
        return PointCloud(trace.points), trace
    noise, idx, losses = heuristic_init(images, gen, cfg, rng)
    if cfg.optimize:
        noise, trace = optimize_latents(images, gen, noise, cfg)
    else:
        trace = InferenceTrace(init_noise=noise.copy(), final_noise=noise.copy(),
                               init_consis=_consis(frozen, images, noise))
    trace.group_index, trace.group_losses = idx, losses
    trace.points = frozen(images, noise)[0].data.reshape(-1, 3)
    return PointCloud(trace.points), trace
