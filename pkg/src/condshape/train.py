"""Autoencoder pretraining, single-view training and multi-view finetuning."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .losses import (LossWeights, STAGE1_WEIGHTS, STAGE2_WEIGHTS, chamfer_terms, combined_loss,
                     critic_objective, diversity_loss_groups, front_loss_batch, generator_gan_term,
                     interpolate)
from .model import Critic, Generator, ModelConfig, ShapeAutoencoder


class Diverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "single_view"          # autoencoder | single_view | multi_view
    iterations: int = 2000
    batch_shapes: int = 16
    views_per_shape: int = 1
    noises_per_view: int = 5
    weights: LossWeights = STAGE1_WEIGHTS
    lr: float = 1e-3
    critic_lr: float = 1e-3
    critic_steps: int = 1
    seed: int = 0
    div_on_concat: bool = False
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.stage not in ("autoencoder", "single_view", "multi_view"):
            raise ValueError(f"unknown stage {self.stage!r}")


# Settings used for the published ShapeNet runs (kept for reference, not run here).
PAPER_STAGE1 = TrainConfig("single_view", 40_000, 16, 1, 5, STAGE1_WEIGHTS, 1e-4, 1e-4)
PAPER_STAGE2 = TrainConfig("multi_view", 100_000, 2, 8, 5, STAGE2_WEIGHTS, 1e-4, 1e-4)

# Desk-scale presets: small networks, 64 points, one CPU core. The diversity
# margin is scaled by 100: with 64 points and 16-d noise the published margin
# never becomes active against the EMD between two predictions.
DESK_STAGE1_WEIGHTS = replace(STAGE1_WEIGHTS, alpha=100 * STAGE1_WEIGHTS.alpha)
DESK_STAGE2_WEIGHTS = replace(STAGE2_WEIGHTS, alpha=100 * STAGE2_WEIGHTS.alpha)
DESK_AUTOENCODER = TrainConfig("autoencoder", 1500, 16, lr=1e-3)
DESK_STAGE1 = TrainConfig("single_view", 2000, 16, 1, 5, DESK_STAGE1_WEIGHTS, 1e-3, 1e-3)
DESK_STAGE2 = TrainConfig("multi_view", 3000, 2, 8, 5, DESK_STAGE2_WEIGHTS, 1e-3, 1e-3)


class Adam:
    """Adam with bias correction, updating tensors in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


LOG_HEADER = ("iter", "front", "div", "gan", "total", "wall_ms")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, it, report, wall_ms):
        self.rows.append((it, report.front, report.div, report.gan, report.total, wall_ms))

    def to_csv(self, header_lines=(), include_time: bool = True) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER if include_time else LOG_HEADER[:-1])
        for row in self.rows:
            vals = [str(row[0])] + [repr(float(x)) for x in row[1:5]]
            if include_time:
                vals.append(f"{row[5]:.3f}")
            w.writerow(vals)
        return buf.getvalue()

    def column(self, name) -> np.ndarray:
        k = LOG_HEADER.index(name)
        return np.array([r[k] for r in self.rows], dtype=np.float64)


class _Guard:
    def __init__(self, limit=3):
        self.bad, self.limit = 0, limit

    def ok(self, value) -> bool:
        if np.isfinite(value):
            self.bad = 0
            return True
        self.bad += 1
        if self.bad >= self.limit:
            raise Diverged(f"non-finite loss for {self.limit} consecutive iterations")
        return False


# -- stage 0: autoencoder --------------------------------------------------------

def pretrain_autoencoder(shapes, cfg: TrainConfig = DESK_AUTOENCODER,
                         model_cfg: ModelConfig = ModelConfig()):
    """Fit encoder/decoder on ``shapes`` ``(S, N, 3)`` by Chamfer reconstruction.

    Returns ``(autoencoder, log)``; the decoder is frozen afterwards.
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    if shapes.ndim != 3 or len(shapes) == 0:
        raise ValueError("need a non-empty (S, N, 3) array of shapes")
    ae = ShapeAutoencoder(model_cfg, seed=cfg.seed)
    params = list(ae.params.values())
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    log, guard = TrainLog(), _Guard()
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        idx = rng.integers(len(shapes), size=min(cfg.batch_shapes, len(shapes)))
        batch = shapes[idx]
        recon = ae.decode(ae.encode(batch))
        d12, d21 = chamfer_terms(recon, batch)
        loss = ad.mean(ad.add(d12, d21))
        if guard.ok(float(loss.data)):
            opt.step(ad.grad(loss, params))
        log.append(it, combined_loss(loss, 0.0, 0.0, LossWeights()), 1000 * (time.perf_counter() - t0))
    ae.decoder.set_trainable(False)
    ae.encoder.set_trainable(False)
    return ae, log


def reconstruction_cd(ae: ShapeAutoencoder, shapes) -> np.ndarray:
    """Per-shape ``d12 + d21`` (per-point means) of autoencoder round trips."""
    shapes = np.asarray(shapes, dtype=np.float64)
    recon = ae.decode(ae.encode(shapes)).data
    d12, d21 = chamfer_terms(recon, shapes)
    return (d12.data + d21.data) / shapes.shape[1]


# -- shared step -----------------------------------------------------------------

class _Stepper:
    """One generator update (and critic update when gamma > 0) on a prepared batch."""

    def __init__(self, gen: Generator, critic: Critic | None, cfg: TrainConfig):
        self.gen, self.critic, self.cfg = gen, critic, cfg
        self.params = list(gen.params.values())
        self.opt = Adam(self.params, lr=cfg.lr)
        if cfg.weights.gamma > 0:
            if critic is None:
                raise ValueError("gamma > 0 needs a critic")
            self.critic_params = list(critic.params.values())
            self.critic_opt = Adam(self.critic_params, lr=cfg.critic_lr)
        self.guard = _Guard()

    def critic_step(self, z_real, z_fake, rng):
        w = self.cfg.weights
        for _ in range(self.cfg.critic_steps):
            z_hat = interpolate(z_real, z_fake, rng)
            obj = critic_objective(self.critic, z_real, z_fake, w.lam, z_hat)
            self.critic_opt.step(ad.grad(ad.mul(obj, -1.0), self.critic_params))

    def gen_step(self, front, div, z, z_real, rng):
        w = self.cfg.weights
        gan = ad.Tensor(0.0)
        if w.gamma > 0:
            self.critic_step(z_real, z.data, rng)
            self.critic.set_trainable(False)
            gan = generator_gan_term(self.critic, z)
            self.critic.set_trainable(True)
        total = front
        if w.beta > 0:
            total = ad.add(total, ad.mul(div, w.beta))
        if w.gamma > 0:
            total = ad.add(total, ad.mul(gan, w.gamma))
        report = combined_loss(front, div, gan, w)
        if self.guard.ok(report.total):
            self.opt.step(ad.grad(total, self.params))
        return report


def _noises(rng, shape, gen: Generator):
    if not gen.conditional:
        return None
    return rng.standard_normal(shape + (gen.cfg.latent_dim,))


# -- stage 1: single view ----------------------------------------------------------

def train_single_view(dataset, gen: Generator, ae: ShapeAutoencoder | None, critic: Critic | None,
                      cfg: TrainConfig = DESK_STAGE1):
    """Train on random (shape, view) pairs with ``noises_per_view`` inputs each.

    Minimises front + beta * div + gamma * gan over the generator, alternating
    with one critic ascent step. Returns the :class:`TrainLog`.
    """
    rng = np.random.default_rng(cfg.seed)
    recs = dataset.train
    if not recs:
        raise ValueError("dataset has no training shapes")
    k = cfg.noises_per_view if gen.conditional else 1
    z_real_all = _real_latents(ae, recs) if cfg.weights.gamma > 0 else None
    step = _Stepper(gen, critic, cfg)
    log = TrainLog()
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        si = rng.integers(len(recs), size=cfg.batch_shapes)
        vi = rng.integers(len(recs[0].cameras), size=cfg.batch_shapes)
        images = np.stack([dataset.images(recs[s])[v] for s, v in zip(si, vi)])
        noises = _noises(rng, (cfg.batch_shapes, k), gen)
        pts, z = gen(np.repeat(images, k, axis=0),
                     None if noises is None else noises.reshape(cfg.batch_shapes * k, -1))
        cams, fronts = [], []
        for s, v in zip(si, vi):
            rec = recs[s]
            cams += [dataset.sampling_camera(rec.cameras[v])] * k
            fronts += [rec.points[rec.fronts[v]]] * k
        front, _ = front_loss_batch(pts, fronts, cams)
        div = ad.Tensor(0.0)
        if cfg.weights.beta > 0 and k > 1:
            n = pts.shape[-2]
            div = diversity_loss_groups(ad.reshape(pts, (cfg.batch_shapes, k, n, 3)), noises, cfg.weights.alpha)
        z_real = np.repeat(z_real_all[si], k, axis=0) if z_real_all is not None else None
        report = step.gen_step(front, div, z, z_real, rng)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.append(it, report, 1000 * (time.perf_counter() - t0))
    return log


def _real_latents(ae: ShapeAutoencoder, recs) -> np.ndarray:
    if ae is None:
        raise ValueError("gamma > 0 needs a pretrained autoencoder")
    return ae.encode(np.stack([r.points for r in recs])).data


# -- stage 2: multi-view --------------------------------------------------------------

def train_multi_view(dataset, gen: Generator, ae: ShapeAutoencoder | None, critic: Critic | None,
                     cfg: TrainConfig = DESK_STAGE2):
    """Finetune on concatenations of per-view predictions.

    For every shape and noise index the ``V`` per-view clouds are concatenated
    and the front loss is evaluated from each of the ``V`` cameras. Diversity
    pairs are formed per view (or on the concatenations when
    ``cfg.div_on_concat``).
    """
    rng = np.random.default_rng(cfg.seed)
    recs = dataset.train
    if not recs:
        raise ValueError("dataset has no training shapes")
    n_views_total = len(recs[0].cameras)
    v = min(cfg.views_per_shape, n_views_total)
    s_count = min(cfg.batch_shapes, len(recs))
    k = cfg.noises_per_view if gen.conditional else 1
    z_real_all = _real_latents(ae, recs) if cfg.weights.gamma > 0 else None
    step = _Stepper(gen, critic, cfg)
    log = TrainLog()
    n = gen.cfg.n_points
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        si = rng.choice(len(recs), size=s_count, replace=False)
        views = np.stack([np.sort(rng.choice(n_views_total, size=v, replace=False)) for _ in si])
        images = np.stack([dataset.images(recs[s])[vs] for s, vs in zip(si, views)])    # (S, V, P)
        images = np.repeat(images[:, :, None, :], k, axis=2)                            # (S, V, K, P)
        noises = _noises(rng, (s_count, v, k), gen)
        flat_noise = None if noises is None else noises.reshape(s_count * v * k, -1)
        pts, z = gen(images.reshape(s_count * v * k, -1), flat_noise)                   # (S*V*K, N, 3)
        grid = ad.reshape(pts, (s_count, v, k, n, 3))
        concat = ad.reshape(ad.transpose(grid, (0, 2, 1, 3, 4)), (s_count * k, v * n, 3))
        items = ad.gather(concat, np.repeat(np.arange(s_count * k), v), axis=0)       # (S*K*V, V*N, 3)
        cams, fronts = [], []
        for s, vs in zip(si, views):
            rec = recs[s]
            for _ in range(k):
                for view in vs:
                    cams.append(dataset.sampling_camera(rec.cameras[view]))
                    fronts.append(rec.points[rec.fronts[view]])
        front, _ = front_loss_batch(items, fronts, cams)
        div = ad.Tensor(0.0)
        if cfg.weights.beta > 0 and k > 1:
            if cfg.div_on_concat:
                cat_noise = np.transpose(noises, (0, 2, 1, 3)).reshape(s_count, k, -1)
                div = diversity_loss_groups(ad.reshape(concat, (s_count, k, v * n, 3)), cat_noise, cfg.weights.alpha)
            else:
                div = diversity_loss_groups(ad.reshape(grid, (s_count * v, k, n, 3)),
                                            noises.reshape(s_count * v, k, -1), cfg.weights.alpha)
        z_real = np.repeat(z_real_all[si], v * k, axis=0) if z_real_all is not None else None
        report = step.gen_step(front, div, z, z_real, rng)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log.append(it, report, 1000 * (time.perf_counter() - t0))
    return log


# -- checkpoints ---------------------------------------------------------------------

def model_state(gen: Generator, ae: ShapeAutoencoder | None = None, critic: Critic | None = None) -> dict:
    state = gen.full_state()
    state["meta.conditional"] = np.array([1.0 if gen.conditional else 0.0])
    if ae is not None:
        state.update({f"ae.{k}": v for k, v in ae.state().items()})
    if critic is not None:
        state.update({f"critic.{k}": v.data.copy() for k, v in critic.params.items()})
    return state


def save_model(path, gen, ae=None, critic=None) -> None:
    ad.save_checkpoint(path, model_state(gen, ae, critic))


def load_model(path, model_cfg: ModelConfig = ModelConfig()):
    """Return ``(generator, autoencoder or None, critic or None)`` from a checkpoint."""
    state = ad.load_checkpoint(path)
    conditional = bool(state.get("meta.conditional", np.array([1.0]))[0])
    ae = ShapeAutoencoder(model_cfg)
    if any(k.startswith("ae.") for k in state):
        ae.load_state({k[3:]: v for k, v in state.items() if k.startswith("ae.")})
    else:
        ae.decoder.load_state(state, "decoder.")
    gen = Generator(model_cfg, ae.decoder, conditional=conditional)
    gen.load_state(state, "gen.")
    critic = None
    if any(k.startswith("critic.") for k in state):
        critic = Critic(model_cfg)
        critic.load_state(state, "critic.")
    has_ae = any(k.startswith("ae.") for k in state)
    return gen, (ae if has_ae else None), critic
