"""Evaluation protocols: reconstruction error, diversity, consistency/error correlation.

Every episode draws its randomness from ``default_rng([seed, episode])`` so
runs are reproducible and different inference modes see the same first noise
group for the same episode.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .infer import InferenceConfig, InferenceTrace, reconstruct
from .losses import TooFewViews, consistency_loss
from .metrics import MetricReport, metric_report
from .model import Critic, Generator
from .train import pretrain_autoencoder, train_multi_view, train_single_view


@dataclass
class TrainedModel:
    gen: Generator
    ae: object
    critic: Critic
    logs: dict          # stage name -> TrainLog


def train_pipeline(dataset, cfg, ae=None, conditional: bool = True, stages: str = "both") -> TrainedModel:
    """Autoencoder (unless given), then single-view and/or multi-view training.

    ``cfg`` is a :class:`condshape.config.RunConfig`; the generator and critic
    are seeded from ``cfg.seed`` so two calls with equal arguments agree bit for bit.
    """
    logs = {}
    mcfg = cfg.model()
    if ae is None:
        ae, logs["autoencoder"] = pretrain_autoencoder(np.stack([r.points for r in dataset.train]),
                                                       cfg.autoencoder(), mcfg)
    gen = Generator(mcfg, ae.decoder, seed=cfg.seed + 1, conditional=conditional)
    critic = Critic(mcfg, seed=cfg.seed + 2)
    if stages in ("both", "single"):
        logs["stage1"] = train_single_view(dataset, gen, ae, critic, cfg.stage1())
    if stages in ("both", "multi"):
        logs["stage2"] = train_multi_view(dataset, gen, ae, critic, cfg.stage2())
    return TrainedModel(gen, ae, critic, logs)


@dataclass
class Episode:
    shape_id: str
    views: tuple
    report: MetricReport
    trace: InferenceTrace

    @property
    def consis(self) -> float:
        return self.trace.final_consis


def choose_views(total: int, n: int, rng) -> np.ndarray:
    """``n`` distinct views in ascending order; all of them when ``n >= total``."""
    if n >= total:
        return np.arange(total)
    return np.sort(rng.choice(total, size=n, replace=False))


def run_episode(gen, dataset, rec, cfg: InferenceConfig, seed: int, index: int, n_views=None) -> Episode:
    rng = np.random.default_rng([seed, index])
    views = choose_views(len(rec.cameras), n_views or cfg.n_views, rng)
    cloud, trace = reconstruct(dataset.images(rec)[views], gen, cfg, rng)
    return Episode(rec.shape_id, tuple(int(v) for v in views), metric_report(cloud, rec.points), trace)


def evaluate(gen, dataset, cfg: InferenceConfig = InferenceConfig(), n_views=None, seed: int = 0,
             records=None) -> list:
    """One episode per test shape (or per record in ``records``)."""
    recs = dataset.test if records is None else records
    return [run_episode(gen, dataset, rec, cfg, seed, i, n_views) for i, rec in enumerate(recs)]


def mean_cd(episodes) -> float:
    return float(np.mean([e.report.cd for e in episodes])) if episodes else float("nan")


INFERENCE_MODES = {
    "no-heuristic": dict(heuristic=False, optimize=False),
    "heuristic": dict(heuristic=True, optimize=False),
    "heuristic+opt": dict(heuristic=True, optimize=True),
}


def inference_table(gen, dataset, cfg: InferenceConfig = InferenceConfig(), seed: int = 0) -> dict:
    """Mean CD x100 and consistency for random init, heuristic init and heuristic + optimisation."""
    out = {}
    for name, flags in INFERENCE_MODES.items():
        eps = evaluate(gen, dataset, replace(cfg, **flags), seed=seed)
        out[name] = dict(cd_x100=100 * mean_cd(eps), consis=float(np.mean([e.consis for e in eps])),
                         episodes=eps)
    return out


def views_sweep(gen, dataset, counts=(1, 2, 4, 8), cfg: InferenceConfig = InferenceConfig(),
                seed: int = 0) -> dict:
    """Mean CD x100 when reconstructing from ``n`` random views, per ``n``."""
    return {n: 100 * mean_cd(evaluate(gen, dataset, cfg, n_views=n, seed=seed)) for n in counts}


def diversity_score(gen, image, k: int = 10, rng=None) -> float:
    """Consistency loss among ``k`` predictions for one image; higher means more diverse."""
    if k < 2:
        raise TooFewViews(f"diversity needs k >= 2 predictions, got {k}")
    image = np.asarray(image, dtype=np.float64).reshape(1, -1)
    frozen = gen.frozen()
    if not gen.conditional:
        return 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    noise = rng.standard_normal((k, gen.cfg.latent_dim))
    pts, _ = frozen(np.repeat(image, k, axis=0), noise)
    return float(consistency_loss(pts).data)


def corpus_diversity(gen, dataset, k: int = 10, seed: int = 0, records=None) -> list:
    """Per-record diversity on view 0 of each test shape."""
    recs = dataset.test if records is None else records
    return [diversity_score(gen, dataset.images(rec)[0], k, np.random.default_rng([seed, i]))
            for i, rec in enumerate(recs)]


def pearson(x, y) -> float:
    """Pearson r, or NaN when either sequence is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def correlate(gen, dataset, episodes: int = 200, n_views: int = 8,
              cfg: InferenceConfig = InferenceConfig(), seed: int = 0):
    """``episodes`` inference runs cycling over test shapes with fresh view subsets.

    Returns ``(list of Episode, pearson r between final consistency and CD)``.
    """
    recs = dataset.test
    if not recs:
        return [], float("nan")
    eps = [run_episode(gen, dataset, recs[i % len(recs)], cfg, seed, i, n_views) for i in range(episodes)]
    return eps, pearson([e.consis for e in eps], [e.report.cd for e in eps])


# -- trend suite -------------------------------------------------------------------

def beta_sweep(dataset, cfg, ae, betas=(0.0, 1.0, 10.0)) -> dict:
    """Corpus-mean diversity after single-view training, per stage-1 diversity weight."""
    out = {}
    for beta in betas:
        values = {**cfg.values, "stage1": {**cfg["stage1"], "beta1": float(beta)}}
        model = train_pipeline(dataset, replace(cfg, values=values), ae, stages="single")
        k = cfg["eval"]["diversity_k"]
        out[beta] = float(np.mean(corpus_diversity(model.gen, dataset, k, cfg.seed)))
    return out


def trend_suite(dataset, cfg, seeds=(0, 1, 2), episodes: int = 200, counts=(1, 2, 4, 8), log=print) -> dict:
    """Every trend measurement on one corpus.

    One autoencoder is shared by all runs; each seed trains a conditional and
    a deterministic generator. Diversity is measured on the seed-0 corpus
    after single-view training; correlation and the views sweep use the
    seed-0 conditional model.
    """
    icfg = cfg.inference()
    ae, _ = pretrain_autoencoder(np.stack([r.points for r in dataset.train]), cfg.autoencoder(), cfg.model())
    res = dict(inference={}, deterministic={}, conditional={})
    models = {}
    for seed in seeds:
        c = cfg.with_seed(seed)
        cond = train_pipeline(dataset, c, ae)
        det = train_pipeline(dataset, c, ae, conditional=False)
        models[seed] = cond
        table = inference_table(cond.gen, dataset, replace(icfg, seed=seed), seed)
        res["inference"][seed] = {k: v["cd_x100"] for k, v in table.items()}
        res["conditional"][seed] = table["heuristic+opt"]["cd_x100"]
        res["deterministic"][seed] = 100 * mean_cd(evaluate(det.gen, dataset, icfg, seed=seed))
        log(f"seed {seed}: {res['inference'][seed]} deterministic {res['deterministic'][seed]:.4f}")
    res["diversity"] = beta_sweep(dataset, cfg.with_seed(seeds[0]), ae)
    log(f"diversity by beta: {res['diversity']}")
    gen = models[seeds[0]].gen
    eps, res["pearson_r"] = correlate(gen, dataset, episodes, icfg.n_views, icfg, seeds[0])
    res["episodes"] = len(eps)
    log(f"pearson r over {len(eps)} episodes: {res['pearson_r']:.4f}")
    res["views"] = views_sweep(gen, dataset, counts, icfg, seeds[0])
    log(f"views sweep: {res['views']}")
    return res
