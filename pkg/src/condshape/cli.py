"""``condshape`` command line: data generation, training, inference and evaluation.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical
divergence, 4 I/O failure. Every text output starts with ``#`` provenance
lines carrying the package version, the config hash and the seed.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .config import ConfigError, RunConfig, load_config
from .geom import Camera, PointCloud
from .infer import reconstruct
from .losses import TooFewViews
from .metrics import metric_report, reports_to_csv
from .render import read_pgm, render_depth, write_pgm
from .synthdata import build_dataset, depth_range, generate_dataset, image_input, load_dataset
from .train import Diverged, load_model, save_model

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def provenance(cfg: RunConfig, command: str) -> list:
    return [f"condshape {__version__} {command}", f"config {cfg.digest}", f"seed {cfg.seed}"]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(path)


def _dataset(args, cfg: RunConfig):
    if args.data:
        return load_dataset(args.data)
    d = cfg["data"]
    return generate_dataset(d["shapes"], cfg.families(), cfg.ring(), symmetric=d["symmetric"],
                            sample_resolution=d["sample_resolution"], seed=cfg.seed)


def _csv(header, rows) -> str:
    lines = [f"# {h}" for h in header[0]] + [",".join(header[1])]
    lines += [",".join(str(x) for x in row) for row in rows]
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "NA" if not np.isfinite(x) else repr(float(x))


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    d = cfg["data"]
    manifest = build_dataset(d["shapes"], cfg.families(), cfg.ring(), _out(args), symmetric=d["symmetric"],
                             sample_resolution=d["sample_resolution"], seed=cfg.seed)
    rows = [l for l in manifest.splitlines() if l and not l.startswith("#")]
    print(f"{len(rows) - 1} shapes written to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out(args)
    ds = _dataset(args, cfg)
    head = provenance(cfg, "train")
    model = ex.train_pipeline(ds, cfg, conditional=not args.deterministic, stages=args.stages)
    timing = []
    for stage, log in model.logs.items():
        _write(out / f"{stage}_log.csv", log.to_csv(head, include_time=False))
        timing.append((stage, sum(r[5] for r in log.rows)))
    save_model(out / "model.ckpt", model.gen, model.ae, model.critic)
    print(out / "model.ckpt")
    # wall-clock time is kept out of the logs so that those stay reproducible
    (out / "timing.txt").write_text("".join(f"{k} {v:.1f} ms\n" for k, v in timing))
    return EXIT_OK


def _load(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    gen, _, _ = load_model(args.checkpoint)
    return gen


def cmd_infer(args, cfg: RunConfig) -> int:
    gen = _load(args)
    ds = _dataset(args, cfg)
    recs = {r.shape_id: r for r in ds.records}
    shape = args.shape or (ds.test or ds.records)[0].shape_id
    if shape not in recs:
        raise ConfigError(f"unknown shape id {shape!r}")
    rec = recs[shape]
    icfg = cfg.inference()
    views = ex.choose_views(len(rec.cameras), args.views or icfg.n_views, np.random.default_rng(cfg.seed))
    cloud, trace = reconstruct(ds.images(rec)[views], gen, icfg, np.random.default_rng(cfg.seed))
    out = _out(args)
    head = provenance(cfg, "infer")
    cloud.to_ply(out / f"{shape}_recon.ply")
    _write(out / f"{shape}_trace.csv", trace.to_csv(head))
    rep = metric_report(cloud, rec.points)
    summary = [f"# {h}" for h in head] + [
        f"shape_id = {shape}", f"n_views = {len(views)}", f"init_consis = {_fmt(trace.init_consis)}",
        f"final_consis = {_fmt(trace.final_consis)}", f"cd_x100 = {rep.cd * 100!r}",
        f"fps_cd_x100 = {rep.fps_cd * 100!r}"]
    _write(out / f"{shape}_summary.txt", "\n".join(summary) + "\n")
    return EXIT_OK


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _eval_csv(episodes, head) -> str:
    return reports_to_csv([(e.shape_id, e.report) for e in episodes], head)


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    out = _out(args)
    head = provenance(cfg, "eval")
    n = args.views or cfg.inference().n_views
    runs = [("a", args.checkpoint)] + ([("b", args.compare)] if args.compare else [])
    means = {}
    for tag, ckpt in runs:
        gen, _, _ = load_model(ckpt)
        eps = ex.evaluate(gen, ds, cfg.inference(), n_views=n, seed=cfg.seed)
        name = "metrics.csv" if tag == "a" else "metrics_compare.csv"
        _write(out / name, _eval_csv(eps, head + [f"checkpoint {_digest(ckpt)}", f"views {n}"]))
        means[tag] = 100 * ex.mean_cd(eps)
    if args.compare:
        rows = [("a", args.checkpoint, _fmt(means["a"])), ("b", args.compare, _fmt(means["b"])),
                ("delta_a_minus_b", "", _fmt(means["a"] - means["b"]))]
        _write(out / "paired_summary.csv", _csv((head, ("run", "checkpoint", "mean_cd_x100")), rows))
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    if not (args.ply and args.camera):
        raise ConfigError("render needs --ply and --camera")
    cam = Camera.load(args.camera)
    dm = render_depth(PointCloud.from_ply(args.ply).points, cam)
    znear, zfar = depth_range(cfg.ring())
    out = Path(args.out)
    if out.suffix.lower() != ".pgm":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "render.pgm"
    write_pgm(out, dm.depth, znear, zfar)
    print(out)
    return EXIT_OK


def cmd_diversity(args, cfg: RunConfig) -> int:
    gen = _load(args)
    k = args.k or cfg["eval"]["diversity_k"]
    head = provenance(cfg, "diversity")
    if args.image:
        depth, znear, zfar = read_pgm(args.image)
        value = ex.diversity_score(gen, image_input(depth, znear, zfar, gen.cfg.image_size), k,
                                   np.random.default_rng(cfg.seed))
        rows = [(Path(args.image).name, _fmt(value))]
    else:
        ds = _dataset(args, cfg)
        if k < 2:
            raise TooFewViews(f"diversity needs k >= 2 predictions, got {k}")
        vals = ex.corpus_diversity(gen, ds, k, cfg.seed)
        rows = [(r.shape_id, _fmt(v)) for r, v in zip(ds.test, vals)]
        rows.append(("mean", _fmt(float(np.mean(vals)) if vals else float("nan"))))
    _write(_out(args) / "diversity.csv", _csv((head + [f"k {k}"], ("shape_id", "diversity")), rows))
    return EXIT_OK


def cmd_correlate(args, cfg: RunConfig) -> int:
    gen = _load(args)
    ds = _dataset(args, cfg)
    out = _out(args)
    head = provenance(cfg, "correlate")
    icfg = cfg.inference()
    n = args.views or icfg.n_views
    episodes = args.episodes or cfg["eval"]["episodes"]
    eps, r = ex.correlate(gen, ds, episodes, n, icfg, cfg.seed)
    rows = [(i, e.shape_id, _fmt(e.consis), _fmt(100 * e.report.cd)) for i, e in enumerate(eps)]
    _write(out / "scatter.csv", _csv((head + [f"views {n}", f"pearson_r {_fmt(r)}"],
                                      ("episode", "shape_id", "consis", "cd_x100")), rows))
    table = ex.inference_table(gen, ds, icfg, cfg.seed)
    rows = [(name, _fmt(v["consis"]), _fmt(v["cd_x100"])) for name, v in table.items()]
    _write(out / "inference_table.csv", _csv((head, ("mode", "mean_consis", "mean_cd_x100")), rows))
    print(f"pearson_r {_fmt(r)}")
    return EXIT_OK


def cmd_views_sweep(args, cfg: RunConfig) -> int:
    gen = _load(args)
    ds = _dataset(args, cfg)
    counts = [n for n in (1, 2, 4, 8) if n <= cfg["data"]["view_count"]]
    sweep = ex.views_sweep(gen, ds, counts, cfg.inference(), cfg.seed)
    rows = [(n, _fmt(v)) for n, v in sweep.items()]
    _write(_out(args) / "views_sweep.csv", _csv((provenance(cfg, "views-sweep"), ("views", "mean_cd_x100")), rows))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "render": cmd_render, "diversity": cmd_diversity, "correlate": cmd_correlate,
    "views-sweep": cmd_views_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condshape", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key=value config file (desk defaults when omitted)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default=".")
        s.add_argument("--checkpoint")
        s.add_argument("--views", type=int)
        s.add_argument("--episodes", type=int)
        s.add_argument("--data", help="dataset directory written by gen-data")
        if name == "train":
            s.add_argument("--deterministic", action="store_true", help="drop the noise input")
            s.add_argument("--stages", choices=("both", "single", "multi"), default="both")
        if name == "infer":
            s.add_argument("--shape", help="shape id (first test shape when omitted)")
        if name == "eval":
            s.add_argument("--compare", help="second checkpoint for a paired evaluation")
        if name == "render":
            s.add_argument("--ply")
            s.add_argument("--camera")
        if name == "diversity":
            s.add_argument("--image", help="16-bit PGM depth image")
            s.add_argument("-k", type=int)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, TooFewViews) as exc:
        print(f"condshape: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as exc:
        print(f"condshape: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"condshape: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
