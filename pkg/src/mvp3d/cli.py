"""``mvp3d`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .ablation import format_table, run_ablation
from .checkpoint import load_checkpoint
from .eval import (
    eval_success,
    perturbation_sweep,
    reconstruct_report,
    write_recon_csv,
    write_rows_csv,
)
from .model import ModelConfig
from .pointcloud import load_scene
from .renderer import dump_views, render_all
from .task import make_episodes, read_episodes, write_episodes
from .train import finetune, grad_check, pretrain, procedural_corpus

log = logging.getLogger("mvp3d")

GRADCHECK_TOL = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvp3d", description="3D multi-view masked-autoencoder pretraining")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write procedural scenes + episode manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")

    r = sub.add_parser("render", help="dump the five virtual views of a scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--size", type=int, default=64)

    pt = sub.add_parser("pretrain", help="masked multi-view reconstruction training")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--seed", type=int)

    ft = sub.add_parser("finetune", help="train the action decoder (+ encoder)")
    ft.add_argument("--config", required=True)
    ft.add_argument("--init")
    ft.add_argument("--out", required=True)
    ft.add_argument("--seed", type=int)

    rc = sub.add_parser("reconstruct", help="reconstruction report on held-out scenes")
    rc.add_argument("--ckpt", required=True)
    rc.add_argument("--scenes", required=True)
    rc.add_argument("--out", required=True)
    rc.add_argument("--ratio", type=float, default=0.75)
    rc.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="toy-task success rate (optionally perturbation sweep)")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--episodes", required=True)
    ev.add_argument("--sweep", action="store_true")
    ev.add_argument("--out")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--magnitude", type=float, default=1.0)

    ab = sub.add_parser("ablate", help="masking strategy x corpus size pretraining grid")
    ab.add_argument("--out", required=True)
    ab.add_argument("--config")
    ab.add_argument("--steps", type=int, default=100)
    ab.add_argument("--sizes", type=int, nargs="+", default=[16, 64])
    ab.add_argument("--heldout", type=int, default=8)
    ab.add_argument("--seed", type=int, default=0)

    gc = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    gc.add_argument("--preset", choices=["desk", "paper"], default="desk")
    gc.add_argument("--samples", type=int, default=8)
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    return p


def _scene_paths(directory):
    paths = sorted(Path(directory).glob("*.ply"))
    if not paths:
        raise FileNotFoundError(f"no .ply scenes in {directory}")
    return paths


def cmd_gen_corpus(args):
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    episodes = make_episodes(args.n, args.seed, cfg.corpus.spec())
    manifest = write_episodes(args.out, episodes)
    print(f"wrote {len(episodes)} scenes and {manifest}")


def cmd_render(args):
    cloud, _ = load_scene(args.scene)
    views = render_all(cloud, args.size, args.size)
    files = dump_views(views, args.out, Path(args.scene).stem)
    print(f"wrote {len(files)} images to {args.out}")


def cmd_pretrain(args):
    cfg = config_mod.load_config(args.config, "pretrain", args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.write_resolved(cfg, out)
    if cfg.corpus.dir:
        corpus = _scene_paths(cfg.corpus.dir)
    else:
        corpus = procedural_corpus(cfg.corpus.n_scenes, cfg.corpus.seed, cfg.corpus.spec())
    res = pretrain(corpus, cfg.model, cfg.train, out_dir=out)
    print(f"pretrain: {res.step} steps, final loss {res.losses[-1]:.6f}, checkpoint {res.checkpoint}")


def cmd_finetune(args):
    cfg = config_mod.load_config(args.config, "finetune", args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.write_resolved(cfg, out)
    if cfg.corpus.episodes:
        demos = read_episodes(cfg.corpus.episodes)
    else:
        demos = make_episodes(cfg.corpus.n_demos, cfg.corpus.seed, cfg.corpus.spec())
    val = None
    if cfg.corpus.n_val:
        val = make_episodes(cfg.corpus.n_val, cfg.corpus.seed + 10**6, cfg.corpus.spec())
    init = load_checkpoint(args.init) if args.init else None
    if init is None:
        log.info("no --init given: training from scratch")
    res = finetune(demos, init, cfg.model, cfg.train, out_dir=out, val_demos=val)
    print(f"finetune: {res.step} steps, final loss {res.losses[-1]:.6f}, checkpoint {res.checkpoint}")


def cmd_reconstruct(args):
    ck = load_checkpoint(args.ckpt)
    scenes = [load_scene(p)[0] for p in _scene_paths(args.scenes)]
    out = Path(args.out) / "eval"
    report = reconstruct_report(ck.params, ck.model_cfg, scenes, args.ratio, ck.model_cfg.strategy,
                                args.seed, out_dir=out)
    write_recon_csv(report, out / "recon.csv")
    fmt = lambda v: "absent" if v is None else f"{v:.6f}"  # noqa: E731
    print(f"masked_mse={fmt(report.masked_mse)} unmasked_mse={fmt(report.unmasked_mse)} "
          f"copy_mse={fmt(report.copy_mse)} beats_copy={report.fraction_beating_copy():.3f}")


def cmd_eval(args):
    ck = load_checkpoint(args.ckpt)
    episodes = read_episodes(args.episodes)
    out = Path(args.out) / "eval" if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        rows = perturbation_sweep(ck.params, ck.model_cfg, seed=args.seed, magnitude=args.magnitude,
                                  episodes=episodes)
        if out is not None:
            write_rows_csv(rows, out / "sweep.csv", ["perturbation", "success_rate", "n"])
        print("perturbation,success_rate,n")
        for r in rows:
            print(f"{r['perturbation']},{r['success_rate']!r},{r['n']}")
    else:
        rep = eval_success(ck.params, ck.model_cfg, episodes)
        rows = [{"episode": i, "pos_err": e.pos_err, "rot_err_deg": e.rot_err_deg,
                 "open_correct": int(e.open_correct), "success": int(e.success)}
                for i, e in enumerate(rep.episodes)]
        if out is not None and rows:
            write_rows_csv(rows, out / "success.csv")
        print(f"success_rate={rep.success_rate:.4f} n={len(rep.episodes)} "
              f"mean_pos_err={rep.mean_pos_err:.4f}")


def cmd_ablate(args):
    cfg = config_mod.load_config(args.config, "pretrain", args.seed) if args.config \
        else config_mod.build_config({}, "pretrain", args.seed)
    rows = run_ablation(cfg.model, cfg.train, corpus_sizes=args.sizes, steps=args.steps,
                        seed=args.seed, n_heldout=args.heldout, spec=cfg.corpus.spec(),
                        out_dir=args.out)
    print(format_table(rows))


def cmd_gradcheck(args):
    cfg = ModelConfig.paper() if args.preset == "paper" else ModelConfig.desk()
    worst = 0.0
    for mode in ("pretrain", "finetune"):
        rep = grad_check(cfg, eps=args.eps, samples=args.samples, mode=mode, seed=args.seed)
        print(f"{mode}: max relative error {rep.max_rel_err:.3e} over {len(rep.per_tensor)} tensors")
        worst = max(worst, rep.max_rel_err)
    ok = worst < GRADCHECK_TOL
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max rel err {worst:.3e} (tol {GRADCHECK_TOL:g})")
    return 0 if ok else 2


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "render": cmd_render,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None and not Path(cfg_path).is_file():
        parser.print_usage(sys.stderr)
        print(f"mvp3d: error: config file not found: {cfg_path}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = COMMANDS[args.command](args)
    except config_mod.ConfigError as exc:
        print(f"mvp3d: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"mvp3d: error: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
