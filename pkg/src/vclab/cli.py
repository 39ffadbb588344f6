"""Command-line front end.

    vclab gen-data --out data --n 2000
    vclab train-codec --data data/manifest.json --lambda 1024
    vclab train-classifier --lambda 2048
    vclab attack --xi 1 --lambda 1024
    vclab train-universal --xi 0
    vclab rd-sweep | asr-eval | transfer-eval | defend-eval

Exit codes: 0 success, 2 configuration problem (bad flag, missing
checkpoint, unreadable config), 1 runtime failure (divergence and the
like).  Flags override the ``[lab]`` section of an INI file given with
--config.  Every run writes a manifest JSON recording the resolved
configuration, its hash, the seed, and library versions.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attacks, classifier as clsf, codec, defenses, experiments, video
from .experiments import ConfigError


def _common(p: argparse.ArgumentParser, out_default=None):
    p.add_argument("--config", help="INI config file ([lab] section)")
    p.add_argument("--seed", type=int, help="base RNG seed")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--ckpt", help="checkpoint directory")
    p.add_argument("--jobs", type=int, help="parallel worker processes")


def _overrides(args, *keys):
    out = {}
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _config(args, extra: dict | None = None) -> experiments.ExperimentConfig:
    ov = _overrides(args, "seed", "out", "data", "ckpt", "jobs",
                    "eps", "iters", "beta", "n_test")
    if extra:
        ov.update({k: v for k, v in extra.items() if v is not None})
    return experiments.load_config(getattr(args, "config", None), ov)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    clips = video.gen_moving_shapes(args.n, n_frames=args.frames,
                                    seed=cfg.seed)
    manifest = video.write_dataset(cfg.out, clips, seed=cfg.seed)
    experiments.write_manifest(cfg, "gen-data", name="run_manifest.json")
    print(f"wrote {args.n} clips, manifest {manifest}")
    return 0


def cmd_train_codec(args) -> int:
    cfg = _config(args)
    if args.lam is None:
        raise ConfigError("--lambda is required")
    pairs = video.load_dataset(cfg.data, split="train")
    clips = [v for v, _ in pairs]
    params, trace = codec.train_codec(clips, args.lam, epochs=args.epochs,
                                      seed=cfg.seed, latent_dim=args.latent,
                                      noise_aug=args.noise_aug)
    path = args.ckpt_out or experiments.codec_path(cfg, args.lam, args.tag)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    codec.save_params(path, params)
    experiments.write_manifest(cfg, "train-codec")
    print(f"lambda={args.lam:g} steps={len(trace)} "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f} saved {path}")
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _config(args)
    if args.lam is None:
        raise ConfigError("--lambda is required")
    params = experiments.load_codec(cfg, args.lam)
    train = video.load_dataset(cfg.data, split="train")
    clf, trace = clsf.train_classifier(train, params, args.structure,
                                       epochs=args.epochs, seed=cfg.seed)
    val = video.load_dataset(cfg.data, split="val")
    x = np.stack([v for v, _ in val])
    labels = np.array([l for _, l in val])
    run = codec.code_videos(x, params, args.structure,
                            clsf.DEFAULT_GOP[args.structure])
    acc = clsf.accuracy(clf, run.decoded, labels)
    path = os.path.join(cfg.ckpt, "classifier.rvq")
    os.makedirs(cfg.ckpt, exist_ok=True)
    clsf.save_classifier(path, clf)
    experiments.write_manifest(cfg, "train-classifier")
    print(f"val accuracy {100 * acc:.1f}% on {len(val)} clips, saved {path}")
    return 0


ATTACK_COLUMNS = ("clip", "psnr_clean", "psnr_adv", "psnr_drop",
                  "bpp_clean", "bpp_adv", "dbpp_pct", "flipped")


def cmd_attack(args) -> int:
    cfg = _config(args, {"n_test": args.n})
    if args.lam is None:
        raise ConfigError("--lambda is required")
    params = experiments.load_codec(cfg, args.lam)
    x, labels = experiments.test_clips(cfg)
    clf = experiments.load_classifier(cfg) if cfg.beta > 0 else None
    acfg = attacks.AttackConfig(xi=args.xi, eps=cfg.eps, steps=cfg.iters,
                                beta=cfg.beta, target=args.target)
    res = experiments.attack_split(cfg, x, args.structure, params, acfg,
                                   clf=clf, labels=labels)
    rows = []
    for i in range(len(x)):
        flipped = bool(res["predicted"][i] != labels[i]) \
            if "predicted" in res else ""
        rows.append({
            "clip": i,
            "psnr_clean": float(res["clean_psnr"][i]),
            "psnr_adv": float(res["psnr"][i]),
            "psnr_drop": float(res["clean_psnr"][i] - res["psnr"][i]),
            "bpp_clean": float(res["clean_bpp"][i]),
            "bpp_adv": float(res["bpp"][i]),
            "dbpp_pct": 100.0 * float((res["bpp"][i] - res["clean_bpp"][i])
                                      / res["clean_bpp"][i]),
            "flipped": flipped,
        })
    mean = {"clip": "mean", "flipped": ""}
    for c in ATTACK_COLUMNS[1:-1]:
        mean[c] = float(np.mean([r[c] for r in rows]))
    rows.append(mean)
    experiments.write_rows(os.path.join(cfg.out, "attack.csv"),
                           ATTACK_COLUMNS, rows)
    experiments.write_manifest(cfg, "attack")
    print(f"xi={args.xi} lambda={args.lam:g} structure={args.structure} "
          f"n={len(x)}: dPSNR {mean['psnr_drop']:+.2f} dB, "
          f"dBpp {mean['dbpp_pct']:+.1f}%")
    return 0


def cmd_train_universal(args) -> int:
    cfg = _config(args)
    structures = experiments._parse_tuple(args.structures, str)
    lams = experiments._parse_tuple(args.lams, float) if args.lams \
        else cfg.lams
    ckpts = {}
    for lam in lams:
        params = experiments.load_codec(cfg, lam)
        for s in structures:
            ckpts[(s, lam)] = params
    train = video.load_dataset(cfg.data, split="train")
    clips = [v for v, _ in train]
    labels = [l for _, l in train]
    clf = experiments.load_classifier(cfg) if cfg.beta > 0 else None
    acfg = attacks.AttackConfig(xi=args.xi, eps=cfg.eps, steps=cfg.iters,
                                beta=cfg.beta)
    up, trace = attacks.train_universal(
        clips, ckpts, acfg, clf=clf, labels=labels if clf else None,
        max_iter=cfg.iters, seed=cfg.seed, structures=structures, lams=lams,
        videos_per_iter=args.videos_per_iter)
    path = args.phi_out or os.path.join(cfg.ckpt, f"phi_xi{args.xi}.rvq")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    attacks.save_perturbation(path, up)
    experiments.write_manifest(cfg, "train-universal")
    print(f"xi={args.xi} iters={len(trace)} |phi|inf="
          f"{np.max(np.abs(up.phi)):.4f} saved {path}")
    return 0


def _cmd_report(runner, name):
    def handler(args) -> int:
        extra = {}
        for key in ("structures", "lams", "xis"):
            val = getattr(args, key, None)
            if val is not None:
                extra[key] = val
        cfg = _config(args, extra)
        rows = runner(cfg)
        if isinstance(rows, tuple):
            rows = rows[0]
        print(f"{name}: {len(rows)} rows -> {cfg.out}")
        return 0
    return handler


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vclab",
        description="attacks and defenses on a small learned video codec")
    sub = ap.add_subparsers(dest="cmd")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _common(p, out_default="data")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--frames", type=int, default=21)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-codec", help="train one codec checkpoint")
    _common(p, out_default="out")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--latent", type=int, default=codec.DEFAULT_LATENT)
    p.add_argument("--noise-aug", type=float, default=0.0,
                   help="max sigma of denoising-style pixel noise")
    p.add_argument("--tag", default="", help="suffix for variant checkpoints")
    p.add_argument("--ckpt-out", help="explicit checkpoint path")
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-classifier", help="train the clip classifier")
    _common(p, out_default="out")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--structure", default="nh",
                   choices=sorted(clsf.DEFAULT_GOP))
    p.add_argument("--epochs", type=int, default=400)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("attack", help="run the offline attack on test clips")
    _common(p, out_default="out")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--structure", default="nh",
                   choices=sorted(clsf.DEFAULT_GOP))
    p.add_argument("--xi", type=int, default=0, choices=(0, 1, 2))
    p.add_argument("--eps", type=experiments.parse_eps)
    p.add_argument("--iters", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--target", type=int)
    p.add_argument("--n", type=int, help="number of test clips")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-universal",
                       help="train a clip-agnostic perturbation")
    _common(p, out_default="out")
    p.add_argument("--xi", type=int, default=0, choices=(0, 1, 2))
    p.add_argument("--structures", default="nh,hp,hb")
    p.add_argument("--lams", help="comma-separated lambda list")
    p.add_argument("--eps", type=experiments.parse_eps)
    p.add_argument("--iters", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--videos-per-iter", type=int, default=4)
    p.add_argument("--phi-out", help="explicit output path")
    p.set_defaults(func=cmd_train_universal)

    for name, runner, help_ in (
            ("rd-sweep", experiments.run_rd_sweep,
             "rate-distortion table over structures and lambdas"),
            ("asr-eval", experiments.run_asr_eval,
             "attack success rates with baselines"),
            ("transfer-eval", experiments.run_transfer_eval,
             "cross-codec universal perturbation effects"),
            ("defend-eval", experiments.run_defense_eval,
             "defense retention table")):
        p = sub.add_parser(name, help=help_)
        _common(p, out_default="out")
        p.add_argument("--structures")
        p.add_argument("--lams")
        p.add_argument("--xis")
        p.add_argument("--eps", type=experiments.parse_eps)
        p.add_argument("--iters", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--n-test", type=int)
        p.set_defaults(func=_cmd_report(runner, name))
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    if getattr(args, "cmd", None) is None:
        ap.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"vclab: {e}", file=sys.stderr)
        return 2
    except (codec.CodecError, attacks.AttackError, defenses.DefenseError,
            experiments.ExperimentError, OSError, ValueError) as e:
        print(f"vclab: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
