"""Experiment orchestration: rate-distortion sweeps, attack-success and
transfer tables, defense evaluation, and report emission.

Checkpoint layout convention under a checkpoint directory:

    codec_lam<L>.rvq          codec trained at lambda L (integer formatting)
    codec_lam<L>_<tag>.rvq    variants (alternate seeds, widths, hardened)
    classifier.rvq            downstream classifier
    phi_xi<X>.rvq             universal perturbation for objective X

Every run writes ``manifest.json`` next to its reports carrying the
resolved configuration, its hash, the seed, and library versions, so a
report can be replayed exactly.  No report contains wall-clock data;
reruns with the same seed are bitwise identical.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import attacks, classifier as clsf, codec, defenses, video


class ConfigError(Exception):
    """Bad configuration or missing artifact; the CLI maps this to exit 2."""


class ExperimentError(Exception):
    """Runtime failure mid-experiment; the CLI maps this to exit 1."""


def parse_eps(text) -> float:
    """Accept a float or a rational like ``10/255``."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    if "/" in s:
        num, den = s.split("/", 1)
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"bad eps value {text!r}: {e}") from None
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"bad eps value {text!r}") from None


def _parse_tuple(text, conv):
    if isinstance(text, (list, tuple)):
        return tuple(conv(v) for v in text)
    return tuple(conv(v.strip()) for v in str(text).split(",") if v.strip())


@dataclass
class ExperimentConfig:
    data: str = "data/manifest.json"
    ckpt: str = "ckpt"
    out: str = "out"
    structures: tuple = ("nh", "hp", "hb")
    lams: tuple = (256.0, 512.0, 1024.0, 2048.0)
    xis: tuple = (0, 1, 2)
    seed: int = 0
    jobs: int = 1
    n_test: int = 32
    batch: int = 16
    eps: float = 10.0 / 255.0
    iters: int = 50
    beta: float = 0.1
    asr_xi: int = 0
    asr_structure: str = "nh"
    targeted_lams: tuple = ()       # empty = same as lams
    defend_lam: float = 2048.0
    defend_structure: str = "nh"
    defend_cfs: tuple = (20, 40)
    transfer_lam: float = 2048.0
    transfer_structure: str = "nh"
    codec_a: str = ""               # defaults derived from ckpt/transfer_lam
    codec_b: str = ""
    phi_a: str = ""
    phi_b: str = ""

    _PARSERS = {
        "structures": lambda v: _parse_tuple(v, str),
        "lams": lambda v: _parse_tuple(v, float),
        "xis": lambda v: _parse_tuple(v, int),
        "targeted_lams": lambda v: _parse_tuple(v, float),
        "defend_cfs": lambda v: _parse_tuple(v, int),
        "seed": int, "jobs": int, "n_test": int, "batch": int, "iters": int,
        "eps": parse_eps, "beta": float, "asr_xi": int,
        "defend_lam": float, "transfer_lam": float,
    }

    def apply(self, updates: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(self)}
        for key, value in updates.items():
            if value is None:
                continue
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            parser = self._PARSERS.get(key, str)
            try:
                setattr(self, key, parser(value))
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {key}: {value!r} ({e})") \
                    from None
        return self

    def validate(self) -> "ExperimentConfig":
        if not self.structures or not self.lams:
            raise ConfigError("structures and lams must be non-empty")
        for s in self.structures:
            if s not in clsf.DEFAULT_GOP:
                raise ConfigError(f"unknown structure {s!r}")
        if self.jobs < 1 or self.n_test < 1 or self.batch < 1:
            raise ConfigError("jobs, n_test and batch must be positive")
        if self.iters < 1:
            raise ConfigError("iters must be positive")
        if self.eps < 0 or self.beta < 0:
            raise ConfigError("eps and beta must be non-negative")
        return self


def load_config(path: str | None, overrides: dict | None = None,
                section: str = "lab") -> ExperimentConfig:
    """Build a config from an INI file (flat ``key = value`` pairs under
    ``[lab]``) with CLI overrides applied on top."""
    cfg = ExperimentConfig()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        ini = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            ini.read(path)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        if section in ini:
            cfg.apply(dict(ini[section]))
    if overrides:
        cfg.apply(overrides)
    return cfg.validate()


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_manifest(cfg: ExperimentConfig, command: str,
                   name: str = "manifest.json") -> str:
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, name)
    payload = {
        "command": command,
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "vclab": _package_version(),
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("vclab")
    except Exception:
        return "unknown"


def write_rows(path: str, columns, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(columns)
        for r in rows:
            wr.writerow([r[c] for c in columns])
    with open(os.path.splitext(path)[0] + ".json", "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------- loading

def codec_path(cfg: ExperimentConfig, lam: float, tag: str = "") -> str:
    name = f"codec_lam{int(lam)}" + (f"_{tag}" if tag else "") + ".rvq"
    return os.path.join(cfg.ckpt, name)


def load_codec(cfg: ExperimentConfig, lam: float,
               tag: str = "") -> codec.CodecParams:
    path = codec_path(cfg, lam, tag)
    if not os.path.exists(path):
        raise ConfigError(f"missing codec checkpoint: {path}")
    return codec.load_params(path)


def load_classifier(cfg: ExperimentConfig) -> clsf.Classifier:
    path = os.path.join(cfg.ckpt, "classifier.rvq")
    if not os.path.exists(path):
        raise ConfigError(f"missing classifier checkpoint: {path}")
    return clsf.load_classifier(path)


def test_clips(cfg: ExperimentConfig, split: str = "test"):
    """First n_test clips of a split as ((N,T,H,W,C) float64, labels)."""
    if not os.path.exists(cfg.data):
        raise ConfigError(f"missing dataset manifest: {cfg.data}")
    pairs = video.load_dataset(cfg.data, split=split)
    if len(pairs) < cfg.n_test:
        raise ConfigError(f"{split} split has {len(pairs)} clips, "
                          f"need {cfg.n_test}")
    pairs = pairs[:cfg.n_test]
    return (np.stack([v for v, _ in pairs]),
            np.array([l for _, l in pairs], dtype=int))


# ------------------------------------------------------------- parallelism

def _chunks(n: int, size: int):
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def _map(fn, tasks, jobs: int):
    """Order-preserving map, optionally over worker processes.  Chunks
    are fixed independent of ``jobs`` so parallel and serial runs reduce
    to identical numbers."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


def _w_attack(task):
    """Worker: attack one chunk, return per-clip metrics and outputs."""
    (x, structure, params, acfg, gop_size, clf, labels, targets) = task
    adv, rep = attacks.ifgsm_attack(x, structure, params, acfg, clf=clf,
                                    labels=labels, gop_size=gop_size,
                                    targets=targets)
    out = {"adv": adv, "psnr": rep.adv_psnr, "bpp": rep.adv_bpp,
           "clean_psnr": rep.clean_psnr, "clean_bpp": rep.clean_bpp}
    if rep.predicted is not None:
        out["predicted"] = rep.predicted
    return out


def _w_quality(task):
    """Worker: code a chunk and measure it against clean reference."""
    x, clean, params, structure, gop_size = task
    run = codec.code_videos(x, params, structure, gop_size)
    used = run.used
    mse = np.mean((run.decoded - clean[:, :used]) ** 2, axis=(1, 2, 3, 4))
    return {"psnr": np.array([codec.psnr_from_mse(m) for m in mse]),
            "bpp": np.asarray(run.bpp, dtype=float).reshape(-1),
            "decoded": run.decoded}


def attack_split(cfg, x, structure, params, acfg, clf=None, labels=None,
                 targets=None, gop_size=None):
    """ifgsm over the whole split in fixed chunks; concatenated results."""
    tasks = []
    for sl in _chunks(len(x), cfg.batch):
        tasks.append((x[sl], structure, params, acfg, gop_size, clf,
                      None if labels is None else labels[sl],
                      None if targets is None else targets[sl]))
    outs = _map(_w_attack, tasks, cfg.jobs)
    merged = {}
    for key in outs[0]:
        merged[key] = np.concatenate([o[key] for o in outs])
    return merged


def quality_split(cfg, x, clean, params, structure, gop_size=None):
    tasks = [(x[sl], clean[sl], params, structure, gop_size)
             for sl in _chunks(len(x), cfg.batch)]
    outs = _map(_w_quality, tasks, cfg.jobs)
    return {key: np.concatenate([o[key] for o in outs]) for key in outs[0]}


# ---------------------------------------------------------------- rd sweep

RD_COLUMNS = ("structure", "lam", "condition", "clip", "psnr", "bpp")


def run_rd_sweep(cfg: ExperimentConfig):
    """Clean/attacked/baseline rate-distortion table over every
    (structure, lambda) cell.  Returns (rows, notes)."""
    x, _ = test_clips(cfg)
    phis = {}
    for xi in (0, 1):
        path = os.path.join(cfg.ckpt, f"phi_xi{xi}.rvq")
        if os.path.exists(path):
            phis[xi] = attacks.load_perturbation(path)
    rows, notes = [], {"max_linf": {}, "range": {}}
    for structure in cfg.structures:
        gop_size = clsf.DEFAULT_GOP[structure]
        for lam in cfg.lams:
            params = load_codec(cfg, lam)
            perturbed = {}
            for xi in cfg.xis:
                acfg = attacks.AttackConfig(xi=xi, eps=cfg.eps,
                                            steps=cfg.iters)
                res = attack_split(cfg, x, structure, params, acfg,
                                   gop_size=gop_size)
                perturbed[f"attack_xi{xi}"] = res["adv"]
            for xi, up in phis.items():
                adv = np.stack([
                    attacks.apply_universal(c, up.phi, structure,
                                            gop_size=gop_size, tau="random",
                                            seed=cfg.seed + i)
                    for i, c in enumerate(x)])
                perturbed[f"universal_xi{xi}"] = adv
            for case in ("I", "II"):
                adv = np.stack([
                    attacks.gaussian_baseline(c, case, cfg.eps, structure,
                                              seed=cfg.seed + i,
                                              gop_size=gop_size)
                    for i, c in enumerate(x)])
                perturbed[f"gaussian_{case}"] = adv
            conditions = {"clean": x, **perturbed}
            for cond, xc in conditions.items():
                q = quality_split(cfg, xc, x, params, structure, gop_size)
                cell = f"{structure}/lam{int(lam)}/{cond}"
                notes["max_linf"][cell] = float(np.max(np.abs(xc - x)))
                notes["range"][cell] = [float(xc.min()), float(xc.max())]
                for i in range(len(x)):
                    rows.append({"structure": structure, "lam": lam,
                                 "condition": cond, "clip": i,
                                 "psnr": float(q["psnr"][i]),
                                 "bpp": float(q["bpp"][i])})
                rows.append({"structure": structure, "lam": lam,
                             "condition": cond, "clip": "mean",
                             "psnr": float(np.mean(q["psnr"])),
                             "bpp": float(np.mean(q["bpp"]))})
    write_rows(os.path.join(cfg.out, "rd_sweep.csv"), RD_COLUMNS, rows)
    with open(os.path.join(cfg.out, "rd_notes.json"), "w") as fh:
        json.dump(notes, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(cfg, "rd-sweep")
    return rows, notes


# ---------------------------------------------------------------- asr eval

ASR_COLUMNS = ("lam", "attack", "targeted", "asr", "n")


def draw_targets(labels: np.ndarray, n_classes: int,
                 seed: int) -> np.ndarray:
    """Uniform target classes excluding each true label."""
    rng = np.random.default_rng(seed)
    return (labels + rng.integers(1, n_classes, size=len(labels))) % n_classes


def run_asr_eval(cfg: ExperimentConfig):
    """Attack-success table: joint attack per lambda, untargeted and
    targeted, against the compression-unaware ablation and the Gaussian
    baseline."""
    if cfg.beta <= 0:
        raise ConfigError("asr evaluation needs beta > 0 "
                          "(classifier not in the attack loop otherwise)")
    clf = load_classifier(cfg)
    x, labels = test_clips(cfg)
    structure, gop_size = cfg.asr_structure, clsf.DEFAULT_GOP[cfg.asr_structure]
    targeted_lams = cfg.targeted_lams or cfg.lams
    targets = draw_targets(labels, clf.n_classes, cfg.seed)
    n = len(x)
    rows = []

    def decode_and_classify(xc, params):
        q = quality_split(cfg, xc, x, params, structure, gop_size)
        return clsf.classify_batch(q["decoded"], clf)

    for lam in cfg.lams:
        params = load_codec(cfg, lam)
        acfg = attacks.AttackConfig(xi=cfg.asr_xi, eps=cfg.eps,
                                    steps=cfg.iters, beta=cfg.beta)
        res = attack_split(cfg, x, structure, params, acfg, clf=clf,
                           labels=labels, gop_size=gop_size)
        rows.append({"lam": lam, "attack": "joint", "targeted": False,
                     "asr": 100.0 * float(np.mean(res["predicted"] != labels)),
                     "n": n})
        if lam in targeted_lams:
            res_t = attack_split(cfg, x, structure, params, acfg, clf=clf,
                                 labels=labels, targets=targets,
                                 gop_size=gop_size)
            rows.append({"lam": lam, "attack": "joint", "targeted": True,
                         "asr": 100.0 * float(
                             np.mean(res_t["predicted"] == targets)),
                         "n": n})
        cu = attacks.compression_unaware_attack(x, labels, clf, eps=cfg.eps,
                                                steps=cfg.iters)
        pred = decode_and_classify(cu, params)
        rows.append({"lam": lam, "attack": "compression-unaware",
                     "targeted": False,
                     "asr": 100.0 * float(np.mean(pred != labels)), "n": n})
        g2 = np.stack([attacks.gaussian_baseline(c, "II", cfg.eps, structure,
                                                 seed=cfg.seed + i,
                                                 gop_size=gop_size)
                       for i, c in enumerate(x)])
        pred = decode_and_classify(g2, params)
        rows.append({"lam": lam, "attack": "gaussian-II", "targeted": False,
                     "asr": 100.0 * float(np.mean(pred != labels)), "n": n})
    for r in rows:
        assert 0.0 <= r["asr"] <= 100.0
    write_rows(os.path.join(cfg.out, "asr.csv"), ASR_COLUMNS, rows)
    write_manifest(cfg, "asr-eval")
    return rows


# ------------------------------------------------------------ transfer eval

TRANSFER_COLUMNS = ("phi_from", "codec", "role", "psnr_drop", "dbpp_pct")


def run_transfer_eval(cfg: ExperimentConfig):
    """Cross-codec effect of universal perturbations: each Phi evaluated
    on the codec it was trained against (white box) and on the other
    codec (black box), both directions."""
    a_path = cfg.codec_a or codec_path(cfg, cfg.transfer_lam)
    b_path = cfg.codec_b or codec_path(cfg, cfg.transfer_lam, "w40")
    if os.path.abspath(a_path) == os.path.abspath(b_path):
        raise ConfigError("transfer eval needs two distinct codecs")
    pa_path = cfg.phi_a or os.path.join(cfg.ckpt, "phi_xi0_a.rvq")
    pb_path = cfg.phi_b or os.path.join(cfg.ckpt, "phi_xi0_b.rvq")
    loaded = {}
    for name, path in (("codec_a", a_path), ("codec_b", b_path)):
        if not os.path.exists(path):
            raise ConfigError(f"missing codec checkpoint: {path}")
        loaded[name] = codec.load_params(path)
    ups = {}
    for name, path in (("codec_a", pa_path), ("codec_b", pb_path)):
        if not os.path.exists(path):
            raise ConfigError(f"missing perturbation checkpoint: {path}")
        ups[name] = attacks.load_perturbation(path)

    x, _ = test_clips(cfg)
    structure = cfg.transfer_structure
    gop_size = clsf.DEFAULT_GOP[structure]
    cleanq = {name: quality_split(cfg, x, x, p, structure, gop_size)
              for name, p in loaded.items()}
    rows = []
    for src in ("codec_a", "codec_b"):
        up = ups[src]
        adv = np.stack([attacks.apply_universal(c, up.phi, structure,
                                                gop_size=gop_size,
                                                tau="random",
                                                seed=cfg.seed + i)
                        for i, c in enumerate(x)])
        for dst in ("codec_a", "codec_b"):
            q = quality_split(cfg, adv, x, loaded[dst], structure, gop_size)
            base = cleanq[dst]
            drop = float(np.mean(base["psnr"]) - np.mean(q["psnr"]))
            dbpp = 100.0 * float((np.mean(q["bpp"]) - np.mean(base["bpp"]))
                                 / np.mean(base["bpp"]))
            rows.append({"phi_from": src, "codec": dst,
                         "role": "white-box" if src == dst else "black-box",
                         "psnr_drop": drop, "dbpp_pct": dbpp})
    write_rows(os.path.join(cfg.out, "transfer.csv"), TRANSFER_COLUMNS, rows)
    write_manifest(cfg, "transfer-eval")
    return rows


# ------------------------------------------------------------- defense eval

def run_defense_eval(cfg: ExperimentConfig):
    """Defense retention table per attack objective.  Evaluates the
    signal-transformation defenses and, when a hardened checkpoint
    ``codec_lam<L>_at.rvq`` exists, adversarial training."""
    lam = cfg.defend_lam
    params = load_codec(cfg, lam)
    structure = cfg.defend_structure
    gop_size = clsf.DEFAULT_GOP[structure]
    x, _ = test_clips(cfg)
    defense_list = [defenses.DefenseConfig(kind="identity")]
    defense_list += [defenses.DefenseConfig(kind="jpeg", cf=cf)
                     for cf in cfg.defend_cfs]
    defense_list.append(defenses.DefenseConfig(kind="denoise"))
    hardened = None
    at_path = codec_path(cfg, lam, "at")
    if os.path.exists(at_path):
        hardened = codec.load_params(at_path)
        defense_list.append(defenses.DefenseConfig(kind="adversarial-training"))
    all_rows, notes = [], {"cf_mapping": defenses.CF_NOTE}
    for xi in cfg.xis:
        acfg = attacks.AttackConfig(xi=xi, eps=cfg.eps, steps=cfg.iters)
        adv = attack_split(cfg, x, structure, params, acfg,
                           gop_size=gop_size)["adv"]
        for dfn in defense_list:
            rep = defenses.defense_eval(x, adv, dfn, params, structure,
                                        gop_size=gop_size, hardened=hardened)
            for r in rep.rows:
                all_rows.append({"attack": f"xi{xi}", **r})
    columns = ("attack",) + defenses.DefenseReport.COLUMNS
    write_rows(os.path.join(cfg.out, "defense.csv"), columns, all_rows)
    with open(os.path.join(cfg.out, "defense_notes.json"), "w") as fh:
        json.dump(notes, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(cfg, "defend-eval")
    return all_rows
