"""Session fixtures for the trained artifacts the acceptance suite uses.

Training four codecs, a classifier, universal perturbations and a
hardened codec from scratch takes a while on one core, so every artifact
is cached under tests/_cache next to a .key file recording the exact
build configuration.  Delete the directory (or change any constant
below) to force a cold rebuild; fixtures are lazy, so plain unit-test
runs never pay for them.
"""

import json
import os
import shutil
import time

import pytest

from vclab import attacks, classifier as clsf, codec, defenses, video

CACHE = os.path.join(os.path.dirname(__file__), "_cache")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL summary line per acceptance property."""
    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def build_times() -> dict:
    try:
        with open(os.path.join(CACHE, "build_times.json")) as fh:
            return json.load(fh)
    except OSError:
        return {}


def _note_build_time(name: str, seconds: float) -> None:
    times = build_times()
    times[name] = seconds
    with open(os.path.join(CACHE, "build_times.json"), "w") as fh:
        json.dump(times, fh, indent=1)

N_CLIPS = 2000
N_FRAMES = 21
SEED = 0
LAMBDAS = (256.0, 512.0, 1024.0, 2048.0)
CODEC_EPOCHS = 3
NOISE_AUG = 0.04
VARIANT_LATENT = 40
CLF_EPOCHS = 400
PHI_ITERS = 50


def _key_matches(keyfile: str, key: dict) -> bool:
    try:
        with open(keyfile) as fh:
            return fh.read() == json.dumps(key, sort_keys=True)
    except OSError:
        return False


def _cached(name: str, key: dict, build, save, load):
    """Load ``name`` from the cache if its key matches, else build it."""
    os.makedirs(CACHE, exist_ok=True)
    path = os.path.join(CACHE, name)
    keyfile = path + ".key"
    if os.path.exists(path) and _key_matches(keyfile, key):
        return load(path)
    t0 = time.perf_counter()
    artifact = build()
    _note_build_time(name, time.perf_counter() - t0)
    save(path, artifact)
    with open(keyfile, "w") as fh:
        fh.write(json.dumps(key, sort_keys=True))
    return artifact


@pytest.fixture(scope="session")
def dataset_manifest():
    key = {"n": N_CLIPS, "frames": N_FRAMES, "seed": SEED}
    ddir = os.path.join(CACHE, "data")
    keyfile = ddir + ".key"
    manifest = os.path.join(ddir, "manifest.json")
    if not (os.path.exists(manifest) and _key_matches(keyfile, key)):
        os.makedirs(CACHE, exist_ok=True)
        shutil.rmtree(ddir, ignore_errors=True)
        clips = video.gen_moving_shapes(N_CLIPS, n_frames=N_FRAMES,
                                        seed=SEED)
        video.write_dataset(ddir, clips, seed=SEED)
        with open(keyfile, "w") as fh:
            fh.write(json.dumps(key, sort_keys=True))
    return manifest


@pytest.fixture(scope="session")
def train_pairs(dataset_manifest):
    return video.load_dataset(dataset_manifest, split="train")


@pytest.fixture(scope="session")
def test_pairs(dataset_manifest):
    return video.load_dataset(dataset_manifest, split="test")


def _codec_key(lam, latent, seed):
    return {"lam": lam, "epochs": CODEC_EPOCHS, "noise_aug": NOISE_AUG,
            "latent": latent, "seed": seed, "n_train": "split"}


@pytest.fixture(scope="session")
def codecs(train_pairs):
    """The four rate points, trained with denoising augmentation."""
    clips = [v for v, _ in train_pairs]
    out = {}
    for lam in LAMBDAS:
        out[lam] = _cached(
            f"codec_lam{int(lam)}.rvq",
            _codec_key(lam, codec.DEFAULT_LATENT, SEED),
            lambda lam=lam: codec.train_codec(
                clips, lam, epochs=CODEC_EPOCHS, seed=SEED,
                noise_aug=NOISE_AUG)[0],
            codec.save_params, codec.load_params)
    return out


@pytest.fixture(scope="session")
def variant_codec(train_pairs):
    """Independently trained narrow-latent codec at the top rate point."""
    clips = [v for v, _ in train_pairs]
    return _cached(
        f"codec_lam2048_w{VARIANT_LATENT}.rvq",
        _codec_key(2048.0, VARIANT_LATENT, SEED + 1),
        lambda: codec.train_codec(
            clips, 2048.0, epochs=CODEC_EPOCHS, seed=SEED + 1,
            latent_dim=VARIANT_LATENT, noise_aug=NOISE_AUG)[0],
        codec.save_params, codec.load_params)


@pytest.fixture(scope="session")
def video_classifier(train_pairs, codecs):
    """Direction classifier fit on lambda=2048 nh-decoded training clips."""
    return _cached(
        "classifier.rvq",
        {"lam": 2048.0, "structure": "nh", "epochs": CLF_EPOCHS,
         "seed": SEED, "codec": _codec_key(2048.0, codec.DEFAULT_LATENT,
                                           SEED)},
        lambda: clsf.train_classifier(train_pairs, codecs[2048.0], "nh",
                                      epochs=CLF_EPOCHS, seed=SEED)[0],
        clsf.save_classifier, clsf.load_classifier)


def _phi_fixture(xi, codecs, train_pairs):
    clips = [v for v, _ in train_pairs[:256]]
    mapping = {(s, lam): codecs[lam]
               for s in ("nh", "hp", "hb") for lam in LAMBDAS}
    cfg = attacks.AttackConfig(xi=xi, steps=1)
    return _cached(
        f"phi_xi{xi}.rvq",
        {"xi": xi, "iters": PHI_ITERS, "lams": LAMBDAS, "seed": SEED,
         "n_train": 256,
         "codec": _codec_key(0, codec.DEFAULT_LATENT, SEED)},
        lambda: attacks.train_universal(clips, mapping, cfg,
                                        max_iter=PHI_ITERS, seed=SEED)[0],
        attacks.save_perturbation, attacks.load_perturbation)


@pytest.fixture(scope="session")
def phi_quality(codecs, train_pairs):
    return _phi_fixture(0, codecs, train_pairs)


@pytest.fixture(scope="session")
def phi_rate(codecs, train_pairs):
    return _phi_fixture(1, codecs, train_pairs)


@pytest.fixture(scope="session")
def hardened_codec(codecs, train_pairs):
    """lambda=2048 codec fine-tuned on half-adversarial minibatches."""
    clips = [v for v, _ in train_pairs[:512]]
    cfg = defenses.DefenseConfig(kind="adversarial-training")
    return _cached(
        "codec_lam2048_at.rvq",
        {"base": _codec_key(2048.0, codec.DEFAULT_LATENT, SEED),
         "epochs": cfg.epochs, "steps": cfg.attack_steps,
         "xis": list(cfg.xis), "lams": list(cfg.lams),
         "n_train": 512, "seed": SEED},
        lambda: defenses.adversarial_train(codecs[2048.0], clips, cfg,
                                           seed=SEED)[0],
        codec.save_params, codec.load_params)
