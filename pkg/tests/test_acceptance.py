"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 10 minutes on one
CPU core) or ``python tests/test_acceptance.py``.  The summary lines are
emitted at the end of the session by the hook in ``conftest.py``.
"""

from __future__ import annotations

import contextlib
import io
import math
import statistics
import time

import numpy as np
import pytest
from PIL import Image

from ecndnet import checkpoint as C
from ecndnet import data as D
from ecndnet import layers as L
from ecndnet import network as N
from ecndnet import training as T
from ecndnet.cli import run
from ecndnet.evaluation import evaluate_set, psnr
from oracles import conv2d_reference, numerical_grad, numerical_grad_piecewise, relative_error

RESULTS: dict[int, tuple[bool, str]] = {}

TITLES = {
    1: "receptive-field fidelity",
    2: "noisy-baseline PSNR",
    3: "gradient suite",
    4: "convolution oracle",
    5: "zero-residual identity",
    6: "toy training convergence",
    7: "ablation ordering",
    8: "determinism",
    9: "checkpoint round-trip",
    10: "Adam oracle",
}

# Toy protocol.  Only depth, width, patch count, sigma, epochs and a fixed seed
# are prescribed; batch size and the final learning rate are chosen so that
# 30 epochs give the optimizer enough steps (see README, "Toy protocol").
TOY = dict(depth=7, width=16, sigma=25, epochs=30, batch=4, lr_end=1e-4, seed=1)
VARIANTS = ("crnet", "crrnet", "crrbnet", "ecndnet")


def record(number: int, ok: bool, detail: str) -> None:
    RESULTS[number] = (ok, detail)
    assert ok, f"criterion {number} ({TITLES[number]}): {detail}"


# ------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def toy_image_dir(tmp_path_factory):
    from conftest import camera_180

    d = tmp_path_factory.mktemp("toy_data")
    D.save_image(camera_180(), d / "camera180.png")
    return d


class ToyRuns:
    """Trains toy models through the CLI on demand and keeps the results."""

    def __init__(self, data_dir, out_dir):
        self.data_dir, self.out_dir = data_dir, out_dir
        self.runs = {}

    def get(self, variant: str, tag: str = "a"):
        key = (variant, tag)
        if key not in self.runs:
            path = self.out_dir / f"{variant}_{tag}.ecn"
            argv = ["--threads", "1", "train", "--data", str(self.data_dir), "--out", str(path),
                    "--variant", variant, "--depth", str(TOY["depth"]), "--width", str(TOY["width"]),
                    "--sigma", str(TOY["sigma"]), "--epochs", str(TOY["epochs"]), "--batch", str(TOY["batch"]),
                    "--lr-end", str(TOY["lr_end"]), "--seed", str(TOY["seed"])]
            err = io.StringIO()
            start = time.perf_counter()
            with contextlib.redirect_stderr(err):
                code = run(argv, out=io.StringIO())
            seconds = time.perf_counter() - start
            assert code == 0, err.getvalue()
            losses = [float(line.split()[3]) for line in err.getvalue().splitlines() if line.startswith("epoch ")]
            self.runs[key] = dict(path=path, losses=losses, seconds=seconds)
        return self.runs[key]


@pytest.fixture(scope="session")
def toy_runs(toy_image_dir, tmp_path_factory):
    return ToyRuns(toy_image_dir, tmp_path_factory.mktemp("toy_runs"))


# ------------------------------------------------------------- criteria


def test_criterion_01_receptive_fields():
    expected = [3, 7, 9, 11, 15, 17, 19, 21, 25, 27, 29, 33, 35, 37, 39, 41, 43]
    out = io.StringIO()
    start = time.perf_counter()
    code = run(["inspect", "--variant", "ecndnet", "--depth", "17"], out=out)
    seconds = time.perf_counter() - start
    line = next(l for l in out.getvalue().splitlines() if l.startswith("receptive fields:"))
    got = [int(t) for t in line.split(":", 1)[1].split()]
    record(1, code == 0 and got == expected and seconds < 1, f"{' '.join(map(str, got))} in {seconds:.3f}s")


def test_criterion_02_noisy_baseline():
    from skimage import data as skdata

    start = time.perf_counter()
    clean = np.asarray(skdata.camera(), dtype=np.float32)[:256, :256] / 255.0
    details, ok = [], True
    for sigma, paper_db in ((15, 24.61), (25, 20.17), (50, 14.15)):
        theory = 10 * math.log10(255 ** 2 / sigma ** 2)
        noisy = D.add_gaussian_noise(clean, D.NoiseConfig(sigma, seed=0))
        value = psnr(noisy, clean)
        ok &= abs(value - theory) <= 0.15 and abs(theory - paper_db) < 0.005
        details.append(f"sigma {sigma}: {value:.3f} dB (theory {theory:.2f})")
    seconds = time.perf_counter() - start
    record(2, ok and seconds < 5, "; ".join(details) + f"; {seconds:.2f}s")


def relu_pattern(model, noisy):
    """Which ReLU units are active: identifies the linear piece the network is on."""
    _, caches = N.forward(model, noisy, "train")
    return b"".join(np.packbits(relu.mask).tobytes() for _, _, relu in caches.per_layer if relu is not None)


def _fd_trials():
    """Yield (name, relative error, skipped fraction) for 20 random trials of each layer and the depth-3 model."""
    step = 1e-3
    for trial in range(20):
        rng = np.random.default_rng([3, trial])
        n, c, o, h, w = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 5, 5
        dil = int(rng.integers(1, 4))

        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        p = L.Conv2dParams(rng.standard_normal((o, c, 3, 3)).astype(np.float32),
                           rng.standard_normal(o).astype(np.float32), dil)
        r = rng.standard_normal((n, o, h, w))
        conv_loss = lambda: float(np.sum(L.conv2d_forward(x, p)[0] * r))
        _, cache = L.conv2d_forward(x, p)
        gx, gw, gb = L.conv2d_backward(r.astype(np.float32), cache, p)
        yield "conv", max(relative_error(gx, numerical_grad(conv_loss, x, step)),
                          relative_error(gw, numerical_grad(conv_loss, p.weights, step)),
                          relative_error(gb, numerical_grad(conv_loss, p.bias, step))), 0.0

        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        bn = L.BatchNormParams.fresh(c)
        bn.gamma[...] = rng.uniform(0.5, 1.5, c)
        bn.beta[...] = rng.standard_normal(c)
        r = rng.standard_normal(x.shape)
        bn_loss = lambda: float(np.sum(L.batchnorm_forward(x, bn, "train")[0] * r))
        _, cache = L.batchnorm_forward(x, bn, "train")
        gx, gg, gbeta = L.batchnorm_backward(r.astype(np.float32), cache, bn)
        yield "batchnorm", max(relative_error(gx, numerical_grad(bn_loss, x, step)),
                               relative_error(gg, numerical_grad(bn_loss, bn.gamma, step)),
                               relative_error(gbeta, numerical_grad(bn_loss, bn.beta, step))), 0.0

        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        x[np.abs(x) < 10 * step] = 0.5  # keep probes off the kink
        r = rng.standard_normal(x.shape)
        relu_loss = lambda: float(np.sum(L.relu_forward(x)[0] * r))
        _, cache = L.relu_forward(x)
        yield "relu", relative_error(L.relu_backward(r.astype(np.float32), cache),
                                     numerical_grad(relu_loss, x, step)), 0.0

        model = N.build_variant("ecndnet", 3, 4, seed=trial)
        clean = rng.random((2, 1, 6, 6), dtype=np.float32)
        noisy = (clean + 0.1 * rng.standard_normal(clean.shape)).astype(np.float32)
        model_loss = lambda: T.residual_loss(N.forward(model, noisy, "train")[0], noisy, clean)
        pred, caches = N.forward(model, noisy, "train")
        grads = N.backward(model, caches, T.residual_loss_grad(pred, noisy, clean))
        errors, skipped, total = [], 0, 0
        for k, v in model.parameter_dict().items():
            fd, valid = numerical_grad_piecewise(model_loss, v, step, lambda: relu_pattern(model, noisy))
            errors.append(relative_error(grads[k][valid], fd[valid]))
            skipped += int((~valid).sum())
            total += valid.size
        yield "model", max(errors), skipped / total


def test_criterion_03_gradient_suite():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    max_skipped = 0.0
    for name, err, skipped in _fd_trials():
        worst[name] = max(worst.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1
        max_skipped = max(max_skipped, skipped)
    seconds = time.perf_counter() - start
    # A probe that cannot avoid a ReLU kink even at step/100 has no defined
    # derivative to compare against; a handful of those is expected, many is not.
    ok = (all(e <= 1e-3 for e in worst.values()) and all(c == 20 for c in counts.values())
          and max_skipped <= 0.05 and seconds < 60)
    record(3, ok, ", ".join(f"{k} max {v:.1e}" for k, v in worst.items())
           + f"; kink-straddling probes skipped <= {max_skipped:.1%} per trial; {seconds:.1f}s")


def test_criterion_04_convolution_oracle():
    start = time.perf_counter()
    mismatches = 0
    for case in range(100):
        rng = np.random.default_rng([4, case])
        dil = (1, 2, 3)[case % 3]
        n, c, o = (int(v) for v in rng.integers(1, 4, 3))
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        weights = rng.standard_normal((o, c, 3, 3)).astype(np.float32)
        bias = rng.standard_normal(o).astype(np.float32) if case % 2 else None
        out, _ = L.conv2d_forward(x, L.Conv2dParams(weights, bias, dil))
        mismatches += not np.array_equal(out, conv2d_reference(x, weights, bias, dil))
    seconds = time.perf_counter() - start
    record(4, mismatches == 0 and seconds < 30, f"{100 - mismatches}/100 exact; {seconds:.1f}s")


def test_criterion_05_zero_residual_identity(tmp_path, png_dir):
    start = time.perf_counter()
    model = N.build_variant("ecndnet", 17, 64, seed=0)
    model.zero_last_layer()
    rng = np.random.default_rng(5)
    clean = rng.random((48, 48), dtype=np.float32)
    y = D.add_gaussian_noise(clean, D.NoiseConfig(25, seed=5))
    identity = np.array_equal(N.denoise(model, y), np.clip(y, 0, 1))

    # Noisy pixels that stay inside [0, 1]: the reported average must equal the noisy baseline.
    gray = tmp_path / "gray"
    gray.mkdir()
    for i in range(3):
        Image.fromarray(np.full((40, 40), 110 + 15 * i, np.uint8), mode="L").save(gray / f"g{i}.png")
    (rep,) = evaluate_set(model, gray, [5], seed=2)
    equal_unclipped = rep.average_denoised == rep.average_noisy

    # Natural images at sigma 25 do leave [0, 1]; there the zero-residual output is clip(y),
    # so its average must equal the baseline of the clipped noisy input.
    (rep,) = evaluate_set(model, png_dir, [25], seed=2)
    clipped_baseline = statistics.fmean(
        psnr(np.clip(D.add_gaussian_noise(img, D.NoiseConfig(25, 2, stream=i)), 0, 1), img)
        for i, (_, img) in enumerate(D.load_dataset(png_dir)))
    equal_clipped = abs(rep.average_denoised - clipped_baseline) <= 1e-6
    seconds = time.perf_counter() - start
    record(5, identity and equal_unclipped and equal_clipped and seconds < 10,
           f"denoise==clip: {identity}; avg==noisy (in range): {equal_unclipped}; "
           f"avg==clipped-noisy (sigma 25): {equal_clipped}; {seconds:.2f}s")


def held_in_psnr(ckpt_path, image_dir):
    """Mean per-patch PSNR of the noisy and the denoised training patches."""
    ck = C.load_checkpoint(ckpt_path)
    images = [img for _, img in D.load_dataset(image_dir)]
    cfg = ck.config
    ps = D.build_patch_set(images, cfg.sigma, cfg.seed, cfg.patch_size, cfg.stride)
    assert len(ps) == 225
    denoised = N.denoise(ck.model, ps.noisy[:, None])[:, 0]
    noisy = statistics.fmean(psnr(n, c) for n, c in zip(ps.noisy, ps.clean))
    den = statistics.fmean(psnr(d, c) for d, c in zip(denoised, ps.clean))
    return noisy, den


def test_criterion_06_toy_training(toy_runs, toy_image_dir):
    result = toy_runs.get("ecndnet")
    losses = result["losses"]
    noisy_db, den_db = held_in_psnr(result["path"], toy_image_dir)
    ok = (len(losses) == 30 and losses[-1] <= 0.5 * losses[0] and den_db >= noisy_db + 2
          and result["seconds"] < 600)
    record(6, ok, f"loss {losses[0]:.3f} -> {losses[-1]:.3f}; PSNR {noisy_db:.2f} -> {den_db:.2f} dB; "
                  f"{result['seconds']:.0f}s")


def test_criterion_07_ablation_ordering(toy_runs):
    final = {}
    seconds = 0.0
    for variant in VARIANTS:
        r = toy_runs.get(variant)
        final[variant] = r["losses"][-1]
        seconds += r["seconds"]
    ok = (final["crrbnet"] <= final["crnet"] and final["ecndnet"] <= 1.05 * final["crrbnet"]
          and seconds < 40 * 60)
    record(7, ok, ", ".join(f"{k} {v:.3f}" for k, v in final.items()) + f"; {seconds:.0f}s")


def test_criterion_08_determinism(toy_runs):
    a = toy_runs.get("ecndnet", "a")["path"].read_bytes()
    b = toy_runs.get("ecndnet", "b")["path"].read_bytes()
    record(8, a == b, f"{len(a)} bytes, identical: {a == b}")


def test_criterion_09_checkpoint_round_trip(toy_runs, tmp_path):
    path = toy_runs.get("ecndnet")["path"]
    ck = C.load_checkpoint(path)
    again = tmp_path / "again.ecn"
    C.save_checkpoint(again, ck.model, ck.adam, ck.config, ck.epoch)
    same = again.read_bytes() == path.read_bytes()
    record(9, same, f"trained toy checkpoint re-saved byte-identical: {same}")


def test_criterion_10_adam_oracle():
    lr, eps = 1e-3, 1e-8
    params = {"w": np.array([1.0])}
    state = T.AdamState()
    T.adam_step(state, params, {"w": 2 * params["w"]}, lr)
    first = params["w"][0] - 1.0
    expected = -lr * 2.0 / (2.0 + eps)
    first_ok = abs(first - expected) <= 1e-9

    reached = None
    for step in range(2, 5001):
        T.adam_step(state, params, {"w": 2 * params["w"]}, lr)
        if abs(params["w"][0]) < 1e-2:
            reached = step
            break
    ok = first_ok and reached is not None and reached <= 2000
    record(10, ok, f"first step {first:.12f} (expected {expected:.12f}); |w|<1e-2 first at step {reached}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
