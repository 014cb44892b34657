"""PSNR, dataset evaluation and the runtime benchmark."""

from __future__ import annotations

import csv
import io
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from .data import NoiseConfig, add_gaussian_noise, load_dataset
from .errors import ConfigError, ShapeError


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not peak > 0:
        raise ConfigError("peak must be positive")
    diff = a.astype(np.float64).ravel() - b.astype(np.float64).ravel()
    mse = float(np.dot(diff, diff) / diff.size)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class EvalReport:
    sigma: float
    images: list[str] = field(default_factory=list)
    psnr_noisy: list[float] = field(default_factory=list)
    psnr_denoised: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.images)

    @property
    def average_noisy(self) -> float:
        return statistics.fmean(self.psnr_noisy)

    @property
    def average_denoised(self) -> float:
        return statistics.fmean(self.psnr_denoised)

    @property
    def mean_seconds(self) -> float:
        return statistics.fmean(self.seconds)


def evaluate_images(model: network.Model, images, sigma: float, seed: int = 0) -> EvalReport:
    """Noise each ``(name, clean)`` image, denoise it whole, and score both versions.

    The noisy PSNR is measured on the unclipped noisy image; the denoised
    output is clipped to [0, 1] by ``denoise``.
    """
    report = EvalReport(float(sigma))
    for i, (name, clean) in enumerate(images):
        noisy = add_gaussian_noise(clean, NoiseConfig(sigma, seed, stream=i))
        start = time.perf_counter()
        restored = network.denoise(model, noisy)
        report.seconds.append(time.perf_counter() - start)
        report.images.append(name)
        report.psnr_noisy.append(psnr(noisy, clean))
        report.psnr_denoised.append(psnr(restored, clean))
    if report.count == 0:
        raise ConfigError("no images to evaluate")
    return report


def evaluate_set(model: network.Model, image_dir, sigmas, seed: int = 0) -> list[EvalReport]:
    images = load_dataset(image_dir)
    return [evaluate_images(model, images, s, seed) for s in sigmas]


def _fmt_db(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.2f}"


def format_table(reports: list[EvalReport], title: str = "") -> str:
    """Aligned text table, one row per noise level."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'sigma':>7} {'images':>7} {'noisy(dB)':>10} {'denoised(dB)':>13} {'sec/img':>9}")
    for r in reports:
        lines.append(
            f"{r.sigma:>7g} {r.count:>7d} {_fmt_db(r.average_noisy):>10} "
            f"{_fmt_db(r.average_denoised):>13} {r.mean_seconds:>9.3f}"
        )
    return "\n".join(lines)


def to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sigma", "image", "psnr_noisy_db", "psnr_denoised_db", "seconds"])
    for r in reports:
        for row in zip(r.images, r.psnr_noisy, r.psnr_denoised, r.seconds):
            name, pn, pd, sec = row
            writer.writerow([f"{r.sigma:g}", name, repr(pn), repr(pd), f"{sec:.6f}"])
    return buf.getvalue()


def hardware_description() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {cpu}, {os.cpu_count()} logical CPUs, numpy {np.__version__}, python {platform.python_version()}"


@dataclass
class BenchResult:
    sizes: list[tuple[int, int]]
    samples: dict[tuple[int, int], list[float]]
    hardware: str

    @property
    def medians(self) -> dict[tuple[int, int], float]:
        return {s: statistics.median(self.samples[s]) for s in self.sizes}


def benchmark_runtime(model: network.Model, sizes=((256, 256), (512, 512), (1024, 1024)), repetitions: int = 10,
                      seed: int = 0, clock=time.perf_counter) -> BenchResult:
    """Median wall-clock of ``denoise`` per input size, after one warm-up pass."""
    if repetitions < 3:
        raise ConfigError("need at least 3 repetitions")
    rng = np.random.default_rng(seed)
    samples = {}
    for h, w in sizes:
        img = rng.random((h, w), dtype=np.float32)
        network.denoise(model, img)
        times = []
        for _ in range(repetitions):
            start = clock()
            network.denoise(model, img)
            times.append(clock() - start)
        samples[(h, w)] = times
    return BenchResult(list(sizes), samples, hardware_description())


def format_bench(result: BenchResult) -> str:
    lines = [f"# {result.hardware}", f"{'size':>11} {'median(s)':>10}"]
    for (h, w), med in result.medians.items():
        lines.append(f"{f'{h}x{w}':>11} {med:>10.4f}")
    return "\n".join(lines)
