"""PSNR and SSIM, plus dataset-level evaluation of a network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import engine

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class QualityError(ValueError):
    pass


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); MSE pooled over all channels. ``inf`` when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise QualityError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_2d(x, y, peak):
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    r = SSIM_WINDOW // 2
    # truncate so the kernel radius is exactly r; then crop to the valid region
    filt = lambda z: ndimage.gaussian_filter(z, SSIM_SIGMA, truncate=r / SSIM_SIGMA,
                                             mode="reflect")[r:-r, r:-r]
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 gaussian window (sigma 1.5).

    Accepts (H, W) or (C, H, W); channels are scored separately and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise QualityError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise QualityError(f"expected (H,W) or (C,H,W), got {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise QualityError(f"image {a.shape[1:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean([_ssim_2d(x, y, peak) for x, y in zip(a, b)]))


@dataclass
class QualityReport:
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)

    @property
    def psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else math.nan

    @property
    def ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else math.nan

    def value(self, metric: str) -> float:
        return {"psnr": self.psnr, "ssim": self.ssim}[metric]

    def to_dict(self) -> dict:
        enc = lambda v: "inf" if math.isinf(v) else v
        return {"psnr": enc(self.psnr), "ssim": self.ssim,
                "per_image": [{"psnr": enc(p), "ssim": s}
                              for p, s in zip(self.psnr_values, self.ssim_values)]}


class EvaluationError(RuntimeError):
    pass


def evaluate_dataset(graph, store, pairs, peak: float = 1.0, clip: bool = True) -> QualityReport:
    """Run every input through the network and score it against its reference.

    Outputs are clipped to [0, peak] first when ``clip`` is set, as an image
    pipeline would before writing pixels.
    """
    report = QualityReport()
    for idx, (x, ref) in enumerate(pairs):
        try:
            out = engine.forward(graph, store, x)
        except Exception as exc:
            raise EvaluationError(f"pair {idx}: forward failed: {exc}") from exc
        if clip:
            out = np.clip(out, 0.0, peak)
        report.psnr_values.append(psnr(out, ref, peak))
        ref = np.asarray(ref)
        report.ssim_values.append(ssim(out, ref, peak) if min(ref.shape[-2:]) >= SSIM_WINDOW
                                  else math.nan)
    return report


def passes(report: QualityReport, target, metric: str = "psnr") -> bool:
    """Strict gate: every selected metric must exceed its target.

    ``metric`` is "psnr", "ssim" or "both"; for "both" ``target`` is a
    ``(psnr, ssim)`` pair.
    """
    if metric == "both":
        tp, ts = target
        return report.psnr > tp and report.ssim > ts
    return report.value(metric) > target


def make_evaluator(pairs, peak: float = 1.0):
    """Evaluator callback for ``pruner.run_loop``."""
    return lambda graph, store: evaluate_dataset(graph, store, pairs, peak)
