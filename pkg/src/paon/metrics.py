"""Fidelity metrics (RGB PSNR, Y-channel SSIM) and dataset evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import atomic_write_bytes, bicubic_resize, from_model_range, load_pairs, to_model_range
from .errors import UsageError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise UsageError(f"image sizes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB over all RGB samples with peak 255; ``inf`` for identical images."""
    a, b = _check_pair(a, b)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(255.0**2 / mse))


def rgb_to_y(image: np.ndarray) -> np.ndarray:
    """Full-range BT.601 luma, unrounded float64."""
    img = np.asarray(image, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.tensordot(sliding_window_view(img, win.shape), win, axes=([2, 3], [0, 1]))


def ssim_y(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Mean SSIM of the Y channels over all valid 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise UsageError(f"ssim_y needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    y1, y2 = rgb_to_y(a), rgb_to_y(b)
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu1, mu2 = _filter_valid(y1, win), _filter_valid(y2, win)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _filter_valid(y1 * y1, win) - mu1_sq
    s2 = _filter_valid(y2 * y2, win) - mu2_sq
    s12 = _filter_valid(y1 * y2, win) - mu12
    num = (2 * mu12 + c1) * (2 * s12 + c2)
    den = (mu1_sq + mu2_sq + c1) * (s1 + s2 + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class EvalRecord:
    dataset: str
    image: str
    psnr: float
    ssim: float


def bicubic_upscaler(scale: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda lr: bicubic_resize(lr, scale)


def model_upscaler(model) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap an SR network as ``uint8 LR image -> uint8 SR image`` (output clamped)."""
    from .autodiff import no_grad

    def run(lr):
        with no_grad():
            return from_model_range(model(to_model_range(lr)).data[0])

    return run


def evaluate(upscaler, dataset_dir, upscale: int, dataset: str | None = None):
    """Score ``upscaler`` on every image of ``dataset_dir`` (filename order).

    ``upscaler`` maps a uint8 LR image to a uint8 SR image; an SR network is
    wrapped automatically. Returns ``(records, mean_record)``.
    """
    if not callable(upscaler) or hasattr(upscaler, "paon_layers"):
        upscaler = model_upscaler(upscaler)
    name = dataset or Path(dataset_dir).name
    records = []
    for stem, hr, lr in load_pairs(dataset_dir, upscale):
        sr = upscaler(lr)
        records.append(EvalRecord(name, stem, psnr_rgb(sr, hr), ssim_y(sr, hr)))
    mean = EvalRecord(name, "MEAN", float(np.mean([r.psnr for r in records])),
                      float(np.mean([r.ssim for r in records])))
    return records, mean


def format_eval_csv(records, mean) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "image", "psnr", "ssim"])
    for r in list(records) + [mean]:
        w.writerow([r.dataset, r.image, f"{r.psnr:.6f}", f"{r.ssim:.6f}"])
    return buf.getvalue()


def write_eval_csv(path, records, mean) -> None:
    atomic_write_bytes(path, format_eval_csv(records, mean).encode())
