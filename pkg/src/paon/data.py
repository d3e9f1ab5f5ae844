"""Image I/O, value-range mapping, bicubic resampling and dataset handling.

Images are ``uint8`` arrays of shape ``(H, W, 3)`` (sRGB). Model tensors are
``(N, 3, H, W)`` in ``[-1, 1]``.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .errors import PaonError, UsageError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageIOError(PaonError, OSError):
    """Unreadable, malformed or unsupported image file."""


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as ``(H, W, 3)`` uint8; alpha is dropped."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise ImageIOError(f"{path}: {err.strerror or err}") from err
    if raw[:8] != PNG_SIGNATURE or raw[12:16] != b"IHDR" or len(raw) < 33:
        raise ImageIOError(f"{path}: not a PNG file")
    depth, color_type = raw[24], raw[25]
    if depth != 8:
        raise ImageIOError(f"{path}: unsupported bit depth {depth} (only 8-bit PNGs are supported)")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError, SyntaxError) as err:
        raise ImageIOError(f"{path}: malformed PNG ({err})") from err
    return np.ascontiguousarray(arr)


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        os.chmod(tmp, 0o666 & ~_umask())
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_png(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise UsageError(f"save_png expects (H, W, 3) uint8, got {image.shape} {image.dtype}")
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    try:
        atomic_write_bytes(path, buf.getvalue())
    except OSError as err:
        raise ImageIOError(f"{path}: {err.strerror or err}") from err


def to_model_range(image: np.ndarray) -> Tensor:
    """``(H, W, 3)`` or ``(N, H, W, 3)`` uint8 -> ``(N, 3, H, W)`` tensor via ``x / 127.5 - 1``."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)), dtype=np.float32)


def from_model_range(x) -> np.ndarray:
    """Inverse of :func:`to_model_range`: clamp to ``[-1, 1]``, rescale, round half away from zero.

    Accepts a tensor or array of shape ``(3, H, W)`` or ``(N, 3, H, W)``;
    returns ``(H, W, 3)`` or ``(N, H, W, 3)`` uint8.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.asarray(arr, dtype=np.float64)
    v = (np.clip(arr, -1.0, 1.0) + 1.0) * 127.5
    v = np.floor(v + 0.5).astype(np.uint8)  # v >= 0, so this rounds half away from zero
    return np.moveaxis(v, -3, -1).copy()


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    inner = (a + 2) * t3 - (a + 3) * t2 + 1
    outer = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, inner, np.where(t < 2, outer, 0.0))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric extension: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ..."""
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def resize_matrix(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """``(n_out, n_in)`` Catmull-Rom weights with half-pixel centres.

    When downscaling the kernel is stretched by ``1/scale`` (antialiasing).
    Rows are normalised to sum to one.
    """
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * stretch) * stretch
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), _reflect(idx, n_in).ravel()), w.ravel())
    return mat


def _as_scale(scale) -> Fraction:
    s = Fraction(scale).limit_denominator(16)
    if s not in (Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2), Fraction(4)):
        raise UsageError(f"bicubic_resize supports scales 1/4, 1/2, 1, 2, 4; got {scale}")
    return s


def bicubic_resize(image: np.ndarray, scale) -> np.ndarray:
    """Resize an ``(H, W, C)`` image by ``scale`` with Catmull-Rom bicubic (a = -0.5).

    uint8 input gives uint8 output (rounded, clipped); float input gives float64.
    """
    s = _as_scale(scale)
    img = np.asarray(image)
    h, w = img.shape[:2]
    oh, ow = int(round(h * s)), int(round(w * s))
    if oh < 1 or ow < 1:
        raise UsageError(f"bicubic_resize: output size {oh}x{ow} is empty")
    if s == 1:
        return img.copy()
    ry = resize_matrix(h, oh, float(s))
    rx = resize_matrix(w, ow, float(s))
    out = np.einsum("ij,jkc,lk->ilc", ry, img.astype(np.float64), rx, optimize=True)
    if img.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out


def modcrop(image: np.ndarray, scale: int) -> np.ndarray:
    h, w = image.shape[:2]
    return image[: h - h % scale, : w - w % scale]


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic LR counterpart of an HR image (HR must be divisible by ``scale``)."""
    return bicubic_resize(hr, Fraction(1, scale))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def list_images(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.png"), key=lambda p: p.name)


def load_pairs(root, scale: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """``(name, hr, lr)`` triples from ``<root>/HR`` and optional ``<root>/LRx{scale}``.

    HR images are cropped to a multiple of ``scale``; missing LR images are
    synthesised with :func:`degrade`. Ordered by filename.
    """
    root = Path(root)
    hr_dir = root / "HR"
    if not hr_dir.is_dir():
        raise UsageError(f"dataset {root}: missing HR directory")
    files = list_images(hr_dir)
    if not files:
        raise UsageError(f"dataset {root}: no PNG images in {hr_dir}")
    lr_dir = root / f"LRx{scale}"
    pairs = []
    for f in files:
        hr = modcrop(load_png(f), scale)
        if (lr_dir / f.name).exists():
            lr = load_png(lr_dir / f.name)
            if lr.shape[0] * scale != hr.shape[0] or lr.shape[1] * scale != hr.shape[1]:
                raise UsageError(f"{lr_dir / f.name}: LR size {lr.shape[:2]} does not match HR {hr.shape[:2]}")
        else:
            lr = degrade(hr, scale)
        pairs.append((f.stem, hr, lr))
    return pairs


def synthetic_texture(rng: np.random.Generator, size: int = 32, max_freq: float = 0.2) -> np.ndarray:
    """A band-limited colour texture: random oriented gratings plus low-pass noise."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.zeros((3, size, size))
    for _ in range(rng.integers(2, 5)):
        f = rng.uniform(0.03, max_freq)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        if rng.random() < 0.5:
            wave = np.tanh(3 * wave)  # sharper, edge-like profile
        base += rng.uniform(0.3, 1.0) * rng.uniform(0.2, 1.0, 3)[:, None, None] * wave
    noise = rng.standard_normal((3, size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    mask = np.sqrt(fy**2 + fx**2) <= max_freq
    base += 0.3 * np.real(np.fft.ifft2(np.fft.fft2(noise) * mask))
    base -= base.min()
    base /= base.max() + 1e-12
    lo, hi = sorted(rng.uniform(0, 255, 2))
    lo, hi = min(lo, 40.0), max(hi, 215.0)
    img = lo + (hi - lo) * base
    return np.clip(np.floor(img.transpose(1, 2, 0) + 0.5), 0, 255).astype(np.uint8)


TOY_MAX_FREQ = 0.2


def synthetic_textures(n: int, size: int = 32, seed: int = 0, max_freq: float = TOY_MAX_FREQ) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_texture(rng, size, max_freq) for _ in range(n)]


def write_dataset(root, images, scales=(2,)) -> Path:
    """Write ``images`` as ``<root>/HR/0000.png`` ... plus bicubic ``LRx{s}`` copies."""
    root = Path(root)
    (root / "HR").mkdir(parents=True, exist_ok=True)
    for s in scales:
        (root / f"LRx{s}").mkdir(exist_ok=True)
    for i, img in enumerate(images):
        save_png(img, root / "HR" / f"{i:04d}.png")
        for s in scales:
            save_png(degrade(modcrop(img, s), s), root / f"LRx{s}" / f"{i:04d}.png")
    return root


def make_synthetic_dataset(root, n: int, size: int = 32, seed: int = 0, scales=(2,)) -> Path:
    return write_dataset(root, synthetic_textures(n, size, seed), scales)


def read_png_header(path) -> tuple[int, int, int, int]:
    """``(width, height, bit_depth, color_type)`` from the IHDR chunk."""
    raw = Path(path).read_bytes()[:33]
    if raw[:8] != PNG_SIGNATURE:
        raise ImageIOError(f"{path}: not a PNG file")
    w, h, depth, ctype = struct.unpack(">IIBB", raw[16:26])
    return w, h, depth, ctype
