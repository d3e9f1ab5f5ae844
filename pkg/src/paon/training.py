"""Training protocol: robust loss, Adan with cosine annealing, augmentation and noise.

Every random draw of iteration ``i`` comes from a generator seeded with
``(seed, i, sample)``, so a run is fully determined by its seed and can be
resumed mid-way without changing the trajectory.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, backward, make_op
from .data import degrade
from .errors import ConfigurationError, NumericDomainError, UsageError
from .metrics import model_upscaler, psnr_rgb

LOG_HEADER = "iter,loss,lr,val_psnr"


@dataclass(frozen=True)
class TrainConfig:
    patch: int = 64
    batch: int = 25
    iterations: int = 500_000
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    alpha: float = 1.5
    scale_c: float = 2.0
    noise_snr_db: float = 40.0
    upscale: int = 2
    seed: int = 0
    augment: bool = True
    val_interval: int = 1000
    optimizer: str = "adan"
    betas: tuple[float, ...] = (0.98, 0.92, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr_final < self.lr_init:
            raise ConfigurationError(f"lr_final ({self.lr_final}) must be below lr_init ({self.lr_init})")
        if self.patch % self.upscale:
            raise ConfigurationError(f"patch {self.patch} is not divisible by upscale {self.upscale}")
        if self.iterations < 1 or self.batch < 1 or self.val_interval < 1:
            raise ConfigurationError("iterations, batch and val_interval must be positive")
        if self.optimizer not in ("adan", "adam"):
            raise ConfigurationError(f"optimizer must be 'adan' or 'adam', got '{self.optimizer}'")
        if self.upscale not in (2, 4):
            raise ConfigurationError(f"upscale must be 2 or 4, got {self.upscale}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale schedule: 500 iterations of 16x16 HR patches.

    The short budget needs a higher peak learning rate (1e-2) than the
    full-scale schedule; the cosine still ends at 1e-6.
    """
    fields = dict(patch=16, batch=16, iterations=500, val_interval=100, lr_init=1e-2)
    fields.update(overrides)
    return TrainConfig(**fields)


# ---------------------------------------------------------------------------
# loss and schedule
# ---------------------------------------------------------------------------

def barron_loss(pred: Tensor, target: Tensor, alpha: float = 1.5, c: float = 2.0) -> Tensor:
    """Mean general robust loss ``(|a-2|/a) * (((e/c)^2 / |a-2| + 1)^(a/2) - 1)``.

    Valid for ``alpha`` not in {0, 2}.
    """
    if pred.shape != target.shape:
        raise UsageError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    if alpha in (0.0, 2.0):
        raise UsageError("barron_loss: alpha 0 and 2 are limit cases and not supported")
    e = pred.data.astype(np.float64) - target.data
    k = abs(alpha - 2.0)
    z = (e / c) ** 2 / k + 1.0
    rho = (k / alpha) * (z ** (alpha / 2) - 1.0)
    n = e.size
    out = np.asarray(rho.mean(), dtype=pred.dtype)

    def bw(g):
        d = (e / (c * c)) * z ** (alpha / 2 - 1)
        gp = (g * d / n).astype(pred.dtype)
        return gp, -gp

    return make_op("barron_loss", out, (pred, target), bw)


def cosine_lr(step: int, total: int, lr_init: float = 1e-3, lr_final: float = 1e-6) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at ``total``."""
    if total <= 0:
        return lr_init
    if step >= total:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Adan:
    """Adaptive Nesterov momentum: moments of the gradient, the gradient
    difference and the squared corrected gradient, all bias-corrected."""

    def __init__(self, betas=(0.98, 0.92, 0.99), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2, self.b3 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1, bc2, bc3 = 1 - self.b1**t, 1 - self.b2**t, 1 - self.b3**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            st = self.state.get(name)
            if st is None:
                z = np.zeros_like(p.data)
                st = self.state[name] = {"m": z, "v": z.copy(), "n": z.copy(), "prev": g.copy()}
            diff = g - st["prev"]
            st["m"] = self.b1 * st["m"] + (1 - self.b1) * g
            st["v"] = self.b2 * st["v"] + (1 - self.b2) * diff
            corrected = g + self.b2 * diff
            st["n"] = self.b3 * st["n"] + (1 - self.b3) * corrected * corrected
            st["prev"] = g.copy()
            denom = np.sqrt(st["n"] / bc3) + self.eps
            update = (st["m"] / bc1 + self.b2 * st["v"] / bc2) / denom
            data = p.data * (1 - lr * self.weight_decay) if self.weight_decay else p.data
            p.data = (data - lr * update).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step_count], dtype=np.float32)}
        for name, st in self.state.items():
            for key, arr in st.items():
                out[f"{key}/{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], shapes: dict[str, tuple]) -> None:
        self.step_count = int(arrays["step"].reshape(-1)[0])
        self.state = {}
        for key, arr in arrays.items():
            if key == "step":
                continue
            kind, name = key.split("/", 1)
            self.state.setdefault(name, {})[kind] = np.asarray(arr, dtype=np.float32).reshape(shapes[name])


class Adam(Adan):
    """Plain Adam, kept for cross-checking Adan runs."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__((betas[0], 0.0, betas[1]), eps, weight_decay)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1, bc3 = 1 - self.b1**t, 1 - self.b3**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            st = self.state.setdefault(name, {"m": np.zeros_like(p.data), "n": np.zeros_like(p.data)})
            st["m"] = self.b1 * st["m"] + (1 - self.b1) * g
            st["n"] = self.b3 * st["n"] + (1 - self.b3) * g * g
            update = (st["m"] / bc1) / (np.sqrt(st["n"] / bc3) + self.eps)
            data = p.data * (1 - lr * self.weight_decay) if self.weight_decay else p.data
            p.data = (data - lr * update).astype(p.dtype)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(eps=cfg.eps, weight_decay=cfg.weight_decay)
    return Adan(cfg.betas, cfg.eps, cfg.weight_decay)


def optimizer_step(params: dict, grads: dict, state, lr: float):
    """Functional wrapper: apply one update of ``state`` (an optimizer) and return it."""
    state.step(params, grads, lr)
    return state


# ---------------------------------------------------------------------------
# data pipeline
# ---------------------------------------------------------------------------

def apply_augmentation(hr: np.ndarray, rot: int = 0, hflip: bool = False, vflip: bool = False,
                       perm=(0, 1, 2)) -> np.ndarray:
    """Rotate by ``rot`` quarter turns, flip, then reorder colour channels of ``(H, W, 3)``."""
    out = np.rot90(hr, rot, axes=(0, 1))
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    return np.ascontiguousarray(out[..., list(perm)])


def augment(hr: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random quarter-turn rotation, horizontal/vertical flips and colour-channel shuffle."""
    if hr.shape[0] != hr.shape[1]:
        raise UsageError(f"augment expects a square patch, got {hr.shape[:2]}")
    rot = int(rng.integers(4))
    hflip, vflip = bool(rng.integers(2)), bool(rng.integers(2))
    perm = tuple(int(i) for i in rng.permutation(3))
    return apply_augmentation(hr, rot, hflip, vflip, perm)


def add_noise_snr(patch: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise at ``snr_db`` relative to the mean squared value of ``patch``.

    An all-zero patch (no signal power) is returned unchanged.
    """
    patch = np.asarray(patch)
    power = float(np.mean(np.asarray(patch, dtype=np.float64) ** 2))
    if power == 0 or math.isinf(snr_db):
        return patch.copy()
    sigma = math.sqrt(power / 10 ** (snr_db / 10))
    return (patch + rng.normal(0.0, sigma, patch.shape)).astype(patch.dtype)


def sample_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, index])


def sample_pair(images, cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One ``(lr, hr)`` pair of float32 ``(3, h, w)`` arrays in ``[-1, 1]``.

    Crops an HR patch, augments it, regenerates the LR patch by bicubic
    downscaling and adds noise to the LR patch only.
    """
    hr_img = images[int(rng.integers(len(images)))]
    h, w = hr_img.shape[:2]
    p = cfg.patch
    if h < p or w < p:
        raise UsageError(f"training image {h}x{w} smaller than patch {p}")
    y = int(rng.integers(0, h - p + 1))
    x = int(rng.integers(0, w - p + 1))
    hr = hr_img[y:y + p, x:x + p]
    if cfg.augment:
        hr = augment(hr, rng)
    lr = degrade(hr, cfg.upscale)
    to_range = lambda a: (a.astype(np.float32) / np.float32(127.5) - np.float32(1)).transpose(2, 0, 1)
    lr_f = add_noise_snr(to_range(lr), cfg.noise_snr_db, rng)
    return lr_f, to_range(hr)


def sample_batch(images, cfg: TrainConfig, iteration: int) -> tuple[Tensor, Tensor]:
    pairs = [sample_pair(images, cfg, sample_rng(cfg.seed, iteration, i)) for i in range(cfg.batch)]
    lr = np.stack([p[0] for p in pairs])
    hr = np.stack([p[1] for p in pairs])
    return Tensor(lr, dtype=np.float32), Tensor(hr, dtype=np.float32)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Snapshot of a run: parameters, optimizer arrays and progress."""

    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    iteration: int
    best_val_psnr: float


@dataclass
class TrainResult:
    best: TrainState
    final: TrainState
    log: list[str] = field(default_factory=list)


def validation_psnr(model, val_pairs) -> float:
    run = model_upscaler(model)
    return float(np.mean([psnr_rgb(run(lr), hr) for _, hr, lr in val_pairs]))


def format_log_row(iteration: int, loss: float, lr: float, val: float | None) -> str:
    return f"{iteration},{loss:.9g},{lr:.9g},{'' if val is None else f'{val:.6f}'}"


def train(model, train_images, val_pairs, cfg: TrainConfig, resume: TrainState | None = None,
          best: TrainState | None = None, on_row: Callable[[str], None] | None = None,
          on_validation: Callable[[TrainState, TrainState], None] | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Run the training loop and keep the parameters with the best validation PSNR.

    ``train_images`` are uint8 HR images; ``val_pairs`` are ``(name, hr, lr)``
    triples. Validation runs every ``cfg.val_interval`` iterations and after
    the last one. ``on_row`` receives each metrics-log line as it is produced;
    ``on_validation(current, best)`` runs after every validation (checkpointing).
    ``stop_after`` ends the run early at that iteration, leaving a state that
    :func:`train` can resume bit-exactly.
    """
    if not train_images:
        raise UsageError("training set is empty")
    params = dict(model.named_parameters())
    shapes = {k: p.shape for k, p in params.items()}
    opt = make_optimizer(cfg)
    start = 0
    best_psnr = -math.inf
    best_params = model.state_dict()
    if resume is not None:
        model.load_state_dict(resume.params)
        opt.load_state_arrays(resume.optimizer, shapes)
        start = resume.iteration
        best_psnr = resume.best_val_psnr
    best_opt = copy.deepcopy(opt.state_arrays())
    best_iter = start
    if resume is not None and best is not None:
        best_params, best_opt, best_iter = best.params, best.optimizer, best.iteration
    last = start
    log: list[str] = []
    total = cfg.iterations - 1

    for it in range(start + 1, cfg.iterations + 1):
        lr_t = cosine_lr(it - 1, total, cfg.lr_init, cfg.lr_final)
        lr_in, hr = sample_batch(train_images, cfg, it)
        model.zero_grad()
        pred = model(lr_in)
        loss = barron_loss(pred, hr, cfg.alpha, cfg.scale_c)
        if not np.isfinite(loss.data):
            where = model.locate_nonfinite(lr_in) or "loss only (all layer outputs finite)"
            raise NumericDomainError(f"non-finite loss at iteration {it}: {where}")
        backward(loss)
        opt.step(params, {k: p.grad for k, p in params.items()}, lr_t)

        val = None
        if it % cfg.val_interval == 0 or it == cfg.iterations:
            val = validation_psnr(model, val_pairs)
            if val > best_psnr:
                best_psnr, best_iter = val, it
                best_params = model.state_dict()
                best_opt = copy.deepcopy(opt.state_arrays())
        row = format_log_row(it, float(loss.data), lr_t, val)
        log.append(row)
        if on_row is not None:
            on_row(row)
        last = it
        if val is not None and on_validation is not None:
            on_validation(_snapshot(model, opt, it, best_psnr),
                          TrainState(best_params, best_opt, best_iter, best_psnr))
        if stop_after is not None and it >= stop_after:
            break

    final = _snapshot(model, opt, last, best_psnr)
    best_state = TrainState(best_params, copy.deepcopy(best_opt), best_iter, best_psnr)
    return TrainResult(best_state, final, log)


def _snapshot(model, opt, iteration: int, best_psnr: float) -> TrainState:
    return TrainState(model.state_dict(), copy.deepcopy(opt.state_arrays()), iteration, best_psnr)
