"""Padé approximant neuron layers, the Shifter module and the PAU activation.

A Paon layer of degree ``[M/N]`` computes, for every output channel,

    P_M(x) = w0 + sum_{k=1..M} conv(w_mk, x^k)
    Q_N(x) = 1  + sum_{l=1..N} conv(w_nl, x^l)

and combines them according to the variant:

* ``vanilla``: ``P_M / Q_N`` (may divide by zero; opt-in only)
* ``A``: ``P_M / (1 + sum_l |conv(w_nl, x^l)|)``, divisor >= 1
* ``S``: ``(Q_N P_M + Q_{N-1} P_{M-1}) / (Q_N^2 + Q_{N-1}^2)``

With ``N = 0`` the denominator is 1 and the layer is a sum of convolved
powers; ``[1/0]`` is an ordinary convolution.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .autodiff import (
    Tensor, abs_, conv2d, div, global_avg_pool, pow_elementwise, rational, reshape,
    scalar_mul, tanh, translate_bilinear,
)
from .errors import ConfigurationError, NumericDomainError
from .module import Module, Parameter

VARIANTS = ("vanilla", "A", "S")
VANILLA_EPS = 1e-6


@dataclass(frozen=True)
class PaonSpec:
    """Static description of one Paon layer.

    ``shift < 0`` disables the Shifter, ``shift == 0`` learns unbounded
    per-channel shifts and ``shift > 0`` bounds them to ``[-shift, shift]``.
    ``share_truncation`` makes the lower-order polynomials of the S variant
    reuse the full-order kernels; when False they get their own parameters.
    """

    M: int = 1
    N: int = 0
    variant: str = "A"
    in_ch: int = 1
    out_ch: int = 1
    kernel: tuple[int, int] = (3, 3)
    shift: int = -1
    allow_vanilla: bool = False
    share_truncation: bool = True

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        else:
            object.__setattr__(self, "kernel", tuple(self.kernel))
        if self.M < 1 or self.N < 0:
            raise ConfigurationError(f"degrees must satisfy M >= 1, N >= 0; got [{self.M}/{self.N}]")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown Paon variant '{self.variant}', expected one of {VARIANTS}")
        if self.variant == "S" and abs(self.M - self.N) > 1:
            raise ConfigurationError(f"Paon-S needs |M - N| <= 1, got [{self.M}/{self.N}]")
        if self.variant == "vanilla" and self.N > 0 and not self.allow_vanilla:
            raise ConfigurationError("vanilla Paon can divide by zero; pass allow_vanilla=True to use it")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigurationError(f"kernel size must be odd, got {self.kernel}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ConfigurationError(f"channel counts must be positive, got {self.in_ch}->{self.out_ch}")

    @property
    def degrees(self) -> str:
        return f"[{self.M}/{self.N}]"


def count_paon_parameters(spec: PaonSpec) -> int:
    """Closed-form number of trainable scalars in a Paon layer."""
    kh, kw = spec.kernel
    kernel = spec.out_ch * spec.in_ch * kh * kw
    total = spec.M * kernel + spec.out_ch + spec.N * kernel
    if spec.variant == "S" and not spec.share_truncation:
        total += (spec.M - 1) * kernel + spec.out_ch + max(spec.N - 1, 0) * kernel
    if spec.shift >= 0:
        total += 2 * spec.in_ch * spec.in_ch + 2 * spec.in_ch
    return total


class Shifter(Module):
    """Learnable per-channel translation: average -> 1x1 conv -> activation -> resample.

    The 1x1 convolution maps the ``C`` channel means to ``2C`` values, read as
    one ``(dy, dx)`` pair per channel. For ``bound > 0`` they pass through
    ``bound * tanh``; for ``bound == 0`` they are used directly. Weights and
    bias start at zero, so a fresh Shifter is the identity.
    """

    def __init__(self, channels: int, bound: int):
        if bound < 0:
            raise ConfigurationError("Shifter bound must be >= 0 (negative disables the module)")
        self.channels = channels
        self.bound = bound
        self.weight = Parameter(np.zeros((2 * channels, channels, 1, 1)))
        self.bias = Parameter(np.zeros(2 * channels))

    def shifts(self, x: Tensor) -> Tensor:
        """Per-sample, per-channel ``(dy, dx)`` of shape ``(N, C, 2)``."""
        raw = conv2d(global_avg_pool(x), self.weight, self.bias)
        raw = reshape(raw, (x.shape[0], self.channels, 2))
        return scalar_mul(tanh(raw), float(self.bound)) if self.bound > 0 else raw

    def forward(self, x: Tensor) -> Tensor:
        return translate_bilinear(x, self.shifts(x))

    def bias_shifts(self) -> np.ndarray:
        """Shifts produced for a zero-mean input, shape ``(C, 2)``."""
        raw = self.bias.data.reshape(self.channels, 2).astype(np.float64)
        return self.bound * np.tanh(raw) if self.bound > 0 else raw


def init_paon(spec: PaonSpec, rng) -> dict[str, np.ndarray]:
    """Initial parameter arrays for a Paon layer.

    Order-1 numerator kernel and the bias are uniform in ``±1/sqrt(fan_in)``;
    each extra numerator order is damped by 0.1. Denominator kernels start at
    zero so every variant begins as its ``[M/0]`` reduction. Draw order is
    order-1 kernel, bias, then higher orders, so ``[1/0]`` consumes the same
    random stream as a plain convolution.
    """
    rng = np.random.default_rng(rng)
    kh, kw = spec.kernel
    shape = (spec.out_ch, spec.in_ch, kh, kw)
    gain = 1.0 / np.sqrt(spec.in_ch * kh * kw)
    params = {"num1": rng.uniform(-gain, gain, shape), "num_bias": rng.uniform(-gain, gain, spec.out_ch)}
    for k in range(2, spec.M + 1):
        params[f"num{k}"] = rng.uniform(-gain, gain, shape) * 0.1 ** (k - 1)
    for l in range(1, spec.N + 1):
        params[f"den{l}"] = np.zeros(shape)
    if spec.variant == "S" and not spec.share_truncation:
        params["low_bias"] = params["num_bias"].copy()
        for k in range(1, spec.M):
            params[f"low_num{k}"] = params[f"num{k}"].copy()
        for l in range(1, spec.N):
            params[f"low_den{l}"] = np.zeros(shape)
    return {k: v.astype(np.float32) for k, v in params.items()}


class PaonLayer(Module):
    """Convolutional Padé approximant neuron layer (see module docstring)."""

    def __init__(self, spec: PaonSpec, rng=None, name: str = "paon"):
        self.spec = spec
        self.name = name
        init = init_paon(spec, rng)
        self.num_bias = Parameter(init["num_bias"])
        self.num = [_Holder(Parameter(init[f"num{k}"])) for k in range(1, spec.M + 1)]
        self.den = [_Holder(Parameter(init[f"den{l}"])) for l in range(1, spec.N + 1)]
        if spec.variant == "S" and not spec.share_truncation:
            self.low_bias = Parameter(init["low_bias"])
            self.low_num = [_Holder(Parameter(init[f"low_num{k}"])) for k in range(1, spec.M)]
            self.low_den = [_Holder(Parameter(init[f"low_den{l}"])) for l in range(1, spec.N)]
        self.shifter = Shifter(spec.in_ch, spec.shift) if spec.shift >= 0 else None

    def named_parameters(self, prefix: str = ""):
        # flatter names than the generic walk: num1, num2, den1, ...
        yield f"{prefix}num_bias", self.num_bias
        for k, h in enumerate(self.num, 1):
            yield f"{prefix}num{k}", h.p
        for l, h in enumerate(self.den, 1):
            yield f"{prefix}den{l}", h.p
        if self.spec.variant == "S" and not self.spec.share_truncation:
            yield f"{prefix}low_bias", self.low_bias
            for k, h in enumerate(self.low_num, 1):
                yield f"{prefix}low_num{k}", h.p
            for l, h in enumerate(self.low_den, 1):
                yield f"{prefix}low_den{l}", h.p
        if self.shifter is not None:
            yield from self.shifter.named_parameters(f"{prefix}shifter.")

    def _conv(self, x: Tensor, w: Parameter, bias=None) -> Tensor:
        return conv2d(x, w, bias, padding="circular")

    def forward(self, x: Tensor) -> Tensor:
        spec = self.spec
        if x.shape[1] != spec.in_ch:
            raise ConfigurationError(f"{self.name}: expected {spec.in_ch} input channels, got {x.shape[1]}")
        if self.shifter is not None:
            x = self.shifter(x)
        powers = [x]
        for k in range(2, max(spec.M, spec.N) + 1):
            powers.append(pow_elementwise(x, k))

        num_terms = [self._conv(powers[k - 1], h.p) for k, h in enumerate(self.num, 1)]
        den_terms = [self._conv(powers[l - 1], h.p) for l, h in enumerate(self.den, 1)]
        bias = reshape(self.num_bias, (1, spec.out_ch, 1, 1))
        p_full = _total(num_terms, bias)
        if spec.N == 0:
            return p_full

        if spec.variant == "A":
            # +1 subgradient at zero: zero-initialized denominators must still learn
            d = _total([abs_(t, subgrad_at_zero=1.0) for t in den_terms], 1.0)
            return div(p_full, d, where=self.name)
        q_full = _total(den_terms, 1.0)
        if spec.variant == "vanilla":
            small = np.abs(q_full.data) < VANILLA_EPS
            if small.any():
                pos = tuple(int(i) for i in np.argwhere(small)[0])
                raise NumericDomainError(f"{self.name}: vanilla Paon denominator |Q| < {VANILLA_EPS} at {pos}")
            return div(p_full, q_full, where=self.name)

        # S variant
        if spec.share_truncation:
            p_low = _total(num_terms[:-1], bias)
            q_low = _total(den_terms[:-1], 1.0)
        else:
            low_bias = reshape(self.low_bias, (1, spec.out_ch, 1, 1))
            p_low = _total([self._conv(powers[k - 1], h.p) for k, h in enumerate(self.low_num, 1)], low_bias)
            q_low = _total([self._conv(powers[l - 1], h.p) for l, h in enumerate(self.low_den, 1)], 1.0)
        numer = q_full * p_full + q_low * p_low
        denom = q_full * q_full + q_low * q_low
        return div(numer, denom, where=self.name)

    def denominator(self, x: Tensor) -> Tensor:
        """The divisor actually applied by the A or vanilla variant (1 when N = 0)."""
        if self.shifter is not None:
            x = self.shifter(x)
        terms = [self._conv(pow_elementwise(x, l), h.p) for l, h in enumerate(self.den, 1)]
        if self.spec.variant == "A":
            terms = [abs_(t) for t in terms]
        return _total(terms, 1.0) if terms else Tensor(np.ones((x.shape[0], self.spec.out_ch) + x.shape[2:]))


class _Holder(Module):
    """Wraps one Parameter so lists of kernels are walked by Module."""

    def __init__(self, p: Parameter):
        self.p = p


def _total(terms, start):
    out = start
    for t in terms:
        out = t + out if isinstance(out, (int, float)) else out + t
    if isinstance(out, (int, float)):
        return Tensor(np.float32(out))
    return out


# ---------------------------------------------------------------------------
# Padé activation unit
# ---------------------------------------------------------------------------

def _gelu(x):
    return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))


def _safe_rational(coef, x, m):
    a, b = coef[: m + 1], coef[m + 1:]
    p = np.polyval(a[::-1], x)
    d = 1.0 + sum(np.abs(b[l - 1] * x**l) for l in range(1, len(b) + 1))
    return p / d


@functools.lru_cache(maxsize=None)
def fit_gelu_rational(m: int = 7, n: int = 6, lo: float = -3.0, hi: float = 3.0, points: int = 601):
    """Least-squares fit of GELU on ``[lo, hi]`` by ``sum a_k x^k / (1 + sum |b_l x^l|)``.

    A linearized solve ``P(x) - f(x) Q(x) = f(x)`` gives the starting point;
    a nonlinear least-squares refinement then fits the safe form itself.
    Returns ``(a, b, max_abs_error_on_grid)``.
    """
    x = np.linspace(lo, hi, points)
    f = _gelu(x)
    A = np.hstack([x[:, None] ** np.arange(m + 1), -f[:, None] * x[:, None] ** np.arange(1, n + 1)])
    start, *_ = np.linalg.lstsq(A, f, rcond=None)
    res = optimize.least_squares(lambda c: _safe_rational(c, x, m) - f, start, method="lm", max_nfev=20000)
    coef = res.x
    err = float(np.max(np.abs(_safe_rational(coef, x, m) - f)))
    return coef[: m + 1].copy(), coef[m + 1:].copy(), err


class PAU(Module):
    """Padé activation unit: one learnable safe rational function per layer instance."""

    def __init__(self, m: int = 7, n: int = 6):
        a, b, _ = fit_gelu_rational(m, n)
        self.num = Parameter(a)
        self.den = Parameter(b)

    def forward(self, x: Tensor) -> Tensor:
        return rational(x, self.num, self.den)
