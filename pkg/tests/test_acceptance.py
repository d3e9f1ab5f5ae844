"""Acceptance criteria 2-10. Each test records one PASS/FAIL line (see conftest)."""

import json
import math
import time

import numpy as np
import pytest

from paon.autodiff import (
    Tensor, abs_, add, backward, conv2d, div, gelu, global_avg_pool, mean, mul, no_grad, pixel_shuffle,
    pixel_unshuffle, pow_elementwise, rational, reshape, scalar_mul, shadow64, sub, sum_, tanh,
    translate_bilinear,
)
from paon.autodiff.gradcheck import gradcheck, rel_error
from paon.cli import ABLATION_COLUMNS, main
from paon.data import bicubic_resize, make_synthetic_dataset, synthetic_texture
from paon.layers import PAU, PaonLayer, PaonSpec, Shifter
from paon.metrics import psnr_rgb, ssim_y
from paon.training import TrainConfig, barron_loss, cosine_lr

CASES = 20


# ---------------------------------------------------------------------------
# 2. reduction equivalence
# ---------------------------------------------------------------------------

def roll_conv(x, w, b):
    """Circular cross-correlation written with rolls (independent of conv2d)."""
    out = np.zeros((x.shape[0], w.shape[0]) + x.shape[2:])
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            shifted = np.roll(x, (1 - i, 1 - j), axis=(2, 3))
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], shifted)
    return out + b[None, :, None, None]


def test_2_reduction_equivalence(report):
    rng = np.random.default_rng(2)
    layer = PaonLayer(PaonSpec(1, 0, "A", 3, 4, shift=-1), rng)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float32)
        with no_grad():
            out = layer(Tensor(x)).data
        ref = roll_conv(x.astype(np.float64), layer.num[0].p.data.astype(np.float64),
                        layer.num_bias.data.astype(np.float64))
        worst = max(worst, float(np.max(np.abs(out - ref))))
    elapsed = time.perf_counter() - t0
    ok = report(2, worst < 1e-6 and elapsed < 1.0,
                f"Paon [1/0] vs plain conv, 100 inputs: max|diff| {worst:.2e} (< 1e-6), {elapsed:.2f} s (< 1 s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. gradient audit
# ---------------------------------------------------------------------------

def q(t):
    return sum_(t * t)


def _op_cases():
    n = lambda r, *s: r.standard_normal(s)
    away = lambda r, *s: r.uniform(0.5, 2.0, s) * r.choice([-1.0, 1.0], s)
    return {
        "add": lambda r: (lambda a, b: q(add(a, b)), [n(r, 2, 3, 1, 4), n(r, 1, 3, 5, 4)]),
        "sub": lambda r: (lambda a, b: q(sub(a, b)), [n(r, 2, 3, 1, 4), n(r, 1, 3, 5, 4)]),
        "mul": lambda r: (lambda a, b: q(mul(a, b)), [n(r, 2, 3, 1, 4), n(r, 1, 3, 5, 4)]),
        "div": lambda r: (lambda a, b: q(div(a, b)), [n(r, 2, 3, 4, 4), away(r, 1, 3, 1, 4)]),
        "scalar_mul": lambda r: (lambda a: q(scalar_mul(a, -2.5)), [n(r, 3, 4)]),
        "abs": lambda r: (lambda a: q(abs_(a) + a), [n(r, 3, 4, 5)]),
        "pow_elementwise k=2": lambda r: (lambda a: q(pow_elementwise(a, 2) + a), [n(r, 2, 3, 4)]),
        "pow_elementwise k=3": lambda r: (lambda a: q(pow_elementwise(a, 3)), [n(r, 2, 3, 4)]),
        "gelu": lambda r: (lambda a: q(gelu(a)), [n(r, 2, 3, 4) * 2]),
        "tanh": lambda r: (lambda a: q(tanh(a)), [n(r, 2, 3, 4) * 2]),
        "sum": lambda r: (lambda a: q(sum_(a * a) - sum_(a)), [n(r, 2, 3, 4)]),
        "mean": lambda r: (lambda a: q(mean(a * a) + mean(a)), [n(r, 2, 3, 4)]),
        "reshape": lambda r: (lambda a: q(reshape(a, (4, 6)) * Tensor(np.arange(24.0).reshape(4, 6))),
                              [n(r, 2, 3, 4)]),
        "conv2d circular": lambda r: (lambda x, k, b: q(conv2d(x, k, b, "circular")),
                                      [n(r, 2, 3, 5, 4), n(r, 4, 3, 3, 3), n(r, 4)]),
        "conv2d zero": lambda r: (lambda x, k, b: q(conv2d(x, k, b, "zero")),
                                  [n(r, 2, 3, 5, 4), n(r, 4, 3, 3, 3), n(r, 4)]),
        "global_avg_pool": lambda r: (lambda x: q(global_avg_pool(x * x)), [n(r, 2, 3, 4, 5)]),
        "pixel_shuffle": lambda r: (lambda x: q(pixel_shuffle(x, 2) * Tensor(np.arange(72.0).reshape(1, 2, 6, 6))),
                                    [n(r, 1, 8, 3, 3)]),
        "pixel_unshuffle": lambda r: (lambda x: q(pixel_unshuffle(x, 2) * Tensor(np.arange(48.0).reshape(1, 8, 2, 3))),
                                      [n(r, 1, 2, 4, 6)]),
        "translate_bilinear": lambda r: (lambda x, s: q(translate_bilinear(x, s) * Tensor(np.arange(150.0).reshape(2, 3, 5, 5))),
                                         [n(r, 2, 3, 5, 5), r.uniform(-2, 2, (2, 3, 2))]),
        "rational (PAU op)": lambda r: (lambda x, a, b: q(rational(x, a, b)), [n(r, 2, 3, 4), n(r, 8), n(r, 6) * 0.5]),
        "barron_loss": lambda r: (lambda p, t: barron_loss(p, t) * 100.0, [n(r, 2, 3, 4, 4), n(r, 2, 3, 4, 4)]),
    }


def module_gradcheck(module, x, h=1e-6):
    """Max relative error over the input and every parameter of ``module``."""
    module.astype(np.float64)
    params = module.parameters()
    w = np.random.default_rng(0).standard_normal(np.shape(module(Tensor(x, dtype=np.float64)).data))

    def loss(inp):
        return sum_(module(inp) * Tensor(w))

    with shadow64():
        xt = Tensor(x, requires_grad=True)
        module.zero_grad()
        backward(loss(xt))
        analytic = [xt.grad] + [p.grad for p in params]
        arrays = [np.array(x, dtype=np.float64)] + [p.data for p in params]
        errs = []
        with no_grad():
            for arr, g in zip(arrays, analytic):
                num = np.zeros_like(arr)
                flat, nflat = arr.reshape(-1), num.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(loss(Tensor(arrays[0])).data)
                    flat[i] = orig - h
                    fm = float(loss(Tensor(arrays[0])).data)
                    flat[i] = orig
                    nflat[i] = (fp - fm) / (2 * h)
                errs.append(rel_error(g, num))
    return max(errs)


def _randomize(module, rng, scale):
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * scale
    return module


def _module_cases():
    cases = {}
    for variant in ("vanilla", "A", "S"):
        for m, n in ((2, 1), (2, 2), (3, 2)):
            def make(r, variant=variant, m=m, n=n):
                spec = PaonSpec(m, n, variant, 2, 1, shift=-1, allow_vanilla=True)
                layer = _randomize(PaonLayer(spec, r), r, 0.3)
                for h in layer.den:  # keep the vanilla denominator well away from zero
                    h.p.data = h.p.data * (0.3 if variant == "vanilla" else 1.0)
                return layer, r.uniform(-1, 1, (1, 2, 4, 4))
            cases[f"Paon-{variant} [{m}/{n}]"] = make
    cases["Shifter b=1"] = lambda r: (_randomize(Shifter(2, 1), r, 0.7), r.uniform(-1, 1, (2, 2, 4, 4)))
    cases["Shifter b=0"] = lambda r: (_randomize(Shifter(2, 0), r, 0.7), r.uniform(-1, 1, (2, 2, 4, 4)))

    def pau(r):
        act = PAU()
        act.num.data = act.num.data + r.standard_normal(act.num.shape) * 0.05
        act.den.data = act.den.data + r.standard_normal(act.den.shape) * 0.05
        return act, r.uniform(-3, 3, (2, 3, 4))
    cases["PAU"] = pau
    return cases


def test_3_gradient_audit(report):
    t0 = time.perf_counter()
    worst = {}
    for name, make in _op_cases().items():
        errs = []
        for c in range(CASES):
            fn, arrays = make(np.random.default_rng([3, c, len(name)]))
            errs += gradcheck(fn, arrays)
        worst[name] = max(errs)
    for name, make in _module_cases().items():
        worst[name] = max(module_gradcheck(*make(np.random.default_rng([31, c, len(name)]))) for c in range(CASES))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-6}
    top = max(worst, key=worst.get)
    ok = report(3, not bad and elapsed < 120,
                f"{len(worst)} ops/modules x {CASES} cases: worst rel err {worst[top]:.1e} ({top}) (< 1e-6), "
                f"{elapsed:.0f} s (< 120 s)" + (f"; failing: {sorted(bad)}" if bad else ""))
    assert ok, bad


# ---------------------------------------------------------------------------
# 4. singularity safety
# ---------------------------------------------------------------------------

def _zero_q_n(layer, x, rng):
    """Adjust the top denominator kernel so that Q_N vanishes at one random pixel of sample 0."""
    n_deg = layer.spec.N
    _, c, hh, ww = x.shape
    y0, x0 = int(rng.integers(hh)), int(rng.integers(ww))
    rows = [(y0 + i - 1) % hh for i in range(3)]
    cols = [(x0 + j - 1) % ww for j in range(3)]
    with no_grad():
        lower = 1.0 + sum(conv2d(Tensor(x ** l), h.p).data[0, :, y0, x0] for l, h in enumerate(layer.den[:-1], 1))
    patch = (x[0] ** n_deg)[:, rows][:, :, cols].astype(np.float64)
    k = layer.den[-1].p.data.astype(np.float64)
    current = np.tensordot(k, patch, axes=([1, 2, 3], [0, 1, 2]))
    k += ((-lower - current) / np.sum(patch * patch))[:, None, None, None] * patch[None]
    layer.den[-1].p.data = k.astype(np.float32)
    return (y0, x0)


def test_4_singularity_safety(report):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    draws = 0
    a_min = math.inf
    s_bad = 0
    s_zeroed = 0.0
    per_variant = 20_000  # A [2/1] and S [2/1], [2/2], [3/2], [3/3]
    batch = 100
    specs = [("A", 2, 1), ("S", 2, 1), ("S", 2, 2), ("S", 3, 2), ("S", 3, 3)]
    for variant, m, n in specs:
        for d in range(per_variant // batch):
            layer = PaonLayer(PaonSpec(m, n, variant, 2, 2, shift=-1), rng)
            _randomize(layer, rng, 10 ** rng.uniform(-1, 1))
            x = rng.uniform(-1, 1, (batch, 2, 4, 4)).astype(np.float32)
            adversarial = d % 2 == 0
            if adversarial:
                y0, x0 = _zero_q_n(layer, x, rng)
            xt = Tensor(x, requires_grad=True)
            out = layer(xt)
            if variant == "A":
                with no_grad():
                    a_min = min(a_min, float(layer.denominator(Tensor(x)).data.min()))
            else:
                if adversarial:
                    with no_grad():
                        q_n = 1.0 + sum(conv2d(Tensor(x ** l), h.p).data for l, h in enumerate(layer.den, 1))
                    s_zeroed = max(s_zeroed, float(np.abs(q_n[0, :, y0, x0]).max()))
                backward(sum_(out * out))
                grads = [xt.grad] + [p.grad for p in layer.parameters()]
                if not (np.all(np.isfinite(out.data)) and all(np.all(np.isfinite(g)) for g in grads)):
                    s_bad += 1
            draws += batch
    elapsed = time.perf_counter() - t0
    ok = report(4, a_min >= 1.0 and s_bad == 0 and draws >= 100_000 and elapsed < 60,
                f"{draws} draws (half with Q_N zeroed, residual |Q_N| <= {s_zeroed:.1e}): "
                f"min Paon-A denominator {a_min:.4f} (>= 1), non-finite Paon-S batches {s_bad} (0), "
                f"{elapsed:.0f} s (< 60 s)")
    assert ok


# ---------------------------------------------------------------------------
# toy runs shared by 5, 6 and 9
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_synthetic_dataset(root / "train", 40, 32, seed=0)
    make_synthetic_dataset(root / "val", 10, 32, seed=2)
    make_synthetic_dataset(root / "test", 10, 32, seed=1)
    runs = {}

    def run(model, seed, tag=""):
        key = (model, seed, tag)
        if key not in runs:
            d = root / f"{model}_{seed}{tag}"
            d.mkdir()
            cfg = {"model": model, "seed": seed, "train_dir": str(root / "train"),
                   "val_dir": str(root / "val"), "output_dir": str(d / "out")}
            (d / "run.json").write_text(json.dumps(cfg))
            t0 = time.perf_counter()
            assert main(["train", str(d / "run.json"), "--toy"]) == 0
            runs[key] = (d / "out", time.perf_counter() - t0)
        return runs[key]

    def mean_psnr(args):
        out = root / "eval.csv"
        assert main(["eval", *args, str(root / "test"), "--scale", "2", "--out", str(out)]) == 0
        return float(out.read_text().splitlines()[-1].split(",")[2])

    return run, mean_psnr, root


@pytest.mark.slow
def test_5_toy_training_smoke(report, toy):
    run, mean_psnr, _ = toy
    out, elapsed = run("padenet", 0)
    rows = [r.split(",") for r in (out / "metrics.csv").read_text().splitlines()[1:]]
    first = float(rows[0][1])
    last = float(np.mean([float(r[1]) for r in rows[-10:]]))
    bicubic = mean_psnr(["--bicubic"])
    model = mean_psnr([str(out / "best.ckpt")])
    ok = report(5, last < 0.5 * first and model - bicubic >= 0.3 and elapsed < 300,
                f"loss {first:.4f} -> {last:.4f} ({last / first:.0%} of initial, < 50%); held-out PSNR "
                f"{model:.3f} vs bicubic {bicubic:.3f} dB (+{model - bicubic:.3f}, >= +0.3); {elapsed:.0f} s (< 300 s)")
    assert ok


@pytest.mark.slow
def test_6_architecture_ordering(report, toy):
    run, mean_psnr, _ = toy
    t0 = time.perf_counter()
    scores = {m: [mean_psnr([str(run(m, s)[0] / "best.ckpt")]) for s in (0, 1, 2)] for m in ("padenet", "resnet")}
    elapsed = time.perf_counter() - t0
    pade, res = np.mean(scores["padenet"]), np.mean(scores["resnet"])
    ok = report(6, pade >= res - 0.05 and elapsed < 1800,
                f"3 seeds, held-out PSNR: PadeNet {pade:.3f} vs ResNet {res:.3f} dB "
                f"(diff {pade - res:+.3f}, >= -0.05); per seed {np.round(scores['padenet'], 3).tolist()} "
                f"vs {np.round(scores['resnet'], 3).tolist()}")
    assert ok


# ---------------------------------------------------------------------------
# 7. metric fidelity
# ---------------------------------------------------------------------------

def psnr_scalar(a, b):
    total, count = 0.0, 0
    for va, vb in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
        total += (float(va) - float(vb)) ** 2
        count += 1
    return 10.0 * math.log10(255.0 * 255.0 / (total / count))


def ssim_scalar(a, b):
    def luma(img):
        return [[0.299 * float(p[0]) + 0.587 * float(p[1]) + 0.114 * float(p[2]) for p in row] for row in img]

    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)]
    w = [[gi * gj for gj in g] for gi in g]
    z = sum(sum(r) for r in w)
    w = [[v / z for v in r] for r in w]
    y1, y2 = luma(a.tolist()), luma(b.tolist())
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for i in range(len(y1) - 10):
        for j in range(len(y1[0]) - 10):
            m1 = m2 = s11 = s22 = s12 = 0.0
            for u in range(11):
                for v in range(11):
                    p, q_ = y1[i + u][j + v], y2[i + u][j + v]
                    wt = w[u][v]
                    m1 += wt * p
                    m2 += wt * q_
                    s11 += wt * p * p
                    s22 += wt * q_ * q_
                    s12 += wt * p * q_
            v1, v2, cov = s11 - m1 * m1, s22 - m2 * m2, s12 - m1 * m2
            vals.append((2 * m1 * m2 + c1) * (2 * cov + c2) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2)))
    return sum(vals) / len(vals)


def metric_fixtures():
    rng = np.random.default_rng(7)
    pairs = []
    for k in range(20):
        size = (16 + k % 5 * 2, 16 + (k * 3) % 7)
        a = synthetic_texture(rng, 24)[: size[0], : size[1]]
        kind = k % 5
        if kind == 0:
            b = np.clip(a + rng.normal(0, 3 + k, a.shape), 0, 255)
        elif kind == 1:
            b = np.roll(a, 1, axis=1)
        elif kind == 2:
            b = 255.0 - a
        elif kind == 3:
            b = bicubic_resize(bicubic_resize(a[: size[0] // 2 * 2, : size[1] // 2 * 2], 0.5), 2)
            a = a[: b.shape[0], : b.shape[1]]
        else:
            b = np.clip(a * 0.8 + 20, 0, 255)
        pairs.append((a.astype(np.uint8), np.floor(np.asarray(b, np.float64) + 0.5).astype(np.uint8)))
    return pairs


def test_7_metric_fidelity(report):
    dp = ds = 0.0
    for a, b in metric_fixtures():
        dp = max(dp, abs(psnr_rgb(a, b) - psnr_scalar(a, b)))
        ds = max(ds, abs(ssim_y(a, b) - ssim_scalar(a, b)))
    ok = report(7, dp < 1e-6 and ds < 1e-6,
                f"20 fixture pairs vs scalar references: max PSNR diff {dp:.1e} dB, max SSIM diff {ds:.1e} (< 1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 8. scheduler endpoints
# ---------------------------------------------------------------------------

def test_8_scheduler_endpoints(report):
    total = TrainConfig().iterations
    start, end = cosine_lr(0, total), cosine_lr(total, total)
    ok = report(8, start == 1e-3 and end == 1e-6,
                f"cosine_lr(0)={start!r}, cosine_lr(T={total})={end!r} (exactly 1e-3 and 1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_9_determinism(report, toy):
    run, _, _ = toy
    a, _ = run("padenet", 0)
    b, _ = run("padenet", 0, tag="_repeat")
    same = {n: (a / n).read_bytes() == (b / n).read_bytes() for n in ("metrics.csv", "best.ckpt", "final.ckpt")}
    ok = report(9, same["metrics.csv"] and same["best.ckpt"],
                "two --toy runs, seed 0: " + ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in same.items()))
    assert ok


# ---------------------------------------------------------------------------
# 10. ablation harness
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_10_ablation_grid(report, toy):
    _, mean_psnr, root = toy
    cfg = {"model": "padenet", "seed": 0, "train_dir": str(root / "train"), "val_dir": str(root / "test"),
           "output_dir": str(root / "ablation")}
    (root / "ablate.json").write_text(json.dumps(cfg))
    assert main(["ablate", str(root / "ablate.json"), "--toy"]) == 0
    lines = (root / "ablation" / "ablation.md").read_text().splitlines()
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    values = [float(v) for v in lines[2].strip("|").split("|")]
    cells = [float(l.split("|")[4]) for l in lines if l.startswith("| Paon-")]
    bicubic = mean_psnr(["--bicubic"])
    ok = report(10, header == list(ABLATION_COLUMNS) and len(values) == 7 and all(map(math.isfinite, values)),
                f"columns {' / '.join(header)}: {' / '.join(f'{v:.2f}' for v in values)} dB, all finite; "
                f"{sum(c > bicubic for c in cells)}/{len(cells)} cells above bicubic {bicubic:.2f} dB")
    assert ok
