import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from paon.autodiff import Tensor, backward, conv2d, sum_
from paon.autodiff.gradcheck import analytic_grads, gradcheck
from paon.errors import ConfigurationError, NumericDomainError
from paon.layers import (
    PAU, PaonLayer, PaonSpec, Shifter, count_paon_parameters, fit_gelu_rational, init_paon,
)


# --- independent reference implementations (scipy.ndimage, float64) --------

def ref_conv(x, k, bias=None):
    n, cin, h, w = x.shape
    out = np.zeros((n, k.shape[0], h, w))
    for b in range(n):
        for o in range(k.shape[0]):
            for c in range(cin):
                out[b, o] += ndimage.correlate(x[b, c], k[o, c], mode="wrap")
            if bias is not None:
                out[b, o] += bias[o]
    return out


def ref_shift(x, s):
    """s has shape (N, C, 2); content moves by +s."""
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[b, c] = ndimage.shift(x[b, c], s[b, c], order=1, mode="grid-wrap")
    return out


def ref_generative(x, params, M, shifts=None):
    if shifts is not None:
        x = ref_shift(x, shifts)
    out = ref_conv(x, params["num1"], params["num_bias"])
    for k in range(2, M + 1):
        out += ref_conv(x**k, params[f"num{k}"])
    return out


def layer_params(layer):
    return {name: p.data.astype(np.float64) for name, p in layer.named_parameters()}


def randomize(layer, rng, scale=0.3):
    for _, p in layer.named_parameters():
        p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)
    return layer


rng = np.random.default_rng(7)


class TestSpec:
    def test_s_variant_degree_gap(self):
        with pytest.raises(ConfigurationError, match=r"\|M - N\|"):
            PaonSpec(M=3, N=1, variant="S")

    def test_vanilla_requires_opt_in(self):
        with pytest.raises(ConfigurationError, match="allow_vanilla"):
            PaonSpec(M=2, N=1, variant="vanilla")
        PaonSpec(M=2, N=1, variant="vanilla", allow_vanilla=True)

    def test_bad_degrees_and_kernel(self):
        with pytest.raises(ConfigurationError):
            PaonSpec(M=0, N=0)
        with pytest.raises(ConfigurationError):
            PaonSpec(M=1, N=0, kernel=4)

    def test_denominator_has_no_bias(self):
        layer = PaonLayer(PaonSpec(2, 2, "S", 2, 3), rng=0)
        names = [n for n, _ in layer.named_parameters()]
        assert names == ["num_bias", "num1", "num2", "den1", "den2"]


class TestReductions:
    def test_1_0_is_plain_convolution(self):
        layer = PaonLayer(PaonSpec(1, 0, "A", 3, 4), rng=1)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 6, 6)))
        plain = conv2d(x, layer.num[0].p, layer.num_bias)
        assert np.max(np.abs(layer(x).data - plain.data)) < 1e-6

    def test_2_0_quadratic_neuron(self):
        layer = randomize(PaonLayer(PaonSpec(2, 0, "A", 2, 3), rng=2), rng)
        x = rng.uniform(-1, 1, (2, 2, 5, 6))
        p = layer_params(layer)
        expected = ref_conv(x, p["num1"]) + ref_conv(x**2, p["num2"]) + p["num_bias"][None, :, None, None]
        assert np.max(np.abs(layer(Tensor(x)).data - expected)) < 1e-6

    @pytest.mark.parametrize("M", [3, 4])
    def test_generative_neuron(self, M):
        layer = randomize(PaonLayer(PaonSpec(M, 0, "S" if M == 1 else "A", 2, 2), rng=3), rng, 0.2)
        x = rng.uniform(-1, 1, (1, 2, 5, 5))
        assert np.max(np.abs(layer(Tensor(x)).data - ref_generative(x, layer_params(layer), M))) < 1e-6

    @pytest.mark.parametrize("bound", [0, 2])
    def test_super_neuron(self, bound):
        layer = randomize(PaonLayer(PaonSpec(3, 0, "A", 2, 2, shift=bound), rng=4), rng, 0.2)
        x = rng.uniform(-1, 1, (2, 2, 6, 5))
        p = layer_params(layer)
        means = x.mean(axis=(2, 3))
        raw = np.einsum("oc,nc->no", p["shifter.weight"][:, :, 0, 0], means) + p["shifter.bias"]
        s = raw.reshape(2, 2, 2)
        if bound > 0:
            s = bound * np.tanh(s)
        assert np.max(np.abs(layer(Tensor(x)).data - ref_generative(x, p, 3, s))) < 1e-6

    def test_a_with_zero_denominator_equals_2_0(self):
        full = PaonLayer(PaonSpec(2, 1, "A", 2, 3), rng=5)
        reduced = PaonLayer(PaonSpec(2, 0, "A", 2, 3), rng=5)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 5, 5)))
        np.testing.assert_array_equal(full(x).data, reduced(x).data)

    def test_s_matches_pointwise_formula(self):
        layer = randomize(PaonLayer(PaonSpec(2, 1, "S", 2, 3), rng=6), rng, 0.2)
        x = rng.uniform(-1, 1, (2, 2, 5, 5))
        p = layer_params(layer)
        c1, c2 = ref_conv(x, p["num1"]), ref_conv(x**2, p["num2"])
        d1 = ref_conv(x, p["den1"])
        w0 = p["num_bias"][None, :, None, None]
        out = np.empty_like(c1)
        for idx in np.ndindex(*out.shape):
            pm = w0[0, idx[1], 0, 0] + c1[idx] + c2[idx]
            pm1 = w0[0, idx[1], 0, 0] + c1[idx]
            qn = 1.0 + d1[idx]
            qn1 = 1.0
            out[idx] = (qn * pm + qn1 * pm1) / (qn * qn + qn1 * qn1)
        assert np.max(np.abs(layer(Tensor(x)).data - out)) < 1e-5

    def test_scale_covariance(self):
        layer = PaonLayer(PaonSpec(1, 0, "A", 2, 2), rng=8)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        bias = layer.num_bias.data[None, :, None, None].astype(np.float64)
        base = layer(x).data - bias
        kernel = layer.num[0].p.data.copy()
        layer.num[0].p.data = kernel * np.float32(2.0)
        assert np.max(np.abs((layer(x).data - bias) - 2.0 * base)) < 1e-6
        # without a bias the power-of-two scaling is exact in floating point
        layer.num_bias.data[...] = 0
        layer.num[0].p.data = kernel
        base = layer(x).data
        layer.num[0].p.data = kernel * np.float32(2.0)
        np.testing.assert_array_equal(layer(x).data, 2.0 * base)


class TestSafety:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([(2, 1), (2, 2), (3, 2), (1, 3)]))
    def test_paon_a_denominator_at_least_one(self, seed, degrees):
        r = np.random.default_rng(seed)
        layer = randomize(PaonLayer(PaonSpec(*degrees, "A", 2, 2), rng=seed), r, 2.0)
        d = layer.denominator(Tensor(r.uniform(-1, 1, (2, 2, 4, 4)))).data
        assert d.min() >= 1.0

    def test_paon_s_survives_zero_crossing_denominator(self):
        spec = PaonSpec(2, 1, "S", 1, 1, kernel=1)
        layer = PaonLayer(spec, rng=0)
        x = np.linspace(-1, 1, 16).reshape(1, 1, 4, 4)
        layer.den[0].p.data[...] = -1.0 / x[0, 0, 1, 1]  # Q_1 == 0 at one position
        xt = Tensor(x, requires_grad=True)
        out = layer(xt)
        backward(sum_(out))
        assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(xt.grad))
        for _, p in layer.named_parameters():
            assert np.all(np.isfinite(p.grad))

    def test_vanilla_raises_near_pole(self):
        spec = PaonSpec(2, 1, "vanilla", 1, 1, kernel=1, allow_vanilla=True)
        layer = PaonLayer(spec, rng=0, name="block0.l1")
        layer.den[0].p.data[...] = -2.0
        with pytest.raises(NumericDomainError, match=r"block0\.l1.*\(0, 0, 0, 1\)"):
            layer(Tensor(np.array([0.25, 0.5, 0.75, 1.0]).reshape(1, 1, 1, 4)))


class TestShifter:
    @pytest.mark.parametrize("bound", [0, 1, 3])
    def test_zero_init_identity(self, bound):
        x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
        np.testing.assert_array_equal(Shifter(3, bound)(Tensor(x)).data, x)

    def test_bounded(self):
        sh = Shifter(2, 2)
        sh.bias.data[...] = 1e4
        s = sh.shifts(Tensor(rng.standard_normal((1, 2, 4, 4)))).data
        assert np.all(np.abs(s) <= 2.0) and np.all(np.abs(s) > 1.99)

    def test_gradient_reaches_conv_weight(self):
        sh = Shifter(2, 1)
        sh.weight.data = rng.standard_normal(sh.weight.shape).astype(np.float32)
        sh.bias.data = rng.standard_normal(sh.bias.shape).astype(np.float32)
        sh.bias.data = sh.bias.data.astype(np.float64)
        x = rng.standard_normal((1, 2, 5, 5)) + 0.5
        w = rng.standard_normal((1, 2, 5, 5))

        def loss(weight):
            sh.weight = weight
            return sum_(sh(Tensor(x, dtype=weight.dtype)) * Tensor(w, dtype=weight.dtype))

        (analytic,) = analytic_grads(loss, [sh.weight.data.astype(np.float64)])
        assert np.linalg.norm(analytic) > 0
        assert gradcheck(loss, [sh.weight.data.astype(np.float64)])[0] < 1e-3


class TestPAU:
    def test_zero_numerator(self):
        pau = PAU()
        pau.num.data[...] = 0
        assert np.all(pau(Tensor(rng.standard_normal((1, 2, 3, 3)))).data == 0)

    def test_identity(self):
        pau = PAU(1, 2)
        pau.num.data = np.array([0.0, 1.0], dtype=np.float32)
        pau.den.data[...] = 0
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(pau(Tensor(x)).data, x)

    def test_gelu_fit(self):
        assert fit_gelu_rational(7, 6)[2] < 0.05

    def test_pointwise_permutation(self):
        pau = PAU()
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        perm = rng.permutation(16)
        y = pau(Tensor(x)).data.reshape(-1)
        y_perm = pau(Tensor(x.reshape(-1)[perm].reshape(x.shape))).data.reshape(-1)
        np.testing.assert_array_equal(y_perm, y[perm])


class TestInit:
    def test_fresh_a_denominator_is_one(self):
        layer = PaonLayer(PaonSpec(3, 2, "A", 2, 2), rng=0)
        np.testing.assert_array_equal(layer.denominator(Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))).data, 1.0)

    def test_1_0_matches_plain_conv_init(self):
        r = np.random.default_rng(11)
        gain = 1.0 / np.sqrt(3 * 9)
        k = r.uniform(-gain, gain, (4, 3, 3, 3)).astype(np.float32)
        b = r.uniform(-gain, gain, 4).astype(np.float32)
        layer = PaonLayer(PaonSpec(1, 0, "A", 3, 4), rng=11)
        x = Tensor(rng.uniform(-1, 1, (1, 3, 5, 5)))
        np.testing.assert_array_equal(layer(x).data, conv2d(x, Tensor(k), Tensor(b)).data)

    def test_same_seed_identical(self):
        a = init_paon(PaonSpec(3, 2, "S", 2, 5), 42)
        b = init_paon(PaonSpec(3, 2, "S", 2, 5), 42)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_higher_orders_damped(self):
        p = init_paon(PaonSpec(3, 0, "A", 8, 8), 0)
        assert np.abs(p["num2"]).max() <= 0.1 / np.sqrt(72) + 1e-7
        assert np.abs(p["num3"]).max() <= 0.01 / np.sqrt(72) + 1e-7


class TestParameters:
    @pytest.mark.parametrize("spec", [
        PaonSpec(2, 1, "S", 3, 4, shift=0),
        PaonSpec(3, 2, "A", 3, 4, shift=1),
        PaonSpec(2, 2, "S", 3, 4, share_truncation=False),
        PaonSpec(2, 1, "vanilla", 3, 4, allow_vanilla=True),
    ])
    def test_every_parameter_gets_gradient(self, spec):
        layer = randomize(PaonLayer(spec, rng=0), rng, 0.2)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)) + 0.2)
        backward(sum_(layer(x) ** 2))
        for name, p in layer.named_parameters():
            assert p.grad is not None and np.linalg.norm(p.grad) > 0, name

    def test_fresh_paon_a_denominator_learns(self):
        layer = PaonLayer(PaonSpec(2, 1, "A", 2, 2), rng=0)
        backward(sum_(layer(Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))) ** 2))
        assert np.linalg.norm(layer.den[0].p.grad) > 0

    @pytest.mark.parametrize("spec", [
        PaonSpec(2, 1, "S", 3, 4, shift=0),
        PaonSpec(3, 2, "A", 5, 2, shift=2),
        PaonSpec(2, 2, "S", 3, 4, share_truncation=False),
    ])
    def test_closed_form_count(self, spec):
        assert PaonLayer(spec, rng=0).num_parameters() == count_paon_parameters(spec)
