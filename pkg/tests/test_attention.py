import numpy as np
import pytest
from pytest_cases import parametrize, parametrize_with_cases

from emattn import ConfigError, NumericError, ShapeError
from emattn.attention import CaParams, EmaParams, EmaVariant, attention_forward, attention_init, branch_1x1, \
    branch_3x3, ca_forward, ca_init, cross_spatial, ema_forward, ema_init, group_fold, group_unfold, module_macs, \
    param_count_module, se_forward, se_init
from emattn.ops import mul, sum_all
from emattn.tape import gradcheck
from emattn.tensor import Tensor, full, randn, zeros

from ._oracles import ca_loop, ema_loop, se_loop, sig
from .test_attention_cases import random_params


def _zero_params(p):
    return p.replace(**{name: zeros(t.shape) for name, t in p.buffers.items()})


def test_ema_preserves_the_input_shape():
    rng = np.random.default_rng(0)
    for _ in range(100):
        G, c = (int(v) for v in rng.integers(1, 5, size=2))
        B, H, W = (int(v) for v in rng.integers(1, 7, size=3))
        p = ema_init(G * c, G, seed=int(rng.integers(1000)))
        x = randn((B, G * c, H, W), rng=rng)
        assert ema_forward(p, None, x).shape == (B, G * c, H, W)


def test_ema_matches_the_loop_oracle():
    rng = np.random.default_rng(1)
    for i in range(100):
        G, c = (int(v) for v in rng.integers(1, 4, size=2))
        B = int(rng.integers(1, 3))
        H, W = (int(v) for v in rng.integers(1, 6, size=2))
        group_norm = i % 3 == 1
        mode = "no_cross_spatial" if i % 5 == 4 else "full"
        p = random_params("ema", G * c, G, rng, group_norm=group_norm)
        x = randn((B, G * c, H, W), rng=rng)

        out = ema_forward(p, EmaVariant(mode, G, group_norm), x).data
        expected = ema_loop({k: t.data for k, t in p.buffers.items()}, G, x.data, cross_spatial=(mode == "full"))
        assert np.max(np.abs(out - expected)) <= 1e-10, (G, c, B, H, W, group_norm, mode)


def test_ca_and_se_match_their_loop_oracles():
    rng = np.random.default_rng(2)
    for _ in range(20):
        r = int(rng.integers(1, 4))
        C = r * int(rng.integers(1, 4))
        x = randn((int(rng.integers(1, 3)), C, int(rng.integers(1, 6)), int(rng.integers(1, 6))), rng=rng)

        ca = random_params("ca", C, r, rng)
        assert np.max(np.abs(ca_forward(ca, x).data - ca_loop({k: t.data for k, t in ca.buffers.items()},
                                                               x.data))) <= 1e-12
        se = random_params("se", C, r, rng)
        assert np.max(np.abs(se_forward(se, x).data - se_loop({k: t.data for k, t in se.buffers.items()},
                                                               x.data))) <= 1e-12


@parametrize_with_cases("params, variant", cases=".test_attention_cases")
def test_module_gradients(params, variant):
    """Tape gradients of a projected output, w.r.t. the input and every buffer, against finite differences."""
    proj = randn((2, 8, 5, 7), seed=42)

    def loss(x, **buffers):
        return sum_all(mul(attention_forward(params.replace(**buffers), x, variant), proj))

    inputs = dict(params.buffers)
    inputs["x"] = randn((2, 8, 5, 7), seed=7)
    report = gradcheck(loss, inputs, h=1e-5, tolerance=1e-4)
    assert report.passed, report.to_dict()
    assert report.compared == 2 * 8 * 5 * 7 + params.param_count()


@parametrize_with_cases("params, variant", cases=".test_attention_cases")
def test_module_gradients_of_the_sum_of_squares(params, variant):
    def loss(x, **buffers):
        out = attention_forward(params.replace(**buffers), x, variant)
        return sum_all(mul(out, out))

    inputs = dict(params.buffers)
    inputs["x"] = randn((1, 8, 4, 5), seed=8)
    report = gradcheck(loss, inputs, h=1e-5, tolerance=1e-4)
    assert report.passed, report.to_dict()
    assert report.compared == 8 * 4 * 5 + params.param_count()


@parametrize(kind=["ema", "ca", "se"])
def test_zero_absorption_and_contraction(kind):
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = random_params(kind, 8, 4, rng, group_norm=bool(rng.integers(2)) and kind == "ema")
        zero_out = attention_forward(p, zeros((2, 8, 4, 5)))
        assert not np.any(zero_out.data)

        x = randn((2, 8, 4, 5), rng=rng)
        out = attention_forward(p, x).data
        assert np.all(np.abs(out) < np.abs(x.data))


def test_group_independence():
    rng = np.random.default_rng(4)
    for _ in range(50):
        G, c = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        p = random_params("ema", G * c, G, rng, group_norm=bool(rng.integers(2)))
        x = randn((2, G * c, 4, 5), rng=rng)
        g = int(rng.integers(G))

        noise = np.zeros(x.shape)
        noise[:, g * c:(g + 1) * c] = rng.standard_normal((2, c, 4, 5))
        before = ema_forward(p, None, x).data
        after = ema_forward(p, None, Tensor(x.data + noise)).data

        others = np.ones(G * c, dtype=bool)
        others[g * c:(g + 1) * c] = False
        assert np.array_equal(before[:, others], after[:, others])
        assert not np.array_equal(before[:, ~others], after[:, ~others])


def test_batch_equivariance():
    rng = np.random.default_rng(5)
    p = random_params("ema", 8, 4, rng)
    x = randn((4, 8, 3, 5), rng=rng)
    perm = [2, 0, 3, 1]
    out = ema_forward(p, None, x).data
    permuted = ema_forward(p, None, Tensor(x.data[perm])).data
    assert np.max(np.abs(permuted - out[perm])) <= 1e-12


def test_zero_parameter_closed_forms():
    ema = _zero_params(ema_init(8, 4))
    out = ema_forward(ema, None, full((2, 8, 3, 4), 4.)).data
    assert np.max(np.abs(out - 4. * sig(1.))) <= 1e-12

    x = randn((2, 8, 3, 4), seed=0)
    ca = _zero_params(ca_init(8, 4))
    assert np.max(np.abs(ca_forward(ca, x).data - 0.25 * x.data)) <= 1e-12

    se = _zero_params(se_init(8, 4))
    assert np.max(np.abs(se_forward(se, x).data - 0.5 * x.data)) <= 1e-12


def test_param_count_matches_the_buffers():
    rng = np.random.default_rng(6)
    for _ in range(20):
        hyper = int(rng.choice([1, 2, 4, 8, 16, 32]))
        C = hyper * int(rng.integers(1, 9))
        for kind in ("ema", "ca", "se"):
            p = attention_init(kind, C, hyper, seed=0)
            assert param_count_module(kind, C, hyper) == p.param_count()
        gn = attention_init("ema", C, hyper, group_norm=True)
        assert param_count_module("ema", C, hyper, group_norm=True) == gn.param_count()


def test_param_count_formulas():
    # c = 8
    assert param_count_module("ema", 256, 32) == 10 * 64 + 16
    assert param_count_module("ema", 256, 32, group_norm=True) == 10 * 64 + 32
    # CA overhead is 3 C^2 / r + C / r + 2 C
    assert param_count_module("ca", 256, 32) == 3 * 256 * 256 // 32 + 8 + 512
    assert param_count_module("se", 256, 16) == 2 * 256 * 16 + 16 + 256


def test_module_macs():
    # C=8, G=4 (c=2) on 5x7
    assert module_macs("ema", 8, 4, 5, 7) == 4 * (4 * 12 + 9 * 4 * 35 + 2 * 2 * 35)
    assert module_macs("ca", 8, 4, 5, 7) == 2 * 8 * 2 * 12
    assert module_macs("se", 8, 4, 5, 7) == 2 * 8 * 2


def test_init_is_deterministic():
    a, b, other = ema_init(16, 4, seed=3), ema_init(16, 4, seed=3), ema_init(16, 4, seed=4)
    for name in a.buffers:
        assert np.array_equal(a.buffers[name].data, b.buffers[name].data)
    assert not np.array_equal(a.buffers["conv3x3.weight"].data, other.buffers["conv3x3.weight"].data)
    # kernels uniform on +-sqrt(1 / fan_in), biases zero
    assert np.all(np.abs(a.buffers["conv3x3.weight"].data) <= np.sqrt(1. / 36))
    assert not np.any(a.buffers["conv1x1.bias"].data)


@parametrize(C_G=[(8, 3), (8, 0), (4, 8)])
def test_ema_init_errors(C_G):
    C, G = C_G
    with pytest.raises(ConfigError):
        ema_init(C, G)


def test_params_validation():
    p = ema_init(8, 4)
    with pytest.raises(ConfigError):
        EmaParams(8, 4, {"conv1x1.weight": p.buffers["conv1x1.weight"]})
    with pytest.raises(ShapeError):
        p.replace(**{"conv1x1.bias": zeros((3,))})
    with pytest.raises(NumericError):
        p.replace(**{"conv1x1.bias": Tensor([0., np.inf])})
    with pytest.raises(ConfigError):
        CaParams(8, 3, {})
    assert p.kind == "ema" and p.c == 2 and p.groups == 4
    assert ema_init(8, 4, group_norm=True).kind == "ema-gn"


def test_group_fold_layout():
    x = randn((2, 6, 3, 4), seed=0)
    folded = group_fold(x, 3)
    assert folded.shape == (6, 2, 3, 4)
    for b in range(2):
        for g in range(3):
            for k in range(2):
                assert np.array_equal(folded.data[b * 3 + g, k], x.data[b, g * 2 + k])
    assert np.array_equal(group_unfold(folded, 3).data, x.data)

    with pytest.raises(ShapeError):
        group_fold(x, 4)
    with pytest.raises(ShapeError):
        group_unfold(folded, 4)


def test_branches():
    p = ema_init(8, 4, seed=0)
    xg = group_fold(randn((2, 8, 5, 7), seed=1), 4)
    assert branch_1x1(p, xg).shape == branch_3x3(p, xg).shape == (8, 2, 5, 7)
    assert cross_spatial(xg, branch_1x1(p, xg), branch_3x3(p, xg)).shape == (8, 2, 5, 7)
    with pytest.raises(ShapeError):
        branch_3x3(p, zeros((8, 3, 5, 7)))
    with pytest.raises(ShapeError):
        cross_spatial(xg, xg, zeros((8, 2, 5, 6)))


def test_ema_variants():
    assert EmaVariant.ablation("EMA_no") == EmaVariant("no_cross_spatial", 32)
    assert EmaVariant.ablation("EMA_16") == EmaVariant("full", 16)
    assert EmaVariant.ablation("EMA_32").cross_spatial
    with pytest.raises(ConfigError):
        EmaVariant.ablation("EMA_8")
    with pytest.raises(ConfigError):
        EmaVariant("partial")

    p = ema_init(64, 32)
    x = randn((1, 64, 3, 3), seed=0)
    assert ema_forward(p, EmaVariant.ablation("EMA_no"), x).shape == x.shape
    with pytest.raises(ConfigError):
        ema_forward(p, EmaVariant.ablation("EMA_16"), x)
    with pytest.raises(ConfigError):
        ema_forward(p, EmaVariant("full", 32, group_norm=True), x)
    gn = ema_init(64, 32, group_norm=True)
    with pytest.raises(ConfigError):
        ema_forward(gn, EmaVariant("full", 32), x)
    assert ema_forward(gn, EmaVariant("full", 32, group_norm=True), x).shape == x.shape
    with pytest.raises(ShapeError):
        ema_forward(p, None, randn((1, 32, 3, 3), seed=0))


def test_non_square_inputs_and_large_batches():
    p = ema_init(16, 4, seed=0)
    x = randn((5, 16, 2, 9), seed=1)
    y = ema_forward(p, None, x)
    assert y.shape == x.shape
    assert np.all(np.isfinite(y.data))


def test_unknown_kind():
    with pytest.raises(ConfigError):
        attention_init("cbam", 8)
