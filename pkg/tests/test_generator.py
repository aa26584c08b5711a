import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ctsynth.data import ShapeError
from ctsynth.generator import (
    AlphaNet,
    GeneratorConfig,
    GlobalLocalGenerator,
    desum,
    generator_layer_table,
    trace_layer_shapes,
)


def random_map(b, res, seed=0):
    g = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, 4, (b, res, res), generator=g)
    return torch.nn.functional.one_hot(labels, 4).permute(0, 3, 1, 2).float()


def small_gen(res=64, **kw):
    torch.manual_seed(0)
    return GlobalLocalGenerator(GeneratorConfig(base_resolution=res, base_channels=4, n_residual_blocks=1, **kw))


@pytest.mark.parametrize("res", [64, 128, 512])
def test_layer_table_matches_trace(res):
    cfg = GeneratorConfig(base_resolution=res, base_channels=4, n_residual_blocks=1, n_residual_blocks_g2=1)
    gen = GlobalLocalGenerator(cfg)
    traced = trace_layer_shapes(gen, random_map(1, res))
    table = dict(generator_layer_table(cfg))
    assert set(table) <= set(traced)
    for name, dims in table.items():
        assert traced[name] == dims, name


def test_bottleneck_dims_paper_and_desk():
    t512 = dict(generator_layer_table(GeneratorConfig(base_resolution=512)))
    assert t512["g1.blocks"][-2:] == (32, 32)
    assert t512["g1.head"] == (1, 1, 256, 256)
    assert t512["g2.head"] == (1, 1, 512, 512)
    t64 = dict(generator_layer_table(GeneratorConfig(base_resolution=64)))
    assert t64["g1.blocks"][-2:] == (4, 4)
    assert t64["g1.head"] == (1, 1, 32, 32)


def test_g1_wrong_resolution():
    gen = small_gen()
    with pytest.raises(ShapeError):
        gen.g1_forward(random_map(1, 64))
    with pytest.raises(ShapeError):
        gen(random_map(1, 32))


def test_g1_zero_map_finite():
    img, f = small_gen().g1_forward(torch.zeros(1, 4, 32, 32))
    assert img.shape == (1, 1, 32, 32) and torch.isfinite(img).all() and torch.isfinite(f).all()


def test_joint_output_dims_and_determinism():
    gen = small_gen().eval()
    m = random_map(2, 64)
    with torch.no_grad():
        a, b = gen(m), gen(m)
    assert a.image_full.shape == (2, 1, 64, 64) and a.image_half.shape == (2, 1, 32, 32)
    assert torch.equal(a.image_full, b.image_full) and torch.equal(a.alpha, b.alpha)
    assert torch.all((a.image_full >= 0) & (a.image_full <= 1))


def test_g2_feature_mismatch():
    gen = small_gen()
    with pytest.raises(ShapeError):
        gen.g2_forward(random_map(1, 64), torch.zeros(1, 4, 16, 16))


def test_without_desum_ignores_f_global():
    gen = small_gen(use_desum=False).eval()
    m = random_map(1, 64)
    f1 = torch.randn(1, 4, 32, 32)
    with torch.no_grad():
        a, _, _ = gen.g2_forward(m, f1)
        b, _, _ = gen.g2_forward(m, f1 * 100 + 7)
    assert torch.equal(a, b)


def test_without_desum_equals_alpha_one_zero_global():
    m = random_map(2, 64, seed=3)
    off = small_gen(use_desum=False).eval()
    twin = small_gen(fixed_alpha=1.0, zero_f_global=True).eval()
    twin.load_state_dict(off.state_dict())
    with torch.no_grad():
        assert torch.equal(off(m).image_full, twin(m).image_full)


def test_single_generator_runs_g2_only():
    gen = small_gen(n_generators=1).eval()
    assert not hasattr(gen, "g1")
    out = gen(random_map(1, 64))
    assert out.image_half is None and out.image_full.shape == (1, 1, 64, 64)
    f_local = gen.g2.encode(random_map(1, 64))
    with torch.no_grad():
        direct = gen.g2.decode(desum(f_local, torch.zeros_like(f_local), gen.alpha_forward(f_local, torch.zeros_like(f_local))))
        via = gen(random_map(1, 64)).image_full
    assert torch.equal(direct, via)


def test_three_generators_shapes():
    out = small_gen(n_generators=3)(random_map(1, 64))
    assert out.image_full.shape == (1, 1, 64, 64) and out.image_half.shape == (1, 1, 32, 32)


@pytest.mark.parametrize("alpha_input", ["concat", "local", "global"])
def test_alpha_input_variants(alpha_input):
    out = small_gen(alpha_input=alpha_input)(random_map(1, 64))
    assert 0 < out.alpha.item() < 1


def test_desum_examples():
    fl, fg = torch.full((1, 2, 3, 3), 2.0), torch.full((1, 2, 3, 3), 4.0)
    assert torch.equal(desum(fl, fg, 1.0), fl)
    assert torch.equal(desum(fl, fg, 0.0), fg)
    assert torch.all(desum(fl, fg, 0.5) == 3.0)
    with pytest.raises(ShapeError):
        desum(fl, torch.zeros(1, 2, 3, 4), 0.5)


@given(st.floats(-10, 10), st.floats(0, 1), st.integers(0, 1000))
def test_desum_linear(a, alpha, seed):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64), torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    torch.testing.assert_close(desum(a * x, a * y, alpha), a * desum(x, y, alpha), rtol=1e-12, atol=1e-12)


def test_desum_per_sample_alpha():
    x, y = torch.ones(2, 1, 2, 2), torch.zeros(2, 1, 2, 2)
    out = desum(x, y, torch.tensor([0.25, 0.75]))
    assert torch.all(out[0] == 0.25) and torch.all(out[1] == 0.75)


def test_fixed_alpha_returned():
    gen = small_gen(fixed_alpha=0.5)
    a = gen.alpha_forward(torch.randn(3, 4, 32, 32), torch.randn(3, 4, 32, 32))
    assert torch.all(a == 0.5)


def test_fixed_alpha_range_validated():
    with pytest.raises(ValueError):
        GeneratorConfig(fixed_alpha=1.5)


def test_alpha_range_1000_trials():
    torch.manual_seed(1)
    net = AlphaNet(8, 8)
    with torch.no_grad():
        a = net(torch.randn(1000, 8, 8, 8) * 5)
    assert torch.all((a > 0) & (a < 1))


def test_alpha_gradient_per_parameter():
    """Every AlphaNet parameter: autograd vs float64 central differences, step 1e-3, 1e-4 relative."""
    torch.manual_seed(2)
    net = AlphaNet(4, 4).double()
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    loss = lambda: net(x).sum()
    net.zero_grad()
    loss().backward()
    h = 1e-3
    with torch.no_grad():
        for p in net.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                assert abs(fd - grad[i].item()) <= 1e-4 * max(abs(fd), abs(grad[i].item()), 1e-3)
