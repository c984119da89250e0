import numpy as np
import pytest
import torch

from valvenet.errors import ShapeError, SpecError
from valvenet.model import (
    DenseBlockSpec,
    RegressorSpec,
    build_model,
    count_params,
)
from valvenet.train import mae_loss

# parameter count of the tiny spec, pinned as a regression constant
TINY_PARAM_COUNT = 18576


class TestSpecs:
    def test_block_spec_validation(self):
        with pytest.raises(SpecError):
            DenseBlockSpec(0, 4, 8)
        with pytest.raises(SpecError):
            DenseBlockSpec(1, 4, 8, dilations=(1, 2))
        with pytest.raises(SpecError):
            DenseBlockSpec(1, 4, 8, dilations=(1, 2, 8))

    def test_concat_channels(self):
        spec = DenseBlockSpec(16, 8, 32)
        assert spec.concat_channels == 16 + 3 * 8

    def test_five_blocks_required(self):
        blocks = tuple(DenseBlockSpec(1 if k == 0 else 8, 4, 8) for k in range(4))
        with pytest.raises(SpecError):
            RegressorSpec(input_size=(64, 64), blocks=blocks, head_conv_channels=4)

    def test_input_divisibility(self):
        with pytest.raises(SpecError):
            RegressorSpec.desk((60, 64))
        with pytest.raises(SpecError):
            RegressorSpec.tiny((16, 16))

    def test_chain_consistency(self):
        blocks = list(RegressorSpec.desk().blocks)
        blocks[2] = DenseBlockSpec(blocks[2].in_channels + 1, 4, blocks[2].out_channels)
        with pytest.raises(SpecError):
            RegressorSpec(input_size=(64, 64), blocks=tuple(blocks), head_conv_channels=4)

    def test_json_round_trip(self):
        spec = RegressorSpec.desk((64, 64))
        assert RegressorSpec.from_json(spec.to_json()) == spec


class TestShapes:
    def test_shape_law_256(self):
        spec = RegressorSpec.desk((256, 256))
        model = build_model(spec, 0)
        z = torch.zeros(1, 1, 256, 256)
        dims = []
        for block in model.blocks:
            z = block(z)
            dims.append(z.shape[2])
        assert dims == [128, 64, 32, 16, 8]

    def test_shape_law_32(self):
        model = build_model(RegressorSpec.tiny((32, 32)), 0)
        z = model.features(torch.zeros(1, 1, 32, 32))
        assert tuple(z.shape[2:]) == (1, 1)

    def test_output_shape(self):
        model = build_model(RegressorSpec.tiny(), 0)
        out = model(torch.zeros(3, 1, 32, 32))
        assert tuple(out.shape) == (3, 10, 2)

    def test_concat_channel_law(self):
        spec = RegressorSpec.desk((64, 64))
        model = build_model(spec, 0)
        z = torch.zeros(1, 1, 64, 64)
        for block, bspec in zip(model.blocks, spec.blocks):
            cat = block.concat_volume(z)
            assert cat.shape[1] == bspec.in_channels + 3 * bspec.unit_channels
            z = block(z)

    def test_shape_error(self):
        model = build_model(RegressorSpec.tiny(), 0)
        with pytest.raises(ShapeError):
            model(torch.zeros(1, 1, 64, 64))
        with pytest.raises(ShapeError):
            model(torch.zeros(1, 2, 32, 32))


class TestForward:
    def test_batch_rows_independent(self):
        model = build_model(RegressorSpec.tiny(), 3)
        model.eval()
        x = torch.rand(1, 1, 32, 32)
        batch = torch.cat([x, x], dim=0)
        with torch.no_grad():
            out = model(batch)
        assert torch.equal(out[0], out[1])

    def test_deterministic_forward(self):
        model = build_model(RegressorSpec.tiny(), 3)
        model.eval()
        x = torch.rand(2, 1, 32, 32)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))

    def test_zero_input_finite(self):
        model = build_model(RegressorSpec.tiny(), 5)
        model.eval()
        with torch.no_grad():
            out = model(torch.zeros(1, 1, 32, 32))
        assert torch.isfinite(out).all()


class TestParams:
    def test_count_stable_across_builds(self):
        a = build_model(RegressorSpec.desk((64, 64)), 0)
        b = build_model(RegressorSpec.desk((64, 64)), 99)
        assert count_params(a) == count_params(b)

    def test_head_width_monotonicity(self):
        base = RegressorSpec.build((64, 64), base_channels=4, head_conv_channels=8)
        wider = RegressorSpec.build((64, 64), base_channels=4, head_conv_channels=16)
        assert count_params(build_model(wider, 0)) > count_params(build_model(base, 0))

    def test_tiny_count_pinned(self):
        assert count_params(build_model(RegressorSpec.tiny(), 0)) == TINY_PARAM_COUNT

    def test_same_seed_same_init(self):
        a = build_model(RegressorSpec.tiny(), 7)
        b = build_model(RegressorSpec.tiny(), 7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_numpy_rng_accepted(self):
        a = build_model(RegressorSpec.tiny(), np.random.default_rng(5))
        b = build_model(RegressorSpec.tiny(), np.random.default_rng(5))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


def finite_difference_check(model, x, y, n_params=20, step=1e-3, rtol=1e-2, atol=1e-6, seed=3):
    """Central finite differences vs autograd on randomly sampled parameters."""
    model = model.double()
    x, y = x.double(), y.double()
    loss = mae_loss(model(x), y)
    model.zero_grad()
    loss.backward()
    params = list(model.parameters())
    rng = np.random.default_rng(seed)
    for _ in range(n_params):
        p = params[int(rng.integers(len(params)))]
        idx = int(rng.integers(p.numel()))
        with torch.no_grad():
            orig = p.view(-1)[idx].item()
            analytic = p.grad.view(-1)[idx].item()
            p.view(-1)[idx] = orig + step
            lp = mae_loss(model(x), y).item()
            p.view(-1)[idx] = orig - step
            lm = mae_loss(model(x), y).item()
            p.view(-1)[idx] = orig
        fd = (lp - lm) / (2 * step)
        assert abs(analytic - fd) <= rtol * max(abs(analytic), abs(fd)) + atol, (
            f"gradient mismatch: analytic {analytic:.3e} vs fd {fd:.3e}"
        )


class TestGradient:
    def test_finite_difference_agreement(self):
        torch.manual_seed(0)
        model = build_model(RegressorSpec.tiny(), 1)
        x = torch.from_numpy(np.random.default_rng(0).random((2, 1, 32, 32)))
        y = torch.from_numpy(np.random.default_rng(1).random((2, 10, 2)) * 30)
        finite_difference_check(model, x, y, n_params=20)
