import warnings

import numpy as np
import pytest
import torch

import app.models.tokenizer as tokenizer_module
from app.core.exceptions import ShapeMismatchError
from app.models.backbone import MaskSpec, encode_context
from app.models.objectives import (
    PatchToPatchPredictor,
    PatchToSemanticPredictor,
    SemanticToPatchPredictor,
    compute_losses,
)
from app.models.tokenizer import DiscreteJepa
from app.schemas.configs import TokenView, TrainConfig, apply_preset


def toy_config(**overrides) -> TrainConfig:
    values = dict(
        image_size=16,
        patch_size=8,
        width=8,
        depth=1,
        num_heads=2,
        num_slots=2,
        slot_dim=8,
        codebook_size=4,
        predictor_width=8,
        predictor_depth=1,
        predictor_heads=2,
        dtype="float64",
    )
    values.update(overrides)
    return TrainConfig.model_validate(values)


@pytest.fixture
def mask():
    return MaskSpec(visible=torch.tensor([0, 1]), targets=torch.tensor([2, 3]), n_patches=4)


@pytest.fixture
def patches():
    return torch.randn(3, 4, 192, dtype=torch.float64, generator=torch.Generator().manual_seed(0))


@pytest.fixture
def model():
    torch.manual_seed(0)
    model = DiscreteJepa(toy_config()).double()
    # Perturb the target so context and target encoders differ
    with torch.no_grad():
        for param in model.target_encoder.parameters():
            param.add_(0.01 * torch.randn_like(param))
    return model


class TestPredictors:
    def test_output_shapes(self):
        s2p = SemanticToPatchPredictor(8, 16, num_slots=2, num_patches=4, width=16, depth=1, num_heads=2)
        p2s = PatchToSemanticPredictor(16, 8, num_slots=2, num_patches=4, width=16, depth=1, num_heads=2)
        p2p = PatchToPatchPredictor(16, num_patches=4, width=16, depth=1, num_heads=2)
        z_s, z_p = torch.randn(5, 2, 8), torch.randn(5, 3, 16)
        visible, targets = torch.tensor([0, 2, 3]), torch.tensor([1])
        assert s2p(z_s, targets).shape == (5, 1, 16)
        assert p2s(z_p, visible).shape == (5, 2, 8)
        assert p2p(z_p, visible, targets).shape == (5, 1, 16)

    def test_empty_or_out_of_range_positions(self):
        s2p = SemanticToPatchPredictor(8, 16, num_slots=2, num_patches=4, width=16, depth=1, num_heads=2)
        with pytest.raises(ValueError):
            s2p(torch.randn(1, 2, 8), torch.tensor([], dtype=torch.long))
        with pytest.raises(ValueError):
            s2p(torch.randn(1, 2, 8), torch.tensor([4]))

    def test_p2p_rejects_overlap(self):
        p2p = PatchToPatchPredictor(16, num_patches=4, width=16, depth=1, num_heads=2)
        with pytest.raises(ValueError):
            p2p(torch.randn(1, 2, 16), torch.tensor([0, 1]), torch.tensor([1, 2]))

    def test_p2s_token_count_mismatch(self):
        p2s = PatchToSemanticPredictor(16, 8, num_slots=2, num_patches=4, width=16, depth=1, num_heads=2)
        with pytest.raises(ShapeMismatchError):
            p2s(torch.randn(1, 3, 16), torch.tensor([0, 1]))

    def test_s2p_rows_follow_target_order(self):
        torch.manual_seed(0)
        s2p = SemanticToPatchPredictor(8, 16, num_slots=2, num_patches=6, width=16, depth=1, num_heads=2).double()
        z_s = torch.randn(3, 2, 8, dtype=torch.float64)
        targets, perm = torch.tensor([1, 3, 4, 5]), torch.tensor([2, 0, 3, 1])
        torch.testing.assert_close(s2p(z_s, targets[perm]), s2p(z_s, targets)[:, perm])

    def test_p2s_ignores_visible_order(self):
        torch.manual_seed(0)
        p2s = PatchToSemanticPredictor(16, 8, num_slots=2, num_patches=6, width=16, depth=1, num_heads=2).double()
        z_p = torch.randn(3, 4, 16, dtype=torch.float64)
        visible, perm = torch.tensor([0, 2, 3, 5]), torch.tensor([3, 1, 0, 2])
        torch.testing.assert_close(p2s(z_p[:, perm], visible[perm]), p2s(z_p, visible))


class TestComputeLosses:
    def test_disabled_objectives_contribute_zero(self):
        pred, target = torch.ones(2, 3), torch.zeros(2, 3)
        terms = compute_losses({"p2p": pred}, {"p2p": target}, None, {"s2p": 5.0, "p2s": 5.0, "p2p": 2.0})
        assert terms.total.item() == pytest.approx(2.0)
        assert terms.l_s2p.item() == 0.0
        breakdown = terms.breakdown()
        assert breakdown.lambda_s2p == 0.0 and breakdown.lambda_p2p == 2.0

    def test_targets_are_detached(self):
        pred = torch.ones(2, 3, requires_grad=True)
        target = torch.zeros(2, 3, requires_grad=True)
        compute_losses({"p2p": pred}, {"p2p": target}, None, {"p2p": 1.0}).total.backward()
        assert pred.grad is not None
        assert target.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            compute_losses({"s2p": torch.zeros(2, 3)}, {"s2p": torch.zeros(3, 2)}, None, {"s2p": 1.0})

    def test_nothing_enabled(self):
        with pytest.raises(ValueError):
            compute_losses({}, {}, None, {})

    def test_s2p_weight_scales_its_contribution(self):
        preds = {"s2p": torch.randn(2, 3, dtype=torch.float64, requires_grad=True),
                 "p2s": torch.randn(2, 4, dtype=torch.float64)}
        targets = {"s2p": torch.zeros(2, 3, dtype=torch.float64), "p2s": torch.zeros(2, 4, dtype=torch.float64)}
        single = compute_losses(preds, targets, None, {"s2p": 1.0, "p2s": 1.0})
        double = compute_losses(preds, targets, None, {"s2p": 2.0, "p2s": 1.0})
        torch.testing.assert_close(double.total - single.total, single.l_s2p)

        single_grad, = torch.autograd.grad(single.total, preds["s2p"])
        double_grad, = torch.autograd.grad(double.total, preds["s2p"])
        torch.testing.assert_close(double_grad, 2.0 * single_grad)

    def test_breakdown_of_live_graph_is_silent(self):
        pred = torch.ones(2, 3, requires_grad=True)
        terms = compute_losses({"p2p": pred}, {"p2p": torch.zeros(2, 3)}, None, {"p2p": 1.0})
        assert terms.total.requires_grad
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            breakdown = terms.breakdown()
        assert breakdown.total == pytest.approx(1.0)
        assert breakdown.l_p2p == pytest.approx(1.0)


class TestGradientFidelity:
    """Analytic gradients of the total loss against central finite differences."""

    def test_matches_finite_differences(self, model, patches, mask, monkeypatch):
        model.codebook.init_from(model.target_encoder(patches).z_s, np.random.default_rng(0))
        base = model.forward_losses(patches, mask)
        frozen = base.quant.indices
        z_s = encode_context(model.context_encoder, patches, mask).z_s
        delta = (base.quant.quantized - z_s).detach()
        monkeypatch.setattr(tokenizer_module, "straight_through", lambda z, q: z + delta)

        def total():
            return model.forward_losses(patches, mask, frozen_indices=frozen).losses.total

        model.zero_grad(set_to_none=True)
        loss = total()
        torch.testing.assert_close(loss, base.losses.total)
        loss.backward()

        generator = torch.Generator().manual_seed(1)
        eps = 1e-6
        trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        assert trainable
        for name, param in trainable:
            flat = param.data.view(-1)
            picks = torch.randperm(flat.numel(), generator=generator)[:4]
            for i in picks.tolist():
                original = flat[i].item()
                with torch.no_grad():
                    flat[i] = original + eps
                    up = total().item()
                    flat[i] = original - eps
                    down = total().item()
                    flat[i] = original
                numeric = (up - down) / (2 * eps)
                analytic = param.grad.view(-1)[i].item()
                scale = max(abs(numeric), abs(analytic))
                assert abs(numeric - analytic) <= 1e-4 * scale + 1e-9, f"{name}[{i}]: {analytic} vs {numeric}"

    def test_target_encoder_receives_no_gradient(self, model, patches, mask):
        model.forward_losses(patches, mask).losses.total.backward()
        for param in model.target_encoder.parameters():
            assert param.grad is None or float(param.grad.norm()) == 0.0
        assert any(p.grad is not None for p in model.context_encoder.parameters())

    def test_codebook_is_not_trained_by_gradient_in_ema_mode(self, model, patches, mask):
        model.forward_losses(patches, mask).losses.total.backward()
        assert model.codebook.codes.grad is None


class TestIJepaReduction:
    def test_total_equals_patch_to_patch_mse(self, patches, mask):
        torch.manual_seed(3)
        config = apply_preset(toy_config(), "ijepa")
        model = DiscreteJepa(config).double()
        assert model.codebook is None and model.s2p is None and model.p2s is None

        loss = model.forward_losses(patches, mask).losses.total

        context = model.context_encoder(patches, mask.visible)
        target = model.target_encoder(patches).z_p[:, mask.targets]
        pred = model.p2p(context.z_p, mask.visible, mask.targets)
        diff = pred - target
        reference = (diff * diff).sum() / diff.numel()
        assert abs(loss.item() - reference.item()) < 1e-10


class TestEncode:
    def test_views(self, model, patches):
        model.codebook.init_from(model.target_encoder(patches).z_s, np.random.default_rng(0))
        encoded = model.encode(patches)
        assert encoded.view(TokenView.SEMANTIC).shape == (3, 2, 8)
        assert encoded.view(TokenView.PATCH).shape == (3, 4, 8)
        assert encoded.view(TokenView.POOLED).shape == (3, 1, 8)
        assert encoded.indices.shape == (3, 2)
        torch.testing.assert_close(encoded.semantic, model.codebook.codes.detach()[encoded.indices])
