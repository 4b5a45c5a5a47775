import pytest
import torch

from conftest import (SMALL_ETOP, SMALL_MODEL, SMALL_TDQI, fitted_stats, small_model,
                      toy_image, toy_targets)
from shapeworld_owod.detector import (ModelConfig, build_detector, iterative_refine,
                                      jitter_params)
from shapeworld_owod.layers import SelfAttention, DeformableAttention, inverse_sigmoid
from shapeworld_owod.matching import CostWeights, detection_loss
from shapeworld_owod.numerics import bilinear_sample, grad_check
from shapeworld_owod.queries import TdqiConfig
from shapeworld_owod.schedule import EtopConfig


class TestBackbone:
    def test_zero_image_finite(self):
        model = small_model(jitter=False)
        tokens, anchors, shape = model.backbone_forward(torch.zeros(1, 1, 32, 32, dtype=torch.float64))
        assert torch.isfinite(tokens).all()

    def test_downsample_by_eight(self):
        model = build_detector(ModelConfig(), TdqiConfig(), seed=0)
        tokens, anchors, shape = model.backbone_forward(torch.rand(2, 1, 64, 64))
        assert shape == (8, 8)
        assert tokens.shape == (2, 64, 64)
        assert anchors.shape == (64, 2)

    def test_backbone_gradient(self):
        model = small_model()
        img = toy_image()
        params = {n: p for n, p in model.named_parameters() if n.startswith("backbone")}
        report = grad_check(lambda: model.backbone_forward(img)[0].mean(), params,
                            max_entries_per_param=4)
        assert report.max_rel_err < 1e-4


class TestAttentionProperties:
    def test_self_attention_permutation_equivariance(self):
        g = torch.Generator().manual_seed(0)
        attn = SelfAttention(16, 4).double()
        x = torch.randn(1, 10, 16, generator=g, dtype=torch.float64)
        perm = torch.randperm(10, generator=g)
        out = attn(x, x, x)
        out_perm = attn(x[:, perm], x[:, perm], x[:, perm])
        assert torch.allclose(out[:, perm], out_perm, atol=1e-12)

    def test_deformable_zero_offsets_reads_reference_center(self):
        g = torch.Generator().manual_seed(1)
        attn = DeformableAttention(16, 4, 4).double()
        with torch.no_grad():
            attn.sampling_offsets.weight.zero_()
            attn.sampling_offsets.bias.zero_()
            attn.attention_weights.weight.zero_()
            attn.attention_weights.bias.zero_()
            attn.value_proj.weight.copy_(torch.eye(16, dtype=torch.float64))
            attn.value_proj.bias.zero_()
            attn.output_proj.weight.copy_(torch.eye(16, dtype=torch.float64))
            attn.output_proj.bias.zero_()
        h, w = 6, 5
        memory = torch.randn(1, h * w, 16, generator=g, dtype=torch.float64)
        ref = torch.tensor([[[0.37, 0.61, 0.2, 0.2]]], dtype=torch.float64)
        query = torch.randn(1, 1, 16, generator=g, dtype=torch.float64)
        out = attn(query, ref, memory, (h, w))
        pix = torch.tensor([[0.37 * w - 0.5, 0.61 * h - 0.5]], dtype=torch.float64)
        expected = bilinear_sample(memory.reshape(h, w, 16), pix)
        assert torch.allclose(out[0], expected, atol=1e-12)

    def test_uniform_memory_returns_value_vector(self):
        attn = DeformableAttention(8, 2, 3).double()
        with torch.no_grad():
            attn.value_proj.weight.copy_(torch.eye(8, dtype=torch.float64))
            attn.value_proj.bias.zero_()
            attn.output_proj.weight.copy_(torch.eye(8, dtype=torch.float64))
            attn.output_proj.bias.zero_()
        value = torch.ones(1, 16, 8, dtype=torch.float64) * 3.25
        ref = torch.tensor([[[0.5, 0.5, 0.1, 0.1]]], dtype=torch.float64)
        out = attn(torch.randn(1, 1, 8, dtype=torch.float64), ref, value, (4, 4))
        assert torch.allclose(out, torch.full_like(out, 3.25), atol=1e-12)


class TestIterativeRefine:
    def test_zero_delta_identity(self):
        box = torch.tensor([0.3, 0.6, 0.2, 0.1], dtype=torch.float64)
        out = iterative_refine(box, torch.zeros(4, dtype=torch.float64))
        assert torch.allclose(out, box, atol=1e-12)

    def test_logit_algebra(self):
        box = torch.tensor([0.5, 0.5, 0.5, 0.5], dtype=torch.float64)
        delta = inverse_sigmoid(torch.tensor(0.8, dtype=torch.float64)) \
            - inverse_sigmoid(torch.tensor(0.5, dtype=torch.float64))
        out = iterative_refine(box, torch.tensor([delta, 0.0, 0.0, 0.0], dtype=torch.float64))
        assert out[0].item() == pytest.approx(0.8, abs=1e-9)
        assert out[1].item() == pytest.approx(0.5, abs=1e-12)

    def test_extreme_box_clamped_before_logit(self):
        box = torch.tensor([0.0, 1.0, 0.5, 0.5], dtype=torch.float64)
        out = iterative_refine(box, torch.zeros(4, dtype=torch.float64))
        assert torch.isfinite(out).all()
        assert 0 < out[0] < 1 and 0 < out[1] < 1

    def test_thousand_random_chains_stay_in_unit_box(self):
        g = torch.Generator().manual_seed(9)
        boxes = torch.rand(1000, 4, generator=g, dtype=torch.float64)
        for _ in range(6):
            deltas = torch.randn(1000, 4, generator=g, dtype=torch.float64) * 3
            boxes = iterative_refine(boxes, deltas)
            assert torch.all(boxes > 0) and torch.all(boxes < 1)


class TestForward:
    @pytest.mark.parametrize("stop_layer", [1, 2, 3, 4, 5, 6])
    def test_layer_outputs_invariants(self, stop_layer):
        model = small_model()
        img = toy_image()
        stats = fitted_stats(model, img)
        etop = EtopConfig(stop_layer=stop_layer, total_layers=6)
        out = model(img, stats=stats, etop=etop, known_class_ids=[0, 1])
        out.validate(etop)
        for idx, layer in enumerate(out.layers, start=1):
            assert (layer.objectness is not None) == (idx <= stop_layer)

    def test_stop_at_last_layer_gives_objectness_everywhere(self):
        model = small_model()
        img = toy_image()
        stats = fitted_stats(model, img)
        etop = EtopConfig(stop_layer=6, total_layers=6)
        out = model(img, stats=stats, etop=etop, known_class_ids=[0, 1])
        assert all(layer.objectness is not None for layer in out.layers)

    def test_boxes_valid_for_arbitrary_parameters(self):
        model = small_model(seed=123)
        jitter_params(model, seed=77, scale=2.0)  # wild weights
        out = model(toy_image(seed=8), etop=None, known_class_ids=[0, 1])
        for layer in out.layers:
            assert torch.all(layer.boxes > 0) and torch.all(layer.boxes < 1)

    def test_detached_refinement_gradient_path(self):
        model = small_model()
        img = toy_image()
        out = model(img, etop=None, known_class_ids=[0, 1])
        # a loss built only from layer-4 boxes reaches layer-4's box head but
        # not earlier box heads: refinement detaches between layers
        model.zero_grad(set_to_none=True)
        out.layers[3].boxes.sum().backward()
        assert model.box_heads[3].layers[0].weight.grad is not None
        for idx in (0, 1, 2):
            grad = model.box_heads[idx].layers[0].weight.grad
            assert grad is None or torch.all(grad == 0)
        # earlier *attention* parameters do get gradient through content
        assert model.decoder[0].self_attn.q_proj.weight.grad is not None

    def test_forward_perturbation_crosses_detach_in_value_only(self):
        model = small_model()
        img = toy_image()
        base = model(img, etop=None, known_class_ids=[0, 1])
        with torch.no_grad():
            model.box_heads[0].layers[2].bias.add_(0.05)
        bumped = model(img, etop=None, known_class_ids=[0, 1])
        assert not torch.allclose(base.layers[3].boxes, bumped.layers[3].boxes)

    def test_end_to_end_gradient(self):
        model = small_model()
        img = toy_image()
        stats = fitted_stats(model, img)
        with torch.no_grad():
            base = model(img, stats=stats, etop=SMALL_ETOP, known_class_ids=[0, 1])
        frozen = [None] + base.reference_inputs[1:]
        qs_ref = base.qs_reference
        targets = toy_targets()

        def loss_fn():
            out = model(img, stats=stats, etop=SMALL_ETOP, known_class_ids=[0, 1],
                        frozen_references=frozen, frozen_qs_reference=qs_ref)
            return detection_loss(out, targets, CostWeights(), SMALL_ETOP, stats,
                                  [0, 1]).total

        params = dict(model.named_parameters())
        report = grad_check(loss_fn, params, eps=1e-5, max_entries_per_param=2, seed=0)
        assert report.max_rel_err < 1e-3
