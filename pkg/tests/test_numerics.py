import numpy as np
import pytest
import torch

from shapeworld_owod.numerics import (GradReport, bilinear_sample, bilinear_sample_batched,
                                      grad_check, read_blob, required_primitives, write_blob)


class TestBilinearSample:
    def test_integer_grid_point_identity(self):
        fmap = torch.arange(24, dtype=torch.float64).reshape(4, 2, 3)
        out = bilinear_sample(fmap, torch.tensor([[1.0, 2.0]]))
        assert torch.equal(out[0], fmap[2, 1])

    def test_center_of_two_by_two_is_mean(self):
        fmap = torch.tensor([[[1.0], [2.0]], [[3.0], [4.0]]], dtype=torch.float64)
        out = bilinear_sample(fmap, torch.tensor([[0.5, 0.5]]))
        assert out.item() == pytest.approx(2.5, abs=1e-12)

    def test_fractional_point_matches_hand_blend(self):
        g = torch.Generator().manual_seed(0)
        fmap = torch.randn(5, 6, 2, generator=g, dtype=torch.float64)
        x, y = 0.3, 0.7
        out = bilinear_sample(fmap, torch.tensor([[x, y]], dtype=torch.float64))[0]
        expected = ((1 - 0.3) * (1 - 0.7) * fmap[0, 0]
                    + 0.3 * (1 - 0.7) * fmap[0, 1]
                    + (1 - 0.3) * 0.7 * fmap[1, 0]
                    + 0.3 * 0.7 * fmap[1, 1])
        assert torch.allclose(out, expected, atol=1e-14)

    def test_out_of_range_contributes_zero(self):
        fmap = torch.ones(3, 3, 1, dtype=torch.float64)
        pts = torch.tensor([[-1.0, 0.0], [0.0, -1.0], [5.0, 1.0], [1.0, 7.0]], dtype=torch.float64)
        assert torch.equal(bilinear_sample(fmap, pts), torch.zeros(4, 1, dtype=torch.float64))
        # half a pixel outside: blends with zero padding
        edge = bilinear_sample(fmap, torch.tensor([[2.5, 1.0]], dtype=torch.float64))
        assert edge.item() == pytest.approx(0.5)

    def test_gradient_equals_interpolation_weights(self):
        fmap = torch.zeros(3, 4, 1, dtype=torch.float64, requires_grad=True)
        out = bilinear_sample(fmap, torch.tensor([[1.25, 1.5]], dtype=torch.float64))
        out.sum().backward()
        g = fmap.grad[:, :, 0]
        assert g[1, 1].item() == pytest.approx(0.75 * 0.5)
        assert g[1, 2].item() == pytest.approx(0.25 * 0.5)
        assert g[2, 1].item() == pytest.approx(0.75 * 0.5)
        assert g[2, 2].item() == pytest.approx(0.25 * 0.5)
        assert g.sum().item() == pytest.approx(1.0)

    def test_batched_variant_matches_single(self):
        g = torch.Generator().manual_seed(5)
        value = torch.randn(3, 6, 7, 4, generator=g, dtype=torch.float64)
        pts = torch.randn(3, 11, 2, generator=g, dtype=torch.float64) * 4 + 2
        batched = bilinear_sample_batched(value, pts)
        for b in range(3):
            assert torch.allclose(batched[b], bilinear_sample(value[b], pts[b]), atol=1e-13)


class TestGradCheck:
    def test_square_function_analytic(self):
        x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
        report = grad_check(lambda: (x * x).sum(), {"x": x})
        assert isinstance(report, GradReport)
        assert report.max_rel_err < 1e-8

    def test_sigmoid_of_linear_map(self):
        g = torch.Generator().manual_seed(2)
        w = torch.randn(5, 4, generator=g, dtype=torch.float64, requires_grad=True)
        x = torch.randn(4, generator=g, dtype=torch.float64, requires_grad=True)
        report = grad_check(lambda: torch.sigmoid(w @ x).sum(), {"w": w, "x": x}, eps=1e-5)
        assert report.max_rel_err < 1e-4

    def test_non_finite_value_raises(self):
        x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        with pytest.raises(FloatingPointError):
            grad_check(lambda: (x / 0.0).sum(), {"x": x})

    def test_entry_subsampling_reports_counts(self):
        x = torch.randn(50, dtype=torch.float64, requires_grad=True)
        report = grad_check(lambda: (x ** 2).sum(), {"x": x}, max_entries_per_param=7)
        assert report.per_parameter["x"]["checked"] == 7

    def test_errors_are_nonnegative(self):
        x = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
        report = grad_check(lambda: (x ** 3).sum(), {"x": x})
        assert report.max_abs_err >= 0 and report.max_rel_err >= 0


class TestPrimitiveContract:
    @pytest.mark.parametrize("name", sorted(required_primitives().keys()))
    def test_primitive_grad(self, name):
        fn, tensors = required_primitives()[name]
        report = grad_check(fn, tensors, eps=1e-5, tol=1e-4)
        assert report.ok(1e-4), f"{name}: {report.max_rel_err}"

    def test_matmul_identity(self):
        x = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
        eye = torch.eye(4, dtype=torch.float64)
        assert torch.allclose(eye @ x, x)
        (eye @ x).sum().backward()
        assert torch.equal(x.grad, torch.ones_like(x))

    def test_sigmoid_at_zero(self):
        x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        y = torch.sigmoid(x)
        y.backward()
        assert y.item() == pytest.approx(0.5)
        assert x.grad.item() == pytest.approx(0.25)

    def test_empty_reduction_is_zero(self):
        assert torch.zeros(0).sum().item() == 0.0


class TestBlob:
    def test_round_trip(self):
        entries = [
            ("a", np.arange(6, dtype=np.float32).reshape(2, 3)),
            ("b", np.linspace(0, 1, 5).astype(np.float64)),
            ("c", np.arange(4, dtype=np.uint8)),
            ("d", np.array([7, -3], dtype=np.int64)),
        ]
        blob, table = write_blob(entries)
        back = read_blob(blob, table)
        for name, arr in entries:
            assert back[name].dtype == arr.dtype
            assert np.array_equal(back[name], arr)
        offsets = [t["byte_offset"] for t in table]
        assert offsets == sorted(offsets)

    def test_truncated_blob_rejected(self):
        blob, table = write_blob([("a", np.ones(4, dtype=np.float32))])
        with pytest.raises(ValueError):
            read_blob(blob[:-2], table)

    def test_unknown_dtype_rejected(self):
        blob, table = write_blob([("a", np.ones(1, dtype=np.float32))])
        table[0]["dtype"] = "zz"
        with pytest.raises(ValueError):
            read_blob(blob, table)
