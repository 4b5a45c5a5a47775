import numpy as np
import pytest
import torch

from conftest import small_model, toy_image
from shapeworld_owod.queries import (ORIGIN_LEARNABLE, ORIGIN_QUERY_SELECTED, TdqiConfig,
                                     origin_attribution, query_select)


class TestQuerySelect:
    def test_unknown_column_disregarded_hand_case(self):
        scores = torch.tensor([
            [0.1, 0.2, 0.99],   # token A: huge unknown score
            [0.3, 0.1, 0.0],    # token B: best known score
        ])
        sel = query_select(scores, 1, known_cols=[0, 1])
        assert sel.tolist() == [1]

    def test_k_zero_empty(self):
        scores = torch.rand(8, 3)
        assert query_select(scores, 0, [0, 1]).numel() == 0

    def test_k_too_large_rejected(self):
        with pytest.raises(ValueError):
            query_select(torch.rand(4, 3), 5, [0, 1])

    def test_matches_full_sort_oracle(self):
        g = torch.Generator().manual_seed(0)
        for trial in range(20):
            scores = torch.rand(64, 7, generator=g)
            sel = query_select(scores, 20, known_cols=list(range(6)))
            key = scores[:, :6].max(dim=1).values.numpy()
            expected = sorted(range(64), key=lambda i: (-key[i], i))[:20]
            assert sel.tolist() == expected

    def test_tie_break_by_token_index(self):
        scores = torch.tensor([[0.5, 0.1], [0.5, 0.9], [0.5, 0.0], [0.2, 0.3]])
        sel = query_select(scores, 3, known_cols=[0])
        assert sel.tolist() == [0, 1, 2]

    def test_invariant_to_unknown_column_perturbation(self):
        g = torch.Generator().manual_seed(1)
        rng = np.random.default_rng(2)
        for _ in range(200):
            scores = torch.rand(32, 5, generator=g)
            sel = query_select(scores, 8, known_cols=[0, 1, 2, 3])
            perturbed = scores.clone()
            perturbed[:, 4] = torch.from_numpy(rng.uniform(0, 1, size=32)).float()
            sel2 = query_select(perturbed, 8, known_cols=[0, 1, 2, 3])
            assert torch.equal(sel, sel2)

    def test_masked_known_columns_also_disregarded(self):
        scores = torch.tensor([[0.9, 0.0, 0.0], [0.0, 0.8, 0.0]])
        # only class 1 is known: token 1 must win despite token 0's class-0 score
        sel = query_select(scores, 1, known_cols=[1])
        assert sel.tolist() == [1]


class TestTdqiConfig:
    def test_counts_must_be_nonnegative(self):
        with pytest.raises(ValueError):
            TdqiConfig(n_qs=-1, n_lq=5).validate()

    def test_partition_counts_across_sweep(self):
        for n_qs, n_lq in [(10, 90), (20, 80), (30, 70), (50, 50), (80, 20), (100, 0), (0, 100)]:
            cfg = TdqiConfig(n_qs=n_qs, n_lq=n_lq)
            cfg.validate()
            assert cfg.num_queries == 100


class TestInitQueries:
    def test_origin_partition(self):
        model = small_model()
        out = model(toy_image(), etop=None, known_class_ids=[0, 1])
        origins = out.query_origins
        assert (origins == ORIGIN_QUERY_SELECTED).sum() == 4
        assert (origins == ORIGIN_LEARNABLE).sum() == 6
        assert origins[:4].eq(ORIGIN_QUERY_SELECTED).all()

    def test_pure_learnable_when_nqs_zero(self):
        model = small_model(tdqi=TdqiConfig(n_qs=0, n_lq=10))
        out = model(toy_image(), etop=None, known_class_ids=[0, 1])
        assert (out.query_origins == ORIGIN_LEARNABLE).all()
        assert out.enc_class_logits is None and out.selected_indices is None

    def test_pure_selection_config(self):
        model = small_model(tdqi=TdqiConfig(n_qs=10, n_lq=0))
        out = model(toy_image(), etop=None, known_class_ids=[0, 1])
        assert (out.query_origins == ORIGIN_QUERY_SELECTED).all()
        assert out.selected_indices.shape == (1, 10)

    def test_selection_budget_beyond_token_grid_recycles(self):
        # 32px image -> 4x4 = 16 tokens; ask for 24 selected queries
        model = small_model(tdqi=TdqiConfig(n_qs=24, n_lq=0))
        out = model(toy_image(), etop=None, known_class_ids=[0, 1])
        sel = out.selected_indices[0]
        assert sel.shape == (24,)
        assert torch.equal(sel[16:], sel[:8])

    def test_selected_references_are_detached(self):
        model = small_model()
        out = model(toy_image(), etop=None, known_class_ids=[0, 1])
        assert out.qs_reference.requires_grad is False

    def test_bypass_requires_zero_selected(self):
        with pytest.raises(ValueError):
            TdqiConfig(n_qs=5, n_lq=5, enabled=False).validate()


class TestOriginAttribution:
    def test_all_learnable_gives_fraction_one(self):
        records = [{"label": 0, "confidence": 0.9, "origin": "learnable"},
                   {"label": "unknown", "confidence": 0.8, "origin": "learnable"}]
        out = origin_attribution(records, 0.5)
        assert out["known"]["learnable"] == 1.0
        assert out["unknown"]["learnable"] == 1.0

    def test_empty_category_reported_absent_not_nan(self):
        out = origin_attribution([], 0.5)
        assert out["known"] is None and out["unknown"] is None

    def test_fractions_sum_to_one(self):
        rng = np.random.default_rng(0)
        records = [{"label": int(rng.integers(0, 2)) if rng.random() < 0.7 else "unknown",
                    "confidence": float(rng.random()),
                    "origin": "query_selected" if rng.random() < 0.4 else "learnable"}
                   for _ in range(200)]
        out = origin_attribution(records, 0.2)
        for category in ("known", "unknown"):
            assert sum(out[category].values()) == pytest.approx(1.0)

    def test_threshold_filters(self):
        records = [{"label": 0, "confidence": 0.05, "origin": "learnable"}]
        assert origin_attribution(records, 0.1)["known"] is None
