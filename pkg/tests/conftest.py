import numpy as np
import pytest
import torch

from shapeworld_owod.detector import ModelConfig, build_detector, jitter_params
from shapeworld_owod.objectness import GaussianStats
from shapeworld_owod.queries import TdqiConfig
from shapeworld_owod.schedule import EtopConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


SMALL_MODEL = ModelConfig(embed_dim=16, ffn_dim=32, image_size=32, num_classes=6)
SMALL_TDQI = TdqiConfig(n_qs=4, n_lq=6)


def small_model(seed=3, dtype=torch.float64, jitter=True, tdqi=SMALL_TDQI, config=SMALL_MODEL):
    model = build_detector(config, tdqi, seed=seed, dtype=dtype)
    if jitter:
        jitter_params(model, seed=seed)
    return model


def fitted_stats(model, image, cov_reg=0.1, layer=2):
    """Gaussian statistics fitted to the model's own embeddings at `layer`,
    with a well-conditioned regularizer (gradient tests need smoothness)."""
    dim = model.config.embed_dim
    stats = GaussianStats(dim, cov_reg=cov_reg)
    with torch.no_grad():
        pre = model(image, etop=None, known_class_ids=[0, 1])
    stats.ema_update(pre.layers[layer - 1].embeddings.reshape(-1, dim))
    return stats


def toy_image(seed=4, size=32, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 1, size, size, dtype=dtype, generator=g)


def toy_targets(dtype=torch.float64):
    return [{
        "classes": torch.tensor([0, 1]),
        "boxes": torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.25, 0.3]], dtype=dtype),
    }]


def rng_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    """n random valid (cx, cy, w, h) boxes."""
    wh = rng.uniform(0.05, 0.4, size=(n, 2))
    cxy = rng.uniform(0, 1, size=(n, 2)) * (1 - wh) + wh / 2
    return np.concatenate([cxy, wh], axis=1)


SMALL_ETOP = EtopConfig(stop_layer=2, total_layers=6)
