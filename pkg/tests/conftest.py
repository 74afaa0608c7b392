from __future__ import annotations

import numpy as np
import pytest

from mvli.augment import RawDocument, augment_kb
from mvli.core import FeatureSet, Rng
from mvli.encoder import EncoderConfig, SeededEmbeddingProvider, init_encoder_params


@pytest.fixture(scope="session")
def tiny_config() -> EncoderConfig:
    return EncoderConfig(
        dim=6, text_dim=8, image_dim=8, n_patches=3, n_heads=2, attn_dim=8, n_mm_tokens=2
    )


@pytest.fixture(scope="session")
def tiny_provider(tiny_config) -> SeededEmbeddingProvider:
    return SeededEmbeddingProvider(tiny_config)


@pytest.fixture()
def tiny_params(tiny_config):
    return init_encoder_params(tiny_config, seed=5)


@pytest.fixture(scope="session")
def small_kb() -> dict[str, RawDocument]:
    docs = [
        RawDocument("d0", "Lema Daturaphila",
                    "Lema Daturaphila feeds upon Potato. Lema Daturaphila patrols Solan Ridge.",
                    "img::Lema Daturaphila"),
        RawDocument("d1", "Potato",
                    "Potato shelters Solan Ridge. Potato borders Tomat Vale.",
                    "img::Potato"),
        RawDocument("d2", "Solan Ridge",
                    "Solan Ridge overlooks Tomat Vale. Solan Ridge guards Potato.",
                    "img::Solan Ridge"),
        RawDocument("d3", "Tomat Vale",
                    "Tomat Vale venerates Lema Daturaphila. Tomat Vale harvests Potato.",
                    "img::Tomat Vale"),
    ]
    return {d.doc_id: d for d in docs}


@pytest.fixture(scope="session")
def small_kb_aug(small_kb):
    return augment_kb(small_kb)


def random_feature_set(rng: Rng, n: int, dim: int) -> FeatureSet:
    vectors = rng.generator().standard_normal((n, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return FeatureSet(vectors, tuple("textual" for _ in range(n)))


@pytest.fixture(scope="session")
def feature_set_factory():
    return random_feature_set
