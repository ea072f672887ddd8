"""Shared fixtures: small in-memory datasets and a fast model config."""

import dataclasses

import numpy as np
import pytest

from mscmnet.config import RunConfig
from mscmnet.data.synthetic import GenParams, generate_dataset
from mscmnet.model import Model, ModelConfig


TINY_GEN = GenParams(num_identities=8, samples_per_id=4, image_h=32, image_w=16, seed=3)

TINY_MODEL = ModelConfig(
    stage_channels=(4, 8, 8, 16, 16),
    stage_strides=(2, 2, 2, 1),
    num_alb=2,
    attn_dim=8,
    attn_heads=2,
    token_grid=(2, 1),
    num_classes=8,
    embed_dim=16,
)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(TINY_GEN)


@pytest.fixture(scope="session")
def tiny_records(tiny_dataset):
    return tiny_dataset.records


@pytest.fixture()
def tiny_model():
    return Model(TINY_MODEL, np.random.default_rng(0))


def tiny_run_config(**kw):
    cfg = RunConfig()
    cfg = dataclasses.replace(cfg, model=TINY_MODEL)
    for key, val in kw.items():
        section, _, attr = key.partition(".")
        if attr:
            cfg = dataclasses.replace(
                cfg, **{section: dataclasses.replace(getattr(cfg, section), **{attr: val})}
            )
        else:
            cfg = dataclasses.replace(cfg, **{key: val})
    return cfg
