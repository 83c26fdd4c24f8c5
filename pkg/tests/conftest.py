"""Shared fixtures: tiny catalogs, tokenizer artifacts, and small models."""

from __future__ import annotations

import numpy as np
import pytest

from journeyrec.core import Behavior, Interaction, Item, UserSequence
from journeyrec.datagen import GenConfig, gen_catalog, gen_sequences
from journeyrec.model import Model, ModelConfig
from journeyrec.tokenizer import fit_tokenizer


def make_item(item_id, emb, pt="PT_A", brand="BR_A", price=10.0) -> Item:
    return Item(item_id, tuple(float(x) for x in emb), pt, brand, price)


def make_seq(user_id, triples) -> UserSequence:
    """triples: list of (item_id, Behavior); ordinals assigned densely."""
    return UserSequence(user_id, tuple(
        Interaction(item, beh, i) for i, (item, beh) in enumerate(triples)))


# jsa given as a dict so every ModelConfig gets its own JsaConfig instance
TINY_MODEL_CONFIG = dict(
    layers_enc=1, layers_dec=1, dm=8, ffn_width=12, heads=2, head_dim=4,
    experts=2, max_len=256,
    jsa=dict(block_len=3, stride=3, top_n=1, window=4,
             heads=2, model_dim=8, head_dim=4))


@pytest.fixture(scope="session")
def tiny_world():
    """A small generated catalog + sequences + tokenizer artifacts + an
    untrained model, shared across inference/evaluation tests."""
    gen = GenConfig(seed=3, n_users=6, n_items=8, n_product_types=2,
                    n_brands=2, embedding_dim=8, journeys_per_user=(1, 2),
                    journey_len=(3, 5))
    catalog = gen_catalog(gen)
    sequences = gen_sequences(gen, catalog)
    artifacts = fit_tokenizer(catalog, codebook_size=2, seed=0)
    model = Model(ModelConfig(**TINY_MODEL_CONFIG), artifacts.vocab.total_size,
                  seed=1)
    return {"gen": gen, "catalog": catalog, "sequences": sequences,
            "artifacts": artifacts, "model": model}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ALL_BEHAVIORS = list(Behavior)
