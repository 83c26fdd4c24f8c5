"""Deterministic synthetic catalog and interaction generator with planted
journey structure a correct model can learn."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Behavior, Interaction, Item, UserSequence

DEFAULT_BEHAVIOR_MIX = {
    Behavior.CLICK: 55.0,
    Behavior.ADD_TO_CART: 33.0,
    Behavior.REMOVE_FROM_CART: 10.0,
    Behavior.LIKE: 2.0,
}


@dataclass
class GenConfig:
    seed: int = 0
    n_users: int = 200
    n_items: int = 100
    n_product_types: int = 10
    n_brands: int = 8
    embedding_dim: int = 128
    embedding_noise: float = 0.05
    price_low: float = 1.0
    price_high: float = 1000.0
    behavior_mix: dict = field(default_factory=lambda: dict(DEFAULT_BEHAVIOR_MIX))
    journeys_per_user: tuple[int, int] = (1, 3)
    journey_len: tuple[int, int] = (3, 8)
    interleave_prob: float = 0.3
    rule_strength: float = 0.9

    def __post_init__(self):
        if isinstance(self.behavior_mix, dict) and self.behavior_mix and \
                isinstance(next(iter(self.behavior_mix)), str):
            self.behavior_mix = {Behavior(k): v for k, v in self.behavior_mix.items()}
        if min(self.n_users, self.n_items, self.n_product_types, self.n_brands) < 1:
            raise ValueError("all counts must be positive")
        if self.n_items < self.n_product_types:
            raise ValueError("need at least one item per product type")
        total = sum(self.behavior_mix.values())
        if abs(total - 100.0) > 1e-6:
            raise ValueError(f"behavior mix must sum to 100, got {total}")
        if not 0.0 <= self.rule_strength <= 1.0:
            raise ValueError("rule_strength must be in [0, 1]")


def gen_catalog(cfg: GenConfig) -> list[Item]:
    """Items with uniform PT/brand, log-uniform prices, and embeddings
    clustered around a per-PT centroid so level-1 codes track PT."""
    rng = np.random.default_rng(cfg.seed)
    centroids = rng.normal(0.0, 1.0, size=(cfg.n_product_types, cfg.embedding_dim))
    items = []
    width = len(str(cfg.n_items - 1))
    for i in range(cfg.n_items):
        pt = int(rng.integers(cfg.n_product_types)) if i >= cfg.n_product_types else i
        brand = int(rng.integers(cfg.n_brands))
        log_price = rng.uniform(np.log(cfg.price_low), np.log(cfg.price_high))
        emb = centroids[pt] + cfg.embedding_noise * rng.normal(size=cfg.embedding_dim)
        items.append(Item(f"item_{i:0{width}d}", tuple(float(x) for x in emb),
                          f"PT_{pt:03d}", f"BR_{brand:03d}",
                          float(np.exp(log_price))))
    return items


def _sample_behavior(rng, mix) -> Behavior:
    behaviors = sorted(mix, key=lambda b: b.value)
    probs = np.array([mix[b] for b in behaviors]) / 100.0
    return behaviors[int(rng.choice(len(behaviors), p=probs))]


def gen_sequences(cfg: GenConfig, catalog: list[Item]) -> list[UserSequence]:
    """Per user: PT-coherent journey chains interleaved round-robin.

    The next item in a journey stays in the current product type with
    probability ``rule_strength``, otherwise it is uniform over the catalog,
    so the final interaction is statistically predictable from history.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    by_pt: dict[str, list[int]] = {}
    for idx, it in enumerate(catalog):
        by_pt.setdefault(it.product_type, []).append(idx)
    seqs = []
    for u in range(cfg.n_users):
        n_j = int(rng.integers(cfg.journeys_per_user[0], cfg.journeys_per_user[1] + 1))
        journeys = []
        for _ in range(n_j):
            length = int(rng.integers(cfg.journey_len[0], cfg.journey_len[1] + 1))
            chain = [int(rng.integers(cfg.n_items))]
            while len(chain) < length:
                cur = catalog[chain[-1]]
                if rng.random() < cfg.rule_strength:
                    chain.append(int(rng.choice(by_pt[cur.product_type])))
                else:
                    chain.append(int(rng.integers(cfg.n_items)))
            journeys.append(chain)
        # interleave: usually continue the active journey, sometimes switch
        cursors = [0] * n_j
        active = 0
        flat: list[int] = []
        while any(cursors[j] < len(journeys[j]) for j in range(n_j)):
            if cursors[active] >= len(journeys[active]) or rng.random() < cfg.interleave_prob:
                live = [j for j in range(n_j) if cursors[j] < len(journeys[j])]
                active = live[int(rng.integers(len(live)))]
            flat.append(journeys[active][cursors[active]])
            cursors[active] += 1
        inters = tuple(Interaction(catalog[i].item_id,
                                   _sample_behavior(rng, cfg.behavior_mix), k)
                       for k, i in enumerate(flat))
        seqs.append(UserSequence(f"user_{u:05d}", inters))
    return seqs
