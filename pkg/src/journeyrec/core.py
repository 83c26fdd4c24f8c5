"""Domain model: behaviors, items, interaction sequences, behavior merging,
price banding, and the attribute traversal that seeds CoT tokens."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class Behavior(Enum):
    CLICK = "click"
    ADD_TO_CART = "add_to_cart"
    LIKE = "like"
    REMOVE_FROM_CART = "remove_from_cart"


# Merge priority covers positive behaviors only; removals pass through.
MERGE_PRIORITY = {
    Behavior.ADD_TO_CART: 3,
    Behavior.LIKE: 2,
    Behavior.CLICK: 1,
}

BEHAVIOR_ORDER = [Behavior.CLICK, Behavior.ADD_TO_CART,
                  Behavior.LIKE, Behavior.REMOVE_FROM_CART]


@dataclass(frozen=True)
class Item:
    item_id: str
    embedding: tuple[float, ...]
    product_type: str
    brand: str
    price: float

    def __post_init__(self):
        if not math.isfinite(self.price) or self.price < 0:
            raise ValueError(f"item {self.item_id}: bad price {self.price}")


@dataclass(frozen=True)
class CoTPath:
    """Coarse-to-fine attribute hops: [product type, price band, brand]."""

    attributes: tuple


@dataclass(frozen=True)
class Interaction:
    item_id: str
    behavior: Behavior
    ordinal: int


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    interactions: tuple[Interaction, ...]

    def __post_init__(self):
        ords = [it.ordinal for it in self.interactions]
        if any(b <= a for a, b in zip(ords, ords[1:])):
            raise ValueError(f"user {self.user_id}: ordinals not strictly increasing")


def merge_behaviors(seq: UserSequence) -> UserSequence:
    """Collapse repeated positive interactions with the same item.

    For each item seen with several of {ATC, Like, Click}, keep one
    interaction carrying the highest-priority behavior, positioned at that
    behavior's last occurrence. Removals pass through untouched. Ordinals
    are re-assigned densely. Idempotent.
    """
    best: dict[str, Interaction] = {}
    kept: list[Interaction] = []
    for it in seq.interactions:
        if it.behavior is Behavior.REMOVE_FROM_CART:
            kept.append(it)
            continue
        prev = best.get(it.item_id)
        if prev is None or MERGE_PRIORITY[it.behavior] >= MERGE_PRIORITY[prev.behavior]:
            best[it.item_id] = it
    kept.extend(best.values())
    kept.sort(key=lambda it: it.ordinal)
    dense = tuple(Interaction(it.item_id, it.behavior, i)
                  for i, it in enumerate(kept))
    return UserSequence(seq.user_id, dense)


def price_band(price: float, boundaries) -> int:
    """Map a price to one of five left-closed, right-open bands.

    Returns the smallest i with price < boundaries[i], else 4.
    """
    if not math.isfinite(price):
        raise ValueError(f"non-finite price {price}")
    bounds = list(boundaries)
    if len(bounds) != 4 or any(b <= a for a, b in zip(bounds, bounds[1:])):
        raise ValueError("boundaries must be 4 strictly ascending reals")
    return int(np.searchsorted(bounds, price, side="right"))


def percentile_boundaries(prices) -> list[float]:
    """Equal-mass band edges: the 20/40/60/80 price percentiles."""
    arr = np.asarray(list(prices), dtype=np.float64)
    qs = np.percentile(arr, [20, 40, 60, 80])
    # nudge ties apart so the boundary list stays strictly ascending
    for i in range(1, 4):
        if qs[i] <= qs[i - 1]:
            qs[i] = np.nextafter(qs[i - 1], np.inf)
    return [float(q) for q in qs]


def pkg_traverse(item: Item, boundaries) -> CoTPath:
    """Walk the item's attribute chain coarse-to-fine: PT, price band, brand."""
    if not item.product_type:
        raise ValueError(f"item {item.item_id}: missing attribute at hop 1 (product_type)")
    if item.price is None or not math.isfinite(item.price):
        raise ValueError(f"item {item.item_id}: missing attribute at hop 2 (price)")
    if not item.brand:
        raise ValueError(f"item {item.item_id}: missing attribute at hop 3 (brand)")
    return CoTPath((item.product_type, price_band(item.price, boundaries), item.brand))


# -- file formats ------------------------------------------------------------


def write_catalog(path, items) -> None:
    with open(path, "w") as f:
        for it in items:
            f.write(json.dumps({
                "item_id": it.item_id,
                "embedding": list(it.embedding),
                "product_type": it.product_type,
                "brand": it.brand,
                "price": it.price,
            }) + "\n")


def read_catalog(path) -> list[Item]:
    items = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(Item(rec["item_id"], tuple(rec["embedding"]),
                                  rec["product_type"], rec["brand"],
                                  float(rec["price"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}: bad catalog record at line {lineno}: {e}") from e
    lens = {len(it.embedding) for it in items}
    if len(lens) > 1:
        raise ValueError(f"{path}: inconsistent embedding lengths {sorted(lens)}")
    return items


def write_sequences(path, seqs) -> None:
    with open(path, "w") as f:
        for seq in seqs:
            for it in seq.interactions:
                f.write(json.dumps({
                    "user_id": seq.user_id,
                    "item_id": it.item_id,
                    "behavior": it.behavior.value,
                    "ordinal": it.ordinal,
                }) + "\n")


def read_sequences(path) -> list[UserSequence]:
    per_user: dict[str, list[Interaction]] = {}
    order: list[str] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                inter = Interaction(rec["item_id"], Behavior(rec["behavior"]),
                                    int(rec["ordinal"]))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}: bad interaction record at line {lineno}: {e}") from e
            uid = rec["user_id"]
            if uid not in per_user:
                per_user[uid] = []
                order.append(uid)
            per_user[uid].append(inter)
    seqs = []
    for uid in order:
        inters = sorted(per_user[uid], key=lambda it: it.ordinal)
        seqs.append(UserSequence(uid, tuple(inters)))
    return seqs
