"""Hybrid token vocabulary: behavior, CoT, and hierarchical semantic tokens,
plus the catalog trie used to constrain decoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import (BEHAVIOR_ORDER, Behavior, CoTPath, Item, UserSequence,
                   percentile_boundaries, pkg_traverse)

# token-type tags, in stream order
PAD, BOS, EOS, USER, BEH, COT1, COT2, COT3, SEM1, SEM2, SEM3 = range(11)
TYPE_NAMES = ["PAD", "BOS", "EOS", "USER", "BEH",
              "COT1", "COT2", "COT3", "SEM1", "SEM2", "SEM3"]
TOKENS_PER_INTERACTION = 7  # BEH + 3 CoT hops + 3 semantic levels
N_PRICE_BANDS = 5


@dataclass(frozen=True)
class SemanticId:
    levels: tuple[int, int, int]


class Vocab:
    """Disjoint contiguous id ranges, one per token type."""

    def __init__(self, sizes: dict[int, int], seed: int = 0,
                 pt_values: list[str] | None = None,
                 brand_values: list[str] | None = None):
        self.sizes = dict(sizes)
        self.seed = seed
        self.pt_values = list(pt_values or [])
        self.brand_values = list(brand_values or [])
        self.offsets: dict[int, int] = {}
        ofs = 0
        for t in range(len(TYPE_NAMES)):
            self.offsets[t] = ofs
            ofs += self.sizes[t]
        self.total_size = ofs
        self._pt_index = {v: i for i, v in enumerate(self.pt_values)}
        self._brand_index = {v: i for i, v in enumerate(self.brand_values)}

    def encode(self, token_type: int, value: int = 0) -> int:
        if not 0 <= value < self.sizes[token_type]:
            raise ValueError(f"value {value} out of range for {TYPE_NAMES[token_type]}")
        return self.offsets[token_type] + value

    def decode(self, token_id: int) -> tuple[int, int]:
        if not 0 <= token_id < self.total_size:
            raise ValueError(f"token id {token_id} out of vocab")
        for t in reversed(range(len(TYPE_NAMES))):
            if token_id >= self.offsets[t]:
                return t, token_id - self.offsets[t]
        raise AssertionError("unreachable")

    def behavior_token(self, b: Behavior) -> int:
        return self.encode(BEH, BEHAVIOR_ORDER.index(b))

    def pt_token(self, pt: str) -> int:
        if pt not in self._pt_index:
            raise ValueError(f"unknown product type {pt!r}")
        return self.encode(COT1, self._pt_index[pt])

    def brand_token(self, brand: str) -> int:
        if brand not in self._brand_index:
            raise ValueError(f"unknown brand {brand!r}")
        return self.encode(COT3, self._brand_index[brand])

    def to_manifest(self) -> dict:
        return {
            "seed": self.seed,
            "sizes": {TYPE_NAMES[t]: n for t, n in self.sizes.items()},
            "ranges": {TYPE_NAMES[t]: [self.offsets[t], self.offsets[t] + self.sizes[t]]
                       for t in self.sizes},
            "product_types": self.pt_values,
            "brands": self.brand_values,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_manifest(), f, indent=2)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path) as f:
            m = json.load(f)
        sizes = {TYPE_NAMES.index(name): n for name, n in m["sizes"].items()}
        return cls(sizes, seed=m["seed"], pt_values=m["product_types"],
                   brand_values=m["brands"])


def build_vocab(catalog: list[Item], codebook_size: int, n_level3: int,
                seed: int = 0) -> Vocab:
    pts = sorted({it.product_type for it in catalog})
    brands = sorted({it.brand for it in catalog})
    sizes = {PAD: 1, BOS: 1, EOS: 1, USER: 1, BEH: len(BEHAVIOR_ORDER),
             COT1: len(pts), COT2: N_PRICE_BANDS, COT3: len(brands),
             SEM1: codebook_size, SEM2: codebook_size, SEM3: n_level3}
    return Vocab(sizes, seed=seed, pt_values=pts, brand_values=brands)


# -- quantizer ----------------------------------------------------------------


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            iters: int = 50) -> np.ndarray:
    """Seeded Lloyd iterations with k-means++ style init; empty clusters
    are re-seeded from the farthest point."""
    n = points.shape[0]
    k = min(k, n)
    # k-means++ init
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j:] = points[first]
            break
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    for _ in range(iters):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        new = centroids.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                new[j] = points[mask].mean(axis=0)
            else:
                far = int(dists.min(axis=1).argmax())
                new[j] = points[far]
        if np.allclose(new, centroids):
            centroids = new
            break
        centroids = new
    return centroids


@dataclass
class Codebooks:
    """Two-level residual quantizer: level-1 centroids over embeddings,
    per-level-1 sub-codebooks over residuals."""

    level1: np.ndarray
    level2: dict[int, np.ndarray] = field(default_factory=dict)

    def nearest1(self, e: np.ndarray) -> int:
        return int(((self.level1 - e) ** 2).sum(axis=1).argmin())

    def nearest2(self, code1: int, residual: np.ndarray) -> int:
        sub = self.level2[code1]
        return int(((sub - residual) ** 2).sum(axis=1).argmin())


def fit_codebooks(embeddings: np.ndarray, k: int = 64, seed: int = 0) -> Codebooks:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    rng = np.random.default_rng(seed)
    level1 = _kmeans(embeddings, k, rng)
    assign = ((embeddings[:, None, :] - level1[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
    books = Codebooks(level1)
    for c in range(level1.shape[0]):
        members = embeddings[assign == c]
        if members.shape[0] == 0:
            books.level2[c] = np.zeros((1, embeddings.shape[1]))
            continue
        residuals = members - level1[c]
        books.level2[c] = _kmeans(residuals, min(k, members.shape[0]), rng)
    return books


def assign_semantic_ids(codebooks: Codebooks, catalog: list[Item],
                        seed: int = 0) -> dict[str, SemanticId]:
    """Quantize every item; break (st1, st2) collisions with a seeded
    random level-3 token drawn from the smallest sufficient range."""
    rng = np.random.default_rng(seed)
    prelim: dict[str, tuple[int, int]] = {}
    buckets: dict[tuple[int, int], list[str]] = {}
    for it in sorted(catalog, key=lambda x: x.item_id):
        e = np.asarray(it.embedding, dtype=np.float64)
        c1 = codebooks.nearest1(e)
        c2 = codebooks.nearest2(c1, e - codebooks.level1[c1])
        prelim[it.item_id] = (c1, c2)
        buckets.setdefault((c1, c2), []).append(it.item_id)
    max_bucket = max((len(v) for v in buckets.values()), default=1)
    out: dict[str, SemanticId] = {}
    for key, members in sorted(buckets.items()):
        if len(members) == 1:
            out[members[0]] = SemanticId((*key, 0))
            continue
        codes = rng.permutation(max_bucket)[:len(members)]
        for item_id, c3 in zip(members, codes):
            out[item_id] = SemanticId((*key, int(c3)))
    return out


def level3_range(semantic_ids: dict[str, SemanticId]) -> int:
    return max((sid.levels[2] for sid in semantic_ids.values()), default=0) + 1


# -- token streams ------------------------------------------------------------


@dataclass(frozen=True)
class InteractionSpan:
    behavior_pos: int
    cot_positions: tuple[int, int, int]
    sem_positions: tuple[int, int, int]


@dataclass(frozen=True)
class TokenizedSequence:
    tokens: tuple[int, ...]
    token_types: tuple[int, ...]
    spans: tuple[InteractionSpan, ...]
    degenerate: bool = False  # True when the sequence had no interactions


def item_path_tokens(vocab: Vocab, sid: SemanticId, cot: CoTPath) -> list[int]:
    """The 6 item tokens after the behavior token: CoT hops then sem levels."""
    pt, band, brand = cot.attributes
    return [vocab.pt_token(pt),
            vocab.encode(COT2, band),
            vocab.brand_token(brand),
            vocab.encode(SEM1, sid.levels[0]),
            vocab.encode(SEM2, sid.levels[1]),
            vocab.encode(SEM3, sid.levels[2])]


def tokenize(seq: UserSequence, vocab: Vocab,
             semantic_ids: dict[str, SemanticId],
             cot_paths: dict[str, CoTPath]) -> TokenizedSequence:
    """[USER] then [BEH, C1, C2, C3, S1, S2, S3] per interaction."""
    tokens = [vocab.encode(USER, 0)]
    types = [USER]
    spans = []
    for it in seq.interactions:
        if it.item_id not in semantic_ids or it.item_id not in cot_paths:
            raise ValueError(f"unknown item {it.item_id!r} at ordinal {it.ordinal}")
        base = len(tokens)
        tokens.append(vocab.behavior_token(it.behavior))
        tokens.extend(item_path_tokens(vocab, semantic_ids[it.item_id],
                                       cot_paths[it.item_id]))
        types.extend([BEH, COT1, COT2, COT3, SEM1, SEM2, SEM3])
        spans.append(InteractionSpan(base, (base + 1, base + 2, base + 3),
                                     (base + 4, base + 5, base + 6)))
    return TokenizedSequence(tuple(tokens), tuple(types), tuple(spans),
                             degenerate=not spans)


# -- trie ---------------------------------------------------------------------


class TrieNode:
    __slots__ = ("children", "item_id")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.item_id: str | None = None


class TokenTrie:
    """behavior -> CoT hops -> semantic levels -> item leaf."""

    PATH_LEN = 7

    def __init__(self):
        self.root = TrieNode()
        self.n_leaves = 0

    def insert(self, path: list[int], item_id: str) -> None:
        node = self.root
        for tok in path:
            node = node.children.setdefault(tok, TrieNode())
        if node.item_id is not None:
            raise ValueError(f"duplicate token path for {item_id!r} and {node.item_id!r}")
        node.item_id = item_id
        self.n_leaves += 1

    def node_at(self, prefix) -> TrieNode | None:
        node = self.root
        for tok in prefix:
            node = node.children.get(tok)
            if node is None:
                return None
        return node

    def next_tokens(self, prefix) -> list[int]:
        node = self.node_at(prefix)
        return sorted(node.children) if node is not None else []

    def leaf_item(self, path) -> str | None:
        node = self.node_at(path)
        return node.item_id if node is not None else None


def build_trie(catalog: list[Item], vocab: Vocab,
               semantic_ids: dict[str, SemanticId],
               cot_paths: dict[str, CoTPath]) -> TokenTrie:
    trie = TokenTrie()
    for it in catalog:
        item_tokens = item_path_tokens(vocab, semantic_ids[it.item_id],
                                       cot_paths[it.item_id])
        for b in BEHAVIOR_ORDER:
            trie.insert([vocab.behavior_token(b)] + item_tokens, it.item_id)
    return trie


# -- pipeline helper ----------------------------------------------------------


@dataclass
class TokenizerArtifacts:
    vocab: Vocab
    codebooks: Codebooks
    semantic_ids: dict[str, SemanticId]
    cot_paths: dict[str, CoTPath]
    boundaries: list[float]
    trie: TokenTrie


def fit_tokenizer(catalog: list[Item], codebook_size: int = 64, seed: int = 0,
                  boundaries: list[float] | None = None) -> TokenizerArtifacts:
    if boundaries is None:
        boundaries = percentile_boundaries([it.price for it in catalog])
    cot_paths = {it.item_id: pkg_traverse(it, boundaries) for it in catalog}
    emb = np.array([it.embedding for it in catalog], dtype=np.float64)
    codebooks = fit_codebooks(emb, k=codebook_size, seed=seed)
    semantic_ids = assign_semantic_ids(codebooks, catalog, seed=seed)
    vocab = build_vocab(catalog, codebooks.level1.shape[0],
                        level3_range(semantic_ids), seed=seed)
    trie = build_trie(catalog, vocab, semantic_ids, cot_paths)
    return TokenizerArtifacts(vocab, codebooks, semantic_ids, cot_paths,
                              boundaries, trie)


def write_semantic_ids(path, semantic_ids: dict[str, SemanticId]) -> None:
    with open(path, "w") as f:
        for item_id in sorted(semantic_ids):
            st1, st2, st3 = semantic_ids[item_id].levels
            f.write(json.dumps({"item_id": item_id, "st1": st1,
                                "st2": st2, "st3": st3}) + "\n")


def read_semantic_ids(path) -> dict[str, SemanticId]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[rec["item_id"]] = SemanticId((rec["st1"], rec["st2"], rec["st3"]))
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}: bad semantic-id record at line {lineno}: {e}") from e
    return out
