"""Analytic attention-cost model: attended query-key pairs for full vs.
journey-aware sparse attention, and the reduction percentages."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class CostConfig:
    tokens_per_item: int = 5
    extra_tokens: int = 2
    block_len: int = 15
    stride: int = 15
    top_n: int = 3
    window: int = 10
    inter_per_item: int = 2  # kept CoT + semantic tokens per item
    self_term: int = 1

    def __post_init__(self):
        if min(self.tokens_per_item, self.block_len, self.stride,
               self.top_n, self.window) < 1:
            raise ValueError("cost parameters must be positive")
        if self.extra_tokens < 0 or self.inter_per_item < 0 or self.self_term not in (0, 1):
            raise ValueError("bad cost configuration")


REFERENCE_LENGTHS = (50, 100, 200)


def token_len(n_items: int, cfg: CostConfig = CostConfig()) -> int:
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    return cfg.tokens_per_item * n_items + cfg.extra_tokens


def full_cost(length: int) -> int:
    if length < 1:
        raise ValueError("length must be >= 1")
    return length * length


def keys_per_query(n_items: int, cfg: CostConfig = CostConfig()) -> int:
    length = token_len(n_items, cfg)
    compressed = (length - cfg.block_len) // cfg.stride
    return (compressed + cfg.top_n * cfg.block_len + cfg.window
            + n_items * cfg.inter_per_item + cfg.self_term)


def jsa_cost(n_items: int, cfg: CostConfig = CostConfig()) -> int:
    return token_len(n_items, cfg) * keys_per_query(n_items, cfg)


def reduction(n_items: int, cfg: CostConfig = CostConfig()) -> int:
    """Percent change in attended pairs, rounded to an integer (negative
    means fewer pairs than full attention)."""
    full = full_cost(token_len(n_items, cfg))
    return round((jsa_cost(n_items, cfg) / full - 1.0) * 100.0)


def cost_table(cfg: CostConfig = CostConfig(),
               lengths=REFERENCE_LENGTHS) -> list[dict]:
    rows = []
    for n in lengths:
        length = token_len(n, cfg)
        rows.append({
            "item_seq_len": n,
            "token_len": length,
            "full_attention": full_cost(length),
            "jsa_attention": jsa_cost(n, cfg),
            "reduction_pct": reduction(n, cfg),
        })
    return rows


def format_cost_table(rows: list[dict]) -> str:
    header = f"{'Item Seq Len':>12} {'Full Attention':>15} {'JSA Attention':>14} {'Reduced':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['item_seq_len']:>12} {r['full_attention']:>15,} "
                     f"{r['jsa_attention']:>14,} {r['reduction_pct']:>7}%")
    return "\n".join(lines)


def write_cost_csv(path, rows: list[dict]) -> None:
    cols = ["item_seq_len", "token_len", "full_attention", "jsa_attention",
            "reduction_pct"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(str(r[c]) for c in cols) + "\n")


def reconcile_defaults(targets=((50, 43092), (100, 144576), (200, 522042)),
                       top_n: int = 3, window: int = 10,
                       inter_per_item: int = 2,
                       max_block: int = 50) -> list[tuple[int, int, int]]:
    """Search (block_len, stride, self_term) combinations that reproduce all
    target sparse-attention counts. Used to pin the default CostConfig."""
    hits = []
    for block_len in range(1, max_block + 1):
        for stride in range(1, block_len + 1):
            for self_term in (0, 1):
                cfg = CostConfig(block_len=block_len, stride=stride,
                                 top_n=top_n, window=window,
                                 inter_per_item=inter_per_item,
                                 self_term=self_term)
                if all(jsa_cost(n, cfg) == want for n, want in targets):
                    hits.append((block_len, stride, self_term))
    return hits
