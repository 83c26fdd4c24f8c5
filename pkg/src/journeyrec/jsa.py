"""Journey-aware sparse attention: four gated branches over a token sequence.

Branches per head:
  comp    - attention over per-block compressed keys/values
  intra   - attention over the raw spans of the top-N important blocks
  inter   - attention over kept CoT/semantic tokens (coarse journey view)
  current - attention over the most recent window

Block selection and the per-branch gate are the trainable sparsity
mechanism; selection itself is a hard router (gradients treat the selected
index set as constant).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .tokenizer import COT1, SEM1


@dataclass
class JsaConfig:
    block_len: int = 8
    stride: int = 8
    top_n: int = 3
    kept_cot: int = 1
    kept_sem: int = 1
    window: int = 10
    heads: int = 2
    model_dim: int = 64
    head_dim: int = 32

    def __post_init__(self):
        if self.block_len <= 0 or self.stride <= 0:
            raise ValueError("block_len and stride must be positive")
        if self.stride > self.block_len:
            raise ValueError("stride must not exceed block_len")
        if self.top_n < 1 or self.window < 1:
            raise ValueError("top_n and window must be >= 1")
        if not (0 <= self.kept_cot <= 3 and 0 <= self.kept_sem <= 3):
            raise ValueError("kept token counts must be in [0, 3]")
        if self.kept_cot + self.kept_sem == 0:
            raise ValueError("at least one CoT or semantic token must be kept")


@dataclass
class BranchOutputs:
    """Per-head introspection of one JSA application."""

    o_comp: list = field(default_factory=list)
    o_intra: list = field(default_factory=list)
    o_inter: list = field(default_factory=list)
    o_current: list = field(default_factory=list)
    selected_blocks: list = field(default_factory=list)
    pi: list = field(default_factory=list)
    gate_values: np.ndarray | None = None

    def summary(self) -> dict:
        return {
            "gate_means": [float(m) for m in self.gate_values.mean(axis=0)],
            "selected_blocks": [[int(i) for i in sel] for sel in self.selected_blocks],
            "pi": [[float(x) for x in p] for p in self.pi],
        }


class FreezePlan:
    """Records hard routing decisions on first use and replays them after,
    so finite-difference probes see a fixed computation path."""

    def __init__(self):
        self.slots: dict = {}

    def resolve(self, key, compute):
        if key not in self.slots:
            self.slots[key] = compute()
        return self.slots[key]


def segment_blocks(length: int, block_len: int, stride: int) -> list[tuple[int, int]]:
    """Spans of size block_len every stride tokens; count floor((L-l)/d)+1,
    or one clipped span when the sequence is shorter than a block."""
    if block_len <= 0 or stride <= 0:
        raise ValueError("block_len and stride must be positive")
    if length < 1:
        raise ValueError("empty sequence")
    if length < block_len:
        return [(0, length)]
    count = (length - block_len) // stride + 1
    return [(i * stride, min(i * stride + block_len, length)) for i in range(count)]


def _compress(mat: Tensor, p: dict, prefix: str, spans, block_len: int) -> Tensor:
    stacked = nm.block_stack(mat, spans, block_len)
    hidden = nm.relu(nm.matmul(stacked, p[f"{prefix}_w1"]) + p[f"{prefix}_b1"])
    return nm.matmul(hidden, p[f"{prefix}_w2"]) + p[f"{prefix}_b2"]


def compress_branch(q: Tensor, k: Tensor, v: Tensor, p: dict,
                    spans, cfg: JsaConfig) -> tuple[Tensor, Tensor, Tensor]:
    k_comp = _compress(k, p, "comp_k", spans, cfg.block_len)
    v_comp = _compress(v, p, "comp_v", spans, cfg.block_len)
    o_comp = nm.attention(q, k_comp, v_comp, 1.0 / np.sqrt(cfg.head_dim))
    return o_comp, k_comp, v_comp


def block_importance(q: Tensor, k_comp: Tensor) -> np.ndarray:
    """Softmax over blocks of per-block logits summed over all queries.

    One distribution per sequence (not per query); detached from the graph
    since selection is a hard router.
    """
    logits = (q.data @ k_comp.data.T).sum(axis=0)
    return nm.softmax_rows(logits.reshape(1, -1)).reshape(-1)


def top_n_blocks(pi: np.ndarray, n: int) -> list[int]:
    """Highest-importance blocks; ties go to the lower index; ascending."""
    order = sorted(range(pi.size), key=lambda i: (-pi[i], i))
    return sorted(order[:min(n, pi.size)])


def select_branch(q: Tensor, k: Tensor, v: Tensor, k_comp: Tensor,
                  top_n: int, spans, cfg: JsaConfig,
                  frozen: list[int] | None = None):
    pi = block_importance(q, k_comp)
    selected = frozen if frozen is not None else top_n_blocks(pi, top_n)
    idx = np.concatenate([np.arange(spans[b][0], spans[b][1]) for b in selected])
    o_intra = nm.attention(q, nm.gather_rows(k, idx), nm.gather_rows(v, idx),
                           1.0 / np.sqrt(cfg.head_dim))
    return o_intra, selected, pi


def inter_keep_positions(token_types, kept_cot: int, kept_sem: int) -> np.ndarray:
    types = np.asarray(token_types)
    keep = np.zeros(types.shape, dtype=bool)
    for j in range(kept_cot):
        keep |= types == COT1 + j
    for j in range(kept_sem):
        keep |= types == SEM1 + j
    return np.flatnonzero(keep)


def inter_branch(q: Tensor, k: Tensor, v: Tensor, token_types,
                 kept_cot: int, kept_sem: int, cfg: JsaConfig) -> Tensor:
    idx = inter_keep_positions(token_types, kept_cot, kept_sem)
    if idx.size == 0:
        raise ValueError("no inter-journey context")
    return nm.attention(q, nm.gather_rows(k, idx), nm.gather_rows(v, idx),
                        1.0 / np.sqrt(cfg.head_dim))


def window_branch(q: Tensor, k: Tensor, v: Tensor, window: int,
                  cfg: JsaConfig) -> Tensor:
    length = k.shape[0]
    start = max(0, length - window)
    return nm.attention(q, nm.slice_rows(k, start, length),
                        nm.slice_rows(v, start, length),
                        1.0 / np.sqrt(cfg.head_dim))


def gated_combine(branches: list[Tensor], gates: Tensor) -> Tensor:
    """Per-token weighted sum: sum_j gates[:, j] * branches[j]."""
    if len(branches) != gates.shape[1]:
        raise ValueError("one gate column per branch required")
    shape = branches[0].shape
    for b in branches:
        if b.shape != shape:
            raise ValueError("branch output shape mismatch")
    out = None
    for j, b in enumerate(branches):
        col = nm.gather_entries(nm.transpose(gates),
                                np.full(shape[0], j), np.arange(shape[0]))
        term = nm.mul(b, col)
        out = term if out is None else out + term
    return out


def gate_values(x: Tensor, p: dict,
                gate_override: np.ndarray | None = None) -> Tensor:
    g = nm.sigmoid(nm.matmul(x, p["gate_w"]) + p["gate_b"])
    if gate_override is not None:
        keep = np.isnan(gate_override)
        mult = np.where(keep, 1.0, 0.0).reshape(1, -1)
        addc = np.where(keep, 0.0, np.nan_to_num(gate_override)).reshape(1, -1)
        g = nm.mul(g, Tensor(mult)) + Tensor(addc)
    return g


def jsa_forward(x: Tensor, p: dict, cfg: JsaConfig, token_types,
                plan: FreezePlan | None = None, plan_key=(),
                gate_override: np.ndarray | None = None,
                collect: BranchOutputs | None = None) -> Tensor:
    """Full multi-head JSA over x (L x dm). Returns (L x dm)."""
    length = x.shape[0]
    spans = segment_blocks(length, cfg.block_len, cfg.stride)
    gates = gate_values(x, p, gate_override)
    if collect is not None:
        collect.gate_values = gates.data.copy()
    head_outs = []
    for h in range(cfg.heads):
        q = nm.matmul(x, p[f"q{h}"])
        k = nm.matmul(x, p[f"k{h}"])
        v = nm.matmul(x, p[f"v{h}"])
        o_comp, k_comp, _v_comp = compress_branch(q, k, v, p, spans, cfg)
        frozen = None
        if plan is not None:
            frozen = plan.resolve(plan_key + ("select", h),
                                  lambda: top_n_blocks(block_importance(q, k_comp),
                                                       cfg.top_n))
        o_intra, selected, pi = select_branch(q, k, v, k_comp, cfg.top_n,
                                              spans, cfg, frozen=frozen)
        o_inter = inter_branch(q, k, v, token_types, cfg.kept_cot,
                               cfg.kept_sem, cfg)
        o_current = window_branch(q, k, v, cfg.window, cfg)
        if collect is not None:
            collect.o_comp.append(o_comp.data.copy())
            collect.o_intra.append(o_intra.data.copy())
            collect.o_inter.append(o_inter.data.copy())
            collect.o_current.append(o_current.data.copy())
            collect.selected_blocks.append(list(selected))
            collect.pi.append(pi.copy())
        head_outs.append(gated_combine([o_comp, o_intra, o_inter, o_current],
                                       gates))
    return nm.matmul(nm.concat_cols(head_outs), p["out_w"])
