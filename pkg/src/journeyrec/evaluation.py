"""Leave-one-out splitting, HR@K / NDCG@K evaluation for the three task
variants, and the product-type x level-1 co-occurrence matrix."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .core import Interaction, Item, UserSequence, merge_behaviors
from .inference import (BehaviorItem, BehaviorSpecific, RankedPrediction,
                        TargetBehavior, TaskKind, beam_search)
from .model import Model
from .tokenizer import TokenizerArtifacts, tokenize

TRUNCATION = 50


def leave_one_out(seq: UserSequence, truncation: int = TRUNCATION):
    """(history, target): target is the final interaction, history the most
    recent ``truncation`` interactions before it. Sequences shorter than 2
    are rejected."""
    if len(seq.interactions) < 2:
        raise ValueError(f"user {seq.user_id}: too short for leave-one-out")
    target = seq.interactions[-1]
    history = seq.interactions[max(0, len(seq.interactions) - 1 - truncation):-1]
    return UserSequence(seq.user_id, history), target


def hr_ndcg_at_k(ranked_items: list, target, k: int) -> tuple[float, float]:
    """Single-relevant-item hit rate and NDCG at cutoff k (1-based ranks)."""
    for rank, item in enumerate(ranked_items[:k], start=1):
        if item == target:
            return 1.0, 1.0 / math.log2(rank + 1)
    return 0.0, 0.0


@dataclass
class MetricReport:
    task: str
    ks: list[int]
    hr: dict[int, float]
    ndcg: dict[int, float]
    per_behavior: dict[str, dict] = field(default_factory=dict)
    n_users: int = 0
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "K": self.ks,
            "hr": {str(k): self.hr[k] for k in self.ks},
            "ndcg": {str(k): self.ndcg[k] for k in self.ks},
            "per_behavior": self.per_behavior,
            "n_users": self.n_users,
            "n_excluded": self.n_excluded,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def task_name(task: TaskKind) -> str:
    if isinstance(task, TargetBehavior):
        return f"target_behavior[{task.behavior.value}]"
    if isinstance(task, BehaviorSpecific):
        return "behavior_specific[" + ",".join(sorted(b.value for b in task.allowed)) + "]"
    return "behavior_item"


def _ranked_candidates(task: TaskKind, preds: list[RankedPrediction]):
    """Collapse beam output into the ranked list the task's hit rule uses."""
    if isinstance(task, BehaviorItem):
        return [(p.behavior, p.item_id) for p in preds]
    # item-only ranking; keep the best-scoring occurrence of each item
    seen = set()
    out = []
    for p in preds:
        if p.item_id not in seen:
            seen.add(p.item_id)
            out.append(p.item_id)
    return out


def _target_key(task: TaskKind, target: Interaction):
    if isinstance(task, BehaviorItem):
        return (target.behavior, target.item_id)
    return target.item_id


def _user_in_scope(task: TaskKind, target: Interaction) -> bool:
    if isinstance(task, TargetBehavior):
        return target.behavior is task.behavior
    if isinstance(task, BehaviorSpecific):
        return target.behavior in task.allowed
    return True


def evaluate(model: Model, sequences: list[UserSequence],
             artifacts: TokenizerArtifacts, task: TaskKind,
             n_beam: int = 10, ks=(5, 10), truncation: int = TRUNCATION,
             gate_override: np.ndarray | None = None,
             merge: bool = True, predictions_sink=None) -> MetricReport:
    """Beam-search every in-scope user and aggregate HR/NDCG (x100)."""
    ks = sorted(ks)
    report = MetricReport(task_name(task), list(ks),
                          {k: 0.0 for k in ks}, {k: 0.0 for k in ks})
    sums = {k: [0.0, 0.0] for k in ks}
    per_beh: dict[str, dict] = {}
    n = 0
    with nm.no_grad():
        tensors = model.wrap()
        for seq in sequences:
            s = merge_behaviors(seq) if merge else seq
            if len(s.interactions) < 2:
                report.n_excluded += 1
                continue
            history, target = leave_one_out(s, truncation)
            if not _user_in_scope(task, target):
                report.n_excluded += 1
                continue
            tok = tokenize(history, artifacts.vocab, artifacts.semantic_ids,
                           artifacts.cot_paths)
            enc, _ = model.encode(tok.tokens, tok.token_types, tensors,
                                  gate_override=gate_override)
            preds = beam_search(model, enc, artifacts.trie, task, n_beam,
                                artifacts.vocab, tensors)
            if predictions_sink is not None:
                predictions_sink(s.user_id, preds)
            ranked = _ranked_candidates(task, preds)
            key = _target_key(task, target)
            n += 1
            beh = per_beh.setdefault(target.behavior.value,
                                     {"n": 0, **{f"hr@{k}": 0.0 for k in ks},
                                      **{f"ndcg@{k}": 0.0 for k in ks}})
            beh["n"] += 1
            for k in ks:
                hr, ndcg = hr_ndcg_at_k(ranked, key, k)
                sums[k][0] += hr
                sums[k][1] += ndcg
                beh[f"hr@{k}"] += hr
                beh[f"ndcg@{k}"] += ndcg
    if n == 0:
        raise ValueError("no users in scope for evaluation")
    for k in ks:
        report.hr[k] = 100.0 * sums[k][0] / n
        report.ndcg[k] = 100.0 * sums[k][1] / n
    for beh, stats in per_beh.items():
        m = stats["n"]
        report.per_behavior[beh] = {"n": m}
        for k in ks:
            report.per_behavior[beh][f"hr@{k}"] = 100.0 * stats[f"hr@{k}"] / m
            report.per_behavior[beh][f"ndcg@{k}"] = 100.0 * stats[f"ndcg@{k}"] / m
    report.n_users = n
    return report


def cooccurrence_heatmap(catalog: list[Item], semantic_ids,
                         pt_values: list[str]) -> np.ndarray:
    """Counts matrix: rows are product types, columns level-1 codes."""
    pt_index = {pt: i for i, pt in enumerate(pt_values)}
    n_l1 = max(sid.levels[0] for sid in semantic_ids.values()) + 1
    mat = np.zeros((len(pt_values), n_l1), dtype=np.int64)
    for it in catalog:
        mat[pt_index[it.product_type], semantic_ids[it.item_id].levels[0]] += 1
    return mat


def write_heatmap_csv(path, mat: np.ndarray, pt_values: list[str]) -> None:
    with open(path, "w") as f:
        f.write("product_type," + ",".join(f"L1_{c}" for c in range(mat.shape[1])) + "\n")
        for pt, row in zip(pt_values, mat):
            f.write(pt + "," + ",".join(str(int(x)) for x in row) + "\n")
