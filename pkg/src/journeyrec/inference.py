"""Trie-constrained beam search over behavior + CoT + semantic token paths."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .core import BEHAVIOR_ORDER, Behavior
from .model import Model
from .numerics import Tensor
from .tokenizer import BEH, BOS, TokenTrie, Vocab, item_path_tokens


@dataclass(frozen=True)
class TargetBehavior:
    behavior: Behavior


@dataclass(frozen=True)
class BehaviorSpecific:
    allowed: frozenset

    def __post_init__(self):
        if not self.allowed:
            raise ValueError("behavior set must be non-empty")


@dataclass(frozen=True)
class BehaviorItem:
    pass


TaskKind = TargetBehavior | BehaviorSpecific | BehaviorItem


def allowed_behavior_tokens(task: TaskKind, vocab: Vocab) -> set[int]:
    if isinstance(task, TargetBehavior):
        return {vocab.behavior_token(task.behavior)}
    if isinstance(task, BehaviorSpecific):
        return {vocab.behavior_token(b) for b in task.allowed}
    return {vocab.offsets[BEH] + i for i in range(vocab.sizes[BEH])}


@dataclass(frozen=True)
class RankedPrediction:
    behavior: Behavior
    item_id: str
    score: float  # log P(behavior, item | sequence)
    tokens: tuple[int, ...] = ()


@dataclass
class _Beam:
    tokens: tuple[int, ...]
    score: float
    node: object  # TrieNode cursor


def _step_logprobs(model: Model, enc_states: Tensor, prefix, tensors) -> np.ndarray:
    logits, _ = model.decode_logits(enc_states, prefix, tensors)
    lp = nm.log_softmax_rows(logits)
    return lp.data[-1]


def beam_search(model: Model, enc_states: Tensor, trie: TokenTrie,
                task: TaskKind, n_beam: int, vocab: Vocab,
                tensors=None) -> list[RankedPrediction]:
    """Rank (behavior, item) candidates; every emitted path is a trie path.

    Beams are pruned globally across behaviors. Score is the sum of the
    step log-probabilities of the seven path tokens.
    """
    if n_beam < 1:
        raise ValueError("n_beam must be >= 1")
    with nm.no_grad():
        if tensors is None:
            tensors = model.wrap()
        bos = vocab.encode(BOS, 0)
        allowed_first = allowed_behavior_tokens(task, vocab)
        beams = [_Beam((), 0.0, trie.root)]
        for step in range(TokenTrie.PATH_LEN):
            candidates: list[_Beam] = []
            for beam in beams:
                legal = sorted(beam.node.children)
                if step == 0:
                    legal = [t for t in legal if t in allowed_first]
                if not legal:
                    continue  # dead beam under the task constraint
                lp = _step_logprobs(model, enc_states,
                                    [bos, *beam.tokens], tensors)
                for tok in legal:
                    candidates.append(_Beam(beam.tokens + (tok,),
                                            beam.score + float(lp[tok]),
                                            beam.node.children[tok]))
            candidates.sort(key=lambda b: (-b.score, b.tokens))
            beams = candidates[:n_beam]
            if not beams:
                return []
    out = []
    for beam in beams:
        item_id = beam.node.item_id
        if item_id is None:
            raise AssertionError("complete beam did not land on a trie leaf")
        beh_type, beh_value = vocab.decode(beam.tokens[0])
        assert beh_type == BEH
        out.append(RankedPrediction(BEHAVIOR_ORDER[beh_value], item_id,
                                    beam.score, beam.tokens))
    out.sort(key=lambda r: (-r.score, r.tokens))
    return out


def score_pair(model: Model, enc_states: Tensor, behavior: Behavior,
               item_id: str, vocab: Vocab, semantic_ids, cot_paths,
               tensors=None) -> float:
    """Teacher-forced log P(behavior, item | sequence) over the 7-token path."""
    if item_id not in semantic_ids:
        raise ValueError(f"unknown item {item_id!r}")
    path = [vocab.behavior_token(behavior)] + \
        item_path_tokens(vocab, semantic_ids[item_id], cot_paths[item_id])
    with nm.no_grad():
        if tensors is None:
            tensors = model.wrap()
        bos = vocab.encode(BOS, 0)
        prefix = [bos] + path[:-1]
        logits, _ = model.decode_logits(enc_states, prefix, tensors)
        lp = nm.log_softmax_rows(logits).data
    return float(sum(lp[i, tok] for i, tok in enumerate(path)))


def write_predictions(path, user_id: str, predictions: list[RankedPrediction],
                      append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode) as f:
        for rank, p in enumerate(predictions, start=1):
            f.write(json.dumps({"user_id": user_id, "rank": rank,
                                "behavior": p.behavior.value,
                                "item_id": p.item_id,
                                "score": p.score}) + "\n")
