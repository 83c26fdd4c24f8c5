"""Encoder-decoder transformer: JSA encoder blocks, causal decoder blocks
with cross-attention, switch-style MoE feed-forward, loss, and training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .jsa import FreezePlan, JsaConfig, BranchOutputs, jsa_forward
from .numerics import Param, Tensor

MOE_AUX_WEIGHT = 0.01


@dataclass
class ModelConfig:
    layers_enc: int = 2
    layers_dec: int = 2
    dm: int = 64
    ffn_width: int = 128
    heads: int = 2
    head_dim: int = 32
    experts: int = 4
    sem_levels: int = 3
    cot_hops: int = 3
    max_len: int = 384
    jsa: JsaConfig = field(default_factory=JsaConfig)

    def __post_init__(self):
        if isinstance(self.jsa, dict):
            self.jsa = JsaConfig(**self.jsa)
        if min(self.layers_enc, self.layers_dec, self.dm, self.ffn_width,
               self.heads, self.head_dim, self.experts, self.max_len) < 1:
            raise ValueError("all model dimensions must be positive")
        self.jsa.heads = self.heads
        self.jsa.model_dim = self.dm
        self.jsa.head_dim = self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)


def _subdict(tensors: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    plen = len(prefix)
    return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix)}


def _causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


class Model:
    """Holds parameters and runs forward passes; training is external."""

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        self.config = config
        self.vocab_size = vocab_size
        self.params: dict[str, Param] = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- parameter construction ------------------------------------------

    def _add(self, name: str, shape, rng=None, kind="normal"):
        if kind == "normal":
            # fan-in scaled init keeps activation and gradient magnitudes
            # comparable across the small desk-scale widths
            value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(kind)
        self.params[name] = Param(name, value)

    def _add_ln(self, prefix: str):
        self._add(f"{prefix}.gain", (1, self.config.dm), kind="ones")
        self._add(f"{prefix}.bias", (1, self.config.dm), kind="zeros")

    def _add_attention(self, prefix: str, rng):
        c = self.config
        for h in range(c.heads):
            self._add(f"{prefix}.q{h}", (c.dm, c.head_dim), rng)
            self._add(f"{prefix}.k{h}", (c.dm, c.head_dim), rng)
            self._add(f"{prefix}.v{h}", (c.dm, c.head_dim), rng)
        self._add(f"{prefix}.out_w", (c.heads * c.head_dim, c.dm), rng)

    def _add_moe(self, prefix: str, rng):
        c = self.config
        self._add(f"{prefix}.router", (c.dm, c.experts), rng)
        for e in range(c.experts):
            self._add(f"{prefix}.e{e}.w1", (c.dm, c.ffn_width), rng)
            self._add(f"{prefix}.e{e}.b1", (1, c.ffn_width), kind="zeros")
            self._add(f"{prefix}.e{e}.w2", (c.ffn_width, c.dm), rng)
            self._add(f"{prefix}.e{e}.b2", (1, c.dm), kind="zeros")

    def _init_params(self, rng):
        c = self.config
        hd, l = c.head_dim, c.jsa.block_len
        self._add("embed.tok", (self.vocab_size, c.dm), rng)
        self._add("embed.pos", (c.max_len, c.dm), rng)
        for i in range(c.layers_enc):
            p = f"enc.{i}"
            self._add_ln(f"{p}.ln1")
            self._add_attention(f"{p}.jsa", rng)
            for side in ("comp_k", "comp_v"):
                self._add(f"{p}.jsa.{side}_w1", (l * hd, 2 * hd), rng)
                self._add(f"{p}.jsa.{side}_b1", (1, 2 * hd), kind="zeros")
                self._add(f"{p}.jsa.{side}_w2", (2 * hd, hd), rng)
                self._add(f"{p}.jsa.{side}_b2", (1, hd), kind="zeros")
            self._add(f"{p}.jsa.gate_w", (c.dm, 4), rng)
            self._add(f"{p}.jsa.gate_b", (1, 4), kind="zeros")
            self._add_ln(f"{p}.ln2")
            self._add_moe(f"{p}.moe", rng)
        for i in range(c.layers_dec):
            p = f"dec.{i}"
            self._add_ln(f"{p}.ln1")
            self._add_attention(f"{p}.self", rng)
            self._add_ln(f"{p}.ln2")
            self._add_attention(f"{p}.cross", rng)
            self._add_ln(f"{p}.ln3")
            self._add_moe(f"{p}.moe", rng)
        self._add_ln("final.enc_ln")
        self._add_ln("final.dec_ln")
        self._add("head.w", (c.dm, self.vocab_size), rng)
        self._add("head.b", (1, self.vocab_size), kind="zeros")

    def param_list(self) -> list[Param]:
        return [self.params[k] for k in sorted(self.params)]

    def wrap(self) -> dict[str, Tensor]:
        return {k: p.tensor() for k, p in self.params.items()}

    # -- forward passes ----------------------------------------------------

    def _moe(self, x: Tensor, p: dict[str, Tensor], plan, plan_key):
        n_exp = self.config.experts
        probs = nm.softmax_rows(nm.matmul(x, p["router"]))
        if plan is not None:
            assign = plan.resolve(plan_key, lambda: probs.data.argmax(axis=1))
        else:
            assign = probs.data.argmax(axis=1)
        n_tok = x.shape[0]
        rows = np.arange(n_tok)
        out = None
        aux = None
        for e in range(n_exp):
            hidden = nm.relu(nm.matmul(x, p[f"e{e}.w1"]) + p[f"e{e}.b1"])
            y_e = nm.matmul(hidden, p[f"e{e}.w2"]) + p[f"e{e}.b2"]
            col = nm.gather_entries(probs, rows, np.full(n_tok, e))
            routed = (assign == e).astype(np.float64).reshape(-1, 1)
            gatecol = nm.mul(col, Tensor(routed))
            term = nm.mul(y_e, gatecol)
            out = term if out is None else out + term
            frac = float(routed.mean())
            aux_e = nm.scale(nm.mean_all(col), n_exp * frac)
            aux = aux_e if aux is None else aux + aux_e
        return out, aux

    def encode(self, tokens, token_types, tensors=None, plan: FreezePlan | None = None,
               gate_override: np.ndarray | None = None,
               collect: list[BranchOutputs] | None = None) -> tuple[Tensor, list[Tensor]]:
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size > c.max_len:
            raise ValueError(f"sequence length {tokens.size} exceeds max_len {c.max_len}")
        if tensors is None:
            tensors = self.wrap()
        h = nm.gather_rows(tensors["embed.tok"], tokens) + \
            nm.gather_rows(tensors["embed.pos"], np.arange(tokens.size))
        aux_losses = []
        for i in range(c.layers_enc):
            p = _subdict(tensors, f"enc.{i}.")
            ln1 = nm.layer_norm_rows(h, p["ln1.gain"], p["ln1.bias"])
            branch_collect = BranchOutputs() if collect is not None else None
            h = h + jsa_forward(ln1, _subdict(tensors, f"enc.{i}.jsa."), c.jsa,
                                token_types, plan=plan, plan_key=("enc", i),
                                gate_override=gate_override,
                                collect=branch_collect)
            if collect is not None:
                collect.append(branch_collect)
            ln2 = nm.layer_norm_rows(h, p["ln2.gain"], p["ln2.bias"])
            moe_out, aux = self._moe(ln2, _subdict(tensors, f"enc.{i}.moe."),
                                     plan, ("enc_moe", i))
            h = h + moe_out
            aux_losses.append(aux)
        h = nm.layer_norm_rows(h, tensors["final.enc_ln.gain"],
                               tensors["final.enc_ln.bias"])
        return h, aux_losses

    def _mha(self, q_in: Tensor, kv_in: Tensor, p: dict[str, Tensor],
             mask: np.ndarray | None) -> Tensor:
        c = self.config
        heads = []
        for h in range(c.heads):
            q = nm.matmul(q_in, p[f"q{h}"])
            k = nm.matmul(kv_in, p[f"k{h}"])
            v = nm.matmul(kv_in, p[f"v{h}"])
            heads.append(nm.attention(q, k, v, 1.0 / np.sqrt(c.head_dim), mask=mask))
        return nm.matmul(nm.concat_cols(heads), p["out_w"])

    def decode_logits(self, enc_states: Tensor, prefix, tensors=None,
                      plan: FreezePlan | None = None) -> tuple[Tensor, list[Tensor]]:
        c = self.config
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.size == 0:
            raise ValueError("empty decoder prefix")
        if tensors is None:
            tensors = self.wrap()
        h = nm.gather_rows(tensors["embed.tok"], prefix) + \
            nm.gather_rows(tensors["embed.pos"], np.arange(prefix.size))
        mask = _causal_mask(prefix.size)
        aux_losses = []
        for i in range(c.layers_dec):
            p = _subdict(tensors, f"dec.{i}.")
            ln1 = nm.layer_norm_rows(h, p["ln1.gain"], p["ln1.bias"])
            h = h + self._mha(ln1, ln1, _subdict(tensors, f"dec.{i}.self."), mask)
            ln2 = nm.layer_norm_rows(h, p["ln2.gain"], p["ln2.bias"])
            h = h + self._mha(ln2, enc_states, _subdict(tensors, f"dec.{i}.cross."), None)
            ln3 = nm.layer_norm_rows(h, p["ln3.gain"], p["ln3.bias"])
            moe_out, aux = self._moe(ln3, _subdict(tensors, f"dec.{i}.moe."),
                                     plan, ("dec_moe", i, prefix.size))
            h = h + moe_out
            aux_losses.append(aux)
        h = nm.layer_norm_rows(h, tensors["final.dec_ln.gain"],
                               tensors["final.dec_ln.bias"])
        logits = nm.matmul(h, tensors["head.w"]) + tensors["head.b"]
        return logits, aux_losses


def loss_ce(logits: Tensor, labels, pad_mask=None,
            aux_losses=(), aux_weight: float = MOE_AUX_WEIGHT) -> Tensor:
    """Mean NLL over unmasked positions plus weighted MoE aux losses."""
    labels = np.asarray(labels, dtype=np.int64)
    if pad_mask is None:
        pad_mask = np.ones(labels.size)
    weights = np.asarray(pad_mask, dtype=np.float64).reshape(-1, 1)
    n_active = weights.sum()
    if n_active == 0:
        raise ValueError("all positions masked")
    lp = nm.log_softmax_rows(logits)
    picked = nm.gather_entries(lp, np.arange(labels.size), labels)
    loss = nm.scale(nm.sum_all(nm.mul(picked, Tensor(weights))), -1.0 / n_active)
    for aux in aux_losses:
        loss = loss + nm.scale(aux, aux_weight)
    return loss


@dataclass
class TrainExample:
    tokens: tuple[int, ...]
    token_types: tuple[int, ...]
    target: tuple[int, ...]  # [BEH, C1..C3, S1..S3, EOS]


def build_training_examples(sequences, artifacts, truncation: int = 50,
                            merge: bool = True, holdout_last: bool = True,
                            max_targets_per_user: int | None = None,
                            seed: int = 0) -> list[TrainExample]:
    """Next-interaction prediction pairs from every prefix position.

    The final interaction of each user is reserved for evaluation when
    ``holdout_last`` is set, so training never sees the test target.
    """
    from .core import UserSequence, merge_behaviors
    from .tokenizer import EOS, item_path_tokens, tokenize

    rng = np.random.default_rng(seed)
    vocab = artifacts.vocab
    eos = vocab.encode(EOS, 0)
    out: list[TrainExample] = []
    for seq in sequences:
        s = merge_behaviors(seq) if merge else seq
        n = len(s.interactions)
        last = n - 1 if holdout_last else n
        positions = list(range(1, last))
        if max_targets_per_user is not None and len(positions) > max_targets_per_user:
            positions = sorted(rng.choice(positions, size=max_targets_per_user,
                                          replace=False))
        for t in positions:
            history = s.interactions[max(0, t - truncation):t]
            tok = tokenize(UserSequence(s.user_id, history), vocab,
                           artifacts.semantic_ids, artifacts.cot_paths)
            tgt = s.interactions[t]
            target = tuple([vocab.behavior_token(tgt.behavior)]
                           + item_path_tokens(vocab,
                                              artifacts.semantic_ids[tgt.item_id],
                                              artifacts.cot_paths[tgt.item_id])
                           + [eos])
            out.append(TrainExample(tok.tokens, tok.token_types, target))
    return out


def example_loss_parts(model: Model, ex: TrainExample, tensors, bos_id: int,
                       plan: FreezePlan | None = None,
                       gate_override: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """(nll, summed MoE aux) for one example."""
    enc, enc_aux = model.encode(ex.tokens, ex.token_types, tensors,
                                plan=plan, gate_override=gate_override)
    prefix = [bos_id] + list(ex.target[:-1])
    logits, dec_aux = model.decode_logits(enc, prefix, tensors, plan=plan)
    nll = loss_ce(logits, list(ex.target))
    aux = None
    for a in enc_aux + dec_aux:
        aux = a if aux is None else aux + a
    return nll, aux


def example_loss(model: Model, ex: TrainExample, tensors, bos_id: int,
                 plan: FreezePlan | None = None,
                 gate_override: np.ndarray | None = None) -> Tensor:
    nll, aux = example_loss_parts(model, ex, tensors, bos_id, plan=plan,
                                  gate_override=gate_override)
    return nll + nm.scale(aux, MOE_AUX_WEIGHT)


def batch_loss_parts(model: Model, batch: list[TrainExample], bos_id: int,
                     plans: list[FreezePlan] | None = None,
                     gate_override: np.ndarray | None = None
                     ) -> tuple[Tensor, float, float]:
    """(total loss, mean NLL, mean aux) over a batch."""
    tensors = model.wrap()
    nll_total = None
    aux_total = None
    for i, ex in enumerate(batch):
        nll, aux = example_loss_parts(model, ex, tensors, bos_id,
                                      plan=plans[i] if plans is not None else None,
                                      gate_override=gate_override)
        nll_total = nll if nll_total is None else nll_total + nll
        aux_total = aux if aux_total is None else aux_total + aux
    scale = 1.0 / len(batch)
    nll_mean = nm.scale(nll_total, scale)
    aux_mean = nm.scale(aux_total, scale)
    total = nll_mean + nm.scale(aux_mean, MOE_AUX_WEIGHT)
    return total, nll_mean.item(), aux_mean.item()


def batch_loss(model: Model, batch: list[TrainExample], bos_id: int,
               plans: list[FreezePlan] | None = None,
               gate_override: np.ndarray | None = None) -> Tensor:
    total, _, _ = batch_loss_parts(model, batch, bos_id, plans=plans,
                                   gate_override=gate_override)
    return total


def train(model: Model, examples: list[TrainExample], bos_id: int,
          steps: int, batch_size: int = 32, learning_rate: float = 1e-3,
          weight_decay: float = 0.01, seed: int = 0,
          progress=None) -> list[tuple[int, float, float]]:
    """AdamW training; returns the (step, nll, aux) curve. Deterministic per seed."""
    if not examples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    opt = nm.OptState(learning_rate=learning_rate, weight_decay=weight_decay)
    params = model.param_list()
    curve = []
    for step in range(steps):
        idx = rng.integers(0, len(examples), size=min(batch_size, len(examples)))
        batch = [examples[i] for i in idx]
        nm.zero_grads(params)
        loss, nll, aux = batch_loss_parts(model, batch, bos_id)
        loss.backward()
        nm.adamw_step(opt, params)
        curve.append((step, nll, aux))
        if progress is not None:
            progress(step, nll)
    return curve


# -- checkpoint --------------------------------------------------------------


def save_model(path, model: Model) -> None:
    meta = {"config": model.config.to_dict(), "vocab_size": model.vocab_size}
    params = model.param_list()
    nm.save_params(path, params)
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2)


def load_model(path) -> Model:
    with open(str(path) + ".meta.json") as f:
        meta = json.load(f)
    cfg = ModelConfig(**{**meta["config"], "jsa": JsaConfig(**meta["config"]["jsa"])})
    model = Model(cfg, meta["vocab_size"], seed=0)
    for p in nm.load_params(path):
        if p.name not in model.params:
            raise ValueError(f"unexpected param {p.name} in checkpoint")
        if model.params[p.name].value.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {p.name}")
        model.params[p.name] = p
    return model
