"""Command-line pipeline: gen, tokenize, train, eval, sweep, cost, heatmap.

All commands read one JSON config file and write fixed filenames under the
output directory. Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cost as cost_mod
from . import report
from .core import (Behavior, merge_behaviors, read_catalog, read_sequences,
                   write_catalog, write_sequences)
from .datagen import GenConfig, gen_catalog, gen_sequences
from .evaluation import cooccurrence_heatmap, evaluate, write_heatmap_csv
from .inference import BehaviorItem, BehaviorSpecific, TargetBehavior
from .jsa import JsaConfig
from .model import (Model, ModelConfig, build_training_examples, load_model,
                    save_model, train)
from .tokenizer import BOS, fit_tokenizer, tokenize, write_semantic_ids


class ConfigError(Exception):
    pass


SECTION_KEYS = {
    "seed": None,
    "gen": {f.name for f in fields(GenConfig)},
    "tokenizer": {"codebook_size", "truncation", "price_boundaries"},
    "model": {f.name for f in fields(ModelConfig)},
    "train": {"steps", "batch_size", "learning_rate", "weight_decay",
              "max_targets_per_user"},
    "eval": {"task", "target_behavior", "allowed_behaviors", "n_beam", "k",
             "disable_branches", "max_users"},
    "sweep": {"w", "top_n", "beam"},
    "cost": {f.name for f in fields(cost_mod.CostConfig)},
}


def load_config(path, seed_override=None) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    for key, value in cfg.items():
        if key not in SECTION_KEYS:
            raise ConfigError(f"unknown config section {key!r}")
        allowed = SECTION_KEYS[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be an object")
        for sub in value:
            if sub not in allowed and not (key == "model" and sub == "jsa"):
                raise ConfigError(f"unknown key {key}.{sub!r}")
        if key == "model" and "jsa" in value:
            jsa_keys = {f.name for f in fields(JsaConfig)}
            for sub in value["jsa"]:
                if sub not in jsa_keys:
                    raise ConfigError(f"unknown key model.jsa.{sub!r}")
    if seed_override is not None:
        cfg["seed"] = seed_override
    cfg.setdefault("seed", 0)
    return cfg


def _paths(out: Path) -> dict:
    return {
        "catalog": out / "catalog.jsonl",
        "sequences": out / "sequences.jsonl",
        "vocab": out / "vocab.json",
        "semantic_ids": out / "semantic_ids.jsonl",
        "tokenized": out / "tokenized.jsonl",
        "checkpoint": out / "checkpoint.npz",
        "loss_csv": out / "loss_curve.csv",
        "loss_png": out / "loss_curve.png",
        "report": out / "report.json",
        "cost_txt": out / "cost.txt",
        "cost_csv": out / "cost.csv",
        "cost_png": out / "cost.png",
        "heatmap_csv": out / "heatmap.csv",
        "heatmap_png": out / "heatmap.png",
    }


def _gen_config(cfg: dict) -> GenConfig:
    section = dict(cfg.get("gen", {}))
    section.setdefault("seed", cfg["seed"])
    try:
        return GenConfig(**{**section,
                            "journeys_per_user": tuple(section.get("journeys_per_user", (1, 3))),
                            "journey_len": tuple(section.get("journey_len", (3, 8)))})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad gen config: {e}") from e


def _fit_artifacts(cfg: dict, paths: dict):
    catalog = read_catalog(paths["catalog"])
    tk = cfg.get("tokenizer", {})
    return catalog, fit_tokenizer(catalog,
                                  codebook_size=tk.get("codebook_size", 64),
                                  seed=cfg["seed"],
                                  boundaries=tk.get("price_boundaries"))


def _truncation(cfg: dict) -> int:
    return cfg.get("tokenizer", {}).get("truncation", 50)


def cmd_gen(cfg: dict, paths: dict) -> int:
    gen_cfg = _gen_config(cfg)
    catalog = gen_catalog(gen_cfg)
    seqs = gen_sequences(gen_cfg, catalog)
    write_catalog(paths["catalog"], catalog)
    write_sequences(paths["sequences"], seqs)
    counts = {b: 0 for b in Behavior}
    total = 0
    for s in seqs:
        for it in s.interactions:
            counts[it.behavior] += 1
            total += 1
    print(f"items={len(catalog)} users={len(seqs)} "
          f"avg_seq_len={total / len(seqs):.2f}")
    for b in Behavior:
        pct = 100.0 * counts[b] / max(1, total)
        print(f"  avg #{b.value}: {counts[b] / len(seqs):.2f} ({pct:.2f}%)")
    return 0


def cmd_tokenize(cfg: dict, paths: dict) -> int:
    for key in ("catalog", "sequences"):
        if not paths[key].exists():
            raise FileNotFoundError(f"missing input {paths[key]} (run gen first)")
    catalog, artifacts = _fit_artifacts(cfg, paths)
    seqs = read_sequences(paths["sequences"])
    artifacts.vocab.save(paths["vocab"])
    write_semantic_ids(paths["semantic_ids"], artifacts.semantic_ids)
    triples = [artifacts.semantic_ids[it.item_id].levels for it in catalog]
    collisions = len(triples) - len(set(triples))
    with open(paths["tokenized"], "w") as f:
        for seq in seqs:
            tok = tokenize(merge_behaviors(seq), artifacts.vocab,
                           artifacts.semantic_ids, artifacts.cot_paths)
            f.write(json.dumps({"user_id": seq.user_id,
                                "tokens": list(tok.tokens),
                                "token_types": list(tok.token_types)}) + "\n")
    print(f"vocab_size={artifacts.vocab.total_size} "
          f"semantic_id_collisions={collisions} users={len(seqs)}")
    if collisions:
        raise RuntimeError("semantic-id collisions after level-3 assignment")
    return 0


def _model_config(cfg: dict) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    try:
        return ModelConfig(**section)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad model config: {e}") from e


def cmd_train(cfg: dict, paths: dict) -> int:
    for key in ("catalog", "sequences"):
        if not paths[key].exists():
            raise FileNotFoundError(f"missing input {paths[key]}")
    _, artifacts = _fit_artifacts(cfg, paths)
    seqs = read_sequences(paths["sequences"])
    tr = cfg.get("train", {})
    examples = build_training_examples(
        seqs, artifacts, truncation=_truncation(cfg),
        max_targets_per_user=tr.get("max_targets_per_user"), seed=cfg["seed"])
    model = Model(_model_config(cfg), artifacts.vocab.total_size, seed=cfg["seed"])
    curve = train(model, examples, artifacts.vocab.encode(BOS, 0),
                  steps=tr.get("steps", 500),
                  batch_size=tr.get("batch_size", 16),
                  learning_rate=tr.get("learning_rate", 1e-3),
                  weight_decay=tr.get("weight_decay", 0.01),
                  seed=cfg["seed"])
    save_model(paths["checkpoint"], model)
    with open(paths["loss_csv"], "w") as f:
        f.write("step,loss,aux\n")
        for step, loss, aux in curve:
            f.write(f"{step},{loss:.6f},{aux:.6f}\n")
    report.save_loss_curve(paths["loss_png"], curve)
    print(f"trained {len(curve)} steps; final loss {curve[-1][1]:.4f}")
    return 0


def _eval_task(cfg: dict):
    ev = cfg.get("eval", {})
    kind = ev.get("task", "target_behavior")
    if kind == "target_behavior":
        return TargetBehavior(Behavior(ev.get("target_behavior", "add_to_cart")))
    if kind == "behavior_specific":
        allowed = ev.get("allowed_behaviors", ["add_to_cart", "click"])
        return BehaviorSpecific(frozenset(Behavior(b) for b in allowed))
    if kind == "behavior_item":
        return BehaviorItem()
    raise ConfigError(f"unknown eval task {kind!r}")


def _gate_override(cfg: dict):
    disabled = cfg.get("eval", {}).get("disable_branches")
    if not disabled:
        return None
    override = np.full(4, np.nan)
    names = {"comp": 0, "intra": 1, "inter": 2, "current": 3}
    for name in disabled:
        if name not in names:
            raise ConfigError(f"unknown branch {name!r}")
        override[names[name]] = 0.0
    return override


def _run_eval(cfg: dict, paths: dict, model: Model, artifacts):
    ev = cfg.get("eval", {})
    seqs = read_sequences(paths["sequences"])
    max_users = ev.get("max_users")
    if max_users:
        seqs = seqs[:max_users]
    return evaluate(model, seqs, artifacts, _eval_task(cfg),
                    n_beam=ev.get("n_beam", 10),
                    ks=ev.get("k", [5, 10]),
                    truncation=_truncation(cfg),
                    gate_override=_gate_override(cfg))


def cmd_eval(cfg: dict, paths: dict) -> int:
    if not paths["checkpoint"].exists():
        raise FileNotFoundError(f"missing checkpoint {paths['checkpoint']}")
    _, artifacts = _fit_artifacts(cfg, paths)
    model = load_model(paths["checkpoint"])
    rep = _run_eval(cfg, paths, model, artifacts)
    rep.save(paths["report"])
    print(json.dumps(rep.to_dict(), indent=2))
    return 0


SWEEP_DEFAULTS = {"w": [3, 10, 20, 30], "top_n": [1, 2, 3, 4, 5],
                  "beam": [10, 20, 40]}


def cmd_sweep(cfg: dict, paths: dict, axis: str) -> int:
    if axis not in SWEEP_DEFAULTS:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not paths["checkpoint"].exists():
        raise FileNotFoundError(f"missing checkpoint {paths['checkpoint']}")
    _, artifacts = _fit_artifacts(cfg, paths)
    values = cfg.get("sweep", {}).get(axis, SWEEP_DEFAULTS[axis])
    rows = []
    for value in values:
        model = load_model(paths["checkpoint"])
        eval_cfg = json.loads(json.dumps(cfg))
        if axis == "w":
            model.config.jsa.window = int(value)
        elif axis == "top_n":
            model.config.jsa.top_n = int(value)
        else:
            eval_cfg.setdefault("eval", {})["n_beam"] = int(value)
        rep = _run_eval(eval_cfg, paths, model, artifacts)
        rows.append({axis: value,
                     "hr@5": rep.hr.get(5), "hr@10": rep.hr.get(10),
                     "ndcg@5": rep.ndcg.get(5), "ndcg@10": rep.ndcg.get(10)})
    csv_path = paths["report"].parent / f"sweep_{axis}.csv"
    png_path = paths["report"].parent / f"sweep_{axis}.png"
    cols = [axis, "hr@5", "hr@10", "ndcg@5", "ndcg@10"]
    with open(csv_path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(str(r[c]) for c in cols) + "\n")
    report.save_sweep(png_path, axis, rows, ["hr@10", "ndcg@10"])
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def cmd_cost(cfg: dict, paths: dict) -> int:
    try:
        cost_cfg = cost_mod.CostConfig(**cfg.get("cost", {}))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad cost config: {e}") from e
    rows = cost_mod.cost_table(cost_cfg)
    table = cost_mod.format_cost_table(rows)
    print(table)
    with open(paths["cost_txt"], "w") as f:
        f.write(table + "\n")
    cost_mod.write_cost_csv(paths["cost_csv"], rows)
    report.save_cost_figure(paths["cost_png"], rows)
    return 0


def cmd_heatmap(cfg: dict, paths: dict) -> int:
    if not paths["catalog"].exists():
        raise FileNotFoundError(f"missing input {paths['catalog']}")
    catalog, artifacts = _fit_artifacts(cfg, paths)
    mat = cooccurrence_heatmap(catalog, artifacts.semantic_ids,
                               artifacts.vocab.pt_values)
    write_heatmap_csv(paths["heatmap_csv"], mat, artifacts.vocab.pt_values)
    report.save_heatmap(paths["heatmap_png"], mat, artifacts.vocab.pt_values)
    print(f"heatmap {mat.shape[0]}x{mat.shape[1]}, total items {int(mat.sum())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="journeyrec",
        description="journey-aware sparse-attention recommender pipeline")
    parser.add_argument("command",
                        choices=["gen", "tokenize", "train", "eval", "sweep",
                                 "cost", "heatmap"])
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--axis", choices=list(SWEEP_DEFAULTS),
                        help="sweep axis (sweep command only)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        paths = _paths(out)
        if args.command == "gen":
            return cmd_gen(cfg, paths)
        if args.command == "tokenize":
            return cmd_tokenize(cfg, paths)
        if args.command == "train":
            return cmd_train(cfg, paths)
        if args.command == "eval":
            return cmd_eval(cfg, paths)
        if args.command == "sweep":
            if not args.axis:
                raise ConfigError("sweep requires --axis")
            return cmd_sweep(cfg, paths, args.axis)
        if args.command == "cost":
            return cmd_cost(cfg, paths)
        if args.command == "heatmap":
            return cmd_heatmap(cfg, paths)
        raise AssertionError("unreachable")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
