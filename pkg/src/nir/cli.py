"""Command-line entry points.

Every command reads a JSON config file (--config) and an optional
--seed; the NIR_SEED environment variable overrides both, which keeps
reproduction runs honest.  Commands: gen-synth, train, eval, search,
serve, sweep.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .corpus import (
    FeatureStore,
    SynthConfig,
    gen_synthetic,
    load_corpus,
    split_train_val,
    write_synth,
)
from .encoders import EncoderConfig
from .fusion import SOURCES
from .model import ModelConfig
from .retrieval import attention_scores, build_index, evaluate_bidirectional, search
from .textprep import load_vec_file
from .training import (
    TrainConfig,
    build_model_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train_fused,
    train_one_for_all,
    train_single_source,
    transfer_all_for_one,
)

__all__ = ["main"]


def _load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _resolve_seed(cfg: dict, args) -> int:
    seed = int(cfg.get("seed", 0))
    if args.seed is not None:
        seed = args.seed
    env = os.environ.get("NIR_SEED")
    if env is not None:
        seed = int(env)
    return seed


def _model_config(cfg: dict) -> ModelConfig:
    enc = EncoderConfig(**cfg.get("encoder", {}))
    out = ModelConfig(
        sources=tuple(cfg.get("sources", ["caption"])),
        fuse_strategy=cfg.get("fuse_strategy", "attention"),
        languages=tuple(cfg.get("languages", ["de"])),
        encoder=enc,
        feature_dim=cfg.get("feature_dim", 128),
    )
    if "truncation" in cfg:
        out = replace(out, truncation=tuple(sorted(cfg["truncation"].items())))
    return out


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    fields = {k: v for k, v in cfg.items() if k in known}
    fields.setdefault("schedule", [[0, 1e-3], [10, 2e-4], [20, 4e-5]])
    fields["schedule"] = tuple((int(e), float(lr)) for e, lr in fields["schedule"])
    fields["freeze"] = tuple(fields.get("freeze", ()))
    fields["seed"] = seed
    return TrainConfig(**fields)


def _load_tables(cfg: dict, langs) -> dict:
    tables = {}
    for lang in langs:
        spec = cfg["tables"][lang]
        table = load_vec_file(
            spec["vec"],
            lang,
            buckets=spec.get("buckets", 65536),
            bank_seed=spec.get("bank_seed", 0),
            use_subwords=spec.get("use_subwords", True),
        )
        table.frozen = bool(spec.get("frozen", False))
        tables[lang] = table
    return tables


def _load_split(cfg: dict):
    samples = load_corpus(cfg["corpus"])
    store = FeatureStore.from_file(cfg["features"])
    val_count = int(cfg.get("val_count", max(1, len(samples) // 5)))
    train, val = split_train_val(samples, val_count, seed=int(cfg.get("split_seed", 0)))
    return train, val, store


def cmd_gen_synth(cfg: dict, seed: int) -> int:
    synth_cfg = SynthConfig(
        topics=cfg.get("topics", 20),
        samples_per_lang=cfg.get("samples_per_lang", 2500),
        vocab_per_topic=cfg.get("vocab_per_topic", 40),
        embed_dim=cfg.get("embed_dim", 64),
        feature_dim=cfg.get("feature_dim", 128),
        noise_sigma=cfg.get("noise_sigma", 0.1),
        languages=tuple(cfg.get("languages", ["de", "fr"])),
        vec_coverage=cfg.get("vec_coverage", 1.0),
    )
    out = gen_synthetic(synth_cfg, seed)
    out_dir = cfg.get("out_dir", "synth")
    write_synth(out_dir, out, synth_cfg.embed_dim)
    print(json.dumps({"out_dir": out_dir, "samples": len(out.samples), "seed": seed}))
    return 0


def cmd_train(cfg: dict, seed: int) -> int:
    mode = cfg.get("mode", "single")
    train, val, store = _load_split(cfg)
    mcfg = _model_config(cfg.get("model", {}))
    tcfg = _train_config(cfg.get("train", {}), seed)
    tables = _load_tables(cfg, mcfg.languages)
    if mode == "single":
        source = cfg.get("source", "caption")
        result = train_single_source(train, store, val, source, mcfg, tables, tcfg)
    elif mode == "fused":
        stage1 = _train_config(cfg.get("stage1", {"epochs": 1, "schedule": [[0, 1e-3]]}), seed)
        stage2 = _train_config(
            cfg.get("stage2", {"epochs": 10, "schedule": [[0, 1e-4], [5, 2e-5]]}), seed
        )
        ckpts = None
        if "checkpoints" in cfg:
            ckpts = {src: load_checkpoint(cfg["checkpoints"][src]) for src in SOURCES}
        result = train_fused(train, store, val, mcfg, tables, stage1, stage2, ckpts)
    elif mode == "one_for_all":
        result = train_one_for_all(train, store, val, mcfg, tables, tcfg)
    elif mode == "transfer":
        ckpt = load_checkpoint(cfg["checkpoint"])
        (lang,) = mcfg.languages
        result, added = transfer_all_for_one(
            ckpt, tables[lang], train, store, val, tcfg, extend=cfg.get("extend_vocab", True)
        )
        print(json.dumps({"vocab_added": added}))
    else:
        raise SystemExit(f"unknown train mode {mode!r}")
    out_path = cfg.get("out", "model.nirc")
    save_checkpoint(out_path, result.model, tcfg.to_json(), result.history)
    print(
        json.dumps(
            {
                "out": out_path,
                "best_epoch": result.best_epoch,
                "best_val_r10_sum": result.best_metric,
                "seed": seed,
            }
        )
    )
    return 0


def cmd_eval(cfg: dict, seed: int) -> int:
    del seed
    model = build_model_from_checkpoint(load_checkpoint(cfg["checkpoint"]))
    samples = load_corpus(cfg["corpus"])
    store = FeatureStore.from_file(cfg["features"])
    report = evaluate_bidirectional(model, samples, store)
    print(json.dumps(report.to_json(), sort_keys=True, indent=2))
    return 0


def cmd_search(cfg: dict, seed: int) -> int:
    del seed
    from .autodiff import LeafCache, no_grad

    model = build_model_from_checkpoint(load_checkpoint(cfg["checkpoint"]))
    samples = load_corpus(cfg["corpus"])
    store = FeatureStore.from_file(cfg["features"])
    entities_by_image = {}
    for rec in samples:
        entities_by_image.setdefault(rec.image_id, rec.entities)
    with no_grad():
        ctx = LeafCache()
        encoded = model.encode_image_batch(store.stack(store.ids), ctx).value
        index = build_index(store.ids, encoded, entities_by_image)
        query = cfg.get("query", {})
        texts = {src: query.get(src, "") for src in SOURCES}
        encoding, maps = model.encode_texts_tensor(texts, query.get("lang", "de"), ctx)
    hits = search(index, encoding.value[0], int(query.get("k", 9)), query.get("entities", ()))
    attention = {
        src: [
            {"token": t, "score": float(s)}
            for t, s in zip(model.source_tokens(texts, src), attention_scores(maps[src]))
        ]
        for src in model.cfg.sources
    }
    print(
        json.dumps(
            {
                "results": [
                    {"image_id": h.id, "score": h.score, "entities": list(h.entities)}
                    for h in hits
                ],
                "attention": attention,
            },
            sort_keys=True,
            indent=2,
        )
    )
    return 0


def cmd_serve(cfg: dict, seed: int) -> int:
    del seed
    import uvicorn

    from .service import SnapshotRegistry, build_snapshot, create_app

    registry = SnapshotRegistry()
    for spec in cfg.get("snapshots", []):
        sid = spec.get("snapshot", registry.next_id())
        registry.publish(
            build_snapshot(spec["checkpoint"], spec["corpus"], spec["features"], sid)
        )
    app = create_app(registry)
    uvicorn.run(app, host=cfg.get("host", "127.0.0.1"), port=int(cfg.get("port", 8000)))
    return 0


def cmd_sweep(cfg: dict, seed: int) -> int:
    """Margin sweep for the hinge losses over a fixed corpus."""
    train, val, store = _load_split(cfg)
    mcfg = _model_config(cfg.get("model", {}))
    tables = _load_tables(cfg, mcfg.languages)
    margins = cfg.get("margins", [0.05, 0.1, 0.2, 0.3])
    rows = []
    for margin in margins:
        tcfg = replace(_train_config(cfg.get("train", {}), seed), margin=float(margin))
        result = train_single_source(
            train, store, val, cfg.get("source", "caption"), mcfg, tables, tcfg
        )
        rows.append(
            {"margin": margin, "best_epoch": result.best_epoch, "val_r10_sum": result.best_metric}
        )
    out_path = cfg.get("out", "sweep.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    best = max(rows, key=lambda r: r["val_r10_sum"])
    print(json.dumps({"out": out_path, "best": best, "seed": seed}))
    return 0


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "search": cmd_search,
    "serve": cmd_serve,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nir", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")
    args = parser.parse_args(argv)
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    return _COMMANDS[args.command](cfg, seed)


if __name__ == "__main__":
    sys.exit(main())
