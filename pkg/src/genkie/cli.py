"""Command-line entry point: ``genkie <subcommand> [--config run.json] [flags]``.

Every run is described by a flat dotted-key JSON config (see ``DEFAULTS``);
command-line flags and ``--set key=value`` override file values, and
``--print-config`` shows the resolved result.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .corpus import (
    ConfigError,
    DatasetError,
    Document,
    default_confusion_table,
    generate_corpus,
    read_confusion_table,
    read_dataset,
    render_image,
    write_dataset,
    write_pgm,
)
from .decode import DecodeError
from .evalkit import ablation_run, ablation_table_csv, evaluate, fewshot_split, parse_levels, robustness_sweep
from .features import FeatureError
from .net import CheckpointError, ModelConfig, NumericalError, TrainConfig, load_checkpoint, save_checkpoint
from .pipeline import ImageCache, build_instances, predict, train_model
from .prompt import PromptError
from .tokenizer import TokenizerError, Vocab, train_bpe

log = logging.getLogger("genkie")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict[str, Any] = {
    "paths.corpus": "data/corpus.jsonl",
    "paths.vocab": "out/vocab.txt",
    "paths.checkpoint": "out/model.ckpt",
    "paths.out": "out",
    "corpus.n_docs": 2000,
    "corpus.schema": ["company", "address", "date", "total"],
    "corpus.dup_rate": 0.15,
    "corpus.layout_pair_rate": 0.15,
    "corpus.visual_pair_rate": 0.15,
    "corpus.images": True,
    "data.test_docs": 200,
    "bpe.vocab_size": 1000,
    "prompt.task": "entity-extraction",
    "prompt.style": "question",
    "decode.width": 5,
    "decode.max_len": 128,
    "decode.prefix": True,
    "eval.macro": False,
    "noise.table": None,
    "noise.seed": 0,
    "noise.train_level": 0,
    "noise.levels": "5:50:5",
    "fewshot.unseen_type": "date",
    "fewshot.k": 0,
    "ablate.modalities": ["T", "T+V", "T+L", "T+L+V"],
    "ablate.prompts": ["question", "template"],
    "ablate.prefix": [True, False],
}
for _f in fields(ModelConfig):
    if _f.name != "vocab_size":
        DEFAULTS[f"model.{_f.name}"] = _f.default if not isinstance(_f.default, tuple) else list(_f.default)
for _f in fields(TrainConfig):
    if _f.name != "seed":
        DEFAULTS[f"train.{_f.name}"] = _f.default

# flag -> config key
FLAG_KEYS = {
    "seed": "seed",
    "n": "corpus.n_docs",
    "out": "paths.out",
    "corpus": "paths.corpus",
    "vocab": "paths.vocab",
    "checkpoint": "paths.checkpoint",
    "vocab_size": "bpe.vocab_size",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "levels": "noise.levels",
    "unseen_type": "fewshot.unseen_type",
    "k": "fewshot.k",
    "style": "prompt.style",
    "width": "decode.width",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DatasetError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{args.config}: expected a flat JSON object")
        cfg.update(data)
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v)
    unknown = sorted(k for k in cfg if k not in DEFAULTS and k != "seed")
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    if cfg.get("seed") is None:
        raise UsageError("a seed is required (--seed or \"seed\" in the config file)")
    return cfg


def _section(cfg: dict[str, Any], prefix: str) -> dict[str, Any]:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def model_config(cfg: dict[str, Any], vocab: Vocab) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), **_section(cfg, "model"))


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(seed=int(cfg["seed"]), **_section(cfg, "train"))


def _need(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"{what} not found: {path}")
    return p


def _out_dir(cfg: dict[str, Any]) -> Path:
    out = Path(cfg["paths.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: dict[str, Any], **extra: Any) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }
    (out / f"manifest-{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _split(cfg: dict[str, Any], docs: list[Document]) -> tuple[list[Document], list[Document]]:
    n_test = int(cfg["data.test_docs"])
    if not 0 < n_test < len(docs):
        raise DatasetError(f"data.test_docs={n_test} must be between 1 and {len(docs) - 1} for {len(docs)} documents")
    return docs[:-n_test], docs[-n_test:]


def _load_corpus(cfg: dict[str, Any]) -> tuple[list[Document], ImageCache]:
    path = _need(cfg["paths.corpus"], "corpus")
    docs = read_dataset(path)
    if not docs:
        raise DatasetError(f"{path}: no documents")
    return docs, ImageCache(str(path.parent))


def _load_model(cfg: dict[str, Any]):
    vocab = Vocab.load(_need(cfg["paths.vocab"], "vocab"))
    model, header = load_checkpoint(_need(cfg["paths.checkpoint"], "checkpoint"), vocab_hash=vocab.hash())
    return vocab, model, header


def _table(cfg: dict[str, Any]):
    return read_confusion_table(_need(cfg["noise.table"], "confusion table")) if cfg["noise.table"] else default_confusion_table()


def _schema(cfg: dict[str, Any]) -> tuple[str, ...]:
    return tuple(cfg["corpus.schema"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_corpus(cfg: dict[str, Any]) -> None:
    out = _out_dir(cfg)
    docs = generate_corpus(
        _schema(cfg),
        int(cfg["corpus.n_docs"]),
        int(cfg["seed"]),
        dup_rate=cfg["corpus.dup_rate"],
        layout_pair_rate=cfg["corpus.layout_pair_rate"],
        visual_pair_rate=cfg["corpus.visual_pair_rate"],
    )
    if cfg["corpus.images"]:
        (out / "images").mkdir(exist_ok=True)
        for i, d in enumerate(docs):
            rel = f"images/{d.id}.pgm"
            write_pgm(render_image(d), out / rel)
            docs[i] = type(d)(**{**d.__dict__, "image_path": rel})
    path = out / "corpus.jsonl"
    write_dataset(path, docs)
    _write_manifest(out, "gen-corpus", cfg, documents=len(docs), corpus=str(path), corpus_sha256=_sha256(path))
    print(f"wrote {len(docs)} documents to {path}")


def cmd_train_bpe(cfg: dict[str, Any]) -> None:
    docs, _ = _load_corpus(cfg)
    train_docs, _ = _split(cfg, docs)
    vocab = train_bpe([" " + s for d in train_docs for s in d.transcript], int(cfg["bpe.vocab_size"]))
    path = Path(cfg["paths.vocab"])
    path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(path)
    _write_manifest(_out_dir(cfg), "train-bpe", cfg, vocab_size=len(vocab), vocab_hash=vocab.hash())
    print(f"wrote vocabulary of {len(vocab)} tokens to {path}")


def cmd_train(cfg: dict[str, Any]) -> None:
    docs, images = _load_corpus(cfg)
    vocab = Vocab.load(_need(cfg["paths.vocab"], "vocab"))
    train_docs, _ = _split(cfg, docs)
    mcfg, tcfg = model_config(cfg, vocab), train_config(cfg)
    level = int(cfg["noise.train_level"])
    model = train_model(
        train_docs, vocab, images, mcfg, tcfg, cfg["prompt.task"], cfg["prompt.style"], _schema(cfg),
        noise_level=level, table=_table(cfg) if level else None,
    )
    ckpt = Path(cfg["paths.checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    res = model.train_result
    save_checkpoint(model, ckpt, vocab.hash(), extra={"prompt.task": cfg["prompt.task"], "prompt.style": cfg["prompt.style"]})
    out = _out_dir(cfg)
    (out / "train_log.json").write_text(json.dumps({"losses": res.losses, "steps": res.steps, "epochs": res.epochs, "seconds": res.seconds}) + "\n")
    _write_manifest(out, "train", cfg, checkpoint=str(ckpt), vocab_hash=vocab.hash(), steps=res.steps, seconds=res.seconds)
    print(f"trained {res.steps} steps ({res.epochs} epochs) in {res.seconds:.0f}s; checkpoint {ckpt}")


def _test_instances(cfg, docs, vocab):
    _, test_docs = _split(cfg, docs)
    return test_docs, build_instances(test_docs, vocab, cfg["prompt.task"], cfg["prompt.style"], _schema(cfg))


def cmd_infer(cfg: dict[str, Any]) -> None:
    docs, images = _load_corpus(cfg)
    vocab, model, _ = _load_model(cfg)
    inst = build_instances(docs, vocab, cfg["prompt.task"], cfg["prompt.style"], _schema(cfg), with_target=False)
    preds = predict(model, inst, vocab, images, width=int(cfg["decode.width"]), max_len=int(cfg["decode.max_len"]), use_prefix=bool(cfg["decode.prefix"]))
    out = _out_dir(cfg)
    path = out / "predictions.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({
                "id": p.instance.doc_id,
                "prompt_subject": p.instance.spec.subject,
                "output": p.text,
                "entities": [{"type": t, "value": v} for t, v in p.pairs],
                "residue": p.residue,
            }, ensure_ascii=False) + "\n")
    _write_manifest(out, "infer", cfg, predictions=str(path))
    print(f"wrote {len(preds)} predictions to {path}")


def cmd_evaluate(cfg: dict[str, Any]) -> None:
    docs, images = _load_corpus(cfg)
    vocab, model, _ = _load_model(cfg)
    _, inst = _test_instances(cfg, docs, vocab)
    m, _ = evaluate(model, inst, vocab, images, width=int(cfg["decode.width"]), use_prefix=bool(cfg["decode.prefix"]),
                    max_len=int(cfg["decode.max_len"]), macro=bool(cfg["eval.macro"]))
    out = _out_dir(cfg)
    (out / "metrics.json").write_text(json.dumps(m.to_dict(), indent=2) + "\n")
    _write_manifest(out, "evaluate", cfg)
    print(f"precision {m.precision:.4f} recall {m.recall:.4f} f1 {m.f1:.4f}")


def cmd_sweep_noise(cfg: dict[str, Any]) -> None:
    docs, images = _load_corpus(cfg)
    vocab, model, _ = _load_model(cfg)
    _, test_docs = _split(cfg, docs)
    levels = parse_levels(str(cfg["noise.levels"]))
    curve = robustness_sweep(
        model, test_docs, levels, _table(cfg), int(cfg["noise.seed"]),
        vocab=vocab, images=images, task=cfg["prompt.task"], style=cfg["prompt.style"], schema=_schema(cfg),
        width=int(cfg["decode.width"]), use_prefix=bool(cfg["decode.prefix"]), max_len=int(cfg["decode.max_len"]),
        model_id=cfg["paths.checkpoint"],
    )
    out = _out_dir(cfg)
    (out / "sweep.csv").write_text(curve.to_csv())
    (out / "correction.json").write_text(json.dumps({str(k): v for k, v in curve.correction.items()}, indent=2) + "\n")
    _write_manifest(out, "sweep-noise", cfg, levels=levels)
    print(curve.to_csv(), end="")


def cmd_ablate(cfg: dict[str, Any]) -> None:
    docs, images = _load_corpus(cfg)
    vocab = Vocab.load(_need(cfg["paths.vocab"], "vocab"))
    train_docs, test_docs = _split(cfg, docs)
    rows = ablation_run(
        train_docs, test_docs, vocab, images,
        modalities=cfg["ablate.modalities"], prompts=cfg["ablate.prompts"], prefixes=[bool(p) for p in cfg["ablate.prefix"]],
        task=cfg["prompt.task"], schema=_schema(cfg), model_config=model_config(cfg, vocab), train_config=train_config(cfg),
        width=int(cfg["decode.width"]), max_len=int(cfg["decode.max_len"]),
    )
    out = _out_dir(cfg)
    (out / "ablation.csv").write_text(ablation_table_csv(rows))
    _write_manifest(out, "ablate", cfg)
    print(ablation_table_csv(rows), end="")


def cmd_fewshot(cfg: dict[str, Any]) -> None:
    docs, images = _load_corpus(cfg)
    vocab = Vocab.load(_need(cfg["paths.vocab"], "vocab"))
    train_docs, test_docs = _split(cfg, docs)
    schema, unseen, k = _schema(cfg), cfg["fewshot.unseen_type"], int(cfg["fewshot.k"])
    task, style = cfg["prompt.task"], cfg["prompt.style"]
    inst = fewshot_split(build_instances(train_docs, vocab, task, style, schema), unseen, k, schema)
    model = train_model(train_docs, vocab, images, model_config(cfg, vocab), train_config(cfg), task, style, schema, instances=inst)
    test = [it for it in build_instances(test_docs, vocab, task, style, schema) if any(t == unseen for t, _ in it.gold)]
    m, _ = evaluate(model, test, vocab, images, width=int(cfg["decode.width"]), use_prefix=bool(cfg["decode.prefix"]), max_len=int(cfg["decode.max_len"]))
    out = _out_dir(cfg)
    (out / f"fewshot-{unseen}-k{k}.json").write_text(json.dumps({"unseen_type": unseen, "k": k, **m.to_dict()}, indent=2) + "\n")
    _write_manifest(out, "fewshot", cfg)
    print(f"{unseen} k={k}: precision {m.precision:.4f} recall {m.recall:.4f} f1 {m.f1:.4f}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-bpe": cmd_train_bpe,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep-noise": cmd_sweep_noise,
    "ablate": cmd_ablate,
    "fewshot": cmd_fewshot,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="genkie", description="Prompt-based generative key information extraction.")
    p.add_argument("--version", action="version", version=f"genkie {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        s.add_argument("--config", help="flat dotted-key JSON run config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        s.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--corpus")
        s.add_argument("--vocab")
        s.add_argument("--checkpoint")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-corpus":
            s.add_argument("--n", type=int)
        if name == "train-bpe":
            s.add_argument("--vocab-size", type=int)
        if name in ("train", "ablate", "fewshot"):
            s.add_argument("--epochs", type=int)
            s.add_argument("--lr", type=float)
        if name in ("train", "infer", "evaluate", "sweep-noise", "ablate", "fewshot"):
            s.add_argument("--style", choices=["question", "template", "template-all-types"])
        if name in ("infer", "evaluate", "sweep-noise", "ablate", "fewshot"):
            s.add_argument("--width", type=int)
        if name == "sweep-noise":
            s.add_argument("--levels", help="start:stop:step or a comma list, in percent")
        if name == "fewshot":
            s.add_argument("--unseen-type")
            s.add_argument("--k", type=int)
    return p


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("GENKIE_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
        )
        cfg = resolve_config(args)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        with _thread_limit():
            COMMANDS[args.command](cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"genkie: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TypeError, PromptError, DecodeError, ConfigError) as exc:
        print(f"genkie: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"genkie: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, TokenizerError, CheckpointError, FeatureError, FileNotFoundError, ValueError) as exc:
        print(f"genkie: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
