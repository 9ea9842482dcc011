"""pocapnet command-line driver.

Subcommands: generate, train, eval, gradcheck, replicate. Exit codes:
0 ok, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import experiments, figures, gradcheck
from .config import ConfigError, build_corpus_params, build_model_config, build_train_config, default_config, \
    DESCRIPTIONS, flatten, load_config, parse_value
from .evaluate import evaluate_predictions, render_ribbon
from .losses import DegenerateInputError
from .model import init_model, load_checkpoint, save_checkpoint
from .optim import NumericError, predict_operation, trace_csv, train
from .tensor import FormatError, ParameterError

log = logging.getLogger("pocapnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _fail(code, kind, message):
    raise CliError(code, kind, message)


def _config_from_args(args) -> dict:
    overrides = {}
    defaults = flatten(default_config())
    for key, default in defaults.items():
        raw = getattr(args, _dest(key), None)
        if raw is not None:
            overrides[key] = parse_value(raw, default)
    return load_config(args.config, overrides)


def _dest(key: str) -> str:
    return "cfg__" + key.replace(".", "__")


def _load_records(cfg: dict):
    path = cfg["corpus"]["path"]
    if path is not None:
        return corpus_mod.load_corpus(path)
    return corpus_mod.build_corpus(build_corpus_params(cfg))


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["eval"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: dict, out_dir=None) -> Path:
    params = build_corpus_params(cfg)
    out = Path(out_dir or cfg["corpus"]["path"] or Path(cfg["eval"]["out_dir"]) / "corpus")
    records, manifest = corpus_mod.build_corpus(params)
    corpus_mod.write_corpus(records, manifest, out)
    figures.plot_phase_durations(records, out / "phase_durations.png")
    counts = manifest.class_counts["train"]
    print(f"wrote {len(records)} operations to {out} "
          f"(train/val/test = {'/'.join(str(len(v)) for v in manifest.splits.values())}, seed={params.seed})")
    print("train frames per phase: " + ", ".join(f"{n}={c}" for n, c in zip(corpus_mod.PHASE_NAMES, counts)))
    return out


def cmd_train(cfg: dict) -> Path:
    records, manifest = _load_records(cfg)
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg)
    tr = corpus_mod.select(records, manifest, "train")
    va = corpus_mod.select(records, manifest, "val")
    out = _out_dir(cfg)
    model = init_model(model_cfg, train_cfg.seed)
    result = train(model, tr, train_cfg, va)
    meta = {"seed": train_cfg.seed, "corpus_seed": manifest.params["seed"], "best_epoch": result.best_epoch,
            "train": train_cfg.to_dict()}
    ckpt = out / "checkpoint.pckp"
    save_checkpoint(result.model, ckpt, meta)
    (out / "trace.csv").write_text(trace_csv(result.trace))
    if result.trace:
        figures.plot_trace(result.trace, out / "trace.png")
    print(f"checkpoint {ckpt} (best epoch {result.best_epoch}, seed {train_cfg.seed})")
    return ckpt


def cmd_eval(cfg: dict, checkpoint=None, split=None) -> Path:
    out = _out_dir(cfg)
    ckpt = Path(checkpoint or cfg["eval"]["checkpoint"] or out / "checkpoint.pckp")
    model, meta = load_checkpoint(ckpt)
    records, manifest = _load_records(cfg)
    split = split or cfg["eval"]["split"]
    feature_rows = (manifest.params["audio_channels"] * manifest.params["audio_dim"], manifest.params["visual_dim"])
    c = model.config
    if c.num_classes != len(corpus_mod.PHASE_NAMES):
        _fail(EXIT_CONFIG, "config", f"checkpoint has num_classes={c.num_classes} but the corpus has "
                                     f"{len(corpus_mod.PHASE_NAMES)} phases")
    if feature_rows != (c.audio_channels * c.audio_dim, c.visual_dim):
        _fail(EXIT_CONFIG, "config", f"checkpoint expects feature rows {(c.audio_channels * c.audio_dim, c.visual_dim)}"
                                     f" but the corpus has {feature_rows}")
    ops = corpus_mod.select(records, manifest, split)
    batch = build_train_config(cfg).batch_size
    preds = [predict_operation(model, op, batch)[0] for op in ops]
    report = evaluate_predictions([op.op_id for op in ops], preds, [op.labels for op in ops],
                                  c.num_classes, seed=meta.get("seed"))
    (out / f"report_{split}.json").write_text(report.to_json(), encoding="utf-8")
    n = min(len(ops), cfg["eval"]["ribbon_ops"])
    pairs = [(preds[i], ops[i].labels) for i in range(n)]
    titles = [ops[i].op_id for i in range(n)]
    render_ribbon(pairs, out_path=out / f"ribbons_{split}.svg", titles=titles)
    figures.plot_ribbons(pairs, out / f"ribbons_{split}.png", titles=titles)
    figures.plot_confusion(np.array(report.confusion), out / f"confusion_{split}.png")
    print(f"{split}: accuracy {100 * report.accuracy_mean:.2f} ± {100 * report.accuracy_std:.2f}, "
          f"weighted F1 {100 * report.weighted_f1_mean:.2f} ± {100 * report.weighted_f1_std:.2f} "
          f"over {len(ops)} operations (population std)")
    return out / f"report_{split}.json"


def cmd_gradcheck() -> bool:
    results = gradcheck.run_suite()
    print(gradcheck.format_table(results))
    return all(r.passed for r in results)


def cmd_replicate(cfg: dict, table: int, workers: int = 1) -> str:
    results = experiments.run_table(
        table, corpus=build_corpus_params(cfg), model_cfg=build_model_config(cfg),
        train_cfg=build_train_config(cfg), seed=cfg["train"]["seed"], workers=workers,
    )
    md = experiments.markdown_table(table, results)
    out = _out_dir(cfg)
    (out / f"replicate_table{table}.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return md


def _help_epilog() -> str:
    lines = ["config keys (flag --<key> VALUE; precedence flags > --config file > defaults):"]
    for key, default in flatten(default_config()).items():
        desc = DESCRIPTIONS.get(key, "")
        lines.append(f"  {key} = {json.dumps(default)}" + (f"  ({desc})" if desc else ""))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pocapnet", description="Surgical phase recognition on synthetic corpora.",
                                     epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run-config file")
        for key, default in flatten(default_config()).items():
            p.add_argument(f"--{key}", dest=_dest(key), metavar="VALUE",
                           help=f"default {json.dumps(default)}. {DESCRIPTIONS.get(key, '')}".strip())
        return p

    kw = dict(epilog=_help_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    g = with_config(sub.add_parser("generate", help="write a synthetic corpus", **kw))
    g.add_argument("--out", help="corpus directory (default corpus.path or <out_dir>/corpus)")
    with_config(sub.add_parser("train", help="train and write checkpoint + trace", **kw))
    e = with_config(sub.add_parser("eval", help="score a checkpoint on a split", **kw))
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=("train", "val", "test"))
    sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    r = with_config(sub.add_parser("replicate", help="direction-of-effect sweep: 1 = temporal context, 2 = loss function", **kw))
    r.add_argument("--table", type=int, choices=(1, 2), required=True)
    r.add_argument("--workers", type=int, default=1, help="parallel worker processes for sweep legs")
    return parser


def _dispatch(args) -> int:
    if args.command == "gradcheck":
        return EXIT_OK if cmd_gradcheck() else EXIT_NUMERIC
    cfg = _config_from_args(args)
    if args.command == "generate":
        cmd_generate(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.split)
    elif args.command == "replicate":
        cmd_replicate(cfg, args.table, args.workers)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except (ConfigError, ParameterError) as exc:
        code, kind, msg = EXIT_CONFIG, "config", str(exc)
    except (NumericError, FloatingPointError) as exc:
        code, kind, msg = EXIT_NUMERIC, "numeric", str(exc)
    except (FormatError, corpus_mod.CorpusFormatError, OSError) as exc:
        code, kind, msg = EXIT_IO, "io", str(exc)
    except DegenerateInputError as exc:
        code, kind, msg = EXIT_CONFIG, "config", str(exc)
    print(f"error code={code} kind={kind} message={json.dumps(' '.join(msg.split()))}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
