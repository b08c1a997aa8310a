"""Command-line pipeline: augment, train, generate, evaluate, merge.

Exit codes: 0 success, 1 validation error, 2 missing input, 3 corrupt
artifact, 4 every requested metric undefined. Each command writes a
``<out>.manifest.json`` with input digests, the config snapshot, seed, tool
version and timestamps; the manifest is written before execution and updated
afterwards, even on failure. Set FAIRLM_LOG to control log verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, default_data_path
from . import corpus as cp
from . import generation as gen
from . import metrics as mt
from . import model as lm
from . import training as tr

log = logging.getLogger("fairlm.cli")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_MISSING_INPUT = 2
EXIT_CORRUPT = 3
EXIT_UNDEFINED = 4


class ValidationFailure(ValueError):
    """Invalid configuration or arguments (exit code 1)."""


class MissingInputError(FileNotFoundError):
    """A required input file does not exist (exit code 2)."""


class AllMetricsUndefinedError(ValueError):
    """Every requested metric was undefined (exit code 4)."""


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingInputError(f"{what} not found: {p}")
    return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """Run record written next to the primary output."""

    def __init__(self, command: str, out_path: Path, config: dict,
                 inputs: list[Path], seed: int | None):
        self.path = Path(str(out_path) + ".manifest.json")
        self.data = {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "config": config,
            "inputs": {str(p): _sha256(p) for p in inputs},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "status": "running",
        }
        self._write()

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")

    def finish(self, status: str) -> None:
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        self._write()


def cmd_augment(args) -> int:
    in_path = _require_file(args.in_path, "corpus")
    pairs_path = _require_file(args.pairs, "gender-pair file")
    out_path = Path(args.out)
    manifest = Manifest("augment", out_path, {"in": str(in_path),
                                              "pairs": str(pairs_path),
                                              "out": str(out_path)},
                        [in_path, pairs_path], seed=None)
    try:
        lines = cp.read_token_lines(in_path)
        vocab = cp.build_vocab([t for ln in lines for t in ln], min_count=1)
        lexicon = cp.load_gender_pairs(pairs_path, vocab)
        stream = cp.encode_lines(lines, vocab)
        augmented = cp.cda_augment(stream, lexicon)
        out_lines = cp.stream_to_lines(augmented, vocab)
        out_path.write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    except Exception:
        manifest.finish("failed")
        raise
    manifest.finish("ok")
    log.info("augmented %d -> %d tokens", len(stream), len(augmented))
    return EXIT_OK


_TRAIN_KEYS = {
    # paths
    "corpus": str, "pairs": str, "out": str, "log": str, "val_corpus": str,
    "vocab_out": str, "embeddings": str, "occupations": str,
    # corpus handling
    "min_count": int, "max_vocab": int, "val_fraction": float,
    "reg_targets": str,
    # model
    "embed_dim": int, "hidden_units": int, "num_layers": int,
    "seq_len": int, "dropout": float,
    # optimization
    "lambda": float, "lr": float, "anneal_lo": float, "anneal_hi": float,
    "clip": float, "batch_size": int, "max_epochs": int, "patience": int,
    "reg_coeff": float, "mode": str, "seed": int,
}


def parse_train_config(path: Path) -> dict:
    """Parse a key = value config file, collecting every error before failing."""
    values: dict = {}
    errors: list[str] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in _TRAIN_KEYS:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        caster = _TRAIN_KEYS[key]
        try:
            values[key] = caster(value)
        except ValueError:
            errors.append(f"line {lineno}: key {key!r} expects "
                          f"{caster.__name__}, got {value!r}")
    for required in ("corpus", "pairs", "out"):
        if required not in values:
            errors.append(f"missing required key {required!r}")
    hyper_kwargs = {k: values[k] for k in
                    ("embed_dim", "hidden_units", "num_layers", "seq_len", "dropout")
                    if k in values}
    try:
        values["_hyper"] = lm.ModelHyper(**hyper_kwargs)
    except ValueError as exc:
        errors.append(str(exc))
    config = tr.TrainConfig(
        lam=values.get("lambda", 0.0),
        lr=values.get("lr", 20.0),
        anneal_lo=values.get("anneal_lo", 0.25),
        anneal_hi=values.get("anneal_hi", 0.95),
        clip=values.get("clip", 0.25),
        batch_size=values.get("batch_size", 48),
        max_epochs=values.get("max_epochs", 150),
        patience=values.get("patience", 5),
        reg_coeff=values.get("reg_coeff", 0.0),
        mode=values.get("mode", "baseline"),
        seed=values.get("seed", 0),
    )
    errors.extend(config.validate())
    if values.get("reg_targets", "occupations") not in ("occupations", "neutral"):
        errors.append("reg_targets must be 'occupations' or 'neutral'")
    if errors:
        raise ValidationFailure("invalid training config:\n  " + "\n  ".join(errors))
    values["_train"] = config
    return values


def cmd_train(args) -> int:
    config_path = _require_file(args.config, "config file")
    job = parse_train_config(config_path)
    corpus_path = _require_file(job["corpus"], "corpus")
    pairs_path = _require_file(job["pairs"], "gender-pair file")
    val_path = Path(job["val_corpus"]) if "val_corpus" in job else None
    if val_path is not None:
        _require_file(val_path, "validation corpus")
    emb_path = Path(job["embeddings"]) if "embeddings" in job else None
    if emb_path is not None:
        _require_file(emb_path, "embedding file")

    hyper: lm.ModelHyper = job["_hyper"]
    config: tr.TrainConfig = job["_train"]
    out_path = Path(job["out"])
    inputs = [config_path, corpus_path, pairs_path]
    if val_path is not None:
        inputs.append(val_path)
    if emb_path is not None:
        inputs.append(emb_path)
    snapshot = {k: v for k, v in job.items() if not k.startswith("_")}
    snapshot["hyper"] = asdict(hyper)
    snapshot["train"] = asdict(config)
    manifest = Manifest("train", out_path, snapshot, inputs, seed=config.seed)
    try:
        lines = cp.read_token_lines(corpus_path)
        if val_path is not None:
            train_lines, val_lines = lines, cp.read_token_lines(val_path)
        else:
            train_lines, val_lines = _split_lines(lines, job.get("val_fraction", 0.05))
        flat = [t for ln in train_lines for t in ln]
        vocab = cp.build_vocab(flat, min_count=job.get("min_count", 1),
                               max_size=job.get("max_vocab"))
        lexicon = cp.load_gender_pairs(pairs_path, vocab)
        train_stream = cp.encode_lines(train_lines, vocab)
        val_stream = cp.encode_lines(val_lines, vocab)

        reg_ids = None
        if config.mode == "reg":
            reg_ids = _resolve_reg_targets(job, vocab, lexicon)

        params = lm.init_params(hyper, len(vocab), config.seed,
                                embedding_file=emb_path, vocab=vocab)
        best, logs = tr.fit(train_stream, val_stream, config, hyper,
                            vocab_size=len(vocab), lexicon=lexicon,
                            reg_target_ids=reg_ids, initial=params)
        lm.save_checkpoint(best, hyper, vocab, out_path)
        log_path = Path(job.get("log", str(out_path) + ".log"))
        log_path.write_text("\n".join(e.format_line() for e in logs) + "\n",
                            encoding="utf-8")
        if "vocab_out" in job:
            vocab.save(job["vocab_out"])
    except Exception:
        manifest.finish("failed")
        raise
    manifest.finish("ok")
    log.info("trained %d epochs, checkpoint at %s", len(logs), out_path)
    return EXIT_OK


def _split_lines(lines: list[list[str]], val_fraction: float):
    """Hold out the final fraction of the token stream at line granularity."""
    total = sum(len(ln) + 1 for ln in lines)
    budget = total * (1.0 - val_fraction)
    used = 0
    cut = len(lines)
    for i, ln in enumerate(lines):
        used += len(ln) + 1
        if used >= budget:
            cut = i + 1
            break
    cut = min(cut, len(lines) - 1) if len(lines) > 1 else len(lines)
    return lines[:cut], lines[cut:]


def _resolve_reg_targets(job: dict, vocab: cp.Vocabulary,
                         lexicon: cp.GenderLexicon) -> np.ndarray:
    if job.get("reg_targets", "occupations") == "neutral":
        return np.array(sorted(lexicon.neutral), dtype=np.int64)
    occ_path = Path(job.get("occupations", default_data_path("occupations.txt")))
    _require_file(occ_path, "occupation file")
    words = mt.load_occupations(occ_path)
    ids = [vocab.ids[w] for w in words
           if w in vocab and vocab.ids[w] in lexicon.neutral]
    if not ids:
        raise ValidationFailure("no regularization target word is in the vocabulary")
    return np.array(ids, dtype=np.int64)


def cmd_generate(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    out_path = Path(args.out)
    config = gen.GenerationConfig(num_docs=args.num_docs, doc_len=args.doc_len,
                                  temperature=args.temperature, seed=args.seed)
    manifest = Manifest("generate", out_path,
                        {"checkpoint": str(ckpt_path), **asdict(config)},
                        [ckpt_path], seed=args.seed)
    try:
        params, _, vocab = lm.load_checkpoint(ckpt_path)
        docs = gen.generate(params, vocab, config)
        gen.write_documents(docs, vocab, out_path)
    except Exception:
        manifest.finish("failed")
        raise
    manifest.finish("ok")
    log.info("wrote %d documents to %s", len(docs), out_path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    gen_path = _require_file(args.generated, "generated/text corpus")
    pairs_path = _require_file(args.pairs, "gender-pair file")
    occ_path = _require_file(args.occupations, "occupation file")
    tpl_path = _require_file(args.templates, "template file")
    heldout_path = Path(args.heldout) if args.heldout else None
    if heldout_path is not None:
        _require_file(heldout_path, "held-out text")
    out_path = Path(args.out)

    requested = tuple(m.strip() for m in args.metrics.split(",")) \
        if args.metrics else mt.REPORT_METRICS
    unknown = [m for m in requested if m not in mt.REPORT_METRICS]
    if unknown:
        raise ValidationFailure(f"unknown metric(s): {', '.join(unknown)}; "
                                f"choose from {', '.join(mt.REPORT_METRICS)}")

    inputs = [ckpt_path, gen_path, pairs_path, occ_path, tpl_path]
    if heldout_path is not None:
        inputs.append(heldout_path)
    manifest = Manifest("evaluate", out_path,
                        {"checkpoint": str(ckpt_path), "generated": str(gen_path),
                         "window": args.window, "threshold": args.threshold,
                         "metrics": list(requested), "name": args.name},
                        inputs, seed=None)
    try:
        params, _, vocab = lm.load_checkpoint(ckpt_path)
        lexicon = cp.load_gender_pairs(pairs_path, vocab)
        templates = mt.build_template_set(mt.load_template_lines(tpl_path),
                                          mt.load_occupations(occ_path),
                                          vocab, lexicon)
        doc_lines = cp.read_pretokenized_lines(gen_path)
        documents = cp.encode_documents(doc_lines, vocab, source="generated")
        held_lines = cp.read_pretokenized_lines(heldout_path) if heldout_path \
            else doc_lines
        heldout = cp.encode_lines(held_lines, vocab)
        name = args.name or ckpt_path.stem
        report = mt.compute_report(params=params, lexicon=lexicon,
                                   templates=templates, documents=documents,
                                   heldout=heldout, window=args.window,
                                   threshold=args.threshold, name=name,
                                   requested=requested)
        out_path.write_text(report.to_json() + "\n", encoding="utf-8")
    except Exception:
        manifest.finish("failed")
        raise
    manifest.finish("ok")

    undefined = report.meta.get("errors", {})
    for metric, reason in undefined.items():
        log.warning("metric %s undefined: %s", metric, reason)
    if requested and all(m in undefined for m in requested):
        raise AllMetricsUndefinedError(
            "every requested metric is undefined: "
            + "; ".join(f"{m}: {r}" for m, r in undefined.items()))
    log.info("report written to %s", out_path)
    return EXIT_OK


def format_report_table(reports: list[mt.MetricsReport]) -> str:
    """Render merged reports as an aligned table with deltas vs the first row."""
    headers = ["model"] + list(mt.REPORT_METRICS)
    rows = []
    base = reports[0]
    for rep in reports:
        row = [str(rep.meta.get("model", "?"))]
        for metric in mt.REPORT_METRICS:
            value = getattr(rep, metric)
            if value is None:
                row.append("-")
                continue
            cell = f"{value:.3f}"
            base_value = getattr(base, metric)
            if rep is not base and base_value is not None:
                cell += f" ({value - base_value:+.3f})"
            row.append(cell)
        rows.append(row)
    widths = [max(len(r[i]) for r in [headers] + rows) for i in range(len(headers))]
    render = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([render(headers)] + [render(r) for r in rows])


def cmd_merge(args) -> int:
    reports = []
    for path in args.reports:
        p = _require_file(path, "report")
        reports.append(mt.MetricsReport.from_json(p.read_text(encoding="utf-8")))
    table = format_report_table(reports)
    merged = {"reports": [r.to_dict() for r in reports], "table": table}
    if args.out:
        Path(args.out).write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    print(table)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; our contract reserves 2 for
    # missing inputs, so route usage errors to the validation code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairlm", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="write a gender-swapped double of a corpus")
    p.add_argument("--in", dest="in_path", required=True, help="input text corpus")
    p.add_argument("--pairs", required=True, help="gender-pair file")
    p.add_argument("--out", required=True, help="output corpus path")
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key = value config file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="sample documents from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num-docs", type=int, default=100)
    p.add_argument("--doc-len", type=int, default=500)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="compute the metric report for a model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--generated", required=True,
                   help="whitespace-tokenized text to score for co-occurrence")
    p.add_argument("--pairs", default=str(default_data_path("gender_pairs.txt")))
    p.add_argument("--occupations", default=str(default_data_path("occupations.txt")))
    p.add_argument("--templates", default=str(default_data_path("templates.txt")))
    p.add_argument("--heldout", default=None,
                   help="held-out text for perplexity (defaults to --generated)")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--threshold", type=int, default=20)
    p.add_argument("--metrics", default=None,
                   help="comma-separated subset of metrics to compute")
    p.add_argument("--name", default=None, help="model name recorded in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("merge", help="merge reports into a comparison table")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--out", default=None, help="write merged JSON here")
    p.set_defaults(fn=cmd_merge)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FAIRLM_LOG", "WARNING").upper(),
                        format="%(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MissingInputError as exc:
        print(f"fairlm: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except FileNotFoundError as exc:
        print(f"fairlm: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except lm.CheckpointError as exc:
        print(f"fairlm: corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except AllMetricsUndefinedError as exc:
        print(f"fairlm: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except (ValidationFailure, cp.LexiconError, ValueError) as exc:
        print(f"fairlm: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
