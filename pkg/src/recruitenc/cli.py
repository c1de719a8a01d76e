"""Command-line entry point: ``recruitenc <subcommand> [flags]``.

Every run writes ``manifest.json`` next to its outputs (config echo, seed,
format versions, input checksums). Failures exit nonzero with a single
``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from recruitenc import __version__, bias, corpus, evalkit, trainer
from recruitenc._io import atomic_write_text, sha256_file, write_csv
from recruitenc.encoder import CHECKPOINT_VERSION, CheckpointError, encode, load_checkpoint

FORMAT_VERSIONS = {"checkpoint": CHECKPOINT_VERSION, "embedding_dump": evalkit.DUMP_VERSION, "manifest": 1}


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message, 2)


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError("missing-input", f"{what} not found: {p}")
    return p


def _write_manifest(out: Path, args, inputs: dict, outputs: list[str], extra: dict | None = None) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "tool": "recruitenc",
        "version": __version__,
        "subcommand": args.command,
        "seed": args.seed,
        "config": config,
        "format_versions": FORMAT_VERSIONS,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items()},
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _source(args, inputs: dict):
    """Embedding source from --model or --embeddings."""
    if bool(args.model) == bool(args.embeddings):
        raise CLIError("usage", "give exactly one of --model or --embeddings", 2)
    if args.model:
        inputs["model"] = _require(args.model, "model checkpoint")
        try:
            model, _, _ = load_checkpoint(args.model)
        except CheckpointError as exc:
            raise CLIError("checkpoint-version", str(exc)) from None
        return model
    inputs["embeddings"] = _require(args.embeddings, "embedding dump")
    return evalkit.dump_source(evalkit.load_embedding_dump(args.embeddings))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> None:
    out = Path(args.out)
    postings, bench, occ = corpus.generate_synthetic_corpus(
        args.n, n_fields=args.n_fields, vocab_size=args.vocab_size, seed=stage_seed(args.seed, "gen-synthetic"))
    corpus.write_jsonl(out / "postings.jsonl", (p.to_record() for p in postings))
    corpus.write_jsonl(out / "synonyms.jsonl", bench.to_records())
    corpus.write_jsonl(out / "occupation.jsonl", occ.to_records())
    _write_manifest(out, args, {}, ["postings.jsonl", "synonyms.jsonl", "occupation.jsonl"])


def cmd_build_pairs(args) -> None:
    out = Path(args.out)
    inputs = {"postings": _require(args.postings, "postings file")}
    postings = corpus.load_postings(args.postings)
    pairs, skipped = corpus.build_translation_pairs(postings)
    report = corpus.SamplingReport()
    matches = corpus.sample_match_pairs(postings, args.negatives, args.iou_threshold,
                                        seed=stage_seed(args.seed, "build-pairs"), report=report)
    corpus.write_jsonl(out / "translation_pairs.jsonl",
                       ({"l1_text": p.l1_text, "l2_text": p.l2_text, "source_id": p.source_id} for p in pairs))
    corpus.write_jsonl(out / "match_pairs.jsonl", (m.to_record() for m in matches))
    _write_manifest(out, args, inputs, ["translation_pairs.jsonl", "match_pairs.jsonl"],
                    {"stats": {"translation_pairs": len(pairs), "skipped_postings": skipped,
                               "positives": report.positives, "negatives": report.negatives,
                               "negative_shortfall": report.shortfall}})


def _read_pairs(pairs_dir: Path):
    title_pairs = [corpus.TitlePair(r["l1_text"], r["l2_text"], r["source_id"])
                   for _, r in corpus._read_jsonl(pairs_dir / "translation_pairs.jsonl")]
    matches = [corpus.MatchPair(r["description"], r["title"], int(r["label"]), float(r["iou_at_sampling"]),
                                r.get("source_id", ""), r.get("title_source_id", ""))
               for _, r in corpus._read_jsonl(pairs_dir / "match_pairs.jsonl")]
    return title_pairs, matches


TRAIN_FLAGS = ("temperature", "batch_size", "learning_rate", "steps", "epochs", "dim", "hash_size",
               "head_width", "negatives_per_positive", "iou_threshold")


def cmd_train(args) -> None:
    out = Path(args.out)
    inputs = {"postings": _require(args.postings, "postings file")}
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS}
    overrides["seed"] = stage_seed(args.seed, "train")
    if args.tasks is not None:
        tasks = {t.strip() for t in args.tasks.split(",") if t.strip()}
        bad = tasks - set(trainer.TASKS)
        if bad:
            raise CLIError("usage", f"unknown task(s) {sorted(bad)}", 2)
        overrides.update({f"task_{t}": t in tasks for t in trainer.TASKS})
    if args.config:
        inputs["config"] = _require(args.config, "config file")
        config = trainer.TrainConfig.from_json(args.config, **overrides)
    else:
        config = trainer.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    postings = corpus.load_postings(args.postings)
    names = [f"field_{k:02d}" for k in range(args.n_fields)] if args.n_fields else None
    if args.pairs:
        pairs_dir = _require(args.pairs, "pairs directory")
        inputs["translation_pairs"] = pairs_dir / "translation_pairs.jsonl"
        inputs["match_pairs"] = pairs_dir / "match_pairs.jsonl"
        title_pairs, matches = _read_pairs(pairs_dir)
        titles, fs = corpus.build_field_samples(postings)
        names = names or corpus.field_vocabulary(postings)
        data = trainer.TrainingData(title_pairs, matches, titles, corpus.field_targets(fs, names), names,
                                    postings)
    else:
        data = trainer.TrainingData.from_postings(postings, config, names)
    result = trainer.train(config, data, checkpoint=out / "model.npz")
    result.write_log(out / "loss_log.csv")
    atomic_write_text(out / "train_config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(out, args, inputs, ["model.npz", "loss_log.csv", "train_config.json"],
                    {"train_config": config.to_dict()})


def _items_from_file(path: Path):
    """(id, text, lang) triples from a synonym, occupation or generic text file."""
    records = [r for _, r in corpus._read_jsonl(path)]
    if records and "group" in records[0]:
        bench = corpus.load_synonym_benchmark(path)
        return [(e.id, e.text, e.lang.value) for e in bench.queries + bench.candidates]
    out = []
    for i, r in enumerate(records):
        text = str(r["text"])
        rid = str(r["id"]) if "id" in r else f"o{i:06d}"
        out.append((rid, text, corpus.tag_language(text).value))
    return out


def cmd_encode(args) -> None:
    out = Path(args.out)
    inputs = {"input": _require(args.input, "input file"), "model": _require(args.model, "model checkpoint")}
    try:
        model, _, _ = load_checkpoint(args.model)
    except CheckpointError as exc:
        raise CLIError("checkpoint-version", str(exc)) from None
    items = _items_from_file(Path(args.input))
    vecs = encode(model, [t for _, t, _ in items])
    evalkit.write_embedding_dump(out / "embeddings.jsonl", [i for i, _, _ in items],
                                 [l for _, _, l in items], vecs)
    _write_manifest(out, args, inputs, ["embeddings.jsonl"])


def cmd_eval_synonym(args) -> None:
    out = Path(args.out)
    inputs = {"benchmark": _require(args.benchmark, "benchmark file")}
    bench = corpus.load_synonym_benchmark(args.benchmark)
    source = _source(args, inputs)
    ks = tuple(args.k) if args.k else (5, 10)
    report = evalkit.evaluate_synonym(source, bench, args.pool, ks, args.map_k, args.capped_recall)
    report.to_csv(out / "metrics.csv")
    report.per_query_csv(out / "per_query.csv")
    _write_manifest(out, args, inputs, ["metrics.csv", "per_query.csv"],
                    {"skipped_queries": len(report.skipped)})


def cmd_probe(args) -> None:
    out = Path(args.out)
    inputs = {"occupation": _require(args.occupation, "occupation file")}
    ds = corpus.load_occupation_dataset(args.occupation, seed=stage_seed(args.seed, "probe-split"))
    source = _source(args, inputs)

    def vectors(split):
        texts, y = ds.subset(split)
        if isinstance(source, dict):
            ids = [f"o{i:06d}" for i, s in enumerate(ds.split) if s == split]
            return np.stack([source[i] for i in ids]), y
        return encode(source, texts), y

    xtr, ytr = vectors("train")
    xte, yte = vectors("test")
    probe = evalkit.train_probe(xtr, ytr, len(ds.classes), epochs=args.epochs, seed=stage_seed(args.seed, "probe"))
    rows = [[f"Acc@{k}", evalkit.probe_acc_at_k(probe, xte, yte, k, ytr), len(yte)] for k in args.k or (1, 3, 5)]
    write_csv(out / "probe.csv", ("metric", "value", "n_test"), rows)
    _write_manifest(out, args, inputs, ["probe.csv"])


def cmd_bias_lbkl(args) -> None:
    out = Path(args.out)
    inputs = {"benchmark": _require(args.benchmark, "benchmark file")}
    bench = corpus.load_synonym_benchmark(args.benchmark)
    source = _source(args, inputs)
    report = bias.lbkl_for_benchmark(source, bench, args.pool, args.pred_k, args.log_base)
    report.to_csv(out / "lbkl.csv")
    report.per_query_csv(out / "lbkl_per_query.csv")
    _write_manifest(out, args, inputs, ["lbkl.csv", "lbkl_per_query.csv"])


def cmd_bias_histogram(args) -> None:
    out = Path(args.out)
    inputs = {"benchmark": _require(args.benchmark, "benchmark file")}
    bench = corpus.load_synonym_benchmark(args.benchmark)
    source = _source(args, inputs)
    report = bias.language_histogram(source, bench, args.top_k)
    report.to_csv(out / "histogram.csv")
    _write_manifest(out, args, inputs, ["histogram.csv"], {"effective_top_k": report.top_k})


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recruitenc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    def with_source(p):
        p.add_argument("--model", help="checkpoint written by `train`")
        p.add_argument("--embeddings", help="embedding dump (JSON lines)")

    p = command("gen-synthetic", cmd_gen_synthetic, "write a synthetic bilingual corpus")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--vocab-size", type=int, default=400)
    p.add_argument("--n-fields", type=int, default=corpus.N_JOB_FIELDS)

    p = command("build-pairs", cmd_build_pairs, "translation pairs and IoU-sampled match pairs")
    p.add_argument("--postings", required=True)
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--iou-threshold", type=float, default=corpus.IOU_THRESHOLD)

    p = command("train", cmd_train, "multi-task training")
    p.add_argument("--postings", required=True)
    p.add_argument("--pairs", help="directory written by build-pairs")
    p.add_argument("--config", help="flat JSON TrainConfig")
    p.add_argument("--tasks", help="comma-separated subset of jt,jd,jf")
    p.add_argument("--n-fields", type=int, default=None,
                   help="use field_00..field_{n-1} as the field vocabulary")
    for flag in TRAIN_FLAGS:
        kind = float if flag in ("temperature", "learning_rate", "iou_threshold") else int
        p.add_argument("--" + flag.replace("_", "-"), type=kind, default=None)

    p = command("encode", cmd_encode, "write an embedding dump")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)

    p = command("eval-synonym", cmd_eval_synonym, "synonym retrieval metrics")
    p.add_argument("--benchmark", required=True)
    with_source(p)
    p.add_argument("--pool", choices=("l1", "l2", "combined"), default="combined")
    p.add_argument("--k", type=int, action="append", help="recall cutoff (repeatable)")
    p.add_argument("--map-k", type=int, default=25)
    p.add_argument("--capped-recall", action="store_true")

    p = command("probe", cmd_probe, "linear probe accuracy on occupation labels")
    p.add_argument("--occupation", required=True)
    with_source(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--k", type=int, action="append")

    p = command("bias-lbkl", cmd_bias_lbkl, "language-bias KL divergence")
    p.add_argument("--benchmark", required=True)
    with_source(p)
    p.add_argument("--pool", choices=("l1", "l2", "combined"), default="combined")
    p.add_argument("--pred-k", type=int, default=None)
    p.add_argument("--log-base", choices=("e", "2", "10"), default="e")

    p = command("bias-histogram", cmd_bias_histogram, "top-k language histogram")
    p.add_argument("--benchmark", required=True)
    with_source(p)
    p.add_argument("--top-k", type=int, default=100)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except CLIError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except (corpus.CorpusError, evalkit.DumpError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
