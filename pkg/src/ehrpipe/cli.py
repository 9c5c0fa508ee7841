"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 data/schema
error, 5 numeric fault, 1 anything unexpected. Every invocation writes a
run manifest (inputs, outputs, config hash, seed) next to its primary
output. Subcommands never modify their input files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import chart, chart_model, fhir_etl, metrics
from . import labels as labels_mod
from . import notes as notes_mod
from . import split as split_mod
from .attention import (
    attention,
    export_alignment,
    load_attention_input,
    write_alignment_csv,
    write_weights_json,
)
from .errors import DataError, PipelineError
from .pipeline import run_pipeline
from .runcfg import config_hash, load_config, write_run_manifest
from .synth import SynthConfig, generate
from .tables import TableKind, read_admission_times, iter_csv_rows


def _args_hash(args: argparse.Namespace) -> str:
    payload = {k: str(v) for k, v in sorted(vars(args).items())
               if k != "func"}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()


def _emit_manifest(args, subcommand: str, inputs: dict, outputs: dict,
                   seed: int):
    primary = next(iter(outputs.values()), ".")
    directory = Path(primary).parent
    directory.mkdir(parents=True, exist_ok=True)
    write_run_manifest(
        directory / f"run_manifest_{subcommand}.json",
        subcommand,
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        cfg_hash=_args_hash(args),
        seed=seed,
    )


# --- subcommand handlers -----------------------------------------------------

def _cmd_transform(args) -> int:
    table = TableKind(args.table)
    count = fhir_etl.transform_stream(args.input, args.output, table)
    print(f"{args.input} -> {args.output}: {count} records "
          f"({fhir_etl.map_table_kind(table)})")
    _emit_manifest(args, "transform", {"csv": args.input},
                   {"collection": args.output}, seed=0)
    return 0


def _cmd_synth(args) -> int:
    config = SynthConfig(
        seed=args.seed,
        n_patients=args.patients,
        n_admissions=args.admissions,
        n_observation_types=args.types,
        n_ccs_categories=args.categories,
        positive_rate_target=args.positive_rate,
        signal_strength=args.signal,
        notes_per_admission=(args.notes_min, args.notes_max),
        vocabulary_size=args.vocab,
        n_planted=args.planted,
        events_per_admission=(args.events_min, args.events_max),
    )
    manifest = generate(config, args.out)
    for kind, path, count in manifest.tables:
        print(f"{kind.value}: {count} rows -> {path}")
    _emit_manifest(
        args, "synth", {},
        {kind.value: path for kind, path, _ in manifest.tables}
        | {"crosswalk": manifest.crosswalk_path,
           "manifest": manifest.manifest_path},
        seed=args.seed,
    )
    return 0


def _read_events(path):
    name = str(path)
    if name.endswith(".json") or name.endswith(".json.gz"):
        return chart.read_chart_events_from_collection(path)
    return chart.read_chart_events(path)


def _cmd_preprocess(args) -> int:
    times = read_admission_times(args.admissions)
    discharge = {adm: t[1] for adm, t in times.items()}
    fit_ids = None
    if args.split:
        assignment = split_mod.load_split(args.split)
        fit_ids = {a for a, tag in assignment.items() if tag == "train"}
    tensors, catalog, stats = chart.preprocess_admissions(
        _read_events(args.chartevents), discharge, fit_ids=fit_ids,
        numeric_fraction=args.numeric_fraction,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensors_path = out / "tensors.npz"
    stats_path = out / "chart_stats.json"
    chart.save_tensors(tensors_path, tensors, catalog)
    chart.save_stats(stats_path, stats)
    print(f"{len(tensors)} admission tensors over {len(catalog)} types")
    _emit_manifest(
        args, "preprocess",
        {"chartevents": args.chartevents, "admissions": args.admissions},
        {"tensors": tensors_path, "stats": stats_path},
        seed=0,
    )
    return 0


def _cmd_labels(args) -> int:
    xwalk = labels_mod.load_crosswalk(args.crosswalk)
    diagnoses = labels_mod.read_diagnoses(args.diagnoses)
    if args.admissions:
        admission_ids = [
            str(row["hadm_id"]).strip()
            for row in iter_csv_rows(args.admissions)
        ]
        diagnoses = {adm: diagnoses.get(adm, []) for adm in admission_ids}
    vectors, unknown = labels_mod.encode_labels(diagnoses, xwalk)
    labels_mod.save_labels(args.out, vectors, xwalk.categories)
    print(f"{len(vectors)} admissions x {xwalk.n_categories} categories; "
          f"{sum(unknown.values())} unknown code occurrences")
    _emit_manifest(
        args, "labels",
        {"diagnoses": args.diagnoses, "crosswalk": args.crosswalk},
        {"labels": args.out}, seed=0,
    )
    return 0


def _cmd_split(args) -> int:
    vectors, _ = labels_mod.load_labels(args.labels)
    spec = split_mod.SplitSpec(ratios=tuple(args.ratios), seed=args.seed)
    result = split_mod.iterative_stratified_split(vectors, spec)
    split_mod.save_split(args.out, result)
    print(f"sizes: {result.sizes}")
    _emit_manifest(args, "split", {"labels": args.labels},
                   {"split": args.out}, seed=args.seed)
    return 0


def _load_probs(path) -> tuple[list[str], np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return [str(x) for x in data["admission_ids"]], data["probs"]


def _cmd_train(args) -> int:
    tensors, catalog = chart.load_tensors(args.tensors)
    vectors, _ = labels_mod.load_labels(args.labels)
    assignment = split_mod.load_split(args.split)
    bits_by_id = {v.admission_id: v.bits for v in vectors}
    ids = [t.admission_id for t in tensors if t.admission_id in bits_by_id]
    values = np.stack(
        [t.values for t in tensors if t.admission_id in bits_by_id]
    )
    label_matrix = np.stack([bits_by_id[a] for a in ids])
    config = chart_model.ChartModelConfig(
        variant=args.variant,
        n_types=len(catalog),
        n_categories=label_matrix.shape[1],
        hidden_size=args.hidden,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        dropout=args.dropout,
        conv_filters=args.conv_filters,
        rnn_hidden=args.rnn_hidden,
        seed=args.seed,
    )
    stats_path = Path(args.tensors).parent / "chart_stats.json"
    trained = chart_model.train(
        chart_model.build(config), values, label_matrix, ids, assignment,
        catalog=catalog,
        stats_ref=stats_path.name if stats_path.exists() else "",
    )
    chart_model.save_checkpoint(args.out, trained)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.json")
    log_path.write_text(json.dumps(trained.history, indent=1) + "\n",
                        encoding="utf-8")
    print(f"train loss per epoch: "
          f"{[round(x, 6) for x in trained.history['train_loss']]}")
    _emit_manifest(
        args, "train",
        {"tensors": args.tensors, "labels": args.labels, "split": args.split},
        {"checkpoint": args.out, "log": log_path}, seed=args.seed,
    )
    return 0


def _cmd_predict(args) -> int:
    trained = chart_model.load_checkpoint(args.model)
    tensors, _ = chart.load_tensors(args.tensors)
    ids = [t.admission_id for t in tensors]
    values = (
        np.stack([t.values for t in tensors])
        if tensors
        else np.zeros((0, trained.config.n_types, 4))
    )
    probs = chart_model.predict(trained.model, values)
    np.savez(args.out, admission_ids=np.array(ids), probs=probs)
    print(f"{probs.shape[0]} x {probs.shape[1]} probabilities -> {args.out}")
    _emit_manifest(args, "predict",
                   {"model": args.model, "tensors": args.tensors},
                   {"probs": args.out}, seed=0)
    return 0


def _cmd_notes_prep(args) -> int:
    times = read_admission_times(args.admissions)
    note_events = notes_mod.read_note_events(args.notes)
    subset = notes_mod.build_subset(note_events, times, args.subset)
    chunks = []
    for adm in sorted(subset):
        chunks.extend(
            notes_mod.chunk_text(adm, subset[adm], max_len=args.max_len)
        )
    notes_mod.save_chunks(args.out, chunks)
    print(f"{len(subset)} admissions -> {len(chunks)} chunks "
          f"(subset={args.subset})")
    _emit_manifest(args, "notes-prep",
                   {"notes": args.notes, "admissions": args.admissions},
                   {"chunks": args.out}, seed=0)
    return 0


def _cmd_score_notes(args) -> int:
    chunks = notes_mod.load_chunks(args.chunks)
    outputs = {}
    if args.params:
        params = notes_mod.load_scorer(args.params)
        inputs = {"chunks": args.chunks, "params": args.params}
    else:
        if not (args.labels and args.split):
            raise DataError(
                "score-notes needs --params, or --labels and --split to fit"
            )
        vectors, _ = labels_mod.load_labels(args.labels)
        assignment = split_mod.load_split(args.split)
        bits_by_id = {v.admission_id: v.bits for v in vectors}
        train_chunks = [
            ch for ch in chunks
            if assignment.get(ch.admission_id) == "train"
        ]
        scorer_config = notes_mod.ScorerConfig(
            feature_dim=args.feature_dim, epochs=args.epochs,
            batch_size=args.batch_size, lr=args.lr, seed=args.seed,
        )
        params, history = notes_mod.train_scorer(train_chunks, bits_by_id,
                                                 scorer_config)
        fit_out = args.fit_out or str(args.out) + ".scorer.npz"
        notes_mod.save_scorer(fit_out, params)
        outputs["scorer"] = fit_out
        print(f"scorer loss per epoch: "
              f"{[round(x, 6) for x in history['train_loss']]}")
        inputs = {"chunks": args.chunks, "labels": args.labels,
                  "split": args.split}
    matrices = notes_mod.score_chunks(chunks, params)
    notes_mod.save_score_matrices(args.out, matrices)
    outputs["scores"] = args.out
    print(f"scored {len(matrices)} admissions -> {args.out}")
    _emit_manifest(args, "score-notes", inputs, outputs, seed=args.seed)
    return 0


def _cmd_aggregate(args) -> int:
    matrices = notes_mod.load_score_matrices(args.scores)
    params = notes_mod.AggregationParams(c=args.scale_c)
    ids = [m.admission_id for m in matrices]
    probs = np.stack([notes_mod.aggregate(m, params) for m in matrices])
    np.savez(args.out, admission_ids=np.array(ids), probs=probs)
    print(f"aggregated {len(ids)} admissions -> {args.out}")
    _emit_manifest(args, "aggregate", {"scores": args.scores},
                   {"probs": args.out}, seed=0)
    return 0


def _cmd_eval(args) -> int:
    ids, probs = _load_probs(args.probs)
    vectors, _ = labels_mod.load_labels(args.labels)
    keep = set(ids)
    if args.split and args.partition:
        assignment = split_mod.load_split(args.split)
        keep = {a for a, tag in assignment.items() if tag == args.partition}
    bits_by_id = {v.admission_id: v.bits for v in vectors}
    rows = [i for i, adm in enumerate(ids)
            if adm in keep and adm in bits_by_id]
    if not rows:
        raise DataError("no admissions to evaluate")
    truths = np.stack([bits_by_id[ids[i]] for i in rows])
    report = metrics.micro_average(probs[rows], truths, target=args.target)
    metrics.save_report(args.out, report)
    print(f"micro AU-ROC {report.micro_auroc:.4f}  "
          f"AU-PR {report.micro_aupr:.4f}  "
          f"Recall@Prec80 {report.micro_recall_at_prec80:.4f}  "
          f"(positive ratio {report.positive_ratio:.4f})")
    _emit_manifest(args, "eval",
                   {"probs": args.probs, "labels": args.labels},
                   {"report": args.out}, seed=0)
    return 0


def _cmd_attention(args) -> int:
    inp = load_attention_input(args.input)
    weights = attention(inp)
    outputs = {}
    if args.out_csv:
        tokens_q = inp.tokens_q or [f"q{i}" for i in
                                    range(weights.weights.shape[0])]
        tokens_k = inp.tokens_k or [f"k{i}" for i in
                                    range(weights.weights.shape[1])]
        records = export_alignment(weights, tokens_q, tokens_k)
        write_alignment_csv(args.out_csv, records)
        outputs["alignment"] = args.out_csv
    if args.out_json:
        write_weights_json(args.out_json, weights)
        outputs["weights"] = args.out_json
    print(f"attention over {weights.weights.shape[0]} queries x "
          f"{weights.weights.shape[1]} keys")
    _emit_manifest(args, "attention", {"input": args.input}, outputs, seed=0)
    return 0


def _cmd_pipeline(args) -> int:
    config = load_config(args.config, seed_override=args.seed)
    if args.output_dir:
        config.output_dir = Path(args.output_dir)
    artifacts = run_pipeline(config)
    print(f"pipeline complete: {len(artifacts)} artifacts in "
          f"{config.output_dir} (config hash {config_hash(config)[:12]})")
    for name in ("chart_metrics", "note_metrics"):
        print(f"  {name}: {artifacts[name]}")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehrpipe",
        description="Flat-FHIR ETL and multi-label diagnosis prediction "
                    "pipeline over MIMIC-III-schema tables.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("transform", help="CSV table -> flat FHIR JSON")
    p.add_argument("--table", required=True,
                   choices=[t.value for t in TableKind])
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=100)
    p.add_argument("--admissions", type=int, default=120)
    p.add_argument("--types", type=int, default=450)
    p.add_argument("--categories", type=int, default=281)
    p.add_argument("--positive-rate", type=float, default=0.043)
    p.add_argument("--signal", type=float, default=0.0)
    p.add_argument("--notes-min", type=int, default=1)
    p.add_argument("--notes-max", type=int, default=3)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--planted", type=int, default=3)
    p.add_argument("--events-min", type=int, default=40)
    p.add_argument("--events-max", type=int, default=80)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="chart events -> admission tensors")
    p.add_argument("--chartevents", required=True,
                   help="chartevents CSV or its FHIR observation collection")
    p.add_argument("--admissions", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", help="fit normalization on its train ids only")
    p.add_argument("--numeric-fraction", type=float,
                   default=chart.DEFAULT_NUMERIC_FRACTION)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("labels", help="encode CCS label vectors")
    p.add_argument("--diagnoses", required=True)
    p.add_argument("--crosswalk", required=True)
    p.add_argument("--admissions",
                   help="include admissions without diagnosis rows")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_labels)

    p = sub.add_parser("split", help="iterative stratified split")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train a chart tensor classifier")
    p.add_argument("--tensors", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--variant", choices=chart_model.VARIANTS, default="cnn")
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--conv-filters", type=int, default=8)
    p.add_argument("--rnn-hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="probabilities from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--tensors", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("notes-prep", help="clean, subset and chunk notes")
    p.add_argument("--notes", required=True)
    p.add_argument("--admissions", required=True)
    p.add_argument("--subset", choices=notes_mod.SUBSET_KINDS,
                   default="days3")
    p.add_argument("--max-len", type=int, default=notes_mod.DEFAULT_MAX_LEN)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_notes_prep)

    p = sub.add_parser("score-notes",
                       help="score chunks (fits the scorer when asked)")
    p.add_argument("--chunks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="existing scorer parameters")
    p.add_argument("--labels", help="labels npz, to fit a new scorer")
    p.add_argument("--split", help="split json, to fit a new scorer")
    p.add_argument("--fit-out", help="where to store the fitted scorer")
    p.add_argument("--feature-dim", type=int,
                   default=notes_mod.DEFAULT_HASH_DIM)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_score_notes)

    p = sub.add_parser("aggregate", help="chunk scores -> admission scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-c", type=float, default=2.0)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("eval", help="metric report from probabilities")
    p.add_argument("--probs", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--partition", choices=split_mod.PARTITIONS)
    p.add_argument("--target", type=float, default=0.8,
                   help="precision target for the recall metric")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("attention", help="attention weights and alignment")
    p.add_argument("--input", required=True,
                   help="JSON with queries/keys/values and optional tokens")
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=_cmd_attention)

    p = sub.add_parser("pipeline", help="run the whole pipeline end to end")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - unexpected failure path
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
