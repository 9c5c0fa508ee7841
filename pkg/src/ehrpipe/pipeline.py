"""End-to-end orchestration: synthetic data through both model families.

Chart branch: synth -> transform -> labels -> split -> preprocess -> train ->
predict -> eval. Notes branch (same labels and split): notes-prep ->
score-notes -> aggregate -> eval. All artifacts are plain files under the
configured output directory; re-running with the same config and seed
rewrites byte-identical artifacts.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import chart, chart_model, fhir_etl, labels as labels_mod, metrics
from . import notes as notes_mod
from . import split as split_mod
from .errors import DataError
from .runcfg import PipelineConfig, config_hash, derive_seed, write_run_manifest
from .synth import generate
from .tables import TableKind, iter_csv_rows, read_admission_times


def _eval_subset(
    probs: np.ndarray,
    prob_ids: list[str],
    vectors: list[labels_mod.LabelVector],
    keep_ids: set[str],
    recall_target: float = 0.8,
) -> metrics.MetricReport:
    """Metric report over the admissions present in both inputs."""
    bits_by_id = {v.admission_id: v.bits for v in vectors}
    rows = [
        i for i, adm in enumerate(prob_ids)
        if adm in keep_ids and adm in bits_by_id
    ]
    if not rows:
        raise DataError("no admissions to evaluate")
    scores = probs[rows]
    truths = np.stack([bits_by_id[prob_ids[i]] for i in rows])
    return metrics.micro_average(scores, truths, target=recall_target)


def run_pipeline(config: PipelineConfig) -> dict[str, Path]:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}

    # --- synthetic tables ---------------------------------------------------
    data_dir = out / "data"
    manifest = generate(config.synth, data_dir)
    table_paths = {kind: path for kind, path, _ in manifest.tables}
    artifacts["synth_manifest"] = manifest.manifest_path

    # --- flat FHIR collections ----------------------------------------------
    fhir_dir = out / "fhir"
    fhir_dir.mkdir(exist_ok=True)
    for kind, path, _ in manifest.tables:
        target = fhir_dir / f"{kind.value}.json.gz"
        fhir_etl.transform_stream(path, target, kind)
        artifacts[f"fhir_{kind.value}"] = target

    # --- labels ---------------------------------------------------------------
    xwalk = labels_mod.load_crosswalk(manifest.crosswalk_path)
    diagnoses = labels_mod.read_diagnoses(table_paths[TableKind.DIAGNOSES_ICD])
    all_admissions = [
        str(row["hadm_id"]).strip()
        for row in iter_csv_rows(table_paths[TableKind.ADMISSIONS])
    ]
    full_diagnoses = {adm: diagnoses.get(adm, []) for adm in all_admissions}
    vectors, unknown = labels_mod.encode_labels(full_diagnoses, xwalk)
    labels_path = out / "labels.npz"
    labels_mod.save_labels(labels_path, vectors, xwalk.categories)
    artifacts["labels"] = labels_path
    if unknown:
        (out / "unknown_codes.json").write_text(
            json.dumps(unknown, sort_keys=True) + "\n", encoding="utf-8"
        )

    # --- split ------------------------------------------------------------------
    split_result = split_mod.iterative_stratified_split(vectors, config.split)
    split_path = out / "split.json"
    split_mod.save_split(split_path, split_result)
    artifacts["split"] = split_path

    # --- chart preprocessing ------------------------------------------------
    admission_times = read_admission_times(table_paths[TableKind.ADMISSIONS])
    discharge_times = {adm: times[1] for adm, times in admission_times.items()}
    events = chart.read_chart_events_from_collection(
        artifacts["fhir_chartevents"]
    )
    train_ids = {
        adm for adm, tag in split_result.assignment.items() if tag == "train"
    }
    tensors, catalog, stats = chart.preprocess_admissions(
        events,
        discharge_times,
        fit_ids=train_ids,
        numeric_fraction=config.numeric_fraction,
    )
    tensors_path = out / "tensors.npz"
    chart.save_tensors(tensors_path, tensors, catalog)
    stats_path = out / "chart_stats.json"
    chart.save_stats(stats_path, stats)
    artifacts["tensors"] = tensors_path
    artifacts["chart_stats"] = stats_path

    # --- chart model train/predict/eval --------------------------------------
    bits_by_id = {v.admission_id: v.bits for v in vectors}
    tensor_ids = [t.admission_id for t in tensors]
    tensor_values = np.stack([t.values for t in tensors])
    label_matrix = np.stack([bits_by_id[a] for a in tensor_ids])

    model_config = chart_model.ChartModelConfig(
        variant=config.variant,
        n_types=len(catalog),
        n_categories=xwalk.n_categories,
        hidden_size=config.hidden_size,
        epochs=config.model_epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        dropout=config.dropout,
        conv_filters=config.conv_filters,
        rnn_hidden=config.rnn_hidden,
        seed=derive_seed(config.seed, "chart_model"),
    )
    model = chart_model.build(model_config)
    trained = chart_model.train(
        model, tensor_values, label_matrix, tensor_ids,
        split_result.assignment, catalog=catalog,
        stats_ref=stats_path.name,
    )
    model_path = out / "chart_model.npz"
    chart_model.save_checkpoint(model_path, trained)
    artifacts["chart_model"] = model_path
    log_path = out / "chart_training_log.json"
    log_path.write_text(
        json.dumps(trained.history, indent=1) + "\n", encoding="utf-8"
    )
    artifacts["chart_training_log"] = log_path

    probs = chart_model.predict(trained.model, tensor_values)
    probs_path = out / "chart_probs.npz"
    np.savez(probs_path, admission_ids=np.array(tensor_ids), probs=probs)
    artifacts["chart_probs"] = probs_path

    test_ids = {
        adm for adm, tag in split_result.assignment.items() if tag == "test"
    }
    chart_report = _eval_subset(probs, tensor_ids, vectors, test_ids,
                                config.recall_target)
    chart_metrics_path = out / "chart_metrics.json"
    metrics.save_report(chart_metrics_path, chart_report)
    artifacts["chart_metrics"] = chart_metrics_path

    # --- notes branch ---------------------------------------------------------
    note_events = notes_mod.read_note_events(table_paths[TableKind.NOTEEVENTS])
    subset = notes_mod.build_subset(note_events, admission_times, config.subset)
    chunks = []
    for adm in sorted(subset):
        chunks.extend(
            notes_mod.chunk_text(adm, subset[adm], max_len=config.max_len)
        )
    chunks_path = out / "chunks.json"
    notes_mod.save_chunks(chunks_path, chunks)
    artifacts["chunks"] = chunks_path

    train_chunks = [
        ch for ch in chunks
        if split_result.assignment.get(ch.admission_id) == "train"
    ]
    scorer_params, scorer_log = notes_mod.train_scorer(
        train_chunks, bits_by_id, config.scorer
    )
    scorer_path = out / "note_scorer.npz"
    notes_mod.save_scorer(scorer_path, scorer_params)
    artifacts["note_scorer"] = scorer_path
    scorer_log_path = out / "note_training_log.json"
    scorer_log_path.write_text(
        json.dumps(scorer_log, indent=1) + "\n", encoding="utf-8"
    )
    artifacts["note_training_log"] = scorer_log_path

    matrices = notes_mod.score_chunks(chunks, scorer_params)
    scores_path = out / "chunk_scores.npz"
    notes_mod.save_score_matrices(scores_path, matrices)
    artifacts["chunk_scores"] = scores_path

    agg_params = notes_mod.AggregationParams(c=config.aggregation_c)
    adm_ids = [m.admission_id for m in matrices]
    adm_probs = np.stack(
        [notes_mod.aggregate(m, agg_params) for m in matrices]
    )
    agg_path = out / "note_admission_probs.npz"
    np.savez(agg_path, admission_ids=np.array(adm_ids), probs=adm_probs)
    artifacts["note_admission_probs"] = agg_path

    notes_report = _eval_subset(adm_probs, adm_ids, vectors, test_ids,
                                config.recall_target)
    notes_metrics_path = out / "note_metrics.json"
    metrics.save_report(notes_metrics_path, notes_report)
    artifacts["note_metrics"] = notes_metrics_path

    # --- run manifest -----------------------------------------------------------
    manifest_path = out / "run_manifest_pipeline.json"
    write_run_manifest(
        manifest_path,
        "pipeline",
        inputs={"config": "inline"},
        outputs={name: str(path) for name, path in artifacts.items()},
        cfg_hash=config_hash(config),
        seed=config.seed,
    )
    artifacts["run_manifest"] = manifest_path
    return artifacts
