"""Clinical note cleaning, subsetting, chunking, scoring and aggregation.

Notes are cleaned (lowercase, abbreviation replacements, newline removal),
restricted to one of three subsets per admission (discharge summaries only,
or all other notes from the first 72h / 48h), concatenated in time order and
split into whitespace-token chunks of at most max_len tokens including a
leading classification marker. A pluggable chunk scorer maps chunks to
per-category probabilities; the default is a signed-hash bag-of-words linear
classifier trained with the shared BCE/Adam kernel. Chunk probabilities are
combined per admission as (P_max + P_mean * n/c) / (1 + n/c), which leans on
the best chunk while the mean term attenuates noise as chunks accumulate.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import (
    EmptyChunkSet,
    EmptyPartition,
    InvalidConfig,
    IoFailure,
    ShapeMismatch,
    UnknownAdmission,
)
from .nn import Adam, DenseLayer, bce_loss, sigmoid
from .tables import iter_csv_rows, parse_timestamp

DISCHARGE_CATEGORY = "discharge summary"
SUBSET_KINDS = ("disch", "days3", "days2")
_SUBSET_WINDOW_HOURS = {"days3": 72, "days2": 48}

DEFAULT_REPLACEMENTS = {"dr.": "doctor"}
DEFAULT_MARKER = "[CLS]"
DEFAULT_MAX_LEN = 512
DEFAULT_HASH_DIM = 2 ** 15


@dataclass
class NoteEvent:
    admission_id: str
    category: str
    charttime: datetime
    text: str


@dataclass
class ChunkTokenSequence:
    admission_id: str
    chunk_index: int
    tokens: list[str]  # leading marker + at most max_len-1 content tokens


@dataclass
class ChunkScoreMatrix:
    admission_id: str
    probabilities: np.ndarray  # (n_chunks, C)


@dataclass(frozen=True)
class AggregationParams:
    c: float = 2.0

    def validate(self) -> None:
        if self.c <= 0:
            raise InvalidConfig("aggregation scale c must be positive")


@dataclass
class LinearClassifierParams:
    weights: np.ndarray  # (C, feature_dim)
    bias: np.ndarray  # (C,)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class ScorerConfig:
    feature_dim: int = DEFAULT_HASH_DIM
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-2
    seed: int = 0


def clean_text(raw: str, replacements: Optional[Mapping[str, str]] = None) -> str:
    """Lowercase, apply replacements in order, strip newlines, collapse runs."""
    if replacements is None:
        replacements = DEFAULT_REPLACEMENTS
    text = raw.lower()
    for old, new in replacements.items():
        text = text.replace(old, new)
    text = text.replace("\r", " ").replace("\n", " ")
    return " ".join(text.split())


def build_subset(
    notes: Iterable[NoteEvent],
    admission_times: Mapping[str, tuple[datetime, datetime]],
    kind: str,
    replacements: Optional[Mapping[str, str]] = None,
) -> dict[str, str]:
    """Per-admission concatenated cleaned text for one subset.

    disch keeps only discharge summaries; days3/days2 keep all other notes
    with charttime before admit + 72h/48h. Retained notes are sorted by
    charttime and joined with single spaces; notes that clean to the empty
    string are dropped; admissions with no qualifying notes are absent.
    """
    if kind not in SUBSET_KINDS:
        raise InvalidConfig(f"subset kind must be one of {SUBSET_KINDS}")
    picked: dict[str, list[tuple[datetime, int, str]]] = {}
    for position, note in enumerate(notes):
        adm = str(note.admission_id)
        if adm not in admission_times:
            raise UnknownAdmission(f"note references unknown admission {adm}")
        is_discharge = note.category.strip().lower() == DISCHARGE_CATEGORY
        if kind == "disch":
            if not is_discharge:
                continue
        else:
            if is_discharge:
                continue
            admit, _ = admission_times[adm]
            cutoff = admit + timedelta(hours=_SUBSET_WINDOW_HOURS[kind])
            if note.charttime >= cutoff:
                continue
        cleaned = clean_text(note.text, replacements)
        if not cleaned:
            continue
        picked.setdefault(adm, []).append((note.charttime, position, cleaned))
    return {
        adm: " ".join(text for _, _, text in sorted(entries))
        for adm, entries in picked.items()
    }


def chunk_text(
    admission_id: str,
    text: str,
    max_len: int = DEFAULT_MAX_LEN,
    marker: str = DEFAULT_MARKER,
) -> list[ChunkTokenSequence]:
    """Greedy whitespace chunking to max_len tokens including the marker."""
    if max_len < 2:
        raise InvalidConfig("max_len must be at least 2 (marker + 1 token)")
    tokens = text.split()
    if not tokens:
        return []
    content = max_len - 1
    return [
        ChunkTokenSequence(
            admission_id=str(admission_id),
            chunk_index=i,
            tokens=[marker] + tokens[start:start + content],
        )
        for i, start in enumerate(range(0, len(tokens), content))
    ]


def _token_slot(token: str, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "little")
    sign = 1.0 if value >> 63 == 0 else -1.0
    return value % dim, sign


def hash_features(tokens: Iterable[str], dim: int) -> np.ndarray:
    """Signed-hash term-frequency vector of fixed dimension."""
    out = np.zeros(dim)
    for token in tokens:
        slot, sign = _token_slot(token, dim)
        out[slot] += sign
    return out


def _feature_matrix(chunks: list[ChunkTokenSequence], dim: int) -> np.ndarray:
    feats = np.zeros((len(chunks), dim))
    for i, chunk in enumerate(chunks):
        feats[i] = hash_features(chunk.tokens, dim)
    return feats


def score_chunks(
    chunks: list[ChunkTokenSequence],
    params: LinearClassifierParams,
) -> list[ChunkScoreMatrix]:
    """Per-admission (chunks x categories) probabilities: sigmoid(Wf + b).

    Output admission order is first appearance; rows follow chunk_index.
    """
    grouped: dict[str, list[ChunkTokenSequence]] = {}
    for chunk in chunks:
        grouped.setdefault(chunk.admission_id, []).append(chunk)
    out = []
    for adm, adm_chunks in grouped.items():
        adm_chunks = sorted(adm_chunks, key=lambda ch: ch.chunk_index)
        feats = _feature_matrix(adm_chunks, params.feature_dim)
        logits = feats @ params.weights.T + params.bias
        out.append(ChunkScoreMatrix(admission_id=adm,
                                    probabilities=sigmoid(logits)))
    return out


def train_scorer(
    chunks: list[ChunkTokenSequence],
    labels_by_admission: Mapping[str, np.ndarray],
    config: ScorerConfig = ScorerConfig(),
) -> tuple[LinearClassifierParams, dict]:
    """Fit the linear chunk scorer; each chunk inherits its admission labels.

    Deterministic per seed; returns the parameters and a per-epoch loss log.
    """
    usable = [ch for ch in chunks if ch.admission_id in labels_by_admission]
    if not usable:
        raise EmptyPartition("no labeled chunks to train on")
    n_categories = len(next(iter(labels_by_admission.values())))
    targets = np.stack(
        [np.asarray(labels_by_admission[ch.admission_id], dtype=bool)
         for ch in usable]
    )
    if targets.shape[1] != n_categories:
        raise ShapeMismatch("inconsistent label vector lengths")

    rng = np.random.default_rng([config.seed, 0])
    layer = DenseLayer(config.feature_dim, n_categories,
                       np.random.default_rng([config.seed, 1]))
    optimizer = Adam(layer.params(), lr=config.lr)
    history: dict = {"train_loss": []}
    features = _feature_matrix(usable, config.feature_dim)
    for _ in range(config.epochs):
        order = rng.permutation(len(usable))
        total_loss = 0.0
        total_cells = 0
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            x = features[rows]
            y = targets[rows]
            probs = sigmoid(layer.forward(x, train=True))
            loss, grad_logits = bce_loss(probs, y)
            layer.backward(grad_logits)
            optimizer.step(layer.grads())
            total_loss += loss * y.size
            total_cells += y.size
        history["train_loss"].append(total_loss / total_cells)
    params = LinearClassifierParams(weights=layer.weights, bias=layer.bias)
    return params, history


def aggregate(matrix: ChunkScoreMatrix,
              params: AggregationParams = AggregationParams()) -> np.ndarray:
    """Combine chunk probabilities into one per-category admission vector."""
    params.validate()
    probs = matrix.probabilities
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise EmptyChunkSet(
            f"admission {matrix.admission_id} has no scored chunks"
        )
    n = probs.shape[0]
    p_max = probs.max(axis=0)
    p_mean = probs.mean(axis=0)
    weight = n / params.c
    return (p_max + p_mean * weight) / (1.0 + weight)


def read_note_events(path) -> list[NoteEvent]:
    """Notes from a noteevents CSV; rows without a parseable time are dropped."""
    notes = []
    for row in iter_csv_rows(path):
        when = parse_timestamp(row.get("charttime", "") or
                               row.get("chartdate", ""))
        if when is None:
            continue
        notes.append(
            NoteEvent(
                admission_id=str(row.get("hadm_id", "")).strip(),
                category=row.get("category", ""),
                charttime=when,
                text=row.get("text", ""),
            )
        )
    return notes


# --- persistence -----------------------------------------------------------

def save_chunks(path, chunks: list[ChunkTokenSequence]):
    payload: dict[str, list[list[str]]] = {}
    for chunk in chunks:
        payload.setdefault(chunk.admission_id, []).append(chunk.tokens)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_chunks(path) -> list[ChunkTokenSequence]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except (OSError, zipfile.BadZipFile) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    chunks = []
    for adm, token_lists in payload.items():
        for i, tokens in enumerate(token_lists):
            chunks.append(
                ChunkTokenSequence(admission_id=str(adm), chunk_index=i,
                                   tokens=[str(t) for t in tokens])
            )
    return chunks


def save_scorer(path, params: LinearClassifierParams):
    try:
        np.savez(path, weights=params.weights, bias=params.bias)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_scorer(path) -> LinearClassifierParams:
    try:
        with np.load(path, allow_pickle=False) as data:
            return LinearClassifierParams(weights=data["weights"],
                                          bias=data["bias"])
    except (OSError, zipfile.BadZipFile) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def save_score_matrices(path, matrices: list[ChunkScoreMatrix]):
    arrays = {
        f"adm_{m.admission_id}": m.probabilities for m in matrices
    }
    try:
        np.savez(path, **arrays)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_score_matrices(path) -> list[ChunkScoreMatrix]:
    try:
        with np.load(path, allow_pickle=False) as data:
            return [
                ChunkScoreMatrix(admission_id=name[len("adm_"):],
                                 probabilities=data[name])
                for name in data.files
            ]
    except (OSError, zipfile.BadZipFile) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
