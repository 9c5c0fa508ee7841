"""Run configuration, seed derivation and per-invocation manifests.

The config file is a plain INI document (see README for the schema); CLI
flags override file values. One global seed fans out to per-stage seeds by
hashing the stage name into it, so stages draw from independent but fully
reproducible streams.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .chart import DEFAULT_NUMERIC_FRACTION
from .errors import ConfigError, IoFailure
from .notes import DEFAULT_MAX_LEN, ScorerConfig
from .split import SplitSpec
from .synth import SynthConfig


def derive_seed(master: int, stage: str) -> int:
    digest = hashlib.blake2b(
        f"{master}:{stage}".encode("utf-8"), digest_size=4
    ).digest()
    return int.from_bytes(digest, "little")


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: Path = Path("out")
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    numeric_fraction: float = DEFAULT_NUMERIC_FRACTION
    # chart model
    variant: str = "cnn"
    hidden_size: int = 512
    model_epochs: int = 3
    batch_size: int = 32
    lr: float = 2e-5
    dropout: float = 0.2
    conv_filters: int = 8
    rnn_hidden: int = 64
    # notes
    subset: str = "days3"
    max_len: int = DEFAULT_MAX_LEN
    aggregation_c: float = 2.0
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    recall_target: float = 0.8

    def to_dict(self) -> dict:
        data = asdict(self)
        data["output_dir"] = str(self.output_dir)
        return data


def _get(parser, section: str, option: str, cast, fallback):
    if not parser.has_option(section, option):
        return fallback
    raw = parser.get(section, option)
    try:
        if cast is bool:
            return parser.getboolean(section, option)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {option} = {raw!r}: {exc}") from exc


def load_config(path, seed_override: int | None = None) -> PipelineConfig:
    """Parse an INI config file into a PipelineConfig.

    seed_override replaces the file's seed before stage seeds are derived,
    so a flag-level override reproduces exactly what a config edit would.
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    cfg = PipelineConfig()
    seed = _get(parser, "run", "seed", int, cfg.seed)
    if seed_override is not None:
        seed = seed_override
    out_dir = Path(_get(parser, "run", "output_dir", str, str(cfg.output_dir)))

    synth_defaults = SynthConfig(seed=derive_seed(seed, "synth"))
    synth = SynthConfig(
        seed=synth_defaults.seed,
        n_patients=_get(parser, "synth", "n_patients", int,
                        synth_defaults.n_patients),
        n_admissions=_get(parser, "synth", "n_admissions", int,
                          synth_defaults.n_admissions),
        n_observation_types=_get(parser, "synth", "n_observation_types", int,
                                 synth_defaults.n_observation_types),
        n_ccs_categories=_get(parser, "synth", "n_ccs_categories", int,
                              synth_defaults.n_ccs_categories),
        positive_rate_target=_get(parser, "synth", "positive_rate_target",
                                  float, synth_defaults.positive_rate_target),
        signal_strength=_get(parser, "synth", "signal_strength", float,
                             synth_defaults.signal_strength),
        notes_per_admission=(
            _get(parser, "synth", "notes_min", int,
                 synth_defaults.notes_per_admission[0]),
            _get(parser, "synth", "notes_max", int,
                 synth_defaults.notes_per_admission[1]),
        ),
        vocabulary_size=_get(parser, "synth", "vocabulary_size", int,
                             synth_defaults.vocabulary_size),
        n_planted=_get(parser, "synth", "n_planted", int,
                       synth_defaults.n_planted),
        events_per_admission=(
            _get(parser, "synth", "events_min", int,
                 synth_defaults.events_per_admission[0]),
            _get(parser, "synth", "events_max", int,
                 synth_defaults.events_per_admission[1]),
        ),
    )

    split = SplitSpec(
        ratios=(
            _get(parser, "split", "train", float, 0.8),
            _get(parser, "split", "val", float, 0.1),
            _get(parser, "split", "test", float, 0.1),
        ),
        seed=derive_seed(seed, "split"),
    )

    scorer = ScorerConfig(
        feature_dim=_get(parser, "notes", "feature_dim", int,
                         ScorerConfig.feature_dim),
        epochs=_get(parser, "notes", "epochs", int, ScorerConfig.epochs),
        batch_size=_get(parser, "notes", "batch_size", int,
                        ScorerConfig.batch_size),
        lr=_get(parser, "notes", "lr", float, ScorerConfig.lr),
        seed=derive_seed(seed, "scorer"),
    )

    return PipelineConfig(
        seed=seed,
        output_dir=out_dir,
        synth=synth,
        split=split,
        numeric_fraction=_get(parser, "chart", "numeric_fraction", float,
                              cfg.numeric_fraction),
        variant=_get(parser, "chart_model", "variant", str, cfg.variant),
        hidden_size=_get(parser, "chart_model", "hidden_size", int,
                         cfg.hidden_size),
        model_epochs=_get(parser, "chart_model", "epochs", int,
                          cfg.model_epochs),
        batch_size=_get(parser, "chart_model", "batch_size", int,
                        cfg.batch_size),
        lr=_get(parser, "chart_model", "lr", float, cfg.lr),
        dropout=_get(parser, "chart_model", "dropout", float, cfg.dropout),
        conv_filters=_get(parser, "chart_model", "conv_filters", int,
                          cfg.conv_filters),
        rnn_hidden=_get(parser, "chart_model", "rnn_hidden", int,
                        cfg.rnn_hidden),
        subset=_get(parser, "notes", "subset", str, cfg.subset),
        max_len=_get(parser, "notes", "max_len", int, cfg.max_len),
        aggregation_c=_get(parser, "notes", "aggregation_c", float,
                           cfg.aggregation_c),
        scorer=scorer,
        recall_target=_get(parser, "metrics", "recall_target", float,
                           cfg.recall_target),
    )


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_run_manifest(
    path,
    subcommand: str,
    inputs: dict[str, str],
    outputs: dict[str, str],
    cfg_hash: str,
    seed: int,
):
    payload = {
        "subcommand": subcommand,
        "created_utc": datetime.now(timezone.utc).isoformat(
            timespec="seconds"
        ),
        "seed": seed,
        "config_hash": cfg_hash,
        "inputs": inputs,
        "outputs": outputs,
    }
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=1)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
