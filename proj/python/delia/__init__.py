"""Diverse-data interleaving experiments: synthesis, training, probes, eval."""

from ._core import (
    Config,
    ExtractionResult,
    Model,
    Sample,
    StageResult,
    Vocabulary,
    __version__,
    diversify,
    extract_json,
    generate_downstream,
    interleave,
    read_jsonl,
    run_experiment,
    sample_diverse,
    sample_from_json,
    sample_to_json,
    theory_report,
    write_jsonl,
    write_report,
)

__all__ = [
    "Config",
    "ExtractionResult",
    "Model",
    "Sample",
    "StageResult",
    "Vocabulary",
    "__version__",
    "diversify",
    "extract_json",
    "generate_downstream",
    "interleave",
    "read_jsonl",
    "run_experiment",
    "sample_diverse",
    "sample_from_json",
    "sample_to_json",
    "theory_report",
    "write_jsonl",
    "write_report",
]
