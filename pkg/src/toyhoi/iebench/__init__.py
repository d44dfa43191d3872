"""Benchmark harness: manifests, metrics, perception backends and reports."""

from .harness import BenchmarkInstance, EvalReport, Manifest, run_benchmark, write_csv
from .metrics import (Detection, HOITriplet, InvalidInstance, PerceptionBackends, hoi_match,
                      identity_consistency, overall)

__all__ = ["BenchmarkInstance", "Detection", "EvalReport", "HOITriplet", "InvalidInstance",
           "Manifest", "PerceptionBackends", "hoi_match", "identity_consistency", "overall",
           "run_benchmark", "write_csv"]
