"""Per-round CSV, full JSON report and chain export."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .config import dump_config
from .ledger import export_chain
from .orchestrator import ExperimentResult

CSV_COLUMNS = ("round", "mode", "accuracy", "n_flagged", "n_included", "t_b", "cumulative_t_c")


def canonical_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def rounds_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    mode = result.state.cfg.mode
    cumulative = result.state.latency.cumulative_t_c()
    for rep, t_c in zip(result.rounds, cumulative):
        writer.writerow([rep.round, mode, repr(rep.global_accuracy), rep.n_flagged, rep.n_included, rep.latency.t_b, t_c])
    return buf.getvalue()


def emit_reports(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    """Write ``rounds.csv``, ``report.json``, ``chain.json`` and ``config.yaml``."""
    out = Path(out_dir)
    paths = {
        "csv": out / "rounds.csv",
        "json": out / "report.json",
        "chain": out / "chain.json",
        "config": out / "config.yaml",
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths["csv"].write_text(rounds_csv(result), encoding="utf-8")
        paths["json"].write_text(canonical_json(result.to_json()), encoding="utf-8")
        export_chain(result.chain, paths["chain"], result.state.auth)
        paths["config"].write_text(dump_config(result.state.cfg), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write reports under {out}: {exc}") from exc
    return paths
