"""Multi-seed ablation over system ids and the results table."""

from __future__ import annotations

import dataclasses
import json
import logging
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .corpus import Corpus
from .training import ExperimentConfig, evaluate_model, prepare_corpus, train

log = logging.getLogger(__name__)

TEST_SPLITS = ("test_cs", "test_mono")

# Published MER (%) on the CS-heavy / monolingual-heavy dev sets, shown for
# orientation only: the synthetic corpus is not comparable in absolute terms.
REFERENCE_MER = {"S0": (16.7, 23.4), "S2.8": (16.3, 23.0)}

# (label, system, split, relation to baseline)
TREND_CHECKS = (
    ("+LD (beta 0.8) on CS-heavy split", "S2.1", "test_cs", "<="),
    ("+LD +LPB on CS-heavy split", "S2.8", "test_cs", "<="),
    ("+LD +LPB on monolingual-heavy split", "S2.8", "test_mono", "<="),
    ("+GRL on monolingual-heavy split", "S3.3", "test_mono", ">="),
)


@dataclass
class AblationEntry:
    label: str
    config: ExperimentConfig


def build_matrix(
    base: ExperimentConfig, systems: Sequence[str], beta_sweep: Optional[Sequence[float]] = None
) -> List[AblationEntry]:
    """One entry per system; systems other than the baseline are repeated for
    every beta in ``beta_sweep`` (labelled ``<id>@beta=<b>``)."""
    sweep = list(beta_sweep if beta_sweep is not None else base.beta_sweep)
    out = []
    for sid in systems:
        cfg = dataclasses.replace(base, system=sid)
        if sweep and sid != "S0":
            out.extend(AblationEntry(f"{sid}@beta={b:g}", cfg.with_beta(b)) for b in sweep)
        else:
            out.append(AblationEntry(sid, cfg))
    return out


def _run_member(
    label: str, cfg_dict: Dict[str, Any], seed: int, corpus: Optional[Corpus], out_dir: Optional[str], splits
) -> Dict[str, Any]:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg = dataclasses.replace(cfg, seed=seed)
    run_dir = Path(out_dir) / label / f"seed{seed}" if out_dir else None
    cached = run_dir / "result.json" if run_dir else None
    if cached is not None and cached.exists():
        prev = json.loads(cached.read_text())
        # compare in JSON form: tuples in the config come back as lists
        if prev.get("config") == json.loads(json.dumps(cfg.to_dict())) and prev.get("status") == "ok":
            return prev
    try:
        corpus = prepare_corpus(cfg, corpus)
        record, model = train(cfg, corpus, run_dir)
        reports = {
            s: evaluate_model(
                model,
                corpus,
                s,
                beam=cfg.beam,
                alpha_decode=cfg.alpha_decode,
                decode_path=(run_dir / f"decode_{s}.jsonl") if run_dir else None,
            )
            for s in splits
        }
        res = {
            "label": label,
            "seed": seed,
            "status": "ok",
            "config": cfg.to_dict(),
            "mer": {s: r["mer"] for s, r in reports.items()},
            "ld_accuracy": {s: r.get("ld_accuracy") for s, r in reports.items()},
            "per_language": {s: r["per_language"] for s, r in reports.items()},
            "final_valid_loss": record.epochs[-1].valid.total,
            "wall_clock": record.wall_clock,
        }
    except Exception as exc:  # a failed member must not take the table down
        log.error("run %s seed %d failed: %s", label, seed, exc)
        res = {
            "label": label,
            "seed": seed,
            "status": "failed",
            "config": cfg.to_dict(),
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
        }
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        cached.write_text(json.dumps(res, indent=1))
    return res


def run_ablation(
    matrix: Sequence[AblationEntry],
    seeds: Sequence[int] = (0, 1, 2),
    corpus: Optional[Corpus] = None,
    out_dir: Union[str, Path, None] = None,
    splits: Sequence[str] = TEST_SPLITS,
    workers: int = 1,
) -> Dict[str, Any]:
    """Train and evaluate every entry for every seed; returns the results
    table (see :func:`format_table`)."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    jobs = [(e.label, e.config.to_dict(), int(s)) for e in matrix for s in seeds]
    out = str(out_dir) if out_dir is not None else None
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_run_member, l, c, s, corpus, out, tuple(splits)) for l, c, s in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_run_member(l, c, s, corpus, out, tuple(splits)) for l, c, s in jobs]

    rows = []
    for entry in matrix:
        mine = [r for r in results if r["label"] == entry.label]
        ok = [r for r in mine if r["status"] == "ok"]
        failed = len(ok) != len(mine)
        row = {
            "system": entry.label,
            "system_id": entry.config.system,
            "beta": entry.config.resolved_model().beta,
            "status": "failed" if failed else "ok",
            "seeds": [r["seed"] for r in mine],
            "mer": {s: [r["mer"][s] for r in ok] for s in splits},
            "median": {s: (None if failed else statistics.median(r["mer"][s] for r in ok)) for s in splits},
            "errors": [r["error"] for r in mine if r["status"] != "ok"],
        }
        rows.append(row)
    table = {
        "splits": list(splits),
        "seeds": list(seeds),
        "corpus_seed": matrix[0].config.corpus.seed if matrix else None,
        "rows": rows,
        "trends": trend_checks(rows),
        "reference": {k: dict(zip(("dev_cs_heavy", "dev_mono_heavy"), v)) for k, v in REFERENCE_MER.items()},
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(table, indent=1))
        (Path(out_dir) / "ablation.txt").write_text(format_table(table))
    return table


def trend_checks(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Directional comparisons against the baseline row, for the systems
    present in the table."""
    by_label = {r["system"]: r for r in rows}
    base = by_label.get("S0")
    checks = []
    for desc, sid, split, rel in TREND_CHECKS:
        row = by_label.get(sid)
        if base is None or row is None:
            continue
        b, v = base["median"].get(split), row["median"].get(split)
        holds = None
        if b is not None and v is not None:
            holds = v <= b if rel == "<=" else v >= b
        checks.append(
            {"check": desc, "system": sid, "split": split, "relation": rel, "value": v, "baseline": b, "holds": holds}
        )
    return checks


def _fmt(x: Optional[float]) -> str:
    return "-" if x is None else f"{x:.2f}"


def format_table(table: Dict[str, Any]) -> str:
    splits = table["splits"]
    header = ["system", "beta", "status"] + [f"{s} (median)" for s in splits] + [f"{s} (seeds)" for s in splits]
    lines = [header]
    for r in table["rows"]:
        lines.append(
            [r["system"], _fmt(r["beta"]), r["status"]]
            + [_fmt(r["median"][s]) for s in splits]
            + [" ".join(_fmt(v) for v in r["mer"][s]) or "-" for s in splits]
        )
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    out = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines]
    out.insert(1, "  ".join("-" * w for w in widths))
    if table["trends"]:
        out.append("")
        out.append("trend checks (median MER vs baseline S0):")
        for t in table["trends"]:
            verdict = {True: "HOLDS", False: "VIOLATED", None: "n/a"}[t["holds"]]
            out.append(
                f"  {t['check']}: {t['system']} {_fmt(t['value'])} {t['relation']} S0 {_fmt(t['baseline'])} -> {verdict}"
            )
    for r in table["rows"]:
        for e in r["errors"]:
            out.append(f"  failed run in {r['system']}: {e}")
    out.append("")
    out.append("published reference MER (CS-heavy / monolingual-heavy dev sets, real data):")
    for sid, ref in table["reference"].items():
        out.append(f"  {sid}: {ref['dev_cs_heavy']:.1f} / {ref['dev_mono_heavy']:.1f}")
    return "\n".join(out) + "\n"
