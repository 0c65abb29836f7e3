"""Command-line entry point: ``qkg <command> [options]``.

Run settings resolve with precedence flag > environment (``QKG_*``) > the
``run:`` block of the YAML config. Commands that write a run directory also
write ``manifest.json`` (inputs with hashes, config hash, versions); wall-clock
data is kept out of it so reruns produce identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import qkg
from qkg import _accel

logger = logging.getLogger("qkg")


class CliError(Exception):
    """Reported as a one-line diagnostic with exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


# ---- configuration ----

ENV_PREFIX = "QKG_"

@dataclass(frozen=True)
class RunConfig:
    mode: str = "qkg"
    dataset: str | None = None
    graph: str | None = None
    constraints: str | None = None
    workers: int = 4
    turn_budget: int = 20
    out: str | None = None
    seed: int = 0

    _INTS = ("workers", "turn_budget", "seed")

    @classmethod
    def resolve(cls, flags: Mapping, env: Mapping[str, str], file_block: Mapping) -> "RunConfig":
        values = {}
        for name in cls.__dataclass_fields__:
            if name.startswith("_"):
                continue
            v = flags.get(name)
            if v is None:
                v = env.get(ENV_PREFIX + name.upper())
            if v is None:
                v = file_block.get(name)
            if v is not None:
                values[name] = int(v) if name in cls._INTS else str(v)
        return cls(**values)

    def require(self, *names: str) -> None:
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise CliError(f"--{name.replace('_', '-')} is required (flag, {ENV_PREFIX}{name.upper()} or config run.{name})")
            if name != "out" and not Path(value).exists():
                raise CliError(f"{name} path does not exist: {value}")


def _load_yaml(path: str | None) -> dict:
    if not path:
        return {}
    from qkg.llm.gateway import load_config
    if not Path(path).exists():
        raise CliError(f"config file does not exist: {path}")
    return load_config(path)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _versions() -> dict:
    import numpy
    out = {"qkg": qkg.__version__, "python": platform.python_version(), "numpy": numpy.__version__,
           "kernel_backend": _accel.BACKEND}
    if _accel.HAS_NUMBA:
        import numba
        out["numba"] = numba.__version__
    return out


def write_manifest(out_dir: Path, command: str, inputs: Mapping[str, str | None], config) -> None:
    files = {}
    for name, p in sorted(inputs.items()):
        if p and Path(p).is_file():
            files[name] = {"path": str(p), "sha256": _sha256(p)}
    manifest = {"command": command, "inputs": files, "config_hash": _config_hash(config),
                "config": config, "versions": _versions()}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                                           encoding="utf-8")


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise CliError(f"{what} is required")
    if not Path(path).exists():
        raise CliError(f"{what} does not exist: {path}")
    return path


def _gateway(config: Mapping, config_path: str | None, run_log=None):
    from qkg.llm.gateway import build_gateway
    base = Path(config_path).resolve().parent if config_path else None
    return build_gateway(config, run_log=run_log, base_dir=base)


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---- commands ----

def cmd_import_kg(args) -> int:
    from qkg.kg.store import load_graph, save_graph
    _require_file(args.input, "--input")
    store = load_graph(args.input, args.format, symmetrize=args.symmetrize)
    save_graph(store, args.out)
    _emit(json.dumps({"entities": len(store.entities), "triplets": len(store),
                      **store.load_stats}, sort_keys=True))
    return 0


def _stats_path(out: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".stats.json")


def cmd_extract_subgraph(args) -> int:
    from qkg.kg.store import load_graph, save_graph
    from qkg.kg.subgraph import build_subgraph, find_entity
    _require_file(args.graph, "--graph")
    store = load_graph(args.graph)
    target = int(args.target) if args.target.isdigit() and args.by_index else find_entity(store, args.target)
    sub = build_subgraph(store, target)
    save_graph(sub.merged, args.out, "jsonl")
    stats = sub.stats()
    _stats_path(args.out).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(" ".join(f"{k}={stats[k]}" for k in ("direct_triplets", "intermediate_entities",
                                               "indirect_triplets", "merged_triplets",
                                               "entities_with_target")))
    return 0


def cmd_annotate(args) -> int:
    from qkg.constraints import (CONTEXT_SENSITIVE_RELATIONS, annotate_relations,
                                 import_relation_facts, save_constraints)
    if args.import_facts:
        store = import_relation_facts(_require_file(args.import_facts, "--import-facts"))
    else:
        from qkg.kg.store import load_graph
        _require_file(args.graph, "--graph")
        config = _load_yaml(_require_file(args.config, "--config"))
        gateway = _gateway(config, args.config)
        if not gateway.has_role(args.role):
            raise CliError(f"config has no role {args.role!r}")
        store = annotate_relations(load_graph(args.graph), gateway, role=args.role,
                                   relation_filter=args.relations or CONTEXT_SENSITIVE_RELATIONS,
                                   workers=args.workers)
    save_constraints(store, args.out)
    if store.failures:
        fail_path = Path(args.out).with_suffix(".failures.jsonl")
        with open(fail_path, "w", encoding="utf-8") as fh:
            for f in store.failures:
                fh.write(json.dumps(f, ensure_ascii=False) + "\n")
    _emit(json.dumps(store.summary(), sort_keys=True))
    return 0


def _parse_stages(spec: str) -> list[int]:
    stages = set()
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            stages.update(range(int(lo), int(hi) + 1))
        elif part:
            stages.add(int(part))
    if not stages or not stages <= {1, 2, 3, 4}:
        raise CliError(f"--stages must name stages 1-4, got {spec!r}")
    return sorted(stages)


def cmd_build_dataset(args) -> int:
    from qkg import dataset as ds
    from qkg.kg.store import load_graph
    from qkg.pipeline import save_dataset
    stages = _parse_stages(args.stages)
    out = Path(args.out_dir)
    # validate everything each stage needs before writing anything
    if 1 in stages:
        _require_file(args.candidates, "--candidates")
        _require_file(args.concept_vectors, "--concept-vectors")
        _require_file(args.text_vectors, "--text-vectors")
    if 2 in stages or 3 in stages:
        _require_file(args.graph, "--graph")
    if args.hierarchy:
        _require_file(args.hierarchy, "--hierarchy")
    first = stages[0]
    if first > 1:
        _require_file(str(out / f"stage{first - 1}.jsonl"), f"stage {first - 1} output")
    config = _load_yaml(args.config)
    gateway = _gateway(config, args.config) if config else None
    out.mkdir(parents=True, exist_ok=True)

    cands = ds.read_candidates(args.candidates if first == 1 else out / f"stage{first - 1}.jsonl")
    stats = {"candidates_in": len(cands)}
    graph = load_graph(args.graph) if args.graph else None
    samples = None
    for stage in stages:
        if stage == 1:
            cids, cvec = ds.load_vectors(args.concept_vectors)
            tids, tvec = ds.load_vectors(args.text_vectors)
            index = ds.CosineConceptIndex(cids, cvec, ds.TableEmbedder(tids, tvec))
            cands = ds.stage1(cands, index, gateway, args.extract_role, args.min_score, args.workers)
            stats["stage1_unresolved_mentions"] = sum(not g.resolved for c in cands for g in c.grounded)
        elif stage == 2:
            hierarchy = ds.load_hierarchy(args.hierarchy) if args.hierarchy else {}
            cands = ds.stage2(cands, graph, hierarchy)
            stats["stage2_aligned_mentions"] = sum(g.aligned for c in cands for g in c.grounded)
        elif stage == 3:
            stats["source_histogram_before"] = ds.source_histogram(c.sample for c in cands)
            cands = ds.stage3(cands, graph, args.k)
            stats["stage3_selected"] = len(cands)
        elif stage == 4:
            samples = ds.stage4(cands, gateway, args.context_role, args.workers)
        if stage < 4:
            ds.write_candidates(cands, out / f"stage{stage}.jsonl")
    if samples is not None:
        save_dataset(samples, out / "dataset.jsonl")
        stats["source_histogram_after"] = ds.source_histogram(samples)
        stats["dataset_size"] = len(samples)
    (out / "build_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, "build-dataset",
                   {"candidates": args.candidates, "graph": args.graph, "hierarchy": args.hierarchy,
                    "concept_vectors": args.concept_vectors, "text_vectors": args.text_vectors,
                    "config": args.config},
                   {"stages": stages, "k": args.k, "min_score": args.min_score})
    _emit(json.dumps({k: v for k, v in stats.items() if not isinstance(v, dict)}, sort_keys=True))
    return 0


def cmd_run_eval(args) -> int:
    from qkg.constraints import load_constraints
    from qkg.kg.store import load_graph
    from qkg.pipeline import EvalConfig, load_dataset, run_evaluation
    file_cfg = _load_yaml(args.config)
    rc = RunConfig.resolve(vars(args), os.environ, file_cfg.get("run") or {})
    rc.require("dataset", "out")
    if rc.mode not in ("none", "kg", "qkg"):
        raise CliError(f"mode must be none, kg or qkg, got {rc.mode!r}")
    if rc.mode != "none":
        rc.require("graph")
    if rc.mode == "qkg" and rc.constraints:
        rc.require("constraints")
    if not file_cfg.get("roles"):
        raise CliError("config has no roles")
    roles = file_cfg.get("pipeline") or {}
    cfg = EvalConfig(mode=rc.mode, workers=rc.workers, turn_budget=rc.turn_budget,
                     reasoner_role=roles.get("reasoner_role", "reasoner"),
                     validator_role=roles.get("validator_role", "validator"),
                     context_role=roles.get("context_role"), judge_role=roles.get("judge_role"),
                     iterations=int(roles.get("iterations", 1)))
    samples = load_dataset(rc.dataset)
    graph = load_graph(rc.graph) if rc.graph and rc.mode != "none" else None
    cstore = load_constraints(rc.constraints) if rc.constraints and rc.mode == "qkg" else None
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    gateway = _gateway(file_cfg, args.config, run_log=out / "exchanges.jsonl" if args.log_exchanges else None)
    summary = run_evaluation(samples, gateway, cfg, out, graph, cstore, resume=not args.no_resume)
    safe_cfg = {"run": asdict(rc), "pipeline": roles,
                "roles": {k: {kk: vv for kk, vv in v.items() if kk != "api_key"}
                          for k, v in (file_cfg.get("roles") or {}).items()},
                "backend": file_cfg.get("backend")}
    write_manifest(out, "run-eval", {"dataset": rc.dataset, "graph": rc.graph,
                                     "constraints": rc.constraints, "config": args.config}, safe_cfg)
    _emit(json.dumps(summary.to_dict(), sort_keys=True))
    return 0


def _results_path(p: str) -> str:
    path = Path(p)
    if path.is_dir():
        path = path / "results.csv"
    return _require_file(str(path), "per-sample CSV")


def cmd_compare(args) -> int:
    from qkg.pipeline import compare_runs
    from qkg.stats.mcnemar import format_p, mcnemar_exact
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        table = compare_runs(_results_path(args.a), _results_path(args.b), args.column_a, args.column_b)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    p = mcnemar_exact(table.b, table.c)
    _emit(f"N={table.n} b={table.b} c={table.c} p={format_p(p)}")
    return 0


def cmd_mcnemar(args) -> int:
    from qkg.stats.mcnemar import format_p, mcnemar_exact
    if args.b < 0 or args.c < 0:
        raise CliError("--b and --c must be non-negative")
    p = mcnemar_exact(args.b, args.c)
    _emit(repr(p) if args.exact else format_p(p))
    return 0


def _read_records(run_dir: Path):
    from qkg.pipeline import EvalRecord
    path = _require_file(str(run_dir / "records.jsonl"), "records.jsonl")
    with open(path, encoding="utf-8") as fh:
        return [EvalRecord.from_dict(json.loads(l)) for l in fh if l.strip()]


def cmd_classify_leakage(args) -> int:
    from qkg.pipeline import C2W, W2C
    from qkg.stats.leakage import (class_counts, classify_case, decisive_evidence,
                                   relabel_unclassified, write_classification_csv)
    run = Path(args.run)
    records = [r for r in _read_records(run) if r.revision in (W2C, C2W) and r.validation_report]
    gateway = None
    if args.relabel:
        config = _load_yaml(_require_file(args.config, "--config"))
        gateway = _gateway(config, args.config)
        if not gateway.has_role(args.role):
            raise CliError(f"config has no role {args.role!r}")
    cases = [classify_case(r) for r in records]
    if gateway is not None:
        evidence = {r.sample_id: decisive_evidence(r, r.revision) for r in records}
        cases = relabel_unclassified(cases, evidence, gateway, role=args.role, workers=args.workers)
    out = Path(args.out) if args.out else run / "classification.csv"
    write_classification_csv(cases, out)
    _emit(json.dumps({"W->C": class_counts(cases, W2C), "C->W": class_counts(cases, C2W)}, sort_keys=True))
    return 0


def cmd_adjust(args) -> int:
    from qkg.pipeline import read_results_csv
    from qkg.stats.leakage import (adjusted_accuracy, adjustment_counts, leakage_adjusted_paired_test,
                                   read_classification_csv)
    from qkg.stats.mcnemar import format_p
    if args.final_correct is not None:
        if args.n is None:
            raise CliError("--n is required with --final-correct")
        _emit(f"{adjusted_accuracy(args.final_correct, args.n, args.leak, args.ctx):.4f}")
        return 0
    if not args.run:
        raise CliError("give --run (with --labels) or --final-correct/--n/--leak/--ctx")
    rows = read_results_csv(_results_path(args.run))
    labels = read_classification_csv(_require_file(args.labels or str(Path(args.run) / "classification.csv"),
                                                   "--labels"))
    leak, ctx = adjustment_counts(labels)
    final = sum(bool(r["final_correct"]) for r in rows)
    line = f"adjusted={adjusted_accuracy(final, len(rows), leak, ctx):.4f} leak={leak} ctx={ctx}"
    if args.run_b:
        rows_b = read_results_csv(_results_path(args.run_b))
        labels_b = read_classification_csv(_require_file(
            args.labels_b or str(Path(args.run_b) / "classification.csv"), "--labels-b"))
        test = leakage_adjusted_paired_test({r["sample_id"]: bool(r["final_correct"]) for r in rows},
                                            {r["sample_id"]: bool(r["final_correct"]) for r in rows_b},
                                            labels, labels_b)
        line += f" N={test.n} b={test.b} c={test.c} p={format_p(test.p_value)}"
    _emit(line)
    return 0


REPORT_COLUMNS = ("run", "mode", "n", "initial_accuracy", "final_accuracy", "adjusted_accuracy",
                  "revised", "revised_pct", "w2c", "c2w")


def cmd_report(args) -> int:
    from qkg.pipeline import read_results_csv, summarize
    from qkg.stats.leakage import adjusted_accuracy, adjustment_counts, read_classification_csv
    rows_out = []
    for run in args.runs:
        run_dir = Path(run)
        results = read_results_csv(_results_path(run))
        s = summarize(results, results[0]["mode"] if results else "")
        adj = ""
        labels = run_dir / "classification.csv"
        if labels.exists():
            leak, ctx = adjustment_counts(read_classification_csv(labels))
            adj = f"{adjusted_accuracy(s.final_correct, s.n, leak, ctx):.4f}"
        rows_out.append({"run": run_dir.name, "mode": s.mode, "n": s.n,
                         "initial_accuracy": f"{s.initial_accuracy:.4f}",
                         "final_accuracy": f"{s.final_accuracy:.4f}", "adjusted_accuracy": adj,
                         "revised": s.revised, "revised_pct": f"{s.revised_pct:.2f}",
                         "w2c": s.w2c, "c2w": s.c2w})
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows_out)) for c in REPORT_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)]
    lines += ["  ".join(str(r[c]).ljust(widths[c]) for c in REPORT_COLUMNS) for r in rows_out]
    _emit("\n".join(l.rstrip() for l in lines))
    if args.csv:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows_out)
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
    return 0


# ---- parser ----

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qkg", description="Context-aware knowledge-graph validation for medical QA.")
    p.add_argument("--version", action="version", version=f"qkg {qkg.__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("import-kg", help="convert a graph export to the native jsonl/npz format")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["csv", "jsonl", "npz"], help="input format (default: from extension)")
    s.add_argument("--out", required=True, help="output path (.jsonl, .csv or .npz)")
    s.add_argument("--symmetrize", action="store_true", help="add the reverse of every edge")
    s.set_defaults(func=cmd_import_kg)

    s = sub.add_parser("extract-subgraph", help="two-layer subgraph around a target entity")
    s.add_argument("--graph", required=True)
    s.add_argument("--target", required=True, help="source id such as MONDO:5015, or an index with --by-index")
    s.add_argument("--by-index", action="store_true")
    s.add_argument("--out", required=True, help="subgraph JSONL; statistics go to <out>.stats.json")
    s.set_defaults(func=cmd_extract_subgraph)

    s = sub.add_parser("annotate", help="generate or import per-relation constraint annotations")
    s.add_argument("--graph")
    s.add_argument("--config")
    s.add_argument("--role", default="annotator")
    s.add_argument("--relations", nargs="+", help="relation types to annotate")
    s.add_argument("--import-facts", help="import an existing relation-facts file instead of calling an LLM")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("build-dataset", help="ground, align, rank and contextualise candidate QA samples")
    s.add_argument("--candidates", help="candidate QA JSONL (stage 1 input)")
    s.add_argument("--graph")
    s.add_argument("--concept-vectors", help="JSONL of concept id vectors")
    s.add_argument("--text-vectors", help="JSONL of mention text vectors")
    s.add_argument("--hierarchy", help="child,parent concept edge list")
    s.add_argument("--config", help="YAML with roles for entity and context extraction")
    s.add_argument("--extract-role", default="entity-extractor")
    s.add_argument("--context-role", default=None)
    s.add_argument("--min-score", type=float, default=None)
    s.add_argument("--k", type=int, default=2788, help="samples kept after ranking")
    s.add_argument("--stages", default="1-4", help="e.g. 1-4, 3,4")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("run-eval", help="answer, validate and reconsider every sample")
    s.add_argument("--mode", choices=["none", "kg", "qkg"])
    s.add_argument("--dataset")
    s.add_argument("--graph", help="validation (sub)graph")
    s.add_argument("--constraints", help="constraint annotations JSONL (qkg mode)")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.add_argument("--turn-budget", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-resume", action="store_true", help="start over instead of skipping finished samples")
    s.add_argument("--log-exchanges", action="store_true", help="append every LLM exchange to exchanges.jsonl")
    s.set_defaults(func=cmd_run_eval)

    s = sub.add_parser("compare", help="paired McNemar comparison of two per-sample CSVs")
    s.add_argument("--a", required=True, help="run directory or results.csv")
    s.add_argument("--b", required=True)
    s.add_argument("--column-a", default="final_correct", choices=["initial_correct", "final_correct"])
    s.add_argument("--column-b", default="final_correct", choices=["initial_correct", "final_correct"])
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("mcnemar", help="exact McNemar p-value from discordant counts")
    s.add_argument("--b", type=int, required=True)
    s.add_argument("--c", type=int, required=True)
    s.add_argument("--exact", action="store_true", help="print the full float instead of two significant digits")
    s.set_defaults(func=cmd_mcnemar)

    s = sub.add_parser("classify-leakage", help="label W->C and C->W revisions by their decisive evidence")
    s.add_argument("--run", required=True, help="run directory with records.jsonl")
    s.add_argument("--out", help="per-case CSV (default <run>/classification.csv)")
    s.add_argument("--relabel", action="store_true", help="ask an LLM to label rules-unclassified cases")
    s.add_argument("--config")
    s.add_argument("--role", default="patient-context-llm")
    s.add_argument("--workers", type=int, default=4)
    s.set_defaults(func=cmd_classify_leakage)

    s = sub.add_parser("adjust", help="leakage-adjusted accuracy and paired test")
    s.add_argument("--run")
    s.add_argument("--labels")
    s.add_argument("--run-b")
    s.add_argument("--labels-b")
    s.add_argument("--final-correct", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--leak", type=int, default=0)
    s.add_argument("--ctx", type=int, default=0)
    s.set_defaults(func=cmd_adjust)

    s = sub.add_parser("report", help="summary table over run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--csv", help="also write the table as CSV")
    s.set_defaults(func=cmd_report)
    return p


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            raise CliError("no command given")
        return args.func(args)
    except CliError as exc:
        print(f"qkg: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"qkg: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
