"""Command-line entry point: index, synthesize, refine, eval, inspect, demo."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Sequence

from .llm import Gateway, GatewayError, MalformedScript, RemoteBackend, ScriptedBackend, load_script
from .model import (
    BehaviorLog,
    RawTrajectory,
    Rubric,
    RunManifest,
    TrajectoryStatus,
    ValidationError,
    canonical_json,
    iter_jsonl,
    write_jsonl,
)
from .race import BenchmarkItem, EmptyBatch, benchmark
from .refinement import FilterPolicy, export_sft, refine_batch
from .synthesis import (
    EmptyBehaviorLog,
    MalformedRubric,
    MalformedUserAgentReply,
    SessionLimits,
    final_report,
    generate_persona_query,
    generate_rubric,
    run_research_session,
)
from .templates import DEFAULT_DIR, MissingTemplate, TemplateSet
from .tools import Catalog, CorpusError, FixtureWeb, LiveWeb, ToolEnvironment, ingest_corpus

logger = logging.getLogger("prodresearch")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TOTAL_FAILURE = 3

DEMO_DIR = Path(__file__).resolve().parent / "data" / "demo"
DEMO_DATE = "2025-01-15"


class UsageError(Exception):
    """Bad arguments or unreadable inputs; maps to exit code 2."""


@dataclass
class CliConfig:
    corpus_path: str | None = None
    templates_dir: str = str(DEFAULT_DIR)
    backend: dict[str, Any] = field(default_factory=dict)
    limits: SessionLimits = field(default_factory=SessionLimits)
    tau: int = 7
    workers: int = 1
    seed: int = 0
    output_dir: str = "out"
    web_path: str | None = None
    current_date: str | None = None
    token_budget: int | None = None

    def public(self) -> dict[str, Any]:
        """Config as recorded in manifests: no secrets, no machine-specific paths beyond what was given."""
        return {
            "backend": {k: v for k, v in self.backend.items() if k != "api_key"},
            "limits": self.limits.to_dict(),
            "tau": self.tau,
            "workers": self.workers,
            "seed": self.seed,
            "current_date": self.current_date,
            "token_budget": self.token_budget,
        }


def parse_backend(spec: str) -> dict[str, Any]:
    """``scripted:PATH`` or ``remote:MODEL@ENDPOINT``."""
    kind, _, rest = spec.partition(":")
    if kind == "scripted" and rest:
        return {"kind": "scripted", "path": rest}
    if kind == "remote" and "@" in rest:
        model, _, endpoint = rest.partition("@")
        return {"kind": "remote", "model": model, "endpoint": endpoint}
    raise UsageError(f"bad --backend {spec!r}; use scripted:PATH or remote:MODEL@ENDPOINT")


def load_config(args: argparse.Namespace) -> CliConfig:
    cfg = CliConfig()
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        for key in ("corpus_path", "templates_dir", "tau", "workers", "seed", "output_dir", "web_path",
                    "current_date", "token_budget"):
            if key in doc:
                setattr(cfg, key, doc[key])
        if "backend" in doc:
            cfg.backend = parse_backend(doc["backend"]) if isinstance(doc["backend"], str) else dict(doc["backend"])
        if "limits" in doc:
            try:
                cfg.limits = SessionLimits(**doc["limits"])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad limits in config: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if getattr(args, "tau", None) is not None:
        cfg.tau = args.tau
    if args.backend:
        cfg.backend = parse_backend(args.backend)
    if args.out:
        cfg.output_dir = args.out
    if cfg.workers < 1:
        raise UsageError("--workers must be >= 1")
    return cfg


def make_gateway(cfg: CliConfig) -> Gateway:
    kind = cfg.backend.get("kind")
    if kind == "scripted":
        try:
            backend: Any = ScriptedBackend(load_script(cfg.backend["path"]))
        except OSError as exc:
            raise UsageError(f"NotFound: script {cfg.backend['path']}: {exc.strerror}") from None
        except (MalformedScript, ValueError) as exc:
            raise UsageError(f"bad script: {exc}") from None
    elif kind == "remote":
        backend = RemoteBackend(cfg.backend["endpoint"], cfg.backend["model"])
    else:
        raise UsageError("no backend configured; pass --backend scripted:PATH or remote:MODEL@ENDPOINT")
    return Gateway(backend, token_budget=cfg.token_budget)


def effective_workers(cfg: CliConfig) -> int:
    # scripted replies are matched by per-agent call order, so calls must stay sequential
    if cfg.backend.get("kind") == "scripted" and cfg.workers > 1:
        logger.info("scripted backend: running with 1 worker instead of %d", cfg.workers)
        return 1
    return cfg.workers


def load_templates(cfg: CliConfig) -> TemplateSet:
    try:
        return TemplateSet(cfg.templates_dir)
    except MissingTemplate as exc:
        raise UsageError(str(exc)) from None


def load_catalog(path: str | Path) -> Catalog:
    """A saved index (``.json``) or a raw corpus (``.jsonl``)."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"NotFound: {p}")
    try:
        return Catalog.load(p) if p.suffix == ".json" else ingest_corpus(p)
    except CorpusError as exc:
        raise UsageError(str(exc)) from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot load catalog {p}: {exc}") from None


def _out_dir(cfg: CliConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _emit(args: argparse.Namespace, doc: dict[str, Any], text: str) -> None:
    print(json.dumps(doc, sort_keys=True) if args.json else text)


# ---------------------------------------------------------------------------
# commands


def cmd_index(args: argparse.Namespace, cfg: CliConfig) -> int:
    corpus = args.corpus or cfg.corpus_path
    if not corpus:
        raise UsageError("index needs a corpus path")
    if not Path(corpus).is_file():
        raise UsageError(f"NotFound: {corpus}")
    try:
        catalog = ingest_corpus(corpus)
    except CorpusError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(cfg) / "catalog.json"
    catalog.save(out)
    doc = {"doc_count": catalog.index.doc_count, "avg_doc_length": catalog.index.average_doc_length,
           "catalog": str(out)}
    _emit(args, doc, f"indexed {len(catalog)} products (avg_doc_length {catalog.index.average_doc_length:.2f})")
    return EXIT_OK


def _read_users(path: str) -> list[BehaviorLog]:
    if not Path(path).is_file():
        raise UsageError(f"NotFound: {path}")
    logs = []
    for lineno, line in iter_jsonl(path):
        try:
            logs.append(BehaviorLog.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
            logger.warning("users line %d skipped: %s", lineno, exc)
    return logs


def _synthesize_one(log: BehaviorLog, env: ToolEnvironment, gateway: Gateway, templates: TemplateSet,
                    cfg: CliConfig, current_date: str) -> RawTrajectory | None:
    try:
        persona, query = generate_persona_query(log, gateway, templates)
        rubric = generate_rubric(persona, query, gateway, templates)
    except (EmptyBehaviorLog, MalformedUserAgentReply, MalformedRubric, ValidationError, GatewayError) as exc:
        logger.warning("user %s: query generation failed: %s", log.user_id, exc)
        return None
    return run_research_session(query, persona, rubric, env, gateway, cfg.limits, templates=templates,
                                current_date=current_date)


def _run_id(stage: str, cfg: CliConfig, *inputs: str) -> str:
    h = hashlib.sha256(canonical_json({"stage": stage, "config": cfg.public(), "inputs": inputs}).encode())
    return f"{stage}-{h.hexdigest()[:12]}"


def cmd_synthesize(args: argparse.Namespace, cfg: CliConfig) -> int:
    if args.n is not None and args.n <= 0:
        raise UsageError("-n must be a positive number of users")
    catalog = load_catalog(args.catalog or cfg.corpus_path or "")
    web_path = args.web or cfg.web_path
    if web_path:
        if not Path(web_path).is_file():
            raise UsageError(f"NotFound: {web_path}")
        web: Any = FixtureWeb.load(web_path)
    else:
        web = LiveWeb()
    templates = load_templates(cfg)
    logs = _read_users(args.users)
    if args.n is not None:
        logs = logs[: args.n]
    if not logs:
        raise UsageError("no usable users in input")
    gateway = make_gateway(cfg)
    env = ToolEnvironment(catalog, web, gateway, templates)
    current_date = cfg.current_date or date.today().isoformat()
    started = time.monotonic()
    workers = effective_workers(cfg)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda lg: _synthesize_one(lg, env, gateway, templates, cfg, current_date), logs))
    else:
        results = [_synthesize_one(lg, env, gateway, templates, cfg, current_date) for lg in logs]

    trajectories = sorted((t for t in results if t is not None), key=lambda t: t.query.query_id)
    run_id = _run_id("synthesize", cfg, args.users)
    for t in trajectories:
        t.provenance["run_id"] = run_id
    manifest = RunManifest(run_id, cfg.public(), cfg.seed, attempted=len(logs))
    manifest.completed = sum(t.status is TrajectoryStatus.COMPLETED for t in trajectories)
    manifest.failed = manifest.attempted - manifest.completed
    manifest.usage = gateway.usage()
    assert manifest.check_counts()

    out = _out_dir(cfg)
    write_jsonl(out / "raw.jsonl", (t.to_dict() for t in trajectories))
    mdoc = manifest.to_dict()
    mdoc.pop("timing")
    _write_json(out / "manifest.json", mdoc)
    # wall-clock numbers live apart from the manifest so reruns stay byte-identical
    if getattr(args, "record_timing", True):
        _write_json(out / "timing.json", {"run_id": run_id, "wall_seconds": round(time.monotonic() - started, 3)})
    summary = mdoc["counts"]
    _emit(args, summary, f"synthesized {manifest.completed}/{manifest.attempted} completed, "
                         f"{manifest.failed} failed -> {out / 'raw.jsonl'}")
    return EXIT_OK if manifest.completed else EXIT_TOTAL_FAILURE


def _read_raw(path: str) -> tuple[list[RawTrajectory], int]:
    if not Path(path).is_file():
        raise UsageError(f"NotFound: {path}")
    raws, bad = [], 0
    try:
        lines = list(iter_jsonl(path))
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    for lineno, line in lines:
        try:
            raws.append(RawTrajectory.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            logger.warning("%s line %d skipped: %s", path, lineno, exc)
            bad += 1
    return raws, bad


def cmd_refine(args: argparse.Namespace, cfg: CliConfig) -> int:
    raws, bad = _read_raw(args.raw)
    templates = load_templates(cfg)
    gateway = make_gateway(cfg)
    policy = FilterPolicy(cfg.tau)
    result = refine_batch(sorted(raws, key=lambda t: t.query.query_id), policy, gateway, templates)
    out = _out_dir(cfg)
    write_jsonl(out / "refined.jsonl", (rt.to_dict() for rt in result.refined))
    export_sft(result.refined, out / "sft.jsonl")
    report = result.stats.to_dict()
    report["unreadable_lines"] = bad
    report["tau"] = cfg.tau
    report["usage"] = gateway.usage()
    _write_json(out / "refine_report.json", report)
    _emit(args, report, f"refined {report['output_count']} of {report['input_count']} trajectories "
                        f"(dropped_by_length={report['dropped_by_length']}, dropped_failed={report['dropped_failed']}, "
                        f"skipped_lines={bad})")
    if bad and not raws:
        return EXIT_USAGE
    return EXIT_OK


def _read_rubrics(path: str | None) -> dict[str, tuple[Rubric, str]]:
    """Rubrics keyed by rubric_ref; lines are {rubric_ref, rubric, question?} or raw trajectories."""
    if path is None:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"NotFound: {path}")
    out: dict[str, tuple[Rubric, str]] = {}
    for lineno, line in iter_jsonl(path):
        try:
            doc = json.loads(line)
            if "rubric_ref" in doc:
                out[doc["rubric_ref"]] = (Rubric.from_dict(doc["rubric"]), doc.get("question", ""))
            else:
                t = RawTrajectory.from_dict(doc)
                out[t.query.query_id] = (t.rubric, t.query.text)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            logger.warning("rubrics line %d skipped: %s", lineno, exc)
    return out


def cmd_eval(args: argparse.Namespace, cfg: CliConfig) -> int:
    if not Path(args.pairs).is_file():
        raise UsageError(f"NotFound: {args.pairs}")
    rubrics = _read_rubrics(args.rubrics)
    catalog = load_catalog(args.catalog or cfg.corpus_path or "")
    items: list[BenchmarkItem] = []
    for lineno, line in iter_jsonl(args.pairs):
        try:
            doc = json.loads(line)
            qid = str(doc["query_id"])
            ref = str(doc.get("rubric_ref", qid))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            logger.warning("pairs line %d skipped: %s", lineno, exc)
            continue
        rubric, question = rubrics.get(ref, (None, ""))
        items.append(BenchmarkItem(qid, str(doc.get("target_report", "")), str(doc.get("reference_report", "")),
                                   rubric, str(doc.get("question", question)),
                                   None if rubric is not None else f"missing rubric {ref!r}"))
    items.sort(key=lambda it: it.query_id)
    gateway = make_gateway(cfg)
    try:
        report = benchmark(items, set(catalog.records), gateway, templates=load_templates(cfg), seed=cfg.seed,
                           workers=effective_workers(cfg))
    except EmptyBatch as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(cfg)
    write_jsonl(out / "eval_items.jsonl", (it.to_dict() for it in report.items))
    _write_json(out / "eval_summary.json", report.summary)
    _emit(args, report.summary, report.table())
    return EXIT_OK


def render_timeline(t: RawTrajectory) -> str:
    lines = [f"trajectory {t.trajectory_id}  status={t.status.value}", f"query: {t.query.text}", "", "state timeline:"]
    for e in t.state_log:
        mark = "approve" if e.approved else "REJECT "
        ref = f" -> msg {e.message_index}" if e.message_index is not None else ""
        lines.append(f"  step {e.step_index:>2}  {e.state.value:<8} {e.phase.value:<16} {mark}  {e.summary}{ref}")
    lines += ["", "messages:"]
    for i, m in enumerate(t.messages):
        tag = m.state_tag.value if m.state_tag else "-"
        first = m.content.strip().splitlines()[0] if m.content.strip() else ""
        lines.append(f"  [{i:>2}] {m.role.value:<10} {tag:<8} {first[:90]}")
    if t.intermediate_reports:
        lines += ["", "intermediate reports:"]
        for r in t.intermediate_reports:
            lines.append(f"  round {r.round}: {r.report_text[:90]}")
    return "\n".join(lines)


def cmd_inspect(args: argparse.Namespace, cfg: CliConfig) -> int:
    raws, _ = _read_raw(args.trajectories)
    for t in raws:
        if t.trajectory_id == args.id or t.query.query_id == args.id:
            print(json.dumps(t.to_dict(), sort_keys=True, indent=2) if args.json else render_timeline(t))
            return EXIT_OK
    raise UsageError(f"unknown trajectory id {args.id!r}")


def cmd_demo(args: argparse.Namespace, cfg: CliConfig) -> int:
    """index -> synthesize -> refine -> eval on the bundled scripted fixtures."""
    root = Path(cfg.output_dir)
    if not cfg.backend:
        cfg.backend = {"kind": "scripted", "path": str(DEMO_DIR / "script.jsonl")}
    cfg.current_date = cfg.current_date or DEMO_DATE
    quiet = argparse.Namespace(**{**vars(args), "json": False, "record_timing": False})

    def stage(name: str) -> CliConfig:
        return CliConfig(**{**cfg.__dict__, "output_dir": str(root / name)})

    steps = [
        (cmd_index, argparse.Namespace(**vars(quiet), corpus=str(DEMO_DIR / "corpus.jsonl")), stage("index")),
        (cmd_synthesize, argparse.Namespace(**vars(quiet), users=str(DEMO_DIR / "users.jsonl"), n=None,
                                            catalog=str(root / "index" / "catalog.json"),
                                            web=str(DEMO_DIR / "web.jsonl")), stage("synth")),
        (cmd_refine, argparse.Namespace(**vars(quiet), raw=str(root / "synth" / "raw.jsonl")), stage("refine")),
    ]
    for fn, ns, stage_cfg in steps:
        code = fn(ns, stage_cfg)
        if code != EXIT_OK:
            return code

    # the framework's approved report is the reference; the bundled report is the target
    raws, _ = _read_raw(str(root / "synth" / "raw.jsonl"))
    references = {t.query.query_id: final_report(t) for t in raws}
    pairs = []
    for _, line in iter_jsonl(DEMO_DIR / "targets.jsonl"):
        doc = json.loads(line)
        ref = references.get(doc["query_id"])
        if ref:
            pairs.append({"query_id": doc["query_id"], "target_report": doc["target_report"],
                          "reference_report": ref, "rubric_ref": doc["query_id"]})
    eval_dir = root / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(eval_dir / "pairs.jsonl", pairs)
    ns = argparse.Namespace(**vars(args), pairs=str(eval_dir / "pairs.jsonl"),
                            rubrics=str(root / "synth" / "raw.jsonl"), catalog=str(root / "index" / "catalog.json"))
    return cmd_eval(ns, stage("eval"))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for all randomized choices")
    common.add_argument("--workers", type=int, help="concurrent sessions / judge items")
    common.add_argument("--backend", help="scripted:PATH or remote:MODEL@ENDPOINT")
    common.add_argument("--out", help="output directory")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prodresearch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("index", parents=[common], help="ingest a product corpus and build the BM25 index")
    s.add_argument("corpus", nargs="?")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("synthesize", parents=[common], help="generate queries and run supervised sessions")
    s.add_argument("users", help="line-delimited user behavior logs")
    s.add_argument("-n", type=int, help="number of users to process")
    s.add_argument("--catalog", help="catalog.json from `index`, or a corpus .jsonl")
    s.add_argument("--web", help="web fixture .jsonl (omit for live web)")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("refine", parents=[common], help="length filter and reflective internalization")
    s.add_argument("raw", help="raw trajectories .jsonl")
    s.add_argument("--tau", type=int, help="minimum assistant turns to keep (default 7)")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("eval", parents=[common], help="RACE and E.Prod benchmark over report pairs")
    s.add_argument("pairs", help="line-delimited {query_id, target_report, reference_report, rubric_ref}")
    s.add_argument("--rubrics", help="rubrics .jsonl or raw trajectories .jsonl")
    s.add_argument("--catalog", help="catalog.json or corpus .jsonl")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", parents=[common], help="print a trajectory's state timeline")
    s.add_argument("trajectories")
    s.add_argument("id", help="trajectory_id or query_id")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("demo", parents=[common], help="run the full scripted pipeline on bundled fixtures")
    s.set_defaults(func=cmd_demo)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
