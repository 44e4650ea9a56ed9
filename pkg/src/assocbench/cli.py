"""Command-line entry point: build, refine, run, report, serve.

Configuration lives in one declarative JSON file; string values get
environment-variable interpolation (secrets never sit in the file), and
command-line flags override file values. Every artifact embeds the effective
config hash and seed so a run can be audited and replayed from its outputs.

Exit codes: 0 clean, 1 configuration error, 2 completed with transport
failures (logs are still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import builder, metrics, refine, runner
from .corpus import Corpus, CorpusError, load_manifest, write_manifest
from .modelio import load_backends
from .runner import TERMINAL_TRANSPORT

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TRANSPORT = 2


class ConfigError(Exception):
    pass


def _interpolate(value):
    if isinstance(value, str):
        return os.path.expandvars(value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    return value


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}")
    return _interpolate(raw)


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _effective_run_config(args: argparse.Namespace) -> dict:
    config = load_config(args.config)
    overrides = {
        "corpus": args.corpus,
        "seed": args.seed,
        "backend": args.backend,
        "kind": args.kind,
        "strategies": [args.strategy] if args.strategy else None,
        "concepts": [args.concepts.split(",")] if args.concepts else None,
        "rounds": args.rounds,
        "cap": args.cap,
        "examples": args.examples,
        "out": args.out,
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    config.setdefault("kind", "synchronous")
    config.setdefault("strategies", ["NoM"])
    config.setdefault("rounds", 1)
    config.setdefault("cap", builder.DEFAULT_CAP)
    config.setdefault("examples", 3)
    config.setdefault("seed", 0)
    config.setdefault("out", "out")
    config.setdefault("max_workers", 1)
    for key in ("corpus", "backend", "concepts", "backends"):
        if not config.get(key):
            raise ConfigError(f"run config is missing {key!r}")
    return config


def _load_corpus(config: dict, out_dir: Path | None = None) -> Corpus:
    report = out_dir / "validation_report.json" if out_dir is not None else None
    return load_manifest(config["corpus"], report_path=report)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _effective_run_config(args)
        out_dir = Path(config["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        corpus = _load_corpus(config, out_dir)
        clients = load_backends(config["backends"], corpus)
        backend_id = config["backend"]
        if backend_id not in clients:
            raise ConfigError(f"unknown backend id {backend_id!r}")
        groups = [list(g) if isinstance(g, list) else [g] for g in config["concepts"]]
        for group in groups:
            for concept in group:
                if concept not in corpus.vocabulary:
                    raise ConfigError(f"unknown concept {concept!r}")
    except (ConfigError, CorpusError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    client = clients[backend_id]
    digest = config_hash(config)
    kind = config["kind"]
    seed = config["seed"]
    log_dir = out_dir / "rounds"
    jobs: list[tuple[str, ...]] = []
    for group in groups:
        for strategy in config["strategies"]:
            jobs.append((tuple(group), strategy))

    def run_meta(strategy: str) -> dict:
        return {
            "backend": backend_id,
            "strategy": strategy,
            "config_sha256": digest,
            "seed": seed,
            "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }

    rounds: list[tuple[runner.RoundResult, dict]] = []
    singles: list[tuple[list[runner.StepRecord], str, dict]] = []
    transport_failures = 0

    def execute_cell(group: tuple[str, ...], strategy: str):
        tag = "-".join(group)
        if kind == builder.KIND_SINGLE_STEP:
            records = runner.run_single_step(
                corpus,
                group[0],
                client,
                strategy,
                n_trials=config["rounds"],
                seed=f"{seed}|{kind}|{tag}|{strategy}",
                example_count=config["examples"],
            )
            return ("single", group, strategy, records)
        results = []
        for i in range(config["rounds"]):
            plan = builder.make_round(
                corpus,
                kind,
                group,
                cap=config["cap"],
                seed=f"{seed}|{kind}|{tag}|{strategy}|{i}",
                example_count=config["examples"],
            )
            results.append(runner.run_chain(corpus, plan, client, strategy))
        return ("round", group, strategy, results)

    max_workers = int(config.get("max_workers", 1))
    try:
        if max_workers <= 1:
            outcomes = [execute_cell(g, s) for g, s in jobs]
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                futures = [pool.submit(execute_cell, g, s) for g, s in jobs]
                outcomes = [f.result() for f in futures]
    except (builder.BuilderError, CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    for mode, group, strategy, payload in outcomes:
        tag = "-".join(group)
        meta = run_meta(strategy)
        if mode == "single":
            path = log_dir / f"single_{tag}_{strategy}.json"
            runner.write_single_log(payload, group[0], path, meta)
            singles.append((payload, group[0], meta))
        else:
            for i, result in enumerate(payload):
                path = log_dir / f"{kind}_{tag}_{strategy}_{i:04d}.json"
                runner.write_round_log(result, path, meta)
                rounds.append((result, meta))
                if result.terminal == TERMINAL_TRANSPORT:
                    transport_failures += 1

    report_meta = {
        "config_sha256": digest,
        "seed": seed,
        "backend": backend_id,
        "kind": kind,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    report = metrics.build_report(rounds, singles, meta=report_meta)
    metrics.emit_report(report, "json", out_dir / "report.json")
    metrics.emit_report(report, "csv", out_dir / "report.csv")
    metrics.emit_report(report, "markdown", out_dir / "report.md")

    if transport_failures:
        print(
            f"completed with {transport_failures} transport-terminated rounds",
            file=sys.stderr,
        )
        return EXIT_TRANSPORT
    return EXIT_OK


def cmd_build(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        if args.corpus:
            config["corpus"] = args.corpus
        if args.seed is not None:
            config["seed"] = args.seed
        if args.out:
            config["out"] = args.out
        config.setdefault("seed", 0)
        config.setdefault("out", "out")
        config.setdefault("positives", 3)
        config.setdefault("negatives", 3)
        if args.positives is not None:
            config["positives"] = args.positives
        if args.negatives is not None:
            config["negatives"] = args.negatives
        if not config.get("corpus"):
            raise ConfigError("build config is missing 'corpus'")
        out_dir = Path(config["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        corpus = _load_corpus(config, out_dir)
    except (ConfigError, CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    digest = config_hash(config)
    seed = config["seed"]
    path = out_dir / "association_sets.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "schema": "assocbench.sets/1",
            "config_sha256": digest,
            "seed": seed,
            "positives": config["positives"],
            "negatives": config["negatives"],
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in corpus:
            sets = builder.build_sets(
                corpus,
                sample.id,
                config["positives"],
                config["negatives"],
                seed=f"{seed}|{sample.id}",
            )
            fh.write(
                json.dumps(
                    {
                        "anchor": sets.anchor,
                        "positives": list(sets.positives),
                        "negatives": list(sets.negatives),
                        "positives_short": sets.positives_short,
                        "negatives_short": sets.negatives_short,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    shared = builder.shared_concepts(corpus)
    (out_dir / "shared_concepts.json").write_text(
        json.dumps(
            {"config_sha256": digest, "concepts": sorted(shared.concepts)},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_refine(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        if args.corpus:
            config["corpus"] = args.corpus
        if args.out:
            config["out"] = args.out
        config.setdefault("out", "out")
        config.setdefault("min_pixels", refine.MIN_PIXELS_DEFAULT)
        if not config.get("corpus"):
            raise ConfigError("refine config is missing 'corpus'")
        out_dir = Path(config["out"]) / "refine"
        out_dir.mkdir(parents=True, exist_ok=True)
        corpus = _load_corpus(config, out_dir)
    except (ConfigError, CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    decisions: list[refine.RefinementDecision] = []
    kept = []
    for sample in corpus:
        decision = refine.resolution_filter(sample, config["min_pixels"])
        decisions.append(decision)
        if decision.verdict == refine.VERDICT_KEEP:
            kept.append(sample)

    if args.verify_primary or args.verify_fallback:
        try:
            if not (args.verify_primary and args.verify_fallback):
                raise ConfigError("verification needs both --verify-primary and --verify-fallback")
            clients = load_backends(config.get("backends", []), corpus)
            for cid in (args.verify_primary, args.verify_fallback):
                if cid not in clients:
                    raise ConfigError(f"unknown backend id {cid!r}")
        except (ConfigError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        kept, verify_decisions = refine.run_verification(
            kept,
            clients[args.verify_primary],
            clients[args.verify_fallback],
            corpus.vocabulary.kind,
            max_workers=int(config.get("max_workers", 1)),
        )
        decisions.extend(verify_decisions)

    if args.apply_reviews:
        try:
            review_decisions, _ = refine.import_review_decisions(
                args.apply_reviews, {s.id for s in kept}
            )
        except refine.RefineError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        decisions.extend(review_decisions)
        kept = refine.apply_review(kept, review_decisions)
    else:
        refine.export_review_queue(kept, out_dir / "review_queue.jsonl")

    refine.write_decision_log(decisions, out_dir / "decisions.jsonl")
    write_manifest(kept, corpus.vocabulary, out_dir / "refined_manifest.jsonl")
    print(f"kept {len(kept)} of {len(corpus)} samples")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if args.compare:
        try:
            a = json.loads(Path(args.compare[0]).read_text(encoding="utf-8"))
            b = json.loads(Path(args.compare[1]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        sys.stdout.write(metrics.compare_reports(a, b))
        return EXIT_OK
    try:
        if not args.logs:
            raise ConfigError("report needs --logs (or --compare)")
        rounds, singles = metrics.load_logs(args.logs)
    except (ConfigError, metrics.MetricsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    base_meta = rounds[0][1] if rounds else (singles[0][2] if singles else {})
    report_meta = {
        "config_sha256": base_meta.get("config_sha256", ""),
        "seed": base_meta.get("seed", ""),
        "backend": base_meta.get("backend", ""),
        "recomputed_from": str(args.logs),
    }
    report = metrics.build_report(rounds, singles, meta=report_meta)
    out_dir = Path(args.out or "out")
    metrics.emit_report(report, "json", out_dir / "report.json")
    metrics.emit_report(report, "csv", out_dir / "report.csv")
    metrics.emit_report(report, "markdown", out_dir / "report.md")
    print(f"wrote {out_dir / 'report.json'}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        if args.corpus:
            config["corpus"] = args.corpus
        if args.out:
            config["out"] = args.out
        config.setdefault("out", "out")
        server_cfg = dict(config.get("server", {}))
        if args.port is not None:
            server_cfg["port"] = args.port
        server_cfg.setdefault("host", "127.0.0.1")
        server_cfg.setdefault("port", 8000)
        if not config.get("corpus"):
            raise ConfigError("serve config is missing 'corpus'")
        corpus = _load_corpus(config)
    except (ConfigError, CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    from .server import create_app

    app = create_app(
        corpus,
        config["out"],
        images_root=server_cfg.get("images_root"),
        webui_dist=server_cfg.get("webui_dist"),
        default_cap=int(server_cfg.get("cap", builder.DEFAULT_CAP)),
        default_example_count=int(server_cfg.get("example_count", 3)),
    )
    import uvicorn

    uvicorn.run(app, host=server_cfg["host"], port=int(server_cfg["port"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="assocbench",
        description="Association-chain evaluation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="declarative JSON config file")
        p.add_argument("--corpus", help="manifest path (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")

    p_build = sub.add_parser("build", help="construct association sets from a manifest")
    common(p_build)
    p_build.add_argument("--seed", help="RNG seed")
    p_build.add_argument("--positives", type=int, help="positive set size K")
    p_build.add_argument("--negatives", type=int, help="negative set size L")
    p_build.set_defaults(func=cmd_build)

    p_refine = sub.add_parser("refine", help="run the data refinement pipeline")
    common(p_refine)
    p_refine.add_argument("--verify-primary", help="backend id for primary verification")
    p_refine.add_argument("--verify-fallback", help="backend id for fallback verification")
    p_refine.add_argument("--apply-reviews", help="import reviewer decisions from file")
    p_refine.set_defaults(func=cmd_refine)

    p_run = sub.add_parser("run", help="execute association rounds against a backend")
    common(p_run)
    p_run.add_argument("--seed", help="run seed")
    p_run.add_argument("--backend", help="backend id from the config")
    p_run.add_argument(
        "--kind", choices=builder.ROUND_KINDS, help="task kind"
    )
    p_run.add_argument("--concepts", help="comma-separated concept group")
    p_run.add_argument("--strategy", help="memory strategy")
    p_run.add_argument("--rounds", type=int, help="rounds (or single-step trials) per cell")
    p_run.add_argument("--cap", type=int, help="step cap per round")
    p_run.add_argument("--examples", type=int, help="ground-truth examples preloaded into memory")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="recompute metrics from round logs")
    p_report.add_argument("--logs", help="directory of round logs")
    p_report.add_argument("--out", help="output directory")
    p_report.add_argument(
        "--compare", nargs=2, metavar=("A", "B"), help="diff two report.json files"
    )
    p_report.set_defaults(func=cmd_report)

    p_serve = sub.add_parser("serve", help="start the human-test session server")
    common(p_serve)
    p_serve.add_argument("--port", type=int, help="listen port")
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
