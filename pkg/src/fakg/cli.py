"""``fakg`` command-line entry point.

Exit codes are shared by every subcommand::

    0  success
    2  usage or input error
    3  validation findings
    4  graph load / integrity failure
    5  remote service failure

Machine output goes to standard output (or ``--output``); logs go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .graph import (
    GraphError,
    UnknownEntityError,
    UnknownLabelError,
    ego_subgraph,
    read_graph,
    reference_graph,
    validate_graph,
)
from .grounding import GroundingMode, StubVerifier, TagConfig, VerifierError, ground, parse_response
from .labels import Protocol
from .rewards import LabelNormalizer, RewardWeights, load_reward_config, score_group

log = logging.getLogger("fakg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FINDINGS = 3
EXIT_INTEGRITY = 4
EXIT_REMOTE = 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: {message}", EXIT_USAGE)


# -- configuration -------------------------------------------------------------------

_CONFIG_KEYS = {"graph", "reward_config", "tags", "verifier", "log_level", "output"}
_VERIFIER_KEYS = {"endpoint", "api_key", "model", "timeout_ms", "max_in_flight", "style"}
_TAG_KEYS = {"think_open", "think_close", "answer_open", "answer_close"}


@dataclass
class GlobalConfig:
    graph: str | None = None
    reward_config: str | None = None
    tags: TagConfig = field(default_factory=TagConfig)
    verifier: dict[str, Any] = field(default_factory=dict)
    log_level: str = "WARNING"
    output: str | None = None

    def __repr__(self) -> str:
        v = {k: ("***" if k == "api_key" and val else val) for k, val in self.verifier.items()}
        return (
            f"GlobalConfig(graph={self.graph!r}, reward_config={self.reward_config!r}, tags={self.tags!r}, "
            f"verifier={v!r}, log_level={self.log_level!r}, output={self.output!r})"
        )


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise CliError(f"{path}: unknown config keys {sorted(unknown)}")
    for key, allowed in (("verifier", _VERIFIER_KEYS), ("tags", _TAG_KEYS)):
        sub = doc.get(key, {})
        if not isinstance(sub, dict) or set(sub) - allowed:
            raise CliError(f"{path}: '{key}' must be an object with keys from {sorted(allowed)}")
    return doc


def resolve_config(args: argparse.Namespace, env: Mapping[str, str] | None = None) -> GlobalConfig:
    """Merge flag > environment > config file > default into a validated :class:`GlobalConfig`."""
    env = os.environ if env is None else env
    doc = _read_config_file(args.config)

    def pick(flag, env_key, file_value, default=None):
        if flag is not None:
            return flag
        if env_key and env.get(env_key):
            return env[env_key]
        if file_value is not None:
            return file_value
        return default

    file_v = doc.get("verifier", {})
    verifier = {
        "endpoint": pick(args.verifier_endpoint, "VERIFIER_ENDPOINT", file_v.get("endpoint")),
        "api_key": pick(None, "VERIFIER_API_KEY", file_v.get("api_key")),
        "model": pick(args.verifier_model, "VERIFIER_MODEL", file_v.get("model")),
        "timeout_ms": pick(args.verifier_timeout_ms, "VERIFIER_TIMEOUT_MS", file_v.get("timeout_ms"), 30000),
        "max_in_flight": pick(args.verifier_max_in_flight, None, file_v.get("max_in_flight"), 4),
        "style": pick(args.verifier_style, None, file_v.get("style"), "verify"),
    }
    try:
        verifier["timeout_ms"] = float(verifier["timeout_ms"])
        verifier["max_in_flight"] = int(verifier["max_in_flight"])
    except (TypeError, ValueError):
        raise CliError("verifier timeout and max in-flight must be numbers") from None
    if verifier["timeout_ms"] <= 0 or verifier["max_in_flight"] < 1:
        raise CliError("verifier timeout must be positive and max in-flight at least 1")
    if verifier["style"] not in ("verify", "chat"):
        raise CliError("verifier style must be 'verify' or 'chat'")

    file_tags = doc.get("tags", {})
    tag_values = {
        "think_open": pick(args.think_open, None, file_tags.get("think_open"), "<think>"),
        "think_close": pick(args.think_close, None, file_tags.get("think_close"), "</think>"),
        "answer_open": pick(args.answer_open, None, file_tags.get("answer_open"), "<answer>"),
        "answer_close": pick(args.answer_close, None, file_tags.get("answer_close"), "</answer>"),
    }
    try:
        tags = TagConfig(**tag_values)
    except ValueError as exc:
        raise CliError(str(exc)) from None

    level = str(pick(args.log_level, "FAKG_LOG_LEVEL", doc.get("log_level"), "WARNING")).upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise CliError(f"unknown log level {level!r}")
    return GlobalConfig(
        graph=pick(args.graph, "FAKG_GRAPH", doc.get("graph")),
        reward_config=pick(args.reward_config, "FAKG_REWARD_CONFIG", doc.get("reward_config")),
        tags=tags,
        verifier=verifier,
        log_level=level,
        output=pick(args.output, None, doc.get("output")),
    )


# -- helpers ------------------------------------------------------------------------


def _load_graph(cfg: GlobalConfig):
    if cfg.graph is None:
        return reference_graph()
    try:
        return read_graph(cfg.graph)
    except OSError as exc:
        raise CliError(f"cannot read graph: {exc}", EXIT_INTEGRITY) from None
    except GraphError as exc:
        raise CliError(f"{cfg.graph}: {exc}", EXIT_INTEGRITY) from None


@contextmanager
def _out(cfg: GlobalConfig):
    if cfg.output:
        fh = open(cfg.output, "w", encoding="utf-8", newline="\n")
        try:
            yield fh
        finally:
            fh.close()
    else:
        yield sys.stdout


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False)


def _read_jsonl(path: str) -> list[tuple[int, Any]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read input: {exc}") from None
    rows = []
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
    return rows


def _make_verifier(cfg: GlobalConfig, stub: bool):
    if stub:
        return StubVerifier()
    v = cfg.verifier
    if not v.get("endpoint"):
        return None
    from .clients import ChatCompletionClient, ChatVerifier, EndpointConfig, HttpVerifier

    ep = EndpointConfig(
        endpoint=v["endpoint"],
        api_key=v.get("api_key"),
        model=v.get("model"),
        timeout=v["timeout_ms"] / 1000.0,
        max_in_flight=v["max_in_flight"],
    )
    log.info("using %s verifier at %s", v["style"], ep.endpoint)
    if v["style"] == "chat":
        try:
            return ChatVerifier(ChatCompletionClient(ep))
        except ValueError as exc:
            raise CliError(str(exc)) from None
    return HttpVerifier(ep)


# -- subcommands ----------------------------------------------------------------------


def cmd_kg(args, cfg: GlobalConfig) -> int:
    if args.kg_cmd == "validate":
        cfg.graph = args.path
        g = _load_graph(cfg)
        diags = validate_graph(g)
        with _out(cfg) as fh:
            for d in diags:
                fh.write(_dumps(d.to_dict()) + "\n")
            fh.write(f"{len(diags)} diagnostics\n")
        return EXIT_FINDINGS if diags else EXIT_OK
    g = _load_graph(cfg)
    if args.k < 0:
        raise CliError("--k must be non-negative")
    try:
        sub = ego_subgraph(g, args.center, args.k)
    except UnknownEntityError as exc:
        raise CliError(str(exc)) from None
    with _out(cfg) as fh:
        fh.write(json.dumps(sub.to_dict(), ensure_ascii=False, indent=2) + "\n")
    return EXIT_OK


def cmd_ground(args, cfg: GlobalConfig) -> int:
    g = _load_graph(cfg)
    verifier = _make_verifier(cfg, args.stub_verifier)
    mode = GroundingMode(args.mode) if args.mode else None
    if mode is None:
        mode = GroundingMode.PATTERN_ONLY if verifier is None else GroundingMode.FALLBACK_VERIFIER
    if mode is not GroundingMode.PATTERN_ONLY and verifier is None:
        raise CliError(f"mode {mode.value} needs a verifier (--stub-verifier or VERIFIER_ENDPOINT)")
    rows = _read_jsonl(args.input)
    out_rows = []
    for lineno, row in rows:
        if not isinstance(row, dict) or not ({"response", "think"} & set(row)):
            raise CliError(f"{args.input}:{lineno}: expected an object with 'response' or 'think'")
        think = row["think"] if "think" in row else parse_response(str(row["response"]), cfg.tags).think
        try:
            report = ground(str(think), g, verifier, mode)
        except VerifierError as exc:
            if args.on_verifier_error == "fail":
                raise CliError(f"{args.input}:{lineno}: verifier failed: {exc}", EXIT_REMOTE) from None
            log.warning("%s:%d: verifier failed, falling back to patterns: %s", args.input, lineno, exc)
            report = ground(str(think), g, None, GroundingMode.PATTERN_ONLY)
        rec = {"id": row.get("id", lineno)} | report.to_dict()
        out_rows.append(rec)
    with _out(cfg) as fh:
        for rec in out_rows:
            fh.write(_dumps(rec) + "\n")
    return EXIT_OK


def cmd_score(args, cfg: GlobalConfig) -> int:
    g = _load_graph(cfg)
    weights, norm = RewardWeights(), LabelNormalizer()
    if cfg.reward_config:
        try:
            weights, norm = load_reward_config(cfg.reward_config)
        except (OSError, ValueError) as exc:
            raise CliError(f"reward config: {exc}") from None
    verifier = _make_verifier(cfg, args.stub_verifier)
    out_rows = []
    for lineno, row in _read_jsonl(args.input):
        if not isinstance(row, dict) or not isinstance(row.get("responses"), list) or "truth" not in row:
            raise CliError(f"{args.input}:{lineno}: expected {{'truth', 'responses': [...]}}")
        if not row["responses"]:
            raise CliError(f"{args.input}:{lineno}: empty response group")
        try:
            gs = score_group([str(r) for r in row["responses"]], str(row["truth"]), g, verifier, cfg.tags, norm, weights)
        except UnknownLabelError as exc:
            raise CliError(f"{args.input}:{lineno}: {exc}") from None
        except VerifierError as exc:
            raise CliError(f"{args.input}:{lineno}: verifier failed: {exc}", EXIT_REMOTE) from None
        out_rows.append(gs.to_dict())
    with _out(cfg) as fh:
        for rec in out_rows:
            fh.write(_dumps(rec) + "\n")
    return EXIT_OK


def cmd_eval(args, cfg: GlobalConfig) -> int:
    from .evaluation import evaluate, format_table, read_predictions

    try:
        records = read_predictions(args.pred)
        report = evaluate(records, Protocol.parse(args.protocol))
    except OSError as exc:
        raise CliError(f"cannot read predictions: {exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    for d in report.diagnostics:
        log.warning("%s", d)
    with _out(cfg) as fh:
        if args.table:
            fh.write(format_table(report) + "\n")
        else:
            fh.write(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


_STAGES = ("skeleton", "caption", "fusion", "judge")


def _remote_clients(path: str, g, env: Mapping[str, str]):
    from .clients import (
        ChatCaptioner,
        ChatCompletionClient,
        ChatFuser,
        ChatJudge,
        ChatSkeletonGenerator,
        EndpointConfig,
    )
    from .synthesis import GeneratorClients

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read endpoints config: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: endpoints config must be a JSON object")
    inline = bool(doc.get("inline_images", False))
    chats = {}
    for stage in _STAGES:
        spec = dict(doc.get(stage) or {})
        prefix = stage.upper()
        for key, suffix in (("endpoint", "ENDPOINT"), ("api_key", "API_KEY"), ("model", "MODEL"), ("timeout_ms", "TIMEOUT_MS")):
            if env.get(f"{prefix}_{suffix}"):
                spec[key] = env[f"{prefix}_{suffix}"]
        if "timeout_ms" in spec:
            spec["timeout"] = float(spec.pop("timeout_ms")) / 1000.0
        try:
            chats[stage] = ChatCompletionClient(EndpointConfig(**spec))
        except (ValueError, TypeError) as exc:
            raise CliError(f"{path}: stage '{stage}' (or {prefix}_* env): {exc}") from None
    return GeneratorClients(
        ChatSkeletonGenerator(chats["skeleton"], g),
        ChatCaptioner(chats["caption"], inline),
        ChatFuser(chats["fusion"], inline),
        ChatJudge(chats["judge"]),
    )


def cmd_synth(args, cfg: GlobalConfig) -> int:
    from .synthesis import ManifestError, PipelineConfig, read_manifest, run_pipeline, stub_clients, to_agit_record

    g = _load_graph(cfg)
    try:
        manifest = read_manifest(args.manifest)
    except OSError as exc:
        raise CliError(f"cannot read manifest: {exc}") from None
    except ManifestError as exc:
        raise CliError(str(exc)) from None
    if not manifest:
        raise CliError(f"{args.manifest}: manifest is empty")
    try:
        pcfg = PipelineConfig(
            k=args.k,
            pruning=not args.no_pruning,
            min_complexity=args.min_complexity,
            min_info=args.min_info,
            retries=args.retries,
            judge_failure=args.judge_failure,
            concurrency=args.concurrency,
            seed=args.seed,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.endpoints:
        clients = _remote_clients(args.endpoints, g, os.environ)
    else:
        clients = stub_clients(g, args.seed)
    result = run_pipeline(manifest, g, pcfg, clients)
    with _out(cfg) as fh:
        for rec in result.corpus:
            row = to_agit_record(rec).to_dict() if args.export_agit else rec.to_dict()
            fh.write(_dumps(row) + "\n")
    if args.rejected:
        with open(args.rejected, "w", encoding="utf-8") as fh:
            for rec in result.rejected:
                fh.write(_dumps(rec.to_dict()) + "\n")
    stats = result.stats.to_dict()
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(_dumps(stats), file=sys.stderr)
    if args.endpoints and result.stats.skipped == result.stats.attempted:
        return EXIT_REMOTE
    return EXIT_OK


def cmd_sim(args, cfg: GlobalConfig) -> int:
    from .sandbox import TrainConfig, load_templates, reference_templates, sparkline, train

    g = _load_graph(cfg)
    try:
        templates = load_templates(args.templates) if args.templates else reference_templates()
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"templates: {exc}") from None
    weights = RewardWeights()
    norm = None
    if cfg.reward_config:
        try:
            weights, norm = load_reward_config(cfg.reward_config)
        except (OSError, ValueError) as exc:
            raise CliError(f"reward config: {exc}") from None
    try:
        tcfg = TrainConfig(
            iterations=args.iters,
            group_size=args.group,
            step_size=args.step,
            seed=args.seed,
            truth=args.truth,
            weights=weights,
        )
        _, trace = train(g, templates, tcfg, None, cfg.tags, norm)
    except (ValueError, UnknownLabelError) as exc:
        raise CliError(str(exc)) from None
    if args.trace:
        Path(args.trace).write_text(trace.to_jsonl(), encoding="utf-8")
    with _out(cfg) as fh:
        fh.write(json.dumps(trace.summary(), indent=2) + "\n")
        if args.curve and trace.records:
            fh.write(sparkline([r.expected_kg for r in trace.records]) + "\n")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fakg", description="Face-attack knowledge graph toolkit.")
    p.add_argument("--config", help="JSON config file (graph, reward_config, tags, verifier, log_level, output)")
    p.add_argument("--graph", help="graph file (default: bundled reference graph)")
    p.add_argument("--reward-config", help="reward configuration JSON")
    p.add_argument("--think-open")
    p.add_argument("--think-close")
    p.add_argument("--answer-open")
    p.add_argument("--answer-close")
    p.add_argument("--verifier-endpoint", help="remote verifier base URL (env VERIFIER_ENDPOINT)")
    p.add_argument("--verifier-model", help="model name for the chat verifier (env VERIFIER_MODEL)")
    p.add_argument("--verifier-timeout-ms", type=float, help="env VERIFIER_TIMEOUT_MS")
    p.add_argument("--verifier-max-in-flight", type=int)
    p.add_argument("--verifier-style", choices=["verify", "chat"], help="wire contract of the verifier endpoint")
    p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    p.add_argument("-o", "--output", help="write machine output here instead of stdout")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    kg = sub.add_parser("kg", help="validate graphs and extract subgraphs")
    kg_sub = kg.add_subparsers(dest="kg_cmd", required=True, parser_class=_Parser)
    v = kg_sub.add_parser("validate", help="load a graph file and report diagnostics")
    v.add_argument("path")
    s = kg_sub.add_parser("subgraph", help="k-hop ego subgraph as JSON")
    s.add_argument("--center", required=True)
    s.add_argument("--k", type=int, required=True)

    gr = sub.add_parser("ground", help="ground rationales onto graph relations (JSONL in, JSONL out)")
    gr.add_argument("--input", required=True, help="JSONL of {'id'?, 'response'} or {'id'?, 'think'}")
    gr.add_argument("--mode", choices=[m.value for m in GroundingMode])
    gr.add_argument("--stub-verifier", action="store_true", help="use the offline predicate-substring verifier")
    gr.add_argument("--on-verifier-error", choices=["fail", "patterns"], default="fail")

    sc = sub.add_parser("score", help="score response groups (JSONL of {'truth', 'responses'})")
    sc.add_argument("--input", required=True)
    sc.add_argument("--stub-verifier", action="store_true")

    ev = sub.add_parser("eval", help="ACC/HTER under a protocol")
    ev.add_argument("--protocol", required=True, choices=["1", "2", "3", "P1", "P2", "P3"])
    ev.add_argument("--pred", required=True, help="predictions JSONL")
    ev.add_argument("--table", action="store_true", help="aligned text table instead of JSON")

    sy = sub.add_parser("synth", help="synthesize a filtered QA corpus")
    sy.add_argument("--manifest", required=True)
    sy.add_argument("--k", type=int, default=2)
    src = sy.add_mutually_exclusive_group()
    src.add_argument("--stub-clients", action="store_true", help="offline template clients (default)")
    src.add_argument("--endpoints", help="JSON with per-stage chat endpoints")
    sy.add_argument("--export-agit", action="store_true", help="emit {image, question, think, answer} rows")
    sy.add_argument("--rejected", help="write rejected records here")
    sy.add_argument("--stats", help="write stats JSON here")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--retries", type=int, default=1)
    sy.add_argument("--concurrency", type=int, default=1)
    sy.add_argument("--judge-failure", choices=["pass_through", "fail"], default="pass_through")
    sy.add_argument("--min-complexity", type=float, default=0.1)
    sy.add_argument("--min-info", type=float, default=0.1)
    sy.add_argument("--no-pruning", action="store_true")

    sm = sub.add_parser("sim", help="toy group-relative policy optimisation run")
    sm.add_argument("--templates", help="template JSON (default: bundled reference templates)")
    sm.add_argument("--iters", type=int, default=200)
    sm.add_argument("--group", type=int, default=8)
    sm.add_argument("--seed", type=int, default=7)
    sm.add_argument("--step", type=float, default=0.5)
    sm.add_argument("--truth", default="Print")
    sm.add_argument("--trace", help="write the per-iteration trace JSONL here")
    sm.add_argument("--curve", action="store_true", help="append a sparkline of expected r_kg")
    return p


_COMMANDS = {"kg": cmd_kg, "ground": cmd_ground, "score": cmd_score, "eval": cmd_eval, "synth": cmd_synth, "sim": cmd_sim}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        logging.basicConfig(
            level=cfg.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True
        )
        log.debug("config: %r", cfg)
        return _COMMANDS[args.cmd](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
