"""Command-line entry point: ``embodied-augment <subcommand> [options]``.

Settings resolve in the order flag > config file > built-in default. The
config file is TOML with flat top-level keys named like the RunConfig fields.
Exit codes: 0 success, 1 data error, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .augment import Augmenter, load_enhanced, load_traces, write_enhanced, write_traces
from .core import CorpusError, dump_trajectories, load_trajectories, make_trajectory_set
from .curriculum import (
    ABLATION_VARIANTS,
    MissingTrace,
    build_ablation_variant,
    build_curriculum,
    dataset_stats,
    emit_training_records,
    extrapolate_stats,
)
from .evaluator import (
    AgentBinding,
    audit_log,
    build_report,
    config_digest,
    evaluate_scenarios,
    std_erratum,
    write_audit,
)
from .gateway import Gateway, GatewayError, HttpBackend, MockBackend, SamplingConfig
from .miniworld import WorldError, demonstrate, find_scenario, load_scenarios
from .templates import CognitiveDimension, TemplateError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("embodied_augment")

EXIT_OK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2
BACKENDS = ("mock", "http")
MODES = ("disjoint", "cumulative")
GATEWAY_COMMANDS = {"enhance", "reason", "evaluate"}


class ConfigInvalid(ValueError):
    def __init__(self, field: str, detail: str = ""):
        self.field = field
        super().__init__(f"invalid config field {field!r}" + (f": {detail}" if detail else ""))


@dataclass
class RunConfig:
    corpus: str | None = None
    enhanced: str | None = None
    traces: str | None = None
    scenarios: str | None = None
    output: str = "runs/default"
    backend: str = "mock"
    endpoint: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    teacher_model: str = "teacher"
    agent_model: str = "agent"
    temperature: float = 1.0
    top_p: float = 0.7
    max_tokens: int = 512
    max_attempts: int = 3
    dims: tuple[str, ...] = tuple(d.value for d in CognitiveDimension)
    self_directed_variants: int = 0
    curriculum_mode: str = "disjoint"
    ablation: str | None = None
    reasoning_fraction: float = 0.5
    seed: int | None = None
    budget: int | None = None
    cache_dir: str | None = None
    workers: int = 1
    max_in_flight: int = 5
    yes_probability: float = 1.0
    max_steps: int = 30
    episode_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def validate(self) -> "RunConfig":
        if self.backend not in BACKENDS:
            raise ConfigInvalid("backend", f"expected one of {BACKENDS}")
        if self.backend == "http" and not self.endpoint:
            raise ConfigInvalid("endpoint", "required for the http backend")
        if self.curriculum_mode not in MODES:
            raise ConfigInvalid("curriculum_mode", f"expected one of {MODES}")
        if self.ablation is not None and self.ablation not in ABLATION_VARIANTS:
            raise ConfigInvalid("ablation", f"expected one of {ABLATION_VARIANTS}")
        try:
            self.dims = tuple(CognitiveDimension.parse(d).value for d in self.dims)
        except TemplateError as exc:
            raise ConfigInvalid("dims", str(exc)) from None
        try:
            SamplingConfig(self.temperature, self.top_p, self.max_tokens)
        except ValueError as exc:
            raise ConfigInvalid("sampling", str(exc)) from None
        for name in ("max_attempts", "workers", "max_in_flight", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(name, "must be >= 1")
        if self.self_directed_variants < 0:
            raise ConfigInvalid("self_directed_variants", "must be >= 0")
        if self.budget is not None and self.budget < 0:
            raise ConfigInvalid("budget", "must be >= 0")
        if not 0.0 <= self.yes_probability <= 1.0:
            raise ConfigInvalid("yes_probability", "must be in [0, 1]")
        if not 0.0 <= self.reasoning_fraction <= 1.0:
            raise ConfigInvalid("reasoning_fraction", "must be in [0, 1]")
        return self

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.temperature, self.top_p, self.max_tokens)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["dims"] = list(self.dims)
        doc["episode_seeds"] = list(self.episode_seeds)
        return doc


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    """Bring a config-file or flag value to the field's type."""
    kind = _FIELD_TYPES[name]
    try:
        if value is None:
            return None
        if name == "dims":
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(str(v).strip() for v in items if str(v).strip())
        if name == "episode_seeds":
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(int(v) for v in items)
        if kind.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if not isinstance(value, str):
            raise ValueError(value)
        return value
    except (TypeError, ValueError):
        raise ConfigInvalid(name, f"cannot use {value!r}") from None


def load_config_file(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid("config", f"{path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid("config", f"{path}: {exc}") from None
    unknown = sorted(set(doc) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigInvalid(unknown[0], "unknown key in config file")
    return doc


def resolve_config(file_values: Mapping[str, Any], flag_values: Mapping[str, Any]) -> RunConfig:
    """Merge defaults, then file values, then flags that were actually given."""
    merged: dict[str, Any] = {}
    for source in (file_values, flag_values):
        for name, value in source.items():
            if name not in _FIELD_TYPES:
                raise ConfigInvalid(name, "unknown setting")
            merged[name] = _coerce(name, value)
    return RunConfig(**merged).validate()


# -- parser ------------------------------------------------------------------

# flag dest -> RunConfig field; flags default to SUPPRESS so absent ones never override.
_COMMON_FLAGS = {
    "backend": dict(choices=BACKENDS, help="teacher/agent backend"),
    "endpoint": dict(help="chat-completions URL for the http backend"),
    "seed": dict(type=int, help="run seed (required for mock runs)"),
    "output": dict(help="output directory"),
    "budget": dict(type=int, help="maximum backend calls for this run"),
    "workers": dict(type=int, help="parallel workers"),
    "cache_dir": dict(help="response cache directory"),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run-config file")
    p.add_argument("--dry-run", action="store_true", help="force the offline mock backend")
    p.add_argument("-v", "--verbose", action="count", default=0)
    for dest, kw in _COMMON_FLAGS.items():
        p.add_argument("--" + dest.replace("_", "-"), dest=dest, default=argparse.SUPPRESS, **kw)


def _opt(p: argparse.ArgumentParser, flag: str, **kw) -> None:
    p.add_argument(flag, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embodied-augment",
        description="Instruction augmentation, curriculum building and closed-loop evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("enhance", help="enhance instructions along cognitive dimensions")
    _add_common(p)
    _opt(p, "--corpus", help="trajectory directory or file")
    _opt(p, "--dims", help="comma-separated dimensions")
    _opt(p, "--self-directed", dest="self_directed_variants", type=int, help="self-directed variants per trajectory")
    _opt(p, "--max-attempts", dest="max_attempts", type=int)
    _opt(p, "--yes-probability", dest="yes_probability", type=float, help="mock verifier Yes rate")

    p = sub.add_parser("reason", help="generate per-step reasoning traces")
    _add_common(p)
    _opt(p, "--corpus")
    _opt(p, "--enhanced", help="enhanced.jsonl (default: OUTPUT/enhanced.jsonl if present)")

    p = sub.add_parser("build-curriculum", help="write staged training files")
    _add_common(p)
    _opt(p, "--corpus")
    _opt(p, "--enhanced")
    _opt(p, "--traces")
    _opt(p, "--mode", dest="curriculum_mode", choices=MODES)
    _opt(p, "--ablation", choices=ABLATION_VARIANTS, help="emit an ablation dataset instead")
    _opt(p, "--reasoning-fraction", dest="reasoning_fraction", type=float)

    p = sub.add_parser("stats", help="dataset counts, full-scale extrapolation, STD erratum")
    _add_common(p)
    _opt(p, "--corpus")
    _opt(p, "--enhanced")
    _opt(p, "--traces")
    p.add_argument("--extrapolate", type=int, metavar="N", help="report a zero-drop run over N trajectories")
    p.add_argument("--std-erratum", metavar="PATH", help="write the STD cross-check table as JSON")

    p = sub.add_parser("evaluate", help="closed-loop evaluation over scenarios")
    _add_common(p)
    _opt(p, "--scenarios", help="scenario directory (default: bundled set)")
    _opt(p, "--max-steps", dest="max_steps", type=int)
    _opt(p, "--episode-seeds", dest="episode_seeds", help="comma-separated layout seeds per scenario")

    p = sub.add_parser("oracle-demo", help="print an oracle transcript or write a demonstration corpus")
    _add_common(p)
    p.add_argument("--scenario", help="scenario id (default: all bundled scenarios)")
    _opt(p, "--scenarios", help="scenario directory (default: bundled set)")
    p.add_argument("--write-corpus", metavar="DIR", help="dump demonstrations as a trajectory corpus")
    _opt(p, "--episode-seeds", dest="episode_seeds", help="layout seeds used with --write-corpus")
    return parser


# -- runtime -----------------------------------------------------------------


@dataclass
class Context:
    command: str
    config: RunConfig
    out: Path
    gateway: Gateway | None = None


def _make_gateway(cfg: RunConfig) -> Gateway:
    if cfg.backend == "mock":
        backend = MockBackend(yes_probability=cfg.yes_probability)
    else:
        backend = HttpBackend(cfg.endpoint, api_key_env=cfg.api_key_env)
    return Gateway(backend, cache_dir=cfg.cache_dir, budget=cfg.budget)


def _corpus(cfg: RunConfig):
    if not cfg.corpus:
        raise ConfigInvalid("corpus", "no trajectory corpus given")
    return load_trajectories(cfg.corpus)


def _default_input(cfg: RunConfig, value: str | None, name: str) -> Path | None:
    if value:
        return Path(value)
    guess = Path(cfg.output) / name
    return guess if guess.exists() else None


def _augmenter(ctx: Context) -> Augmenter:
    cfg = ctx.config
    return Augmenter(
        gateway=ctx.gateway,
        model_id=cfg.teacher_model,
        sampling=cfg.sampling,
        seed=cfg.seed or 0,
        max_attempts=cfg.max_attempts,
        workers=cfg.workers,
        max_in_flight=cfg.max_in_flight,
    )


def cmd_enhance(ctx: Context, args) -> dict:
    corpus = _corpus(ctx.config)
    items = _augmenter(ctx).enhance_corpus(corpus, ctx.config.dims, ctx.config.self_directed_variants)
    write_enhanced(ctx.out, items)
    accepted = sum(e.accepted for e in items)
    print(f"enhanced {len(corpus)} trajectories: {accepted} accepted, {len(items) - accepted} dropped")
    return {"trajectories": len(corpus), "accepted": accepted, "dropped": len(items) - accepted}


def cmd_reason(ctx: Context, args) -> dict:
    corpus = _corpus(ctx.config)
    path = _default_input(ctx.config, ctx.config.enhanced, "enhanced.jsonl")
    enhanced = load_enhanced(path) if path else []
    traces = _augmenter(ctx).reason_corpus(corpus, enhanced)
    write_traces(ctx.out / "traces.jsonl", traces)
    complete = sum(t.complete for t in traces)
    print(f"wrote {len(traces)} reasoning traces ({complete} complete)")
    return {"traces": len(traces), "complete": complete}


def cmd_build_curriculum(ctx: Context, args) -> dict:
    cfg = ctx.config
    corpus = _corpus(cfg)
    e_path = _default_input(cfg, cfg.enhanced, "enhanced.jsonl")
    t_path = _default_input(cfg, cfg.traces, "traces.jsonl")
    enhanced = load_enhanced(e_path) if e_path else []
    traces = load_traces(t_path) if t_path else []
    if cfg.ablation:
        bundle = build_ablation_variant(
            cfg.ablation, corpus, enhanced, traces, fraction=cfg.reasoning_fraction, seed=cfg.seed or 0
        )
        target = ctx.out / "ablation"
    else:
        bundle = build_curriculum(corpus, enhanced, traces, cfg.curriculum_mode)
        target = ctx.out / "curriculum"
    manifest = emit_training_records(bundle.files, target)
    for f in manifest.files:
        print(f"{target / f.name}: {f.count} records")
    return {f.name: f.count for f in manifest.files}


def cmd_stats(ctx: Context, args) -> dict:
    cfg = ctx.config
    if args.extrapolate is not None:
        if args.extrapolate < 1:
            raise ConfigInvalid("extrapolate", "must be >= 1")
        report = extrapolate_stats(args.extrapolate, cfg.dims, cfg.self_directed_variants or 2)
    else:
        corpus = _corpus(cfg)
        e_path = _default_input(cfg, cfg.enhanced, "enhanced.jsonl")
        dropped = e_path.with_name("dropped.jsonl") if e_path else None
        enhanced = load_enhanced(e_path) if e_path else []
        if dropped is not None and dropped.exists():
            enhanced += load_enhanced(dropped)
        t_path = _default_input(cfg, cfg.traces, "traces.jsonl")
        bundles = []
        if t_path is not None:
            accepted = [e for e in enhanced if e.accepted]
            bundles.append(build_curriculum(corpus, accepted, load_traces(t_path), cfg.curriculum_mode))
        report = dataset_stats(corpus, enhanced, bundles)
    doc = report.to_json()
    (ctx.out / "stats.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(doc, indent=2))
    if args.std_erratum:
        path = Path(args.std_erratum)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(std_erratum(), indent=2) + "\n", encoding="utf-8")
        print(f"wrote STD erratum table to {path}")
    return {"trajectories": report.trajectories, "total_enhanced": report.total_enhanced}


def cmd_evaluate(ctx: Context, args) -> dict:
    cfg = ctx.config
    scenarios = load_scenarios(cfg.scenarios)
    if not scenarios:
        raise ConfigInvalid("scenarios", "no scenarios found")
    agent = AgentBinding(ctx.gateway, model_id=cfg.agent_model, seed=cfg.seed or 0)
    audit: list[dict] = []
    results = evaluate_scenarios(agent, scenarios, cfg.episode_seeds, cfg.max_steps, cfg.workers, audit)
    eval_config = {
        "agent_model": cfg.agent_model,
        "backend": ctx.gateway.backend_id,
        "seed": cfg.seed,
        "max_steps": cfg.max_steps,
        "episode_seeds": list(cfg.episode_seeds),
        "scenarios": [s.scenario_id for s in scenarios],
    }
    report = build_report(results, eval_config, ctx.out, label=cfg.agent_model)
    write_audit(audit, ctx.out / "requests.jsonl")
    check = audit_log(ctx.out / "requests.jsonl")
    print(report.markdown().split("\n\n")[0])
    if check["privileged"] or check["history"]:
        logger.error("request audit failed: %s", (check["privileged"] + check["history"])[:5])
        raise GatewayError("request audit found privileged content or broken history")
    return {"episodes": len(results), "requests": check["requests"], "successes": sum(r.success for r in results)}


def cmd_oracle_demo(ctx: Context, args) -> dict:
    cfg = ctx.config
    if args.write_corpus:
        scenarios = [find_scenario(args.scenario, cfg.scenarios)] if args.scenario else load_scenarios(cfg.scenarios)
        trajectories = [demonstrate(s, seed) for s in scenarios for seed in cfg.episode_seeds]
        dump_trajectories(make_trajectory_set(trajectories, "oracle-demo"), args.write_corpus)
        print(f"wrote {len(trajectories)} demonstrations to {args.write_corpus}")
        return {"trajectories": len(trajectories)}
    if not args.scenario:
        raise ConfigInvalid("scenario", "give --scenario or --write-corpus")
    scenario = find_scenario(args.scenario, cfg.scenarios)
    seed = cfg.seed if cfg.seed is not None else scenario.scene.seed
    trajectory = demonstrate(scenario, seed)
    print(f"Task: {scenario.instruction}  [{scenario.category.value}, seed {seed}]")
    for step in trajectory.steps:
        print(f"{step.index:>2}. {step.action}")
        print("    reasoning: <to be generated by the reason subcommand>")
    print(f"{trajectory.T} actions")
    return {"actions": trajectory.T}


COMMANDS = {
    "enhance": cmd_enhance,
    "reason": cmd_reason,
    "build-curriculum": cmd_build_curriculum,
    "stats": cmd_stats,
    "evaluate": cmd_evaluate,
    "oracle-demo": cmd_oracle_demo,
}

_NOT_CONFIG = {"command", "config", "dry_run", "verbose", "extrapolate", "std_erratum", "scenario", "write_corpus"}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, flags)
        if args.dry_run:
            cfg.backend = "mock"
        if args.command in GATEWAY_COMMANDS and cfg.backend == "mock" and cfg.seed is None:
            raise ConfigInvalid("seed", "mock runs need an explicit seed")
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.output)
    ctx = Context(args.command, cfg, out)
    if args.command in GATEWAY_COMMANDS:
        ctx.gateway = _make_gateway(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        counts = COMMANDS[args.command](ctx, args)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, MissingTrace, WorldError, GatewayError, TemplateError, KeyError, OSError, ValueError) as exc:
        logger.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return EXIT_DATA
    finally:
        if ctx.gateway is not None and getattr(ctx.gateway.backend, "client", None) is not None:
            ctx.gateway.backend.client.close()

    manifest = {
        "command": args.command,
        "version": __version__,
        "config": cfg.to_json(),
        "config_digest": config_digest(cfg.to_json()),
        "dry_run": bool(args.dry_run),
        "counts": counts,
        "cache": ctx.gateway.stats.to_json() if ctx.gateway else None,
        "network_calls": ctx.gateway.network_calls if ctx.gateway else 0,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
