"""Command-line entry point: train, evaluate, baseline, compare, validate-config.

Exit codes: 0 success, 2 invalid config or scenario, 3 training aborted on a
non-finite loss, 4 checkpoint/scenario mismatch, 5 comparison inputs missing
or of mismatched shape.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import metrics
from .building import ProfileError
from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .environment import GridEnv, run_episode
from .grid import GridError
from .ppo import AgentPolicies, CheckpointMismatch, NonFiniteLoss, load_policies, train

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_CHECKPOINT, EXIT_COMPARE = 0, 2, 3, 4, 5
MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- manifest ------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def package_version() -> str:
    """Installed version, with a git-describe suffix when run from a checkout."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{base}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    scenario_path: str | None
    version: str
    started: str
    finished: str = ""
    inputs: dict = field(default_factory=dict)
    files: list = field(default_factory=list)

    def finalize(self, out_dir) -> Path:
        """List every file under ``out_dir`` (except this manifest) and write it."""
        out_dir = Path(out_dir)
        self.finished = _now()
        self.files = [
            {"path": p.relative_to(out_dir).as_posix(), "bytes": p.stat().st_size, "sha256": sha256_file(p)}
            for p in sorted(out_dir.rglob("*"))
            if p.is_file() and p.name != MANIFEST_NAME
        ]
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def _manifest(command: str, rc: RunConfig | None, config_path, **inputs) -> RunManifest:
    return RunManifest(command, rc.hash if rc else "", rc.seed if rc else None,
                       str(config_path) if config_path else None, package_version(), _now(),
                       inputs={k: str(v) for k, v in inputs.items()})


# -- helpers -------------------------------------------------------------------

def _run_config(args, fallback_dir: Path | None = None) -> tuple[RunConfig, Path | None]:
    path = args.config
    if path is None and fallback_dir is not None and (fallback_dir / "config.json").is_file():
        path = fallback_dir / "config.json"
    try:
        if path is None:
            rc = parse_run_config({"preset": args.preset or "paper-scale"}, args.seed)
        else:
            rc = load_run_config(path, args.seed, args.preset)
    except (ConfigError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    return rc, path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(rc: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(rc.source, indent=2, sort_keys=True) + "\n")


def _write_episode(log: metrics.EpisodeLog, out: Path) -> metrics.ViolationReport:
    log.to_csv(out)
    rep = metrics.violation_counts(log)
    (out / "violations.json").write_text(json.dumps(rep.counts, indent=2, sort_keys=True) + "\n")
    metrics.write_series_csv(log, out / "series.csv")
    metrics.write_histogram_csv(log, out / "histogram.csv")
    return rep


def _episode(policy, rc: RunConfig):
    try:
        return run_episode(policy, rc.scenario)
    except (ProfileError, ConfigError, GridError, OSError) as exc:
        raise CliError(EXIT_CONFIG, f"scenario failed: {exc}") from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    rc, path = _run_config(args)
    out = _out_dir(args.out)
    man = _manifest("train", rc, path)
    try:
        env = GridEnv(rc.scenario)
        env.reset()
    except (ProfileError, ConfigError, GridError, OSError) as exc:
        raise CliError(EXIT_CONFIG, f"scenario failed: {exc}") from None
    if not env.agents:
        raise CliError(EXIT_CONFIG, "scenario has no RL agents to train (rl_fraction too small)")
    _write_config(rc, out)
    try:
        res = train(env, rc.ppo, rc.seed, out, resume=args.resume, config_hash=rc.hash,
                    log=None if args.quiet else _log)
    except NonFiniteLoss as exc:
        man.finalize(out)
        raise CliError(EXIT_TRAIN, f"training aborted: {exc}") from None
    except CheckpointMismatch as exc:
        raise CliError(EXIT_CHECKPOINT, str(exc)) from None
    man.finalize(out)
    _log(f"trained {len(env.agents)} agents for {res.steps} steps ({res.updates} updates) -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ck = Path(args.checkpoints)
    run_dir = ck if (ck / "checkpoints").is_dir() else ck.parent
    ck_dir = ck / "checkpoints" if (ck / "checkpoints").is_dir() else ck
    if not ck_dir.is_dir():
        raise CliError(EXIT_CHECKPOINT, f"checkpoint directory not found: {ck_dir}")
    rc, path = _run_config(args, run_dir)
    try:
        env = GridEnv(rc.scenario)
        env.reset()
    except (ProfileError, ConfigError, GridError, OSError) as exc:
        raise CliError(EXIT_CONFIG, f"scenario failed: {exc}") from None
    obs_dim = len(next(iter(env.observations().values()))) if env.agents else 0
    try:
        ps = load_policies(ck_dir, env.action_dims, obs_dim)
    except (CheckpointMismatch, KeyError, ValueError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint mismatch: {exc}") from None
    out = _out_dir(args.out)
    man = _manifest("evaluate", rc, path, checkpoints=ck_dir)
    log = _episode(AgentPolicies(ps, env.action_dims, deterministic=True), rc)
    _write_config(rc, out)
    rep = _write_episode(log, out)
    man.finalize(out)
    _log(json.dumps(rep.counts))
    return EXIT_OK


def cmd_baseline(args) -> int:
    rc, path = _run_config(args)
    out = _out_dir(args.out)
    man = _manifest("baseline", rc, path)
    log = _episode(None, rc)
    _write_config(rc, out)
    rep = _write_episode(log, out)
    man.finalize(out)
    _log(json.dumps(rep.counts))
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        rl = metrics.EpisodeLog.from_csv(args.run_a)
        base = metrics.EpisodeLog.from_csv(args.run_b)
        report = metrics.compare(rl, base)
    except (OSError, metrics.MetricsError, ValueError, KeyError) as exc:
        raise CliError(EXIT_COMPARE, f"cannot compare {args.run_a} with {args.run_b}: {exc}") from None
    out = _out_dir(args.out)
    man = _manifest("compare", None, None, run_a=args.run_a, run_b=args.run_b)
    (out / "comparison.txt").write_text(report.table() + "\n")
    (out / "comparison.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    man.finalize(out)
    print(report.table())
    return EXIT_OK


def cmd_validate_config(args) -> int:
    rc, _ = _run_config(args)
    print(f"ok: preset={rc.scenario.preset} seed={rc.seed} buildings={rc.scenario.n_buildings} "
          f"hash={rc.hash}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltmarl", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
        p.add_argument("--preset", choices=("paper-scale", "desk-scale"), default=None)
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="train independent PPO agents")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run trained policies deterministically for one episode")
    common(p)
    p.add_argument("--checkpoints", type=Path, required=True, help="training run or checkpoint directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="run the all-rule-based baseline episode")
    common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("compare", help="compare two episode runs (first = RL, second = baseline)")
    p.add_argument("run_a", type=Path)
    p.add_argument("run_b", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate-config", help="check a run config against the schema")
    common(p, out=False)
    p.set_defaults(func=cmd_validate_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
