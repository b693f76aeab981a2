"""Voltage statistics over episode logs and baseline comparisons."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTION_COLUMNS = ("u_hvac", "u_dhw", "u_batt", "curtailment", "phase_lag")
SOC_COLUMNS = ("soc_hvac", "soc_dhw", "soc_batt")
THRESHOLDS = (("v>1.04", 1.04, "gt"), ("v>1.03", 1.03, "gt"), ("v<0.97", 0.97, "lt"), ("v<0.96", 0.96, "lt"))


class MetricsError(Exception):
    pass


class EmptyLog(MetricsError):
    pass


class ShapeMismatch(MetricsError):
    pass


@dataclass
class EpisodeLog:
    """Per-step record of one episode.

    ``actions`` holds decoded values in ``ACTION_COLUMNS`` order (storage
    actions in [-1, 1], curtailment fraction, phase lag in radians) and
    ``socs`` device energy in kWh; slots a building lacks are NaN.
    """

    voltages: np.ndarray  # (steps, buses) p.u.
    actions: np.ndarray  # (steps, agents, 5)
    socs: np.ndarray  # (steps, agents, 3) kWh
    rewards: np.ndarray  # (steps, agents)
    dt: float = 0.25
    agent_ids: list = field(default_factory=list)
    agent_bus: list = field(default_factory=list)
    controllers: list = field(default_factory=list)
    p_net: np.ndarray | None = None  # (steps, agents) kW
    q_net: np.ndarray | None = None

    def __post_init__(self):
        n = self.voltages.shape[0]
        for name in ("actions", "socs", "rewards"):
            if getattr(self, name).shape[0] != n:
                raise ShapeMismatch(f"{name} has {getattr(self, name).shape[0]} steps, voltages {n}")
        if np.any(self.voltages <= 0):
            raise MetricsError("voltages must be positive")
        n_agents = self.rewards.shape[1]
        if not self.agent_ids:
            self.agent_ids = list(range(n_agents))
        if not self.agent_bus:
            self.agent_bus = [-1] * n_agents
        if not self.controllers:
            self.controllers = ["rl"] * n_agents
        if self.p_net is None:
            self.p_net = np.full((n, n_agents), np.nan)
        if self.q_net is None:
            self.q_net = np.full((n, n_agents), np.nan)

    @property
    def n_steps(self) -> int:
        return self.voltages.shape[0]

    @property
    def n_buses(self) -> int:
        return self.voltages.shape[1]

    def to_csv(self, out_dir) -> list[Path]:
        """Write ``voltages.csv`` (long format) and ``agents.csv``; return the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        vpath, apath = out / "voltages.csv", out / "agents.csv"
        with open(vpath, "w", newline="") as fh:
            fh.write("step,bus,voltage\n")
            for t in range(self.n_steps):
                fh.writelines(f"{t},{b},{v:.10f}\n" for b, v in enumerate(self.voltages[t]))
        cols = ("step", "agent", "bus", "controller") + ACTION_COLUMNS + SOC_COLUMNS + ("p_kw", "q_kw", "reward")
        with open(apath, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for t in range(self.n_steps):
                for i, aid in enumerate(self.agent_ids):
                    vals = [*self.actions[t, i], *self.socs[t, i], self.p_net[t, i], self.q_net[t, i],
                            self.rewards[t, i]]
                    fh.write(f"{t},{aid},{self.agent_bus[i]},{self.controllers[i]},"
                             + ",".join(_fmt(v) for v in vals) + "\n")
        meta = out / "episode.json"
        meta.write_text(json.dumps({"dt": self.dt, "steps": self.n_steps, "buses": self.n_buses,
                                    "agents": len(self.agent_ids)}, indent=1))
        return [vpath, apath, meta]

    @classmethod
    def from_csv(cls, run_dir) -> "EpisodeLog":
        run_dir = Path(run_dir)
        vpath, apath = run_dir / "voltages.csv", run_dir / "agents.csv"
        for p in (vpath, apath):
            if not p.is_file():
                raise FileNotFoundError(p)
        meta_path = run_dir / "episode.json"
        dt = json.loads(meta_path.read_text())["dt"] if meta_path.is_file() else 0.25
        raw = np.loadtxt(vpath, delimiter=",", skiprows=1, ndmin=2)
        steps, buses = int(raw[:, 0].max()) + 1, int(raw[:, 1].max()) + 1
        volts = np.empty((steps, buses))
        volts[raw[:, 0].astype(int), raw[:, 1].astype(int)] = raw[:, 2]
        with open(apath, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = sorted({int(r["agent"]) for r in rows})
        col = {a: i for i, a in enumerate(ids)}
        n = len(ids)
        actions = np.full((steps, n, 5), np.nan)
        socs = np.full((steps, n, 3), np.nan)
        rewards = np.zeros((steps, n))
        p_net = np.full((steps, n), np.nan)
        q_net = np.full((steps, n), np.nan)
        bus, ctrl = [0] * n, [""] * n
        for r in rows:
            t, i = int(r["step"]), col[int(r["agent"])]
            actions[t, i] = [_parse(r[c]) for c in ACTION_COLUMNS]
            socs[t, i] = [_parse(r[c]) for c in SOC_COLUMNS]
            rewards[t, i] = float(r["reward"])
            p_net[t, i], q_net[t, i] = _parse(r["p_kw"]), _parse(r["q_kw"])
            bus[i], ctrl[i] = int(r["bus"]), r["controller"]
        return cls(volts, actions, socs, rewards, dt, ids, bus, ctrl, p_net, q_net)


def _fmt(v) -> str:
    return "" if not math.isfinite(v) else f"{v:.10f}"


def _parse(s: str) -> float:
    return float(s) if s else float("nan")


# -- violation counts --------------------------------------------------------

@dataclass
class ViolationReport:
    counts: dict  # label -> count
    reductions: dict = field(default_factory=dict)  # label -> percent vs baseline

    def check_nesting(self) -> None:
        c = self.counts
        if c["v>1.04"] > c["v>1.03"] or c["v<0.96"] > c["v<0.97"]:
            raise MetricsError(f"threshold nesting violated: {c}")


def violation_counts(log: EpisodeLog | np.ndarray) -> ViolationReport:
    """Bus-step samples strictly beyond each of the four thresholds."""
    v = log.voltages if isinstance(log, EpisodeLog) else np.asarray(log, dtype=float)
    if v.size == 0:
        raise EmptyLog("log has no voltage samples")
    counts = {}
    for label, thr, op in THRESHOLDS:
        counts[label] = int(np.count_nonzero(v > thr if op == "gt" else v < thr))
    rep = ViolationReport(counts)
    rep.check_nesting()
    return rep


def percent_reduction(baseline: float, value: float) -> float:
    """100 * (baseline - value) / baseline; 0 when both are 0."""
    if baseline == 0:
        return 0.0 if value == 0 else -math.inf
    return 100.0 * (baseline - value) / baseline


def one_decimal(x: float) -> float:
    """Truncate toward zero at one decimal, the convention of the reference table."""
    if not math.isfinite(x):
        return x
    return math.trunc(round(x * 10.0, 9)) / 10.0


def reduction_report(rl: ViolationReport, baseline: ViolationReport) -> ViolationReport:
    red = {k: percent_reduction(baseline.counts[k], rl.counts[k]) for k in rl.counts}
    return ViolationReport(dict(rl.counts), red)


# -- series ------------------------------------------------------------------

def _volts(log):
    v = log.voltages if isinstance(log, EpisodeLog) else np.asarray(log, dtype=float)
    if v.ndim != 2 or v.size == 0:
        raise EmptyLog("expected a non-empty steps x buses voltage matrix")
    return v


def deviation_norm(log) -> np.ndarray:
    v = _volts(log)
    return np.sqrt(np.sum((v - 1.0) ** 2, axis=1))


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average of fixed width.

    Near the ends the window is shifted to stay inside the series instead of
    shrinking, so every output averages exactly ``min(window, len(x))``
    samples.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=float)
    n = len(x)
    w = min(window, n)
    if w <= 1:
        return x.copy()
    csum = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.clip(np.arange(n) - (w - 1) // 2, 0, n - w)
    return (csum[lo + w] - csum[lo]) / w


def deviation_norm_series(log, window: int | None = None) -> np.ndarray:
    """Per-step L2 norm of (v - 1) over buses, smoothed by a centered window.

    ``window`` defaults to one day of steps.
    """
    if window is None:
        dt = log.dt if isinstance(log, EpisodeLog) else 0.25
        window = int(round(24 / dt))
    return moving_average(deviation_norm(log), window)


def voltage_envelope(log) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    v = _volts(log)
    return v.min(axis=1), v.mean(axis=1), v.max(axis=1)


def histogram_edges(bin_width: float = 0.005, lo: float = 0.94, hi: float = 1.06) -> np.ndarray:
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    n = int(round((hi - lo) / bin_width))
    return np.round(lo + bin_width * np.arange(n + 1), 12)


def voltage_histogram(log, bin_width: float = 0.005, lo: float = 0.94, hi: float = 1.06):
    """Counts per bin over [lo, hi) plus open end bins.

    Returns ``(edges, counts)`` where ``counts[0]`` holds samples below
    ``lo`` and ``counts[-1]`` samples at or above ``hi``; interior bin ``k``
    is ``[edges[k-1], edges[k])``.
    """
    v = _volts(log).ravel()
    edges = histogram_edges(bin_width, lo, hi)
    idx = np.searchsorted(edges, np.round(v, 12), side="right")
    counts = np.bincount(idx, minlength=len(edges) + 1)
    return edges, counts


# -- comparison --------------------------------------------------------------

@dataclass
class ComparisonReport:
    norm_reduction_pct: float  # reduction of the episode-mean deviation norm
    norm_reduction_pct_stepwise: float  # mean over steps of per-step reductions
    norm_delta: float  # baseline mean norm - rl mean norm
    violations_rl: dict
    violations_baseline: dict
    violation_deltas: dict  # baseline - rl
    violation_reduction_pct: dict
    action_summary: dict
    soc_summary: dict

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.__dict__, default=float, allow_nan=True))

    def table(self) -> str:
        """Aligned text table with baseline, RL and percent reduction rows."""
        lines = [f"{'':<12}{'Baseline':>10}{'RL':>10}{'% reduction':>14}"]
        for label, _, _ in THRESHOLDS:
            name = "v " + label[1:2] + " " + label[2:]
            lines.append(f"{name:<12}{self.violations_baseline[label]:>10d}{self.violations_rl[label]:>10d}"
                         f"{one_decimal(self.violation_reduction_pct[label]):>14.1f}")
        lines.append(f"{'L2 norm':<12}{'':>10}{'':>10}{self.norm_reduction_pct:>14.2f}")
        return "\n".join(lines)


def _summaries(log: EpisodeLog, arr: np.ndarray, names) -> dict:
    out = {}
    for ctrl in sorted(set(log.controllers)):
        mask = np.array([c == ctrl for c in log.controllers])
        sub = arr[:, mask, :]
        out[ctrl] = {}
        for k, name in enumerate(names):
            col = sub[:, :, k]
            if np.all(np.isnan(col)):
                continue
            out[ctrl][name] = {"mean": float(np.nanmean(col)), "var": float(np.nanvar(col))}
    return out


def compare(rl: EpisodeLog, baseline: EpisodeLog) -> ComparisonReport:
    if rl.voltages.shape != baseline.voltages.shape:
        raise ShapeMismatch(f"voltage shapes differ: {rl.voltages.shape} vs {baseline.voltages.shape}")
    n_rl, n_base = deviation_norm(rl), deviation_norm(baseline)
    with np.errstate(divide="ignore", invalid="ignore"):
        step_red = np.where(n_base > 0, 100.0 * (n_base - n_rl) / n_base, 0.0)
    vr, vb = violation_counts(rl), violation_counts(baseline)
    return ComparisonReport(
        norm_reduction_pct=percent_reduction(float(n_base.mean()), float(n_rl.mean())),
        norm_reduction_pct_stepwise=float(step_red.mean()),
        norm_delta=float(n_base.mean() - n_rl.mean()),
        violations_rl=vr.counts,
        violations_baseline=vb.counts,
        violation_deltas={k: vb.counts[k] - vr.counts[k] for k in vr.counts},
        violation_reduction_pct={k: percent_reduction(vb.counts[k], vr.counts[k]) for k in vr.counts},
        action_summary={"rl_run": _summaries(rl, rl.actions, ACTION_COLUMNS),
                        "baseline_run": _summaries(baseline, baseline.actions, ACTION_COLUMNS)},
        soc_summary={"rl_run": _summaries(rl, rl.socs, SOC_COLUMNS),
                     "baseline_run": _summaries(baseline, baseline.socs, SOC_COLUMNS)},
    )


def write_series_csv(log: EpisodeLog, path, window: int | None = None, bin_width: float = 0.005) -> None:
    """Plot-ready per-step series: raw and smoothed deviation norm plus envelope."""
    norm = deviation_norm(log)
    smooth = deviation_norm_series(log, window)
    vmin, vmean, vmax = voltage_envelope(log)
    with open(path, "w", newline="") as fh:
        fh.write("step,deviation_norm,deviation_norm_smoothed,v_min,v_mean,v_max\n")
        for t in range(log.n_steps):
            fh.write(f"{t},{norm[t]:.10f},{smooth[t]:.10f},{vmin[t]:.10f},{vmean[t]:.10f},{vmax[t]:.10f}\n")


def write_histogram_csv(log: EpisodeLog, path, bin_width: float = 0.005) -> None:
    edges, counts = voltage_histogram(log, bin_width)
    lo = np.concatenate([[-np.inf], edges])
    hi = np.concatenate([edges, [np.inf]])
    with open(path, "w", newline="") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for a, b, c in zip(lo, hi, counts):
            fh.write(f"{a:.4f},{b:.4f},{c}\n")
