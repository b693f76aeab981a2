"""Multi-agent grid environment: buildings on a feeder, stepped synchronously.

One step applies every building's action at once: RBC buildings follow the
diurnal schedule, RL buildings take the actions passed to :meth:`GridEnv.step`,
all injections are aggregated onto their buses and a single power flow
yields the voltages that every agent is rewarded on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import grid
from .building import (
    STORAGE_KINDS,
    Building,
    StorageDevice,
    dispatch,
    injection,
    load_profiles_csv,
    synthesize_profiles,
)
from .config import ConfigError, ScenarioConfig, stream_seed, substream
from .metrics import EpisodeLog

OBS_FEATURES = (
    "hour_sin", "hour_cos", "day_of_week", "outdoor_temp", "outdoor_temp_next",
    "irradiance", "irradiance_next", "hvac_demand", "dhw_demand", "plug_load",
    "soc_hvac", "soc_dhw", "soc_batt", "voltage", "voltage_lag",
    "net_p", "net_q", "summer",
)
OBS_DIM = len(OBS_FEATURES)
SLOT_COLUMN = {"hvac_tes": 0, "dhw_tes": 1, "battery": 2, "curtailment": 3, "phase_lag": 4}
# Raw action producing no storage exchange, no curtailment and unity power factor.
NEUTRAL_RAW = np.array([0.0, 0.0, 0.0, -1.0, 0.0])

Policy = Callable[[Mapping[int, np.ndarray]], Mapping[int, np.ndarray]]


def reward(v, alpha):
    """Voltage reward, 1 at nominal voltage and falling quadratically."""
    return -(alpha * (np.asarray(v, dtype=float) - 1.0)) ** 2 + 1.0


def rbc_signal(hour, magnitude: float = 0.34):
    """Diurnal storage signal: charge overnight, discharge late afternoon."""
    hour = np.asarray(hour, dtype=float) % 24
    charge = (hour >= 22) | (hour < 7)
    discharge = (hour >= 15) & (hour < 21)
    return np.where(charge, magnitude, np.where(discharge, -magnitude, 0.0))


def rbc_action(bld: Building, t: int, magnitude: float = 0.34) -> np.ndarray:
    """Raw action (building slot layout) of the rule-based controller at step ``t``."""
    hour = (t * bld.profiles.dt) % 24
    u = float(rbc_signal(hour, magnitude))
    return np.array([NEUTRAL_RAW[SLOT_COLUMN[s]] if s in ("curtailment", "phase_lag") else u
                     for s in bld.action_slots])


def decode_action(raw, phi_max):
    """Raw [-1, 1] action columns -> (storage u's, curtailment fraction, phase lag rad)."""
    raw = np.asarray(raw, dtype=float)
    return raw[..., :3], (raw[..., 3] + 1.0) / 2.0, raw[..., 4] * phi_max


@dataclass(frozen=True)
class LocalView:
    """Everything one building is allowed to see, one row per building.

    Each row is built from that building's own profiles, devices and meter
    plus the voltage at its own bus; nothing else reaches :func:`observe`.
    """

    hour: np.ndarray
    day_of_week: np.ndarray
    summer: np.ndarray
    temp: np.ndarray
    temp_next: np.ndarray
    irr: np.ndarray
    irr_next: np.ndarray
    demand: np.ndarray  # (k, 3) hvac, dhw, plug kW
    demand_ref: np.ndarray  # (k, 3) own peak of each series
    soc_frac: np.ndarray  # (k, 3), NaN where the device is absent
    voltage: np.ndarray
    voltage_lag: np.ndarray
    p_net: np.ndarray
    q_net: np.ndarray
    power_ref: np.ndarray


def _affine(x, lo, hi):
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def observe(view: LocalView, temp_range=(-10.0, 40.0), voltage_range=(0.9, 1.1)) -> np.ndarray:
    """Row-wise 18-feature observation, every entry clipped to [-1, 1]."""
    ang = 2 * np.pi * view.hour / 24.0
    soc = np.where(np.isnan(view.soc_frac), 0.0, 2.0 * view.soc_frac - 1.0)
    dem = _affine(view.demand / view.demand_ref, 0.0, 1.0)
    cols = [
        np.sin(ang), np.cos(ang), view.day_of_week / 3.0 - 1.0,
        _affine(view.temp, *temp_range), _affine(view.temp_next, *temp_range),
        2 * view.irr - 1, 2 * view.irr_next - 1,
        dem[:, 0], dem[:, 1], dem[:, 2],
        soc[:, 0], soc[:, 1], soc[:, 2],
        _affine(view.voltage, *voltage_range), _affine(view.voltage_lag, *voltage_range),
        view.p_net / view.power_ref, view.q_net / view.power_ref,
        np.where(view.summer, 1.0, -1.0),
    ]
    return np.clip(np.stack(cols, axis=1), -1.0, 1.0)


@dataclass
class StepResult:
    observations: dict
    rewards: dict
    voltages: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


class GridEnv:
    """Synchronous multi-agent environment over one scenario.

    Agents are the RL-controlled buildings, keyed by building id. Call
    :meth:`reset` before stepping.
    """

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.buildings: list[Building] = []
        self.agents: list[int] = []
        self.t = 0

    # -- construction -----------------------------------------------------

    def _network(self) -> grid.Network:
        src = self.cfg.network
        if src == "ieee33":
            net = grid.load_ieee33()
        else:
            path = Path(src)
            if not path.is_file():
                raise ConfigError(f"network file not found: {src}")
            net = grid.load_network(path)
        if not self.cfg.keep_network_loads:
            net.p_inj[:] = 0.0
            net.q_inj[:] = 0.0
        return net

    def _profiles(self, btype: str):
        cfg = self.cfg
        spec = cfg.building_types[btype]
        if btype in cfg.profile_csv:
            prof = load_profiles_csv(cfg.profile_csv[btype], cfg.dt,
                                     seed=stream_seed(cfg.seed, "profiles", 99)[0])
            if len(prof) < cfg.horizon:
                raise ConfigError(f"profile file for {btype} has {len(prof)} steps, "
                                  f"episode needs {cfg.horizon}")
        else:
            prof = synthesize_profiles(stream_seed(cfg.seed, "profiles"), cfg.episode_days, cfg.dt,
                                       btype, cfg.start_day, spec.get("peaks"), cfg.weather)
        return prof.scaled(cfg.load_scale)

    def _build(self):
        cfg = self.cfg
        self.net = self._network()
        self.base_p = self.net.p_inj.copy()
        self.base_q = self.net.q_inj.copy()
        load_buses = [b.id for b in self.net.buses if b.kind != "slack"]
        n = cfg.n_buildings
        capacity = cfg.buildings_per_bus * len(load_buses)
        if n > capacity:
            raise ConfigError(f"{n} buildings exceed {cfg.buildings_per_bus} per bus x {len(load_buses)} buses")
        rng = substream(cfg.seed, "assignment")
        types = [t for t in sorted(cfg.portfolio) for _ in range(cfg.portfolio[t])]
        types = [types[i] for i in rng.permutation(n)]
        slots = rng.permutation(capacity)[:n]
        n_rl = int(round(cfg.rl_fraction * n))
        rl = set(rng.choice(n, size=n_rl, replace=False).tolist()) if n_rl else set()

        profiles = {t: self._profiles(t) for t in sorted(set(types))}
        self.buildings = []
        for i, btype in enumerate(types):
            spec = cfg.building_types[btype]
            devices = {
                kind: StorageDevice.sized(kind, d["cap_kwh"] * cfg.load_scale, d["p_kw"] * cfg.load_scale,
                                          d.get("efficiency", 1.0), cfg.dt)
                for kind, d in spec.get("devices", {}).items()
            }
            self.buildings.append(Building(
                id=i, bus=load_buses[slots[i] // cfg.buildings_per_bus], profiles=profiles[btype],
                devices=devices, pv_rated=spec.get("pv_rated", 0.0) * cfg.pv_scale,
                controller="rl" if i in rl else "rbc",
                alpha=cfg.alpha_overrides.get(i, cfg.alpha), building_type=btype, phi_max=cfg.phi_max,
            ))
        self.agents = sorted(rl)
        self._vectorize()

    def _vectorize(self):
        B = self.buildings
        n = len(B)
        self.bus_of = np.array([b.bus for b in B])
        self.alpha = np.array([b.alpha for b in B])
        self.pv_rated = np.array([b.pv_rated for b in B])
        self.pf = np.array([b.power_factor for b in B])
        self.phi_max = np.array([b.phi_max for b in B])
        self.is_rl = np.array([b.controller == "rl" for b in B])
        T = self.cfg.horizon
        self.hvac = np.stack([b.profiles.hvac_demand[:T] for b in B]) if n else np.zeros((0, T))
        self.dhw = np.stack([b.profiles.dhw_demand[:T] for b in B]) if n else np.zeros((0, T))
        self.plug = np.stack([b.profiles.plug_load[:T] for b in B]) if n else np.zeros((0, T))
        self.irr = np.stack([b.profiles.solar_irradiance_factor[:T] for b in B]) if n else np.zeros((0, T))
        self.temp = np.stack([b.profiles.outdoor_temp[:T] for b in B]) if n else np.zeros((0, T))
        self.has = np.zeros((n, 3), bool)
        par = {k: np.zeros((n, 3)) for k in ("cap", "pmax", "pmin", "eff", "loss", "soc")}
        for i, b in enumerate(B):
            for j, kind in enumerate(STORAGE_KINDS):
                d = b.devices.get(kind)
                if d is None:
                    par["cap"][i, j], par["pmax"][i, j], par["pmin"][i, j], par["eff"][i, j] = 1, 1, -1, 1
                    continue
                self.has[i, j] = True
                par["cap"][i, j], par["pmax"][i, j], par["pmin"][i, j] = d.cap_max, d.p_max, d.p_min
                par["eff"][i, j], par["loss"][i, j], par["soc"][i, j] = d.efficiency, d.loss_per_step, d.soc
        self.cap, self.pmax, self.pmin = par["cap"], par["pmax"], par["pmin"]
        self.eff, self.loss, self.soc = par["eff"], par["loss"], par["soc"]
        self.thermal = np.array([True, True, False])
        self.demand_ref = np.maximum(np.stack([self.hvac.max(1), self.dhw.max(1), self.plug.max(1)], 1)
                                     if n else np.zeros((0, 3)), 1e-6)
        self.power_ref = np.maximum(self.demand_ref.sum(1), self.pv_rated)
        self.slot_cols = {b.id: [SLOT_COLUMN[s] for s in b.action_slots] for b in B}
        self.action_dims = {a: len(self.slot_cols[a]) for a in self.agents}

    # -- time helpers -------------------------------------------------------

    def hour(self, t: int) -> float:
        return (t * self.cfg.dt) % 24

    def day(self, t: int) -> int:
        return self.cfg.start_day + int(t * self.cfg.dt // 24)

    def is_summer(self, t: int) -> bool:
        lo, hi = self.cfg.summer_days
        return lo <= self.day(t) % 365 <= hi

    # -- episode ----------------------------------------------------------

    def reset(self, cfg: ScenarioConfig | None = None) -> dict:
        if cfg is not None:
            self.cfg = cfg
        self._build()
        self.t = 0
        self.done = False
        self.summer = self.is_summer(0)
        grid.set_seasonal_capacitors(self.net, self.summer)
        n = len(self.buildings)
        raw = np.tile(NEUTRAL_RAW, (n, 1))
        p, q, _, _ = self._injections(raw, 0)
        self.p_net, self.q_net = p, q
        res = self._solve(p, q)
        self.v = res.voltage_mag
        self.v_lag = self.v.copy()
        self.pf_iterations = res.iterations
        return self.observations()

    def local_view(self, ids=None) -> LocalView:
        idx = np.arange(len(self.buildings)) if ids is None else np.asarray(ids, dtype=int)
        t = min(self.t, self.cfg.horizon - 1)
        tn = min(t + 1, self.cfg.horizon - 1)
        k = len(idx)
        frac = np.where(self.has[idx], self.soc[idx] / self.cap[idx], np.nan)
        return LocalView(
            hour=np.full(k, self.hour(t)),
            day_of_week=np.full(k, self.day(t) % 7, dtype=float),
            summer=np.full(k, self.is_summer(t)),
            temp=self.temp[idx, t], temp_next=self.temp[idx, tn],
            irr=self.irr[idx, t], irr_next=self.irr[idx, tn],
            demand=np.stack([self.hvac[idx, t], self.dhw[idx, t], self.plug[idx, t]], 1),
            demand_ref=self.demand_ref[idx],
            soc_frac=frac,
            voltage=self.v[self.bus_of[idx]], voltage_lag=self.v_lag[self.bus_of[idx]],
            p_net=self.p_net[idx], q_net=self.q_net[idx], power_ref=self.power_ref[idx],
        )

    def observations(self) -> dict:
        if not self.agents:
            return {}
        obs = observe(self.local_view(self.agents), self.cfg.temp_range, self.cfg.voltage_range)
        return {a: obs[i] for i, a in enumerate(self.agents)}

    def _injections(self, raw: np.ndarray, t: int, commit: bool = False):
        """Dispatch every device and return per-building (p, q, consumption, new soc)."""
        u, curt, phase = decode_action(raw, self.phi_max)
        u = np.where(self.has, u, 0.0)
        demand = np.stack([self.hvac[:, t], self.dhw[:, t], np.zeros(len(self.buildings))], 1)
        cons, _, soc_next = dispatch(u, demand, self.soc, self.cap, self.pmax, self.pmin, self.eff,
                                     self.loss, self.cfg.dt, self.thermal)
        # a building without a TES still draws its thermal demand directly
        cons = np.where(self.has, cons, np.where(self.thermal, demand, 0.0))
        soc_next = np.where(self.has, soc_next, 0.0)
        pv = self.pv_rated * self.irr[:, t] * (1.0 - curt)
        p, q = injection(pv, phase, self.plug[:, t], cons[:, 0] + cons[:, 1], cons[:, 2], self.pf)
        return p, q, cons, soc_next

    def _solve(self, p_kw, q_kw) -> grid.PowerFlowResult:
        nb = self.net.n_bus
        self.net.p_inj = self.base_p + np.bincount(self.bus_of, p_kw, nb) / 1000.0
        self.net.q_inj = self.base_q + np.bincount(self.bus_of, q_kw, nb) / 1000.0
        return grid.solve_power_flow(self.net)

    def full_actions(self, actions: Mapping[int, np.ndarray], t: int) -> tuple[np.ndarray, int]:
        """Assemble the (buildings x 5) raw action matrix; returns it and the clip count."""
        n = len(self.buildings)
        raw = np.tile(NEUTRAL_RAW, (n, 1))
        sig = float(rbc_signal(self.hour(t), self.cfg.rbc_magnitude))
        rbc = ~self.is_rl
        raw[rbc, :3] = sig
        clipped = 0
        missing = set(self.agents) - set(actions)
        extra = set(actions) - set(self.agents)
        if missing or extra:
            raise ValueError(f"actions must cover exactly the RL agents (missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)})")
        for a in self.agents:
            act = np.asarray(actions[a], dtype=float).ravel()
            cols = self.slot_cols[a]
            if act.shape != (len(cols),):
                raise ValueError(f"agent {a}: expected {len(cols)} action values, got {act.shape}")
            clipped += int(np.count_nonzero((act < -1) | (act > 1)))
            raw[a, cols] = np.clip(act, -1.0, 1.0)
        return raw, clipped

    def step(self, actions: Mapping[int, np.ndarray]) -> StepResult:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        t = self.t
        raw, clipped = self.full_actions(actions, t)
        p, q, cons, soc_next = self._injections(raw, t)

        summer = self.is_summer(t)
        if summer != self.summer:
            grid.set_seasonal_capacitors(self.net, summer)
            self.summer = summer

        failed, retried = False, False
        try:
            res = self._solve(p, q)
        except grid.NonConvergence:
            retried = True
            raw = raw.copy()
            raw[:, :3] = 0.0
            p, q, cons, soc_next = self._injections(raw, t)
            try:
                res = self._solve(p, q)
            except grid.NonConvergence:
                failed = True

        if failed:
            rewards_all = np.full(len(self.buildings), self.cfg.failure_penalty)
            self.done = True
            iterations = -1
        else:
            self.soc = soc_next
            self.v_lag = self.v
            self.v = res.voltage_mag
            rewards_all = reward(self.v[self.bus_of], self.alpha)
            iterations = res.iterations
        self.p_net, self.q_net = p, q
        self.last_raw = raw
        self.last_rewards = rewards_all
        self.t += 1
        if self.t >= self.cfg.horizon:
            self.done = True
        info = {"pf_iterations": iterations, "clipped_actions": clipped, "pf_retry": retried,
                "pf_failed": failed, "t": t}
        return StepResult(self.observations(), {a: float(rewards_all[a]) for a in self.agents},
                          self.v.copy(), self.done, info)

    # -- logging ----------------------------------------------------------

    def decoded_last(self) -> np.ndarray:
        u, curt, phase = decode_action(self.last_raw, self.phi_max)
        out = np.column_stack([u, curt, phase])
        pv_cols = self.pv_rated > 0
        out[:, :3] = np.where(self.has, out[:, :3], np.nan)
        out[~pv_cols, 3:] = np.nan
        return out

    def soc_snapshot(self) -> np.ndarray:
        return np.where(self.has, self.soc, np.nan)


def run_episode(policies: Policy | None, cfg: ScenarioConfig) -> EpisodeLog:
    """Roll out one full episode and record it.

    ``policies=None`` runs the pure rule-based baseline (every building RBC).
    Otherwise ``policies`` maps the per-agent observation dict to an action
    dict and should act deterministically for evaluation.
    """
    if policies is None:
        cfg = cfg.replace(rl_fraction=0.0)
    env = GridEnv(cfg)
    obs = env.reset()
    T, n, nb = cfg.horizon, len(env.buildings), env.net.n_bus
    volts = np.empty((T, nb))
    acts = np.empty((T, n, 5))
    socs = np.empty((T, n, 3))
    rews = np.empty((T, n))
    p_net = np.empty((T, n))
    q_net = np.empty((T, n))
    steps = 0
    for t in range(T):
        actions = policies(obs) if env.agents else {}
        res = env.step(actions)
        volts[t] = res.voltages
        acts[t] = env.decoded_last()
        socs[t] = env.soc_snapshot()
        rews[t] = env.last_rewards
        p_net[t], q_net[t] = env.p_net, env.q_net
        obs = res.observations
        steps = t + 1
        if res.done:
            break
    sl = slice(0, steps)
    return EpisodeLog(volts[sl], acts[sl], socs[sl], rews[sl], cfg.dt,
                      [b.id for b in env.buildings], [b.bus for b in env.buildings],
                      [b.controller for b in env.buildings], p_net[sl], q_net[sl])
