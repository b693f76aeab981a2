"""Building energy models: storage dispatch, PV inverter and net injection.

Powers are in kW, energies in kWh, time in hours. The dispatch and
injection kernels are written elementwise on numpy arrays so the
environment can advance every building of a scenario in one call; the
scalar operations (``charge``, ``pv_output``, ``net_injection``) are thin
wrappers over the same kernels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

STORAGE_KINDS = ("hvac_tes", "dhw_tes", "battery")
THERMAL_KINDS = ("hvac_tes", "dhw_tes")
LOAD_POWER_FACTOR = 0.95
DEFAULT_PHI_MAX = math.acos(0.8)
# Standby loss as a fraction of capacity per hour.
DEFAULT_LOSS_RATE = 0.002

PROFILE_COLUMNS = (
    "hvac_demand_kw",
    "dhw_demand_kw",
    "plug_load_kw",
    "solar_irradiance_factor",
    "outdoor_temp_c",
)


class ProfileError(Exception):
    pass


class ParseError(ProfileError):
    pass


class SchemaError(ProfileError):
    pass


class UnitError(ProfileError):
    pass


@dataclass
class StorageDevice:
    kind: str
    cap_max: float
    p_max: float
    p_min: float
    efficiency: float = 1.0
    soc: float = 0.0
    loss_per_step: float = 0.0
    dt: float = 0.25

    def __post_init__(self):
        if self.kind not in STORAGE_KINDS:
            raise ValueError(f"unknown storage kind {self.kind!r}")
        if not self.p_min < 0 < self.p_max:
            raise ValueError("need p_min < 0 < p_max")
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must lie in (0, 1]")
        if not 0 <= self.soc <= self.cap_max:
            raise ValueError("soc outside [0, cap_max]")
        if self.loss_per_step < 0:
            raise ValueError("loss_per_step must be >= 0")

    @property
    def thermal(self) -> bool:
        return self.kind in THERMAL_KINDS

    @classmethod
    def sized(cls, kind, cap_max, p_max, efficiency=1.0, dt=0.25, soc_frac=0.5,
              loss_rate=DEFAULT_LOSS_RATE):
        """Symmetric-limit device with SOC and standby loss set from fractions."""
        return cls(kind, cap_max, p_max, -p_max, efficiency, soc_frac * cap_max,
                   loss_rate * cap_max * dt, dt)


@dataclass
class ProfileSet:
    hvac_demand: np.ndarray
    dhw_demand: np.ndarray
    plug_load: np.ndarray
    solar_irradiance_factor: np.ndarray
    outdoor_temp: np.ndarray
    dt: float

    def __post_init__(self):
        for name in ("hvac_demand", "dhw_demand", "plug_load", "solar_irradiance_factor", "outdoor_temp"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.hvac_demand)
        if any(len(s) != n for s in self.series()):
            raise SchemaError("all profile series must share one length")
        for name in ("hvac_demand", "dhw_demand", "plug_load"):
            if np.any(getattr(self, name) < 0):
                raise UnitError(f"negative values in {name}")
        irr = self.solar_irradiance_factor
        if np.any(irr < 0) or np.any(irr > 1):
            raise UnitError("irradiance factor outside [0, 1]")

    def __len__(self):
        return len(self.hvac_demand)

    def series(self):
        return (self.hvac_demand, self.dhw_demand, self.plug_load,
                self.solar_irradiance_factor, self.outdoor_temp)

    def scaled(self, load: float = 1.0) -> "ProfileSet":
        return ProfileSet(self.hvac_demand * load, self.dhw_demand * load, self.plug_load * load,
                          self.solar_irradiance_factor, self.outdoor_temp, self.dt)


@dataclass
class InverterSetting:
    curtailment: float = 0.0
    phase_lag: float = 0.0

    def validate(self, phi_max: float = DEFAULT_PHI_MAX) -> None:
        if not 0 <= self.curtailment <= 1:
            raise ValueError("curtailment outside [0, 1]")
        if abs(self.phase_lag) > phi_max + 1e-12:
            raise ValueError("phase_lag exceeds phi_max")


@dataclass
class Building:
    id: int
    bus: int
    profiles: ProfileSet
    devices: dict[str, StorageDevice] = field(default_factory=dict)
    pv_rated: float = 0.0
    power_factor: float = LOAD_POWER_FACTOR
    controller: str = "rbc"
    alpha: float = 20.0
    building_type: str = "residential"
    phi_max: float = DEFAULT_PHI_MAX

    def __post_init__(self):
        if not 0 < self.power_factor <= 1:
            raise ValueError("power_factor must lie in (0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.controller not in ("rl", "rbc"):
            raise ValueError(f"unknown controller {self.controller!r}")

    @property
    def action_slots(self) -> list[str]:
        """Action layout: storage devices present, then curtailment and phase lag."""
        slots = [k for k in STORAGE_KINDS if k in self.devices]
        if self.pv_rated > 0:
            slots += ["curtailment", "phase_lag"]
        return slots


# -- storage dispatch -------------------------------------------------------

def requested_power(u, p_max, p_min):
    """Map a normalized action to a storage power request.

    u = +1 requests the full charge rate, u = -1 the full discharge rate and
    u = 0 no storage exchange.
    """
    u = np.asarray(u, dtype=float)
    return np.where(u >= 0, u * p_max, -u * p_min)


def dispatch(u, p_demand, soc, cap_max, p_max, p_min, efficiency, loss_per_step, dt, thermal):
    """Vectorized storage dispatch for one step.

    Returns ``(consumption, p_stor, soc_next)``. Thermal demand is always
    served: the charge headroom is what remains of the device rating after
    the demand, and thermal discharge never exceeds the demand it offsets.
    """
    u = np.asarray(u, dtype=float)
    p_demand = np.asarray(p_demand, dtype=float)
    thermal = np.asarray(thermal, dtype=bool)
    p_cons = p_demand / efficiency
    p_request = requested_power(u, p_max, p_min)

    avail_ch = np.minimum((cap_max - soc) / dt, p_max - np.where(thermal, p_demand, 0.0))
    avail_ch = np.maximum(avail_ch, 0.0)
    p_ch = np.minimum(p_request, avail_ch)

    avail_dis = np.maximum(-soc / dt, p_min)
    avail_dis = np.where(thermal, np.maximum(avail_dis, -p_demand), avail_dis)
    p_dis = np.maximum(p_request, avail_dis)

    p_stor = np.where(u >= 0, p_ch, p_dis)
    soc_next = np.clip(soc - loss_per_step + p_stor * dt, 0.0, cap_max)
    consumption = p_cons + p_stor / efficiency
    consumption = np.where(thermal, np.maximum(consumption, 0.0), consumption)
    return consumption, p_stor, soc_next


def charge(dev: StorageDevice, u: float, p_demand: float = 0.0) -> float:
    """Advance one device by one step and return its electric consumption (kW)."""
    if p_demand < 0:
        raise ValueError("p_demand must be >= 0")
    u = float(np.clip(u, -1.0, 1.0))
    cons, _, soc = dispatch(u, p_demand, dev.soc, dev.cap_max, dev.p_max, dev.p_min,
                            dev.efficiency, dev.loss_per_step, dev.dt, dev.thermal)
    dev.soc = float(soc)
    return float(cons)


# -- inverter and injection -------------------------------------------------

def inverter_split(apparent, phase_lag):
    """Split apparent power into (P, Q); positive phase lag injects VARs."""
    return apparent * np.cos(phase_lag), apparent * np.sin(phase_lag)


def pv_output(bld: Building, t: int, setting: InverterSetting) -> tuple[float, float]:
    s = bld.pv_rated * bld.profiles.solar_irradiance_factor[t] * (1.0 - setting.curtailment)
    p, q = inverter_split(s, setting.phase_lag)
    return float(p), float(q)


def injection(pv_apparent, phase_lag, plug_load, thermal_cons, battery_cons, power_factor):
    """Net (P, Q) at the meter, load negative.

    Battery charging is a real-power load at the meter; battery discharge
    joins the PV output behind the inverter and shares its phase split.
    Non-inverter load (plug + thermal) draws VARs at the fixed power factor.
    """
    battery_cons = np.asarray(battery_cons, dtype=float)
    dc = pv_apparent + np.maximum(-battery_cons, 0.0)
    p_inv, q_inv = inverter_split(dc, phase_lag)
    load = plug_load + thermal_cons
    tan_phi = np.tan(np.arccos(power_factor))
    p = p_inv - load - np.maximum(battery_cons, 0.0)
    q = q_inv - load * tan_phi
    return p, q


def net_injection(bld: Building, t: int, actions: dict[str, float] | None = None,
                  setting: InverterSetting | None = None) -> tuple[float, float]:
    """Step every device of ``bld`` at time ``t`` and return its net (P, Q).

    ``actions`` maps device kind to a normalized storage action; missing
    devices default to 0 (no storage exchange).
    """
    actions = actions or {}
    setting = setting or InverterSetting()
    prof = bld.profiles
    demand = {"hvac_tes": prof.hvac_demand[t], "dhw_tes": prof.dhw_demand[t], "battery": 0.0}
    thermal_cons = 0.0
    for kind in THERMAL_KINDS:
        if kind in bld.devices:
            thermal_cons += charge(bld.devices[kind], actions.get(kind, 0.0), demand[kind])
        else:
            thermal_cons += demand[kind]
    battery_cons = 0.0
    if "battery" in bld.devices:
        battery_cons = charge(bld.devices["battery"], actions.get("battery", 0.0), 0.0)
    s = bld.pv_rated * prof.solar_irradiance_factor[t] * (1.0 - setting.curtailment)
    p, q = injection(s, setting.phase_lag, prof.plug_load[t], thermal_cons, battery_cons,
                     bld.power_factor)
    return float(p), float(q)


# -- profiles ----------------------------------------------------------------

# Hourly shape templates (fraction of peak) per building type.
_H = np.arange(24)


def _bump(center, width):
    d = np.minimum(np.abs(_H - center), 24 - np.abs(_H - center))
    return np.exp(-0.5 * (d / width) ** 2)


BUILDING_TEMPLATES = {
    "residential": {
        "plug": 0.35 + 0.45 * _bump(19, 2.5) + 0.25 * _bump(7.5, 1.5),
        "dhw": 0.1 + 0.9 * _bump(7, 1.2) + 0.7 * _bump(20, 1.8),
        "hvac_occupied": 0.6 + 0.4 * _bump(18, 4.0),
    },
    "office": {
        "plug": 0.15 + 0.85 * ((_H >= 8) & (_H < 18)),
        "dhw": 0.05 + 0.6 * _bump(12, 2.0),
        "hvac_occupied": 0.1 + 0.9 * ((_H >= 7) & (_H < 19)),
    },
    "restaurant": {
        "plug": 0.3 + 0.5 * _bump(12, 1.5) + 0.7 * _bump(18.5, 1.8),
        "dhw": 0.15 + 0.6 * _bump(12, 1.5) + 0.8 * _bump(19, 1.8),
        "hvac_occupied": 0.3 + 0.7 * ((_H >= 10) & (_H < 23)),
    },
    "retail": {
        "plug": 0.15 + 0.85 * ((_H >= 9) & (_H < 21)),
        "dhw": 0.05 + 0.3 * _bump(14, 3.0),
        "hvac_occupied": 0.15 + 0.85 * ((_H >= 9) & (_H < 21)),
    },
    "strip_mall": {
        "plug": 0.2 + 0.8 * ((_H >= 10) & (_H < 21)),
        "dhw": 0.05 + 0.4 * _bump(13, 3.0),
        "hvac_occupied": 0.2 + 0.8 * ((_H >= 10) & (_H < 21)),
    },
}


def _check_dt(dt):
    steps = 1.0 / dt
    if dt <= 0 or abs(steps - round(steps)) > 1e-9:
        raise ValueError(f"dt={dt} h does not divide one hour")
    return int(round(steps))


def synthesize_weather(rng, days, start_day=0, summer_peak_temp=32.0, winter_peak_temp=12.0,
                       cloudiness=0.25):
    """Hourly outdoor temperature (C) and clear-sky-shaped irradiance factor."""
    hours = np.arange(days * 24)
    doy = start_day + hours // 24
    hod = hours % 24
    season = 0.5 - 0.5 * np.cos(2 * np.pi * (doy - 20) / 365.0)  # 0 mid-winter, 1 mid-summer
    daily_peak = winter_peak_temp + (summer_peak_temp - winter_peak_temp) * season
    daily_noise = np.repeat(rng.normal(0.0, 2.0, days), 24)
    temp = daily_peak - 9.0 + 9.0 * np.cos(2 * np.pi * (hod - 15) / 24.0) + daily_noise

    day_len = 10.0 + 4.5 * season
    sunrise = 12.5 - day_len / 2
    phase = (hod + 0.5 - sunrise) / day_len
    clear = np.where((phase > 0) & (phase < 1), np.sin(np.pi * np.clip(phase, 0, 1)), 0.0)
    clear = clear * (0.75 + 0.25 * season)
    cloud = np.repeat(1.0 - cloudiness * rng.beta(0.6, 1.4, days), 24)
    irr = np.clip(clear * cloud, 0.0, 1.0)
    return temp, irr


def hourly_building(rng, building_type, temp, peaks):
    """Hourly HVAC/DHW/plug series (kW) for one building type."""
    tpl = BUILDING_TEMPLATES[building_type]
    n = len(temp)
    days = n // 24
    occ = np.tile(tpl["hvac_occupied"], days)
    # Heat-pump electric demand grows with distance from a 18-22 C comfort band.
    drive = np.maximum(temp - 22.0, 0.0) / 12.0 + np.maximum(18.0 - temp, 0.0) / 20.0
    hvac = peaks["hvac"] * np.clip(occ * (0.15 + drive), 0.0, 1.2)
    jitter = lambda: np.clip(1.0 + rng.normal(0.0, 0.08, n), 0.5, 1.5)  # noqa: E731
    plug = peaks["plug"] * np.tile(tpl["plug"], days) * jitter()
    dhw = peaks["dhw"] * np.tile(tpl["dhw"], days) * jitter()
    return hvac, dhw, plug


def upsample(hourly: dict[str, np.ndarray], dt: float, rng, noise_rng=None) -> dict[str, np.ndarray]:
    """Hourly -> sub-hourly series.

    Weather and HVAC are linearly interpolated, irradiance is interpolated
    with additive noise (drawn from ``noise_rng``, default ``rng``), and the
    DHW energy of each hour is split across its sub-intervals with random
    Dirichlet weights so hourly energy is conserved. Plug load is
    interpolated like HVAC.
    """
    k = _check_dt(dt)
    noise_rng = rng if noise_rng is None else noise_rng
    n_h = len(hourly["hvac"])
    t_h = np.arange(n_h, dtype=float)
    t_s = np.arange(n_h * k) / k

    def interp(x):
        return np.interp(t_s, t_h, x)

    out = {
        "temp": interp(hourly["temp"]),
        "hvac": np.maximum(interp(hourly["hvac"]), 0.0),
        "plug": np.maximum(interp(hourly["plug"]), 0.0),
    }
    irr = interp(hourly["irr"])
    if k > 1:
        irr = irr + noise_rng.normal(0.0, 0.03, irr.shape) * (irr > 0)
    out["irr"] = np.clip(irr, 0.0, 1.0)
    if k > 1:
        weights = rng.dirichlet(np.ones(k), size=n_h)
        # power in each sub-interval = hourly energy * weight / dt
        out["dhw"] = (hourly["dhw"][:, None] * weights / dt).ravel()
    else:
        out["dhw"] = hourly["dhw"].astype(float).copy()
    return out


DEFAULT_PEAKS = {
    "residential": {"hvac": 14.0, "dhw": 5.0, "plug": 10.0},
    "office": {"hvac": 60.0, "dhw": 4.0, "plug": 45.0},
    "restaurant": {"hvac": 30.0, "dhw": 14.0, "plug": 25.0},
    "retail": {"hvac": 45.0, "dhw": 3.0, "plug": 35.0},
    "strip_mall": {"hvac": 55.0, "dhw": 5.0, "plug": 45.0},
}


def synthesize_profiles(seed, days: int, dt: float, building_type: str = "residential",
                        start_day: int = 0, peaks: dict | None = None, weather: dict | None = None,
                        return_hourly: bool = False):
    """Deterministic synthetic ProfileSet for one building type.

    Weather (temperature, irradiance and its sub-hourly noise) depends only
    on ``seed``, so every building type synthesized with one seed sees the
    same sky. ``weather`` passes keyword overrides to
    :func:`synthesize_weather`; ``peaks`` overrides the type's peak kW.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    _check_dt(dt)
    seed = list(np.atleast_1d(seed).astype(int))
    weather_rng = np.random.default_rng(seed + [0])
    bld_rng = np.random.default_rng(seed + [1 + sorted(BUILDING_TEMPLATES).index(building_type)])
    temp, irr = synthesize_weather(weather_rng, days, start_day, **(weather or {}))
    pk = dict(DEFAULT_PEAKS[building_type], **(peaks or {}))
    hvac, dhw, plug = hourly_building(bld_rng, building_type, temp, pk)
    hourly = {"temp": temp, "irr": irr, "hvac": hvac, "dhw": dhw, "plug": plug}
    sub = upsample(hourly, dt, bld_rng, noise_rng=weather_rng)
    prof = ProfileSet(sub["hvac"], sub["dhw"], sub["plug"], sub["irr"], sub["temp"], dt)
    return (prof, hourly) if return_hourly else prof


def write_profiles_csv(prof: ProfileSet, path, start: str = "2020-01-01T00:00:00") -> None:
    t0 = datetime.fromisoformat(start)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("timestamp",) + PROFILE_COLUMNS)
        for i, row in enumerate(zip(*prof.series())):
            ts = (t0 + timedelta(hours=i * prof.dt)).isoformat()
            w.writerow([ts] + [repr(float(v)) for v in row])


def load_profiles_csv(path, dt: float, seed: int = 0) -> ProfileSet:
    """Read a profile CSV and upsample it to ``dt`` if it is coarser.

    Layout: a header row with ``timestamp`` (ISO-8601) followed by the
    columns in ``PROFILE_COLUMNS``; extra columns are ignored. The file
    interval must be a whole multiple of ``dt``.
    """
    _check_dt(dt)
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        missing = [c for c in ("timestamp",) + PROFILE_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        idx = {c: header.index(c) for c in ("timestamp",) + PROFILE_COLUMNS}
        stamps, cols = [], {c: [] for c in PROFILE_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                stamps.append(datetime.fromisoformat(row[idx["timestamp"]].strip()))
                for c in PROFILE_COLUMNS:
                    cols[c].append(float(row[idx[c]]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if len(stamps) < 2:
        raise ParseError(f"{path}: need at least two rows")
    for c in ("hvac_demand_kw", "dhw_demand_kw", "plug_load_kw"):
        if min(cols[c]) < 0:
            raise UnitError(f"{path}: negative values in {c}")
    steps = {(b - a).total_seconds() / 3600.0 for a, b in zip(stamps, stamps[1:])}
    if len(steps) != 1:
        raise ParseError(f"{path}: irregular timestamp spacing")
    interval = steps.pop()
    ratio = interval / dt
    if interval <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ParseError(f"{path}: interval {interval} h is not a multiple of dt={dt} h")
    arr = {c: np.array(v) for c, v in cols.items()}
    if round(ratio) > 1:
        if abs(interval - 1.0) > 1e-9:
            raise ParseError(f"{path}: only hourly files can be upsampled (got {interval} h)")
        sub = upsample({"temp": arr["outdoor_temp_c"], "irr": arr["solar_irradiance_factor"],
                        "hvac": arr["hvac_demand_kw"], "dhw": arr["dhw_demand_kw"],
                        "plug": arr["plug_load_kw"]}, dt, np.random.default_rng(seed))
        return ProfileSet(sub["hvac"], sub["dhw"], sub["plug"], sub["irr"], sub["temp"], dt)
    return ProfileSet(arr["hvac_demand_kw"], arr["dhw_demand_kw"], arr["plug_load_kw"],
                      arr["solar_irradiance_factor"], arr["outdoor_temp_c"], dt)
