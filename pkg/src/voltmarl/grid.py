"""Distribution network model and Newton-Raphson AC power flow.

Buses are indexed from 0. Injections are stored in MW / MVAR with the
convention load negative, generation positive; capacitor banks are fixed
reactive injections (``shunt_q``) that do not depend on the bus voltage.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

SCHEMA_TAG = "voltmarl.network/1"

# Seasonal capacitor banks on the IEEE-33 scenario, keyed by 0-based bus id.
# Winter keeps only the base bank; summer adds the three extra banks.
WINTER_CAPACITORS = {14: 1.2}
SUMMER_CAPACITORS = {14: 1.2 + 0.6, 24: 0.6, 30: 1.2}


class GridError(Exception):
    pass


class UnknownBus(GridError, KeyError):
    pass


class NonConvergence(GridError):
    """Newton-Raphson failed to reach the mismatch tolerance."""

    def __init__(self, iterations: int, max_mismatch: float):
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max mismatch {max_mismatch:.3e} p.u.)"
        )
        self.iterations = iterations
        self.max_mismatch = max_mismatch


@dataclass
class Bus:
    id: int
    kind: str = "pq"
    base_voltage: float = 12.66
    shunt_q: float = 0.0
    voltage_mag: float = 1.0
    voltage_ang: float = 0.0

    def __post_init__(self):
        if self.kind not in ("slack", "pq"):
            raise GridError(f"bus {self.id}: unknown kind {self.kind!r}")
        if self.shunt_q < 0:
            raise GridError(f"bus {self.id}: shunt_q must be >= 0")


@dataclass
class Line:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise GridError(f"line {self.from_bus}-{self.to_bus} is a self loop")
        if self.resistance < 0 or self.reactance <= 0:
            raise GridError(f"line {self.from_bus}-{self.to_bus}: need r >= 0, x > 0")


@dataclass
class PowerFlowResult:
    converged: bool
    iterations: int
    max_mismatch: float
    voltage_mag: np.ndarray
    voltage_ang: np.ndarray


@dataclass
class Network:
    buses: list[Bus]
    lines: list[Line]
    base_kv: float = 12.66
    base_mva: float = 10.0
    name: str = ""
    p_inj: np.ndarray = field(default=None, repr=False)
    q_inj: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.buses)
        if [b.id for b in self.buses] != list(range(n)):
            raise GridError("bus ids must be 0..n-1 in order")
        slacks = [b.id for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise GridError(f"need exactly one slack bus, found {len(slacks)}")
        for ln in self.lines:
            if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
                raise UnknownBus(f"line references missing bus {ln.from_bus}-{ln.to_bus}")
        if not _connected(n, self.lines):
            raise GridError("network is not connected")
        self.p_inj = np.zeros(n) if self.p_inj is None else np.asarray(self.p_inj, float)
        self.q_inj = np.zeros(n) if self.q_inj is None else np.asarray(self.q_inj, float)
        if self.p_inj.shape != (n,) or self.q_inj.shape != (n,):
            raise GridError("injection arrays need one entry per bus")
        self._ybus = None

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    @property
    def shunt_q(self) -> np.ndarray:
        return np.array([b.shunt_q for b in self.buses])

    @property
    def ybus(self) -> np.ndarray:
        if self._ybus is None:
            self._ybus = build_ybus(self.n_bus, self.lines)
        return self._ybus

    def copy(self) -> "Network":
        return Network(
            buses=[Bus(**vars(b)) for b in self.buses],
            lines=[Line(**vars(ln)) for ln in self.lines],
            base_kv=self.base_kv,
            base_mva=self.base_mva,
            name=self.name,
            p_inj=self.p_inj.copy(),
            q_inj=self.q_inj.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_TAG,
            "name": self.name,
            "base_kv": self.base_kv,
            "base_mva": self.base_mva,
            "buses": [
                {
                    "id": b.id,
                    "kind": b.kind,
                    "p_mw": float(self.p_inj[b.id]),
                    "q_mvar": float(self.q_inj[b.id]),
                    "shunt_q_mvar": b.shunt_q,
                }
                for b in self.buses
            ],
            "lines": [
                {"from_bus": ln.from_bus, "to_bus": ln.to_bus, "r_pu": ln.resistance, "x_pu": ln.reactance}
                for ln in self.lines
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Network":
        """Build a network from the JSON document layout.

        Lines may give impedance either in per-unit (``r_pu``/``x_pu``) or in
        ohms (``r_ohm``/``x_ohm``), the latter converted with the document's
        voltage and MVA bases.
        """
        base_kv = float(doc.get("base_kv", 12.66))
        base_mva = float(doc.get("base_mva", 10.0))
        z_base = base_kv**2 / base_mva
        try:
            raw_buses = sorted(doc["buses"], key=lambda b: b["id"])
            buses = [
                Bus(
                    id=int(b["id"]),
                    kind=b.get("kind", "pq"),
                    base_voltage=base_kv,
                    shunt_q=float(b.get("shunt_q_mvar", 0.0)),
                )
                for b in raw_buses
            ]
            lines = []
            for ln in doc["lines"]:
                if "r_pu" in ln:
                    r, x = float(ln["r_pu"]), float(ln["x_pu"])
                else:
                    r, x = float(ln["r_ohm"]) / z_base, float(ln["x_ohm"]) / z_base
                lines.append(Line(int(ln["from_bus"]), int(ln["to_bus"]), r, x))
        except KeyError as exc:
            raise GridError(f"network document missing field {exc}") from None
        p = [float(b.get("p_mw", 0.0)) for b in raw_buses]
        q = [float(b.get("q_mvar", 0.0)) for b in raw_buses]
        return cls(buses, lines, base_kv, base_mva, doc.get("name", ""), np.array(p), np.array(q))


def _connected(n: int, lines: list[Line]) -> bool:
    adj = [[] for _ in range(n)]
    for ln in lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def build_ybus(n: int, lines: list[Line]) -> np.ndarray:
    y = np.zeros((n, n), dtype=complex)
    for ln in lines:
        ys = 1.0 / complex(ln.resistance, ln.reactance)
        i, j = ln.from_bus, ln.to_bus
        y[i, i] += ys
        y[j, j] += ys
        y[i, j] -= ys
        y[j, i] -= ys
    return y


def load_network(path: str | Path) -> Network:
    with open(path) as fh:
        return Network.from_dict(json.load(fh))


def save_network(net: Network, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(net.to_dict(), fh, indent=1)


def load_ieee33() -> Network:
    """The Baran-Wu 33-bus feeder with its nominal loads (3.715 MW, 2.3 MVAR)."""
    text = resources.files("voltmarl").joinpath("data/ieee33.json").read_text()
    return Network.from_dict(json.loads(text))


def set_bus_injection(net: Network, bus: int, p: float, q: float) -> None:
    if not 0 <= bus < net.n_bus:
        raise UnknownBus(bus)
    net.p_inj[bus] = p
    net.q_inj[bus] = q


def set_seasonal_capacitors(net: Network, summer: bool) -> None:
    banks = SUMMER_CAPACITORS if summer else WINTER_CAPACITORS
    for b in net.buses:
        b.shunt_q = banks.get(b.id, 0.0)


def power_mismatch(ybus, vm, va, p_spec, q_spec) -> np.ndarray:
    """Complex mismatch S_calc - S_spec per bus, all in per-unit."""
    v = vm * np.exp(1j * va)
    s_calc = v * np.conj(ybus @ v)
    return s_calc - (p_spec + 1j * q_spec)


def solve_power_flow(net: Network, tol: float = 1e-8, max_iter: int = 30) -> PowerFlowResult:
    """Polar Newton-Raphson from a flat start.

    Each iteration evaluates the mismatch and, unless it is already within
    ``tol`` on every PQ bus, applies one Newton correction; ``iterations``
    counts mismatch evaluations, so a flat no-load network reports 1.
    Raises NonConvergence instead of returning an unconverged state.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = net.n_bus
    ybus = net.ybus
    p_spec = net.p_inj / net.base_mva
    q_spec = (net.q_inj + net.shunt_q) / net.base_mva
    pq = np.array([i for i in range(n) if i != net.slack])
    npq = len(pq)

    vm = np.ones(n)
    va = np.zeros(n)
    mis = np.inf
    for it in range(1, max_iter + 1):
        ds = power_mismatch(ybus, vm, va, p_spec, q_spec)[pq]
        f = np.concatenate([ds.real, ds.imag])
        mis = float(np.max(np.abs(f))) if npq else 0.0
        if mis <= tol:
            bus_state = (vm.copy(), va.copy())
            for bus in net.buses:
                bus.voltage_mag = float(vm[bus.id])
                bus.voltage_ang = float(va[bus.id])
            return PowerFlowResult(True, it, mis, *bus_state)
        jac = _jacobian(ybus, vm, va, pq)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise NonConvergence(it, mis) from None
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0):
            raise NonConvergence(it, mis)
    raise NonConvergence(max_iter, mis)


def _jacobian(ybus, vm, va, pq):
    """Dense polar Jacobian d(P, Q)/d(theta, |V|) restricted to PQ buses."""
    v = vm * np.exp(1j * va)
    ibus = ybus @ v
    diag_v = np.diag(v)
    diag_vnorm = np.diag(v / vm)
    ds_dva = 1j * diag_v @ np.conj(np.diag(ibus) - ybus @ diag_v)
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(np.diag(ibus)) @ diag_vnorm
    ix = np.ix_(pq, pq)
    return np.block(
        [
            [ds_dva.real[ix], ds_dvm.real[ix]],
            [ds_dva.imag[ix], ds_dvm.imag[ix]],
        ]
    )
