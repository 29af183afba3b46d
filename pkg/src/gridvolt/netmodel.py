"""Radial LV feeder model: cable catalog, topology validation, file I/O, synthetic feeders.

All networks are three-phase four-wire feeders reduced to a 3x3 phase
impedance representation (self impedance on the diagonal, mutual coupling
off-diagonal). Internally everything downstream works in per-unit on a
100 kVA / 230 V (line-to-neutral) base; this module stores catalog values
in ohm/km as published and exposes the conversion.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PHASES = "ABC"

DEFAULT_BASE_VOLTAGE_V = 230.0
DEFAULT_BASE_POWER_KVA = 100.0


class NetworkError(ValueError):
    """Invalid network description."""


class UnknownCableError(NetworkError):
    """Cable label not present in the catalog."""


class DuplicateBusError(NetworkError):
    """Two buses share an id (or two customers share an index)."""


class CycleError(NetworkError):
    """Line set contains a cycle; feeders must be radial."""


class DisconnectedError(NetworkError):
    """Some bus is not reachable from the slack bus."""


@dataclass(frozen=True)
class PhaseImpedance:
    """Per-length line impedance: self terms and phase-to-phase mutual terms."""

    label: str
    cross_section_mm2: float
    r_self: float  # ohm/km
    x_self: float  # ohm/km
    r_mutual: float  # ohm/km
    x_mutual: float  # ohm/km

    def __post_init__(self):
        if not (self.r_self > 0 and self.r_mutual > 0):
            raise NetworkError(f"cable {self.label!r}: resistances must be > 0")
        if self.x_self < 0 or self.x_mutual < 0:
            raise NetworkError(f"cable {self.label!r}: reactances must be >= 0")
        if self.r_mutual > self.r_self:
            raise NetworkError(f"cable {self.label!r}: mutual resistance exceeds self resistance")
        for v in (self.r_self, self.x_self, self.r_mutual, self.x_mutual):
            if not math.isfinite(v):
                raise NetworkError(f"cable {self.label!r}: non-finite impedance")

    @property
    def z_self(self) -> complex:
        return complex(self.r_self, self.x_self)

    @property
    def z_mutual(self) -> complex:
        return complex(self.r_mutual, self.x_mutual)

    def matrix_ohm_per_km(self) -> np.ndarray:
        """3x3 phase impedance matrix in ohm/km."""
        zs, zm = self.z_self, self.z_mutual
        return np.array(
            [[zs, zm, zm], [zm, zs, zm], [zm, zm, zs]], dtype=complex
        )


# Overhead (ow) and underground (ug) LV conductors by cross-section.
CABLE_CATALOG: dict[str, PhaseImpedance] = {
    "ow50": PhaseImpedance("ow50", 50.0, 0.699, 0.149, 0.049, 0.164),
    "ug70": PhaseImpedance("ug70", 70.0, 0.759, 0.243, 0.316, 0.193),
    "ow95": PhaseImpedance("ow95", 95.0, 0.452, 0.270, 0.049, 0.164),
    "ug150": PhaseImpedance("ug150", 150.0, 0.227, 0.078, 0.070, 0.078),
    "ug240": PhaseImpedance("ug240", 240.0, 0.072, 0.199, 0.021, 0.048),
}


def cable_lookup(name: str, catalog: dict[str, PhaseImpedance] | None = None) -> PhaseImpedance:
    """Return the catalog entry for a cable label.

    Raises UnknownCableError listing the valid labels on a miss.
    """
    cat = CABLE_CATALOG if catalog is None else catalog
    try:
        return cat[name]
    except KeyError:
        valid = ", ".join(sorted(cat))
        raise UnknownCableError(f"unknown cable {name!r}; valid names: {valid}") from None


def phase_indices(phase: str) -> list[int]:
    """Map a phase spec ('A', 'B', 'C' or 'ABC') to indices into (A, B, C)."""
    if phase == "ABC":
        return [0, 1, 2]
    if phase in ("A", "B", "C"):
        return [PHASES.index(phase)]
    idx = sorted(PHASES.index(p) for p in phase)
    if not idx or len(set(idx)) != len(phase):
        raise NetworkError(f"bad phase spec {phase!r}")
    return idx


@dataclass(frozen=True)
class Bus:
    """Feeder node. `phase` is the customer connection phase; junctions use 'ABC'."""

    id: int
    phase: str = "ABC"
    customer: int | None = None


@dataclass(frozen=True)
class LineSegment:
    from_bus: int
    to_bus: int
    length_km: float
    cable: PhaseImpedance
    phases: str = "ABC"

    def __post_init__(self):
        if self.length_km <= 0:
            raise NetworkError(
                f"segment {self.from_bus}->{self.to_bus}: length must be > 0"
            )
        if self.from_bus == self.to_bus:
            raise NetworkError(f"segment at bus {self.from_bus} connects to itself")

    def matrix_ohm(self) -> np.ndarray:
        """Phase impedance matrix of the whole segment, restricted to its phases."""
        idx = phase_indices(self.phases)
        return self.cable.matrix_ohm_per_km()[np.ix_(idx, idx)] * self.length_km


@dataclass
class Network:
    """Validated radial feeder. Immutable after construction; safe to share."""

    buses: list[Bus]
    lines: list[LineSegment]
    slack: int
    transformer_kva: float = 100.0
    base_voltage_v: float = DEFAULT_BASE_VOLTAGE_V
    base_power_kva: float = DEFAULT_BASE_POWER_KVA

    # derived topology, filled by __post_init__
    index: dict[int, int] = field(init=False, repr=False)
    parent: dict[int, int | None] = field(init=False, repr=False)
    parent_line: dict[int, LineSegment | None] = field(init=False, repr=False)
    children: dict[int, list[int]] = field(init=False, repr=False)
    bfs_order: list[int] = field(init=False, repr=False)
    effective_impedance_ohm: dict[int, float] = field(init=False, repr=False)
    customers: list[tuple[int, int]] = field(init=False, repr=False)  # (customer, bus)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise DuplicateBusError(f"duplicate bus id {dup}")
        self.index = {b.id: k for k, b in enumerate(self.buses)}
        if self.slack not in self.index:
            raise NetworkError(f"slack bus {self.slack} not in bus list")

        n = len(self.buses)
        if len(self.lines) > n - 1:
            raise CycleError(
                f"{len(self.lines)} segments for {n} buses; a radial feeder has exactly {n - 1}"
            )
        if len(self.lines) < n - 1:
            raise DisconnectedError(
                f"{len(self.lines)} segments for {n} buses; some bus is unreachable"
            )

        adj: dict[int, list[tuple[int, LineSegment]]] = {i: [] for i in ids}
        for seg in self.lines:
            for end in (seg.from_bus, seg.to_bus):
                if end not in self.index:
                    raise NetworkError(f"segment references unknown bus {end}")
            adj[seg.from_bus].append((seg.to_bus, seg))
            adj[seg.to_bus].append((seg.from_bus, seg))

        self.parent = {self.slack: None}
        self.parent_line = {self.slack: None}
        self.children = {i: [] for i in ids}
        self.bfs_order = [self.slack]
        self.effective_impedance_ohm = {self.slack: 0.0}
        queue = deque([self.slack])
        while queue:
            u = queue.popleft()
            for v, seg in adj[u]:
                if v == self.parent[u]:
                    continue
                if v in self.parent:
                    raise CycleError(f"cycle through bus {v}")
                self.parent[v] = u
                self.parent_line[v] = seg
                self.children[u].append(v)
                self.bfs_order.append(v)
                self.effective_impedance_ohm[v] = (
                    self.effective_impedance_ohm[u]
                    + abs(seg.cable.z_self) * seg.length_km
                )
                queue.append(v)
        if len(self.bfs_order) != n:
            missing = sorted(set(ids) - set(self.bfs_order))
            raise DisconnectedError(f"buses unreachable from slack: {missing}")

        self.customers = sorted(
            (b.customer, b.id) for b in self.buses if b.customer is not None
        )
        cust = [c for c, _ in self.customers]
        if len(set(cust)) != len(cust):
            raise DuplicateBusError("duplicate customer index")
        # solver-side caches (prepared sweep structures etc.) keyed by purpose
        self._cache: dict = {}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def z_base_ohm(self) -> float:
        return self.base_voltage_v**2 / (self.base_power_kva * 1000.0)

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.index[bus_id]]

    def customer_bus(self, customer: int) -> int:
        for c, b in self.customers:
            if c == customer:
                return b
        raise KeyError(f"no customer {customer}")

    def non_slack(self) -> list[int]:
        return [b for b in self.bfs_order if b != self.slack]


def _build_catalog(extra: list[dict] | None) -> dict[str, PhaseImpedance]:
    cat = dict(CABLE_CATALOG)
    for row in extra or []:
        pi = PhaseImpedance(
            label=row["label"],
            cross_section_mm2=float(row.get("cross_section_mm2", 0.0) or 0.0),
            r_self=float(row["r_self"]),
            x_self=float(row["x_self"]),
            r_mutual=float(row["r_mutual"]),
            x_mutual=float(row["x_mutual"]),
        )
        cat[pi.label] = pi
    return cat


def network_from_dict(data: dict) -> Network:
    """Build a Network from the JSON schema dict (see load_network)."""
    catalog = _build_catalog(data.get("cables"))
    buses = []
    for row in data["buses"]:
        cust = row.get("customer")
        buses.append(
            Bus(
                id=int(row["id"]),
                phase=str(row.get("phase", "ABC")),
                customer=None if cust is None else int(cust),
            )
        )
    lines = []
    for row in data["lines"]:
        lines.append(
            LineSegment(
                from_bus=int(row["from"]),
                to_bus=int(row["to"]),
                length_km=float(row["length_km"]),
                cable=cable_lookup(str(row["cable"]), catalog),
                phases=str(row.get("phases", "ABC")),
            )
        )
    return Network(
        buses=buses,
        lines=lines,
        slack=int(data["slack"]),
        transformer_kva=float(data.get("transformer_kva", 100.0)),
        base_voltage_v=float(data.get("base_voltage_v", DEFAULT_BASE_VOLTAGE_V)),
    )


def load_network(path: str | Path) -> Network:
    """Load and validate a feeder from its JSON description.

    Schema::

        {"buses": [{"id": 0, "phase": "ABC", "customer": null}, ...],
         "lines": [{"from": 0, "to": 1, "length_km": 1.0, "cable": "ow95"}, ...],
         "slack": 0, "transformer_kva": 150, "base_voltage_v": 230,
         "cables": [{"label": ..., "r_self": ..., "x_self": ...,
                     "r_mutual": ..., "x_mutual": ...}]}   # optional override

    Raises a NetworkError subclass naming the specific defect (unknown cable,
    duplicate bus, cycle, unreachable bus).
    """
    with open(path) as fh:
        data = json.load(fh)
    return network_from_dict(data)


def network_to_dict(net: Network) -> dict:
    extra = sorted(
        {seg.cable.label: seg.cable for seg in net.lines if seg.cable.label not in CABLE_CATALOG}.values(),
        key=lambda c: c.label,
    )
    out = {
        "buses": [
            {"id": b.id, "phase": b.phase, "customer": b.customer} for b in net.buses
        ],
        "lines": [
            {
                "from": seg.from_bus,
                "to": seg.to_bus,
                "length_km": seg.length_km,
                "cable": seg.cable.label,
                "phases": seg.phases,
            }
            for seg in net.lines
        ],
        "slack": net.slack,
        "transformer_kva": net.transformer_kva,
        "base_voltage_v": net.base_voltage_v,
    }
    if extra:
        out["cables"] = [
            {
                "label": c.label,
                "cross_section_mm2": c.cross_section_mm2,
                "r_self": c.r_self,
                "x_self": c.x_self,
                "r_mutual": c.r_mutual,
                "x_mutual": c.x_mutual,
            }
            for c in extra
        ]
    return out


def save_network(net: Network, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1, sort_keys=True)
        fh.write("\n")


def generate_feeder(
    n_buses: int,
    spacing_km: float,
    cable: str,
    customers_per_bus: int = 1,
    seed: int = 0,
    transformer_kva: float = 150.0,
) -> Network:
    """Deterministic synthetic radial feeder: trunk, street spine, laterals.

    Bus 0 is the slack (transformer secondary). The first half of the spine
    is the trunk at full `spacing_km`; past it the segments shorten to a
    quarter spacing, bunching the remaining customers in a street at similar
    electrical distance (the usual semi-urban LV layout). Roughly one bus in
    four becomes a short lateral stub off a nearby spine bus (placement
    drawn from `seed`). Every non-slack bus hosts one customer; customer
    phases are assigned round-robin A, B, C. `customers_per_bus` > 1 appends
    extra service-drop buses per feeder bus.
    """
    if n_buses < 2:
        raise NetworkError("n_buses must be >= 2")
    if customers_per_bus < 1:
        raise NetworkError("customers_per_bus must be >= 1")
    rng = np.random.default_rng(seed)
    cab = cable_lookup(cable)

    buses = [Bus(0, "ABC", None)]
    lines: list[LineSegment] = []
    spine = [0]
    trunk_end = max(1, (n_buses - 1) // 2)
    host_buses: list[int] = []
    for bid in range(1, n_buses):
        step = spacing_km if len(spine) <= trunk_end else spacing_km / 4.0
        is_lateral = bid >= 3 and bid % 4 == 0
        if is_lateral:
            anchor = spine[int(rng.integers(max(1, len(spine) - 3), len(spine)))]
            lines.append(LineSegment(anchor, bid, spacing_km / 4.0, cab))
        else:
            lines.append(LineSegment(spine[-1], bid, step, cab))
            spine.append(bid)
        host_buses.append(bid)

    next_id = n_buses
    customer = 0
    all_hosts: list[int] = []
    for bid in host_buses:
        all_hosts.append(bid)
        for _ in range(customers_per_bus - 1):
            lines.append(LineSegment(bid, next_id, spacing_km / 10.0, cab))
            all_hosts.append(next_id)
            next_id += 1

    for bid in range(1, next_id):
        if bid in all_hosts:
            buses.append(Bus(bid, PHASES[customer % 3], customer))
            customer += 1
        else:
            buses.append(Bus(bid, "ABC", None))

    return Network(
        buses=buses,
        lines=lines,
        slack=0,
        transformer_kva=transformer_kva,
    )
