"""Autonomous Volt/VAr + Volt/Watt droop control and legacy unity-pf inverters.

Droop curves follow the Australian DNSP setpoints: reactive absorption ramps
from zero at the deadband edge (248 V) to the full lagging limit at 253 V;
active power then ramps down linearly, reaching 20% at the autonomous cutoff
(265 V). Reactive power priority: the active injection is capped by the kVA
headroom left after Q.

Disconnection uses two rules: crossing the hard cutoff voltage drops every
affected inverter at once, while a rolling-average breach of the trip voltage
drops at most ONE inverter per step, picked by weighted sampling that favors
the highest voltages. Reconnection is also one-at-a-time, after a minimum
off period and only once the voltage is back below the trip level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# weight denominators are floored to avoid the singularity at V == V_max / V_nom
WEIGHT_FLOOR_V2 = 1e-6


@dataclass(frozen=True)
class DroopSettings:
    v_min: float = 207.0
    v_nom: float = 230.0
    v_db: float = 248.0
    v_qmin: float = 253.0
    v_trip: float = 257.0
    v_max_legacy: float = 260.0
    v_max_autonomous: float = 265.0
    q_min_pu: float = -0.44  # absorption is negative
    p_pu_at_vmax: float = 0.2
    trip_window: int = 10  # intervals in the rolling trip average
    reconnect_delay: int = 5  # minimum off intervals
    reconnect_ramp: int = 6  # soft-start: minutes back to full output (0 disables)

    def __post_init__(self):
        ordered = (
            self.v_min < self.v_nom < self.v_db < self.v_qmin
            and self.v_qmin < self.v_trip <= self.v_max_legacy < self.v_max_autonomous
        )
        if not ordered:
            raise ValueError("droop voltage setpoints out of order")
        if not (-1.0 <= self.q_min_pu <= 0.0):
            raise ValueError("q_min_pu must be within [-1, 0]")
        if self.trip_window < 1 or self.reconnect_delay < 1:
            raise ValueError("trip_window and reconnect_delay must be >= 1")
        if self.reconnect_ramp < 0:
            raise ValueError("reconnect_ramp must be >= 0")

    @classmethod
    def from_dict(cls, overrides: dict) -> "DroopSettings":
        return replace(cls(), **overrides)


@dataclass
class InverterState:
    """Mutable per-inverter record for the droop/legacy simulation loop."""

    rating_kva: float
    v_max: float  # hard cutoff: 265 autonomous, 260 legacy
    on: bool = True
    off_timer: int = 0
    ramp_left: int = 0  # soft-start minutes remaining after a reconnection
    p_avail_kw: float = 0.0
    voltage_history: list[float] = field(default_factory=list)

    def push_voltage(self, v: float, window: int) -> None:
        self.voltage_history.append(v)
        if len(self.voltage_history) > window:
            del self.voltage_history[: len(self.voltage_history) - window]

    def window_mean(self) -> float:
        return sum(self.voltage_history) / len(self.voltage_history)

    def output_scale(self, s: DroopSettings) -> float:
        if not self.on:
            return 0.0
        if s.reconnect_ramp <= 0 or self.ramp_left <= 0:
            return 1.0
        return 1.0 - self.ramp_left / s.reconnect_ramp


def volt_var_q(v: float, s: DroopSettings) -> float:
    """Volt/VAr droop in per-unit of the inverter rating (0 down to q_min_pu)."""
    if v <= s.v_db:
        return 0.0
    if v >= s.v_qmin:
        return s.q_min_pu
    return s.q_min_pu * (v - s.v_db) / (s.v_qmin - s.v_db)


def volt_watt_p(v: float, s: DroopSettings) -> float:
    """Volt/Watt active power limit in per-unit of the available output."""
    if v <= s.v_qmin:
        return 1.0
    slope = (s.p_pu_at_vmax - 1.0) / (s.v_max_autonomous - s.v_qmin)
    return max(0.0, 1.0 + slope * (v - s.v_qmin))


def injected_power(st: InverterState, v: float, s: DroopSettings) -> tuple[float, float]:
    """(P_kw, Q_kvar) of an autonomous inverter at local voltage v.

    Reactive power priority: Q follows the Volt/VAr curve; P is the smaller
    of the remaining kVA headroom and the Volt/Watt-limited available power.
    """
    if not st.on:
        return 0.0, 0.0
    q = volt_var_q(v, s) * st.rating_kva
    head_sq = st.rating_kva**2 - q**2
    assert head_sq >= 0.0, "reactive setpoint exceeds the inverter rating"
    p = min(math.sqrt(head_sq), st.p_avail_kw * volt_watt_p(v, s))
    return p * st.output_scale(s), q


def legacy_power(st: InverterState, s: DroopSettings | None = None) -> tuple[float, float]:
    """Legacy inverters export all available power at unity power factor."""
    if not st.on:
        return 0.0, 0.0
    scale = st.output_scale(s) if s is not None else 1.0
    return st.p_avail_kw * scale, 0.0


def update_trip_state(
    fleet: list[InverterState],
    measured_v: list[float],
    s: DroopSettings,
    rng: np.random.Generator,
) -> list[tuple[int, str]]:
    """Advance ON/OFF state for one step; returns (index, event) log entries.

    Order: off timers tick down; every ON inverter at or above its cutoff
    voltage disconnects instantly; one ON inverter whose rolling average
    breached the trip voltage disconnects (weights (v_max - v)^-2); one
    eligible OFF inverter reconnects (weights (v - v_nom)^-2).
    """
    if len(measured_v) != len(fleet):
        raise ValueError("one measured voltage per inverter required")
    events: list[tuple[int, str]] = []

    for st in fleet:
        if not st.on and st.off_timer > 0:
            st.off_timer -= 1
        elif st.on and st.ramp_left > 0:
            st.ramp_left -= 1
    for st, v in zip(fleet, measured_v):
        st.push_voltage(v, s.trip_window)

    for k, (st, v) in enumerate(zip(fleet, measured_v)):
        if st.on and v >= st.v_max:
            st.on = False
            st.off_timer = s.reconnect_delay
            events.append((k, "trip_instant"))

    candidates = [
        k
        for k, st in enumerate(fleet)
        if st.on
        and len(st.voltage_history) == s.trip_window
        and st.window_mean() > s.v_trip
    ]
    if candidates:
        w = np.array(
            [
                1.0 / max((fleet[k].v_max - measured_v[k]) ** 2, WEIGHT_FLOOR_V2)
                for k in candidates
            ]
        )
        pick = candidates[int(rng.choice(len(candidates), p=w / w.sum()))]
        fleet[pick].on = False
        fleet[pick].off_timer = s.reconnect_delay
        events.append((pick, "trip_avg"))

    returning = [
        k
        for k, (st, v) in enumerate(zip(fleet, measured_v))
        if (not st.on) and st.off_timer == 0 and v < s.v_trip
    ]
    if returning:
        w = np.array(
            [
                1.0 / max((measured_v[k] - s.v_nom) ** 2, WEIGHT_FLOOR_V2)
                for k in returning
            ]
        )
        pick = returning[int(rng.choice(len(returning), p=w / w.sum()))]
        fleet[pick].on = True
        fleet[pick].ramp_left = s.reconnect_ramp
        events.append((pick, "reconnect"))

    return events
