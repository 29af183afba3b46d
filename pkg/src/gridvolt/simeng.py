"""Quasi-static day simulation for the three inverter control modes.

The minute loop per mode:

* coordinated: solve the dispatch program, apply the setpoints, run the
  power-flow oracle, then track the operating point (damped nominal-voltage
  update) and ratchet each inverter's voltage cap after any trip-level
  overshoot.
* autonomous / legacy: evaluate droop output and trip/reconnect rules against
  the previous step's oracle voltages, then run the oracle.

Scenario placements, synthetic profiles and the trip sampling all draw from
seeded generators, so a run is bit-reproducible from its seed.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import cicopt, controllers, pfsolve
from .controllers import DroopSettings, InverterState
from .linmodel import LinearizationPoint, update_vnom
from .netmodel import Network, phase_indices
from .pfsolve import SLACK_ANGLES_DEG

log = logging.getLogger("gridvolt.simeng")

MODES = ("legacy", "autonomous", "cic", "cic_fair")
Q_DEMAND_FACTOR = 0.328  # constant 0.95 power factor
DAY_START_MIN = 8 * 60
DAY_END_MIN = 19 * 60 + 30  # exclusive; 690 one-minute steps
DEFAULT_RATING_KVA = 5.5
DEFAULT_PV_PEAK_KW = 5.0


@dataclass
class SimSettings:
    droop: DroopSettings = field(default_factory=DroopSettings)
    eta: float = 0.4
    alpha: float = 0.0
    loss_weight: float = 1.0
    balanced: bool = True
    normalize: bool = True
    rating_kva: float = DEFAULT_RATING_KVA
    voltage_cap: str = "magnitude"
    cap_margin_v: float = 1.0
    pf_tol: float = 1e-8
    pf_max_iter: int = 100
    curtail_eps_kw: float = 1e-4
    kkt_target: float = 1e-6


@dataclass(frozen=True)
class Scenario:
    id: str
    penetration: float
    pv_customers: tuple[int, ...]
    placement: str = "random"
    mode: str = "cic"
    alpha: float = 0.0

    def with_mode(self, mode: str, alpha: float = 0.0) -> "Scenario":
        return replace(self, mode=mode, alpha=alpha)


@dataclass
class Profiles:
    """Per-customer demand and available PV series at 1-minute resolution."""

    minutes: np.ndarray  # (T,)
    demand_kw: np.ndarray  # (n_profiles, T)
    pv_kw: np.ndarray  # (n_profiles, T)
    q_factor: float = Q_DEMAND_FACTOR

    def __post_init__(self):
        self.minutes = np.asarray(self.minutes, dtype=int)
        self.demand_kw = np.atleast_2d(np.asarray(self.demand_kw, dtype=float))
        self.pv_kw = np.atleast_2d(np.asarray(self.pv_kw, dtype=float))
        t = self.minutes.shape[0]
        if self.demand_kw.shape[1] != t or self.pv_kw.shape[1] != t:
            raise ValueError("profile horizons differ")
        if np.any(self.demand_kw < 0) or np.any(self.pv_kw < 0):
            raise ValueError("profiles must be non-negative")

    @property
    def horizon(self) -> int:
        return self.minutes.shape[0]

    def demand_for(self, customer: int) -> np.ndarray:
        return self.demand_kw[customer % self.demand_kw.shape[0]]

    def pv_for(self, customer: int) -> np.ndarray:
        return self.pv_kw[customer % self.pv_kw.shape[0]]


def interpolate_profile(knot_minutes, knot_kw, out_minutes=None) -> tuple[np.ndarray, np.ndarray]:
    """Cubic-spline a coarse series onto a 1-minute grid.

    Natural boundary conditions; knot values are preserved exactly and
    negative interpolants are clamped to zero. Fewer than four knots falls
    back to linear interpolation with a warning.
    """
    km = np.asarray(knot_minutes, dtype=float)
    kv = np.asarray(knot_kw, dtype=float)
    if km.ndim != 1 or km.shape != kv.shape:
        raise ValueError("knot arrays must be 1-D and the same length")
    if out_minutes is None:
        out_minutes = np.arange(int(km[0]), int(km[-1]) + 1)
    out_minutes = np.asarray(out_minutes)
    if km.shape[0] < 4:
        warnings.warn("fewer than 4 knots; falling back to linear interpolation")
        vals = np.interp(out_minutes, km, kv)
    else:
        vals = CubicSpline(km, kv, bc_type="natural")(out_minutes)
    return out_minutes, np.maximum(vals, 0.0)


def synthetic_profiles(
    n_profiles: int = 30,
    seed: int = 0,
    start_min: int = DAY_START_MIN,
    end_min: int = DAY_END_MIN,
    pv_peak_kw: float = DEFAULT_PV_PEAK_KW,
    mean_demand_kw: float = 0.77,
    cloud_depth: float = 0.5,
) -> Profiles:
    """Two-peak household demand plus a midday PV bump with cloud texture.

    Demand is drawn at half-hourly knots (with per-customer jitter) and
    splined to 1-minute. PV availability is a sine bump modulated by a
    shared smoothed cloud field (clear-sky recoveries produce the
    minute-scale upward ramps household data shows); set cloud_depth=0 for
    a clear day. Everything is reproducible from the seed.
    """
    rng = np.random.default_rng(seed)
    minutes = np.arange(start_min, end_min)
    t_len = minutes.shape[0]
    knots = np.arange(start_min - 60, end_min + 61, 30)  # >= 4 knots, no extrapolation

    demand = np.zeros((n_profiles, t_len))
    for i in range(n_profiles):
        morning = 0.9 * np.exp(-0.5 * ((knots - 500.0 - rng.normal(0, 20)) / 80.0) ** 2)
        evening = 1.4 * np.exp(-0.5 * ((knots - 1120.0 - rng.normal(0, 25)) / 110.0) ** 2)
        base = 0.35 + 0.05 * rng.random()
        kv = (base + morning + evening) * (0.75 + 0.5 * rng.random())
        kv = kv + rng.normal(0.0, 0.03, size=kv.shape)
        _, vals = interpolate_profile(knots, np.maximum(kv, 0.0), minutes)
        demand[i] = vals
    # scale the fleet to the target window average
    demand *= mean_demand_kw / demand.mean()

    sunrise, sunset = 390.0, 1170.0
    bump = np.sin(np.pi * np.clip((minutes - sunrise) / (sunset - sunrise), 0, 1)) ** 1.3
    # shared cloud field: low-pass filtered noise, dips only
    white = rng.normal(0.0, 1.0, t_len + 40)
    kernel = np.exp(-0.5 * (np.arange(-10, 11) / 4.0) ** 2)
    kernel /= kernel.sum()
    smooth = np.convolve(white, kernel, mode="same")[20 : 20 + t_len]
    sky = 1.0 - cloud_depth * np.clip(smooth - 0.4, 0.0, 2.0) / 2.0
    pv = np.zeros((n_profiles, t_len))
    for i in range(n_profiles):
        jitter = 1.0 + 0.02 * rng.normal(0.0, 1.0, t_len)
        pv[i] = np.clip(pv_peak_kw * (0.97 + 0.03 * rng.random()) * bump * sky * jitter,
                        0.0, pv_peak_kw)
    return Profiles(minutes=minutes, demand_kw=demand, pv_kw=pv)


def _parse_minute(stamp: str) -> int:
    s = stamp.strip()
    if ":" in s:
        hh, mm = s.split(":")
        return int(hh) * 60 + int(mm)
    return int(s)


def read_profile_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read `timestamp, customer_id, p_kw` into (minutes, per-customer matrix)."""
    series: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header and header[0].strip().lower() != "timestamp":
            fh.seek(0)
            reader = csv.reader(fh)
        for row in reader:
            if not row:
                continue
            minute = _parse_minute(row[0])
            cust = int(row[1])
            series.setdefault(cust, {})[minute] = float(row[2])
    if not series:
        raise ValueError(f"no profile rows in {path}")
    customers = sorted(series)
    minutes = np.array(sorted({m for s in series.values() for m in s}))
    mat = np.zeros((len(customers), minutes.shape[0]))
    for k, cust in enumerate(customers):
        s = series[cust]
        if len(s) != minutes.shape[0]:
            raise ValueError(f"customer {cust}: ragged profile")
        mat[k] = [s[m] for m in minutes]
    return minutes, mat


def load_profiles(
    demand_path: str | Path,
    pv_path: str | Path | None = None,
    start_min: int = DAY_START_MIN,
    end_min: int = DAY_END_MIN,
    pv_peak_kw: float = DEFAULT_PV_PEAK_KW,
    seed: int = 0,
) -> Profiles:
    """Build Profiles from CSV files; half-hourly input is splined to 1-minute."""
    out_minutes = np.arange(start_min, end_min)

    def to_minutely(minutes, mat):
        step = int(np.min(np.diff(minutes))) if minutes.shape[0] > 1 else 1
        if step <= 1:
            idx = {m: k for k, m in enumerate(minutes)}
            missing = [m for m in out_minutes if m not in idx]
            if missing:
                raise ValueError(f"1-minute profile does not cover the horizon, missing {missing[:3]}")
            cols = [idx[m] for m in out_minutes]
            return mat[:, cols]
        rows = []
        for r in mat:
            _, vals = interpolate_profile(minutes, r, out_minutes)
            rows.append(vals)
        return np.array(rows)

    dm, dmat = read_profile_csv(demand_path)
    demand = to_minutely(dm, dmat)
    if pv_path is None:
        pv = synthetic_profiles(
            demand.shape[0], seed=seed, start_min=start_min, end_min=end_min,
            pv_peak_kw=pv_peak_kw,
        ).pv_kw
    else:
        pm, pmat = read_profile_csv(pv_path)
        pv = to_minutely(pm, pmat)
    return Profiles(minutes=out_minutes, demand_kw=demand, pv_kw=pv)


# --------------------------------------------------------------------------
# scenarios


def generate_scenarios(
    net: Network, penetration: float, n_random: int = 18, seed: int = 0
) -> list[Scenario]:
    """Clustered (near/far by effective impedance) plus seeded random placements."""
    if not (0.0 < penetration <= 1.0):
        raise ValueError("penetration must be in (0, 1]")
    customers = [c for c, _ in net.customers]
    k = round(penetration * len(customers))
    if k == 0:
        raise ValueError(f"penetration {penetration} selects no customers")
    by_z = sorted(customers, key=lambda c: (net.effective_impedance_ohm[net.customer_bus(c)], c))
    near = tuple(sorted(by_z[:k]))
    far = tuple(sorted(by_z[-k:]))
    out = [
        Scenario("near", penetration, near, "cluster_near"),
        Scenario("far", penetration, far, "cluster_far"),
    ]
    rng = np.random.default_rng(np.random.SeedSequence([seed, round(penetration * 1000)]))
    for j in range(n_random):
        pick = tuple(sorted(rng.choice(customers, size=k, replace=False).tolist()))
        out.append(Scenario(f"rand{j:02d}", penetration, pick, "random"))
    return out


# --------------------------------------------------------------------------
# day loop


@dataclass
class DayResult:
    mode: str
    scenario: Scenario
    minutes: np.ndarray
    bus_order: list[int]
    balanced: bool
    v_oracle_mag: np.ndarray  # (T, n_bus, nph) volts, NaN on absent phases
    v_model_mag: np.ndarray | None  # same shape; None outside coordinated mode
    p_avail_kw: np.ndarray  # (T, C)
    p_out_kw: np.ndarray  # inverter terminal output
    p_curt_kw: np.ndarray
    q_kvar: np.ndarray
    losses_kw: np.ndarray  # (T,)
    slack_kva: np.ndarray  # (T,)
    events: list[tuple[int, int, str]]  # (t index, customer, kind)
    pv_customers: tuple[int, ...]
    inverter_buses: list[int]
    infeasible_steps: list[int]
    kkt_max: float
    oracle_iterations_max: int


class _Frame:
    """Shared per-run geometry: bus ordering and per-customer placements."""

    def __init__(self, net: Network, balanced: bool):
        self.net = net
        self.balanced = balanced
        self.nph = 1 if balanced else 3
        self.order = list(net.bfs_order)
        self.pos = {b: k for k, b in enumerate(self.order)}
        self.n = len(self.order)
        self.cust_rows = {}
        for cust, bus in net.customers:
            if balanced:
                ph = [0]
            else:
                ph = phase_indices(net.bus(bus).phase)
            self.cust_rows[cust] = (self.pos[bus], ph)

    def inject(self, s: np.ndarray, customer: int, p_kw: float, q_kvar: float) -> None:
        row, ph = self.cust_rows[customer]
        s[row, ph] += complex(p_kw, q_kvar) / len(ph)

    def measured_at(self, sol: pfsolve.VoltageSolution, customer: int) -> float:
        """Worst-phase voltage magnitude at a customer connection, volts."""
        row, ph = self.cust_rows[customer]
        return float(np.max(np.abs(sol.v[row, ph])))

    def measured_complex_pu(self, sol: pfsolve.VoltageSolution) -> np.ndarray:
        """Non-slack complex voltages in pu, shaped like the linear model state."""
        v = sol.v[1:, :] / self.net.base_voltage_v
        return v[:, 0] if self.balanced else v


def _load_injections(frame: _Frame, demand: dict[int, float], q_factor: float) -> np.ndarray:
    s = np.zeros((frame.n, frame.nph), dtype=complex)
    for cust, p in demand.items():
        frame.inject(s, cust, -p, -q_factor * p)
    return s


def run_day(
    net: Network,
    scenario: Scenario,
    profiles: Profiles,
    settings: SimSettings | None = None,
    seed: int = 0,
) -> DayResult:
    """Simulate one day at 1-minute resolution under the scenario's mode."""
    settings = settings or SimSettings()
    if scenario.mode not in MODES:
        raise ValueError(f"unknown mode {scenario.mode!r}; expected one of {MODES}")
    frame = _Frame(net, settings.balanced)
    t_len = profiles.horizon
    customers = [c for c, _ in net.customers]
    pv = list(scenario.pv_customers)
    missing = [c for c in pv if c not in customers]
    if missing:
        raise ValueError(f"scenario places PV at unknown customers {missing}")
    demand_series = {c: profiles.demand_for(c) for c in customers}
    avail_series = {c: profiles.pv_for(c) for c in pv}

    if scenario.mode in ("cic", "cic_fair"):
        return _run_day_cic(
            net, scenario, settings, frame, t_len, profiles, demand_series, avail_series
        )
    return _run_day_droop(
        net, scenario, settings, frame, t_len, profiles, demand_series, avail_series, seed
    )


def _alloc(t_len, frame, n_inv):
    return dict(
        v_oracle=np.full((t_len, frame.n, frame.nph), np.nan),
        p_avail=np.zeros((t_len, n_inv)),
        p_out=np.zeros((t_len, n_inv)),
        p_curt=np.zeros((t_len, n_inv)),
        q=np.zeros((t_len, n_inv)),
        losses=np.zeros(t_len),
        slack=np.zeros(t_len),
    )


def _run_day_droop(
    net, scenario, settings, frame, t_len, profiles, demand_series, avail_series, seed
):
    droop = settings.droop
    legacy = scenario.mode == "legacy"
    pv = list(scenario.pv_customers)
    v_cut = droop.v_max_legacy if legacy else droop.v_max_autonomous
    fleet = [InverterState(rating_kva=settings.rating_kva, v_max=v_cut) for _ in pv]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD4007]))

    rec = _alloc(t_len, frame, len(pv))
    events: list[tuple[int, int, str]] = []
    prev_v = [float(net.base_voltage_v)] * len(pv)
    max_iters = 0
    out = np.zeros((len(pv), 2))  # warm-started (P, Q) setpoints
    for t in range(t_len):
        for k, c in enumerate(pv):
            fleet[k].p_avail_kw = float(avail_series[c][t])
        # trip/reconnect decisions act on the previous step's measurements
        for k, kind in controllers.update_trip_state(fleet, prev_v, droop, rng):
            events.append((t, pv[k], kind))
        s_load = _load_injections(
            frame, {c: demand_series[c][t] for c in demand_series}, profiles.q_factor
        )

        # droop setpoints are self-consistent with this step's voltage
        # (damped fixed point, as in a control-iterating QSTS solve);
        # legacy output is voltage-independent, so one pass suffices
        v_loc = list(prev_v)
        for _ in range(40):
            for k in range(len(pv)):
                if legacy:
                    out[k] = controllers.legacy_power(fleet[k], droop)
                else:
                    p_new, q_new = controllers.injected_power(fleet[k], v_loc[k], droop)
                    out[k, 0] += 0.5 * (p_new - out[k, 0])
                    out[k, 1] += 0.5 * (q_new - out[k, 1])
            s = s_load.copy()
            for k, c in enumerate(pv):
                frame.inject(s, c, out[k, 0], out[k, 1])
            sol = pfsolve.solve_power_flow(
                net, s, tol=settings.pf_tol, max_iter=settings.pf_max_iter,
                balanced=settings.balanced,
            )
            max_iters = max(max_iters, sol.iterations)
            v_new = [frame.measured_at(sol, c) for c in pv]
            moved = max((abs(a - b) for a, b in zip(v_new, v_loc)), default=0.0)
            v_loc = v_new
            if legacy or moved < 1e-4:
                break
        if not legacy and pv:
            # snap to the exact droop response at the converged voltage, so
            # the recorded flow and outputs are mutually consistent
            for k in range(len(pv)):
                out[k] = controllers.injected_power(fleet[k], v_loc[k], droop)
            s = s_load.copy()
            for k, c in enumerate(pv):
                frame.inject(s, c, out[k, 0], out[k, 1])
            sol = pfsolve.solve_power_flow(
                net, s, tol=settings.pf_tol, max_iter=settings.pf_max_iter,
                balanced=settings.balanced,
            )
            v_loc = [frame.measured_at(sol, c) for c in pv]

        for k in range(len(pv)):
            rec["p_avail"][t, k] = fleet[k].p_avail_kw
            rec["p_out"][t, k] = out[k, 0]
            rec["p_curt"][t, k] = max(0.0, fleet[k].p_avail_kw - out[k, 0])
            rec["q"][t, k] = out[k, 1]
        rec["v_oracle"][t] = np.where(sol.mask, np.abs(sol.v), np.nan)
        rec["losses"][t] = pfsolve.line_losses_exact(net, sol)
        rec["slack"][t] = pfsolve.slack_apparent_power(sol, net)
        prev_v = v_loc

    return DayResult(
        mode=scenario.mode,
        scenario=scenario,
        minutes=profiles.minutes.copy(),
        bus_order=frame.order,
        balanced=settings.balanced,
        v_oracle_mag=rec["v_oracle"],
        v_model_mag=None,
        p_avail_kw=rec["p_avail"],
        p_out_kw=rec["p_out"],
        p_curt_kw=rec["p_curt"],
        q_kvar=rec["q"],
        losses_kw=rec["losses"],
        slack_kva=rec["slack"],
        events=events,
        pv_customers=tuple(pv),
        inverter_buses=[net.customer_bus(c) for c in pv],
        infeasible_steps=[],
        kkt_max=0.0,
        oracle_iterations_max=max_iters,
    )


def _run_day_cic(
    net, scenario, settings, frame, t_len, profiles, demand_series, avail_series
):
    droop = settings.droop
    pv = list(scenario.pv_customers)
    alpha = scenario.alpha if scenario.mode == "cic_fair" else 0.0
    cic_settings = cicopt.CicSettings(
        alpha=alpha,
        loss_weight=settings.loss_weight,
        balanced=settings.balanced,
        normalize=settings.normalize,
        kkt_target=settings.kkt_target,
        voltage_cap=settings.voltage_cap,
        cap_margin_v=settings.cap_margin_v,
    )
    specs = [
        cicopt.InverterSpec(
            bus=net.customer_bus(c),
            phase=net.bus(net.customer_bus(c)).phase,
            rating_kva=settings.rating_kva,
            q_min_pu=droop.q_min_pu,
        )
        for c in pv
    ]
    engine = cicopt.CicEngine(net, specs, cic_settings)

    n_ns = frame.n - 1
    shape = (n_ns,) if settings.balanced else (n_ns, 3)
    ang = np.deg2rad(np.array(SLACK_ANGLES_DEG[: frame.nph]))
    v_ref = np.exp(1j * ang)
    v_nom0 = np.tile(v_ref, (n_ns, 1))
    lin = LinearizationPoint(
        v_nom=v_nom0[:, 0] if settings.balanced else v_nom0, eta=settings.eta
    )
    v_max = np.full(len(pv), droop.v_trip)

    rec = _alloc(t_len, frame, len(pv))
    v_model_mag = np.full((t_len, frame.n, frame.nph), np.nan)
    infeasible_steps: list[int] = []
    kkt_max = 0.0
    max_iters = 0

    cust_pos = {}
    for c in pv:
        row, ph = frame.cust_rows[c]
        cust_pos[c] = (row, ph)

    for t in range(t_len):
        avail = np.array([avail_series[c][t] for c in pv])
        dem = np.array([demand_series[c][t] for c in pv])
        load_p = np.zeros(shape)
        load_q = np.zeros(shape)
        for c in demand_series:
            row, ph = frame.cust_rows[c]
            p = demand_series[c][t]
            load_p[(row - 1,) + ((ph,) if not settings.balanced else ())] += p / len(ph)
            load_q[(row - 1,) + ((ph,) if not settings.balanced else ())] += (
                profiles.q_factor * p / len(ph)
            )
        prob = cicopt.assemble(
            net,
            specs,
            p_avail_kw=avail,
            p_demand_kw=dem,
            q_demand_kvar=profiles.q_factor * dem,
            load_p_kw=load_p,
            load_q_kvar=load_q,
            lin=lin,
            v_max_v=v_max.copy(),
            settings=cic_settings,
        )
        sol = engine.solve(prob)
        if sol.status == "infeasible":
            infeasible_steps.append(t)
            log.warning(
                "t=%d: dispatch infeasible (%s); applying full curtailment",
                t,
                "; ".join(sol.violated[:3]),
            )
        kkt_max = max(kkt_max, 0.0 if sol.status == "infeasible" else sol.kkt_residual)

        p_out = avail - sol.p_curt_kw
        q_out = sol.q_kvar
        s = _load_injections(frame, {c: demand_series[c][t] for c in demand_series}, profiles.q_factor)
        for k, c in enumerate(pv):
            frame.inject(s, c, p_out[k], q_out[k])
        osol = pfsolve.solve_power_flow(
            net, s, tol=settings.pf_tol, max_iter=settings.pf_max_iter, balanced=settings.balanced
        )
        max_iters = max(max_iters, osol.iterations)

        rec["p_avail"][t] = avail
        rec["p_out"][t] = p_out
        rec["p_curt"][t] = sol.p_curt_kw
        rec["q"][t] = q_out
        rec["v_oracle"][t] = np.where(osol.mask, np.abs(osol.v), np.nan)
        rec["losses"][t] = pfsolve.line_losses_exact(net, osol)
        rec["slack"][t] = pfsolve.slack_apparent_power(osol, net)
        vm = sol.v_model_pu.reshape(n_ns, frame.nph) * net.base_voltage_v
        v_model_mag[t, 0] = np.abs(v_ref) * net.base_voltage_v
        v_model_mag[t, 1:] = np.abs(vm)
        v_model_mag[t][~osol.mask] = np.nan

        v_hat_pu = frame.measured_complex_pu(osol)
        lin = update_vnom(lin, v_hat_pu, sol.v_model_pu)
        for k, c in enumerate(pv):
            v_meas = frame.measured_at(osol, c)
            v_max[k] = cicopt.update_vmax(v_max[k], v_meas, droop)

    return DayResult(
        mode=scenario.mode,
        scenario=scenario,
        minutes=profiles.minutes.copy(),
        bus_order=frame.order,
        balanced=settings.balanced,
        v_oracle_mag=rec["v_oracle"],
        v_model_mag=v_model_mag,
        p_avail_kw=rec["p_avail"],
        p_out_kw=rec["p_out"],
        p_curt_kw=rec["p_curt"],
        q_kvar=rec["q"],
        losses_kw=rec["losses"],
        slack_kva=rec["slack"],
        events=[],
        pv_customers=tuple(pv),
        inverter_buses=[net.customer_bus(c) for c in pv],
        infeasible_steps=infeasible_steps,
        kkt_max=kkt_max,
        oracle_iterations_max=max_iters,
    )


# --------------------------------------------------------------------------
# metrics


def utilized_power(result: DayResult, baseline_losses_kwh: float) -> tuple[float, float]:
    """(kWh, percent of available PV) after curtailment and the loss increase."""
    pv_kwh = float(result.p_avail_kw.sum()) / 60.0
    curt_kwh = float(result.p_curt_kw.sum()) / 60.0
    loss_kwh = float(result.losses_kw.sum()) / 60.0
    utilized = pv_kwh - curt_kwh - (loss_kwh - baseline_losses_kwh)
    pct = 100.0 * utilized / pv_kwh if pv_kwh > 0 else 100.0
    return utilized, pct


def hosting_capacity(
    flags: dict[float, list[bool]]
) -> tuple[float | None, float | None]:
    """(cap_min, cap_max): first penetration with any / with all scenarios curtailing."""
    cap_min = cap_max = None
    for pen in sorted(flags):
        fl = flags[pen]
        if cap_min is None and any(fl):
            cap_min = pen
        if cap_max is None and fl and all(fl):
            cap_max = pen
    return cap_min, cap_max


def relative_error_sigma(
    v_model_mag: np.ndarray, v_oracle_mag: np.ndarray, base_voltage_v: float = 230.0
) -> tuple[float, float, float]:
    """(sigma, max dV+ pu, max dV- pu) comparing model against oracle magnitudes."""
    vm = np.asarray(v_model_mag, dtype=float)
    vo = np.asarray(v_oracle_mag, dtype=float)
    if vm.shape != vo.shape:
        raise ValueError("model and oracle arrays must share a shape")
    valid = np.isfinite(vm) & np.isfinite(vo)
    vm, vo = vm[valid], vo[valid]
    if vm.size == 0:
        return 0.0, 0.0, 0.0
    if np.any(vo == 0):
        raise ValueError("oracle voltage of zero in the comparison set")
    sigma = float(np.max(np.abs((vo - vm) / vo)))
    dv = (vm - vo) / base_voltage_v
    return sigma, float(np.max(dv, initial=0.0)), float(np.max(-dv, initial=0.0))


def transformer_peak(result: DayResult) -> float:
    return float(np.max(result.slack_kva))


def max_consecutive_overtrip(result: DayResult, v_trip: float) -> int:
    """Longest run of minutes with an inverter's oracle voltage above v_trip."""
    worst = 0
    pos = {b: k for k, b in enumerate(result.bus_order)}
    for k, bus in enumerate(result.inverter_buses):
        series = result.v_oracle_mag[:, pos[bus], :]
        over = np.nanmax(series, axis=1) > v_trip
        run = best = 0
        for flag in over:
            run = run + 1 if flag else 0
            best = max(best, run)
        worst = max(worst, best)
    return worst


@dataclass
class RunSummary:
    mode: str
    penetration: float
    scenario_id: str
    placement: str
    alpha: float
    pv_kwh: float
    curtail_kwh: float
    loss_kwh: float
    baseline_loss_kwh: float
    utilized_kwh: float
    utilized_pct: float
    peak_kva: float
    any_curtailment: bool
    sigma: float | None
    max_dv_plus: float | None
    max_dv_minus: float | None
    max_consec_overtrip: int
    overtrip_minutes: int
    n_trip_avg: int
    n_trip_instant: int
    n_reconnect: int
    infeasible_steps: int
    kkt_max: float


def summarize_run(
    result: DayResult, baseline_losses_kwh: float, settings: SimSettings
) -> RunSummary:
    utilized, pct = utilized_power(result, baseline_losses_kwh)
    sigma = dvp = dvm = None
    if result.v_model_mag is not None:
        sigma, dvp, dvm = relative_error_sigma(result.v_model_mag, result.v_oracle_mag)
    pos = {b: k for k, b in enumerate(result.bus_order)}
    over_minutes = 0
    for bus in result.inverter_buses:
        series = result.v_oracle_mag[:, pos[bus], :]
        over_minutes += int(np.sum(np.nanmax(series, axis=1) > settings.droop.v_trip))
    kinds = [kind for _, _, kind in result.events]
    return RunSummary(
        mode=result.mode,
        penetration=result.scenario.penetration,
        scenario_id=result.scenario.id,
        placement=result.scenario.placement,
        alpha=result.scenario.alpha,
        pv_kwh=float(result.p_avail_kw.sum()) / 60.0,
        curtail_kwh=float(result.p_curt_kw.sum()) / 60.0,
        loss_kwh=float(result.losses_kw.sum()) / 60.0,
        baseline_loss_kwh=baseline_losses_kwh,
        utilized_kwh=utilized,
        utilized_pct=pct,
        peak_kva=transformer_peak(result),
        any_curtailment=bool(np.any(result.p_curt_kw > settings.curtail_eps_kw)),
        sigma=sigma,
        max_dv_plus=dvp,
        max_dv_minus=dvm,
        max_consec_overtrip=max_consecutive_overtrip(result, settings.droop.v_trip),
        overtrip_minutes=over_minutes,
        n_trip_avg=kinds.count("trip_avg"),
        n_trip_instant=kinds.count("trip_instant"),
        n_reconnect=kinds.count("reconnect"),
        infeasible_steps=len(result.infeasible_steps),
        kkt_max=result.kkt_max,
    )


def run_baseline(net: Network, profiles: Profiles, settings: SimSettings) -> float:
    """Losses (kWh) of the no-PV day; identical for every control mode."""
    scen = Scenario("baseline", 0.0, (), "none", "legacy")
    res = run_day(net, scen, profiles, settings, seed=0)
    return float(res.losses_kw.sum()) / 60.0


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    rows: list[RunSummary]
    hosting: dict[str, tuple[float | None, float | None]]
    baseline_loss_kwh: float
    grid: list[float]
    modes: list[str]

    def rows_for(self, mode: str, penetration: float | None = None) -> list[RunSummary]:
        out = [r for r in self.rows if r.mode == mode]
        if penetration is not None:
            out = [r for r in out if abs(r.penetration - penetration) < 1e-9]
        return out


def _run_task(args):
    net, scenario, profiles, settings, seed, baseline = args
    res = run_day(net, scenario, profiles, settings, seed=seed)
    return summarize_run(res, baseline, settings)


def run_sweep(
    net: Network,
    profiles: Profiles,
    modes: list[str],
    grid: list[float],
    n_random: int = 18,
    seed: int = 0,
    settings: SimSettings | None = None,
    jobs: int = 1,
    alpha: float = 0.0,
) -> SweepResult:
    """Cross modes with penetration levels over a shared set of placements."""
    settings = settings or SimSettings()
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    baseline = run_baseline(net, profiles, settings)
    tasks = []
    for pen in grid:
        placements = generate_scenarios(net, pen, n_random=n_random, seed=seed)
        for si, scen in enumerate(placements):
            for mi, mode in enumerate(modes):
                run_seed = int(
                    np.random.SeedSequence(
                        [seed, round(pen * 1000), si, mi]
                    ).generate_state(1)[0]
                )
                mode_alpha = alpha if mode == "cic_fair" else 0.0
                tasks.append(
                    (net, scen.with_mode(mode, mode_alpha), profiles, settings, run_seed, baseline)
                )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_task, tasks, chunksize=4))
    else:
        rows = [_run_task(t) for t in tasks]
    rows.sort(key=lambda r: (r.penetration, r.scenario_id, r.mode))

    hosting = {}
    for mode in modes:
        flags = {}
        for pen in grid:
            sel = [r for r in rows if r.mode == mode and abs(r.penetration - pen) < 1e-9]
            flags[pen] = [r.any_curtailment for r in sel]
        hosting[mode] = hosting_capacity(flags)
    return SweepResult(
        rows=rows, hosting=hosting, baseline_loss_kwh=baseline,
        grid=list(grid), modes=list(modes),
    )


# --------------------------------------------------------------------------
# artifact writers


def write_dayresult_csv(result: DayResult, path: str | Path) -> None:
    """Per (t, bus, phase) rows: voltages plus inverter power at that bus."""
    pos = {b: k for k, b in enumerate(result.bus_order)}
    inv_at = {}
    for k, bus in enumerate(result.inverter_buses):
        inv_at.setdefault(bus, k)
    names = "A" if result.balanced else "ABC"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["t", "bus", "phase", "v_model", "v_oracle", "p_inj", "p_curt", "q",
             "losses_kw", "slack_kva"]
        )
        for t in range(result.minutes.shape[0]):
            for b in result.bus_order:
                r = pos[b]
                k = inv_at.get(b)
                for ph in range(result.v_oracle_mag.shape[2]):
                    vo = result.v_oracle_mag[t, r, ph]
                    if not np.isfinite(vo):
                        continue
                    vm = (
                        result.v_model_mag[t, r, ph]
                        if result.v_model_mag is not None
                        else None
                    )
                    w.writerow(
                        [
                            int(result.minutes[t]),
                            b,
                            names[ph],
                            "" if vm is None or not np.isfinite(vm) else repr(float(vm)),
                            repr(float(vo)),
                            "" if k is None else repr(float(result.p_out_kw[t, k])),
                            "" if k is None else repr(float(result.p_curt_kw[t, k])),
                            "" if k is None else repr(float(result.q_kvar[t, k])),
                            repr(float(result.losses_kw[t])),
                            repr(float(result.slack_kva[t])),
                        ]
                    )


def write_events_csv(result: DayResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "inverter", "event"])
        for t, cust, kind in result.events:
            w.writerow([int(result.minutes[t]), cust, kind])


def summary_to_dict(s: RunSummary) -> dict:
    return {
        "mode": s.mode,
        "penetration": s.penetration,
        "scenario": s.scenario_id,
        "placement": s.placement,
        "alpha": s.alpha,
        "pv_kwh": s.pv_kwh,
        "curtail_kwh": s.curtail_kwh,
        "loss_kwh": s.loss_kwh,
        "baseline_loss_kwh": s.baseline_loss_kwh,
        "utilized_kwh": s.utilized_kwh,
        "utilized_pct": s.utilized_pct,
        "peak_kva": s.peak_kva,
        "any_curtailment": s.any_curtailment,
        "sigma": s.sigma,
        "max_dv_plus": s.max_dv_plus,
        "max_dv_minus": s.max_dv_minus,
        "max_consec_overtrip": s.max_consec_overtrip,
        "overtrip_minutes": s.overtrip_minutes,
        "events": {
            "trip_avg": s.n_trip_avg,
            "trip_instant": s.n_trip_instant,
            "reconnect": s.n_reconnect,
        },
        "infeasible_steps": s.infeasible_steps,
        "kkt_max": s.kkt_max,
    }


def write_json(data: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")
