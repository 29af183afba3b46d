"""Exact power flow for radial feeders via backward/forward sweep.

This is the measurement oracle of the simulator: given per-bus power
injections it returns the voltages a metering infrastructure would report.
Loads are constant-power (PQ). Two modes are supported:

* ``balanced``: single-wire equivalent using each segment's self impedance.
* full three-phase: 3x3 segment impedance matrices including mutual
  coupling, with the slack held at 230 V per phase at 0 / -120 / +120 deg.

All arithmetic is in per-unit (100 kVA, 230 V L-N); voltages are returned
in volts. The sweep converges when the largest per-bus complex power
mismatch drops below ``tol`` (per-unit).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netmodel import Network, phase_indices

SLACK_ANGLES_DEG = (0.0, -120.0, 120.0)  # A, B, C


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, iterations: int, mismatch: float):
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(
            f"power flow did not converge in {iterations} iterations "
            f"(final mismatch {mismatch:.3e} pu)"
        )


class SingularSegmentError(SolverError):
    pass


@dataclass(frozen=True)
class PowerInjection:
    """Per-phase complex power at a bus, kW + j*kVAr, injection-positive."""

    bus: int
    s_abc: np.ndarray  # complex, shape (3,)

    @classmethod
    def at_phase(cls, bus: int, phase: str, p_kw: float, q_kvar: float) -> "PowerInjection":
        s = np.zeros(3, dtype=complex)
        for i in phase_indices(phase):
            s[i] += complex(p_kw, q_kvar) / len(phase_indices(phase))
        return cls(bus, s)

    @classmethod
    def split(cls, bus: int, p_kw: float, q_kvar: float) -> "PowerInjection":
        """Balanced three-phase injection: total power divided over A, B, C."""
        return cls(bus, np.full(3, complex(p_kw, q_kvar) / 3.0))

    def total_kva(self) -> complex:
        return complex(np.sum(self.s_abc))


@dataclass
class VoltageSolution:
    """Converged per-bus, per-phase complex voltages in volts."""

    bus_order: list[int]
    v: np.ndarray  # complex, (n_bus, n_ph) in volts
    mask: np.ndarray  # bool, (n_bus, n_ph); energized phases
    iterations: int
    max_mismatch_pu: float
    balanced: bool
    index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {b: k for k, b in enumerate(self.bus_order)}

    def at(self, bus: int) -> np.ndarray:
        return self.v[self.index[bus]]

    def magnitude(self, bus: int, phase_idx: int = 0) -> float:
        return float(abs(self.v[self.index[bus], phase_idx]))

    def magnitudes(self) -> np.ndarray:
        out = np.abs(self.v)
        out[~self.mask] = np.nan
        return out

    def to_csv(self, path: str | Path) -> None:
        """Debug dump: bus, phase, Re, Im, magnitude."""
        names = "A" if self.balanced else "ABC"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bus", "phase", "v_re", "v_im", "v_mag"])
            for b in self.bus_order:
                row = self.v[self.index[b]]
                for k, name in enumerate(names[: row.shape[0]]):
                    if self.mask[self.index[b], k]:
                        w.writerow([b, name, repr(row[k].real), repr(row[k].imag), repr(abs(row[k]))])


class _Prepared:
    """Sweep-ready arrays for one network and mode, cached on the Network."""

    def __init__(self, net: Network, balanced: bool):
        self.balanced = balanced
        self.order = list(net.bfs_order)
        self.pos = {b: k for k, b in enumerate(self.order)}
        n = len(self.order)
        self.n_ph = 1 if balanced else 3
        self.mask = np.zeros((n, self.n_ph), dtype=bool)
        self.mask[0] = True  # slack: fully energized

        # per non-slack bus (in BFS order): parent position, phase indices of
        # the feeding segment, segment Z and Y (pu)
        self.parent_pos: list[int] = []
        self.seg_phases: list[np.ndarray] = []
        self.seg_z: list[np.ndarray] = []
        self.seg_y: list[np.ndarray] = []
        zb = net.z_base_ohm
        for b in self.order[1:]:
            seg = net.parent_line[b]
            par = net.parent[b]
            if balanced:
                idx = np.array([0])
                z = np.array([[seg.cable.z_self * seg.length_km]]) / zb
            else:
                idx = np.array(phase_indices(seg.phases))
                z = seg.matrix_ohm() / zb
            if not np.all(self.mask[self.pos[par], idx if not balanced else [0]]):
                raise SolverError(
                    f"segment {seg.from_bus}->{seg.to_bus} carries phases its parent lacks"
                )
            try:
                y = np.linalg.inv(z)
            except np.linalg.LinAlgError:
                raise SingularSegmentError(
                    f"segment {seg.from_bus}->{seg.to_bus} has a singular impedance matrix"
                ) from None
            self.parent_pos.append(self.pos[par])
            self.seg_phases.append(idx if not balanced else np.array([0]))
            self.seg_z.append(z)
            self.seg_y.append(y)
            self.mask[self.pos[b], self.seg_phases[-1]] = True

        ang = np.deg2rad(np.array(SLACK_ANGLES_DEG[: self.n_ph]))
        self.v_slack = np.exp(1j * ang)  # 1 pu per phase
        if balanced:
            self.z_scalar = [complex(z[0, 0]) for z in self.seg_z]


def _prepared(net: Network, balanced: bool) -> _Prepared:
    key = ("pf", balanced)
    prep = net._cache.get(key)
    if prep is None:
        prep = _Prepared(net, balanced)
        net._cache[key] = prep
    return prep


def _injection_matrix(
    net: Network, prep: _Prepared, injections
) -> np.ndarray:
    """Per-unit complex power, (n_bus, n_ph), injection-positive.

    Accepts a list of PowerInjection records, or (fast path) a complex array
    of shape (n_bus, n_ph) in kVA already laid out in BFS bus order.
    """
    if isinstance(injections, np.ndarray):
        if injections.shape != (len(prep.order), prep.n_ph):
            raise SolverError(
                f"injection array must have shape ({len(prep.order)}, {prep.n_ph})"
            )
        s = injections.astype(complex) / net.base_power_kva
        if np.any((np.abs(s) > 0) & ~prep.mask):
            raise SolverError("injection on a de-energized phase")
        if not np.all(np.isfinite(s)):
            raise SolverError("non-finite injection")
        return s
    s = np.zeros((len(prep.order), prep.n_ph), dtype=complex)
    for inj in injections:
        if inj.bus not in prep.pos:
            raise SolverError(f"injection references unknown bus {inj.bus}")
        k = prep.pos[inj.bus]
        if prep.balanced:
            s[k, 0] += inj.total_kva() / net.base_power_kva
        else:
            s_abc = np.asarray(inj.s_abc, dtype=complex)
            if np.any((np.abs(s_abc) > 0) & ~prep.mask[k]):
                raise SolverError(f"injection at bus {inj.bus} on a de-energized phase")
            s[k] += s_abc / net.base_power_kva
    if not np.all(np.isfinite(s)):
        raise SolverError("non-finite injection")
    return s


def solve_power_flow(
    net: Network,
    injections,
    tol: float = 1e-8,
    max_iter: int = 100,
    balanced: bool = False,
) -> VoltageSolution:
    """Backward/forward sweep to the constant-power fixed point.

    Backward pass accumulates branch currents from the leaves using the nodal
    currents conj(S/V); forward pass propagates voltage drops Z @ J from the
    slack. The mismatch is the gap between the specified injection and the
    power implied by the branch currents at the updated voltages.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    prep = _prepared(net, balanced)
    n = len(prep.order)
    s_spec = _injection_matrix(net, prep, injections)

    if balanced:
        v_list, iterations, mismatch = _sweep_scalar(prep, s_spec[:, 0], tol, max_iter)
        out = np.array(v_list, dtype=complex).reshape(n, 1) * net.base_voltage_v
        return VoltageSolution(
            bus_order=prep.order,
            v=out,
            mask=prep.mask.copy(),
            iterations=iterations,
            max_mismatch_pu=mismatch,
            balanced=True,
        )

    v = np.tile(prep.v_slack, (n, 1))
    v[~prep.mask] = np.nan
    nseg = n - 1
    j_seg: list[np.ndarray] = [np.zeros(0, dtype=complex)] * nseg

    iterations = 0
    mismatch = np.inf
    for iterations in range(1, max_iter + 1):
        with np.errstate(invalid="ignore", divide="ignore"):
            i_inj = np.conj(s_spec / v)
        i_inj[~prep.mask] = 0.0

        # backward: J into child = sum of child's outgoing branch currents
        # minus the child's injection, on the feeding segment's phases
        i_acc = np.zeros((n, prep.n_ph), dtype=complex)
        for k in range(nseg - 1, -1, -1):
            child = k + 1
            ph = prep.seg_phases[k]
            j = i_acc[child, ph] - i_inj[child, ph]
            j_seg[k] = j
            i_acc[prep.parent_pos[k], ph] += j

        # forward: propagate voltage drops
        for k in range(nseg):
            child = k + 1
            ph = prep.seg_phases[k]
            v[child, ph] = v[prep.parent_pos[k], ph] - prep.seg_z[k] @ j_seg[k]

        # implied nodal injection from the (pre-update) branch currents
        i_implied = np.zeros((n, prep.n_ph), dtype=complex)
        for k in range(nseg):
            child = k + 1
            ph = prep.seg_phases[k]
            i_implied[child, ph] -= j_seg[k]
            i_implied[prep.parent_pos[k], ph] += j_seg[k]
        s_implied = v * np.conj(i_implied)
        gap = np.abs(s_spec - np.where(prep.mask, s_implied, 0.0))[1:]
        mismatch = float(np.max(gap)) if gap.size else 0.0
        if mismatch <= tol:
            break
    else:
        raise ConvergenceError(max_iter, mismatch)

    out = v * net.base_voltage_v
    return VoltageSolution(
        bus_order=prep.order,
        v=out,
        mask=prep.mask.copy(),
        iterations=iterations,
        max_mismatch_pu=mismatch,
        balanced=balanced,
    )


def _sweep_scalar(prep: _Prepared, s_spec: np.ndarray, tol: float, max_iter: int):
    """Single-wire sweep on plain Python complex scalars (hot path)."""
    n = len(prep.order)
    nseg = n - 1
    par = prep.parent_pos
    z = prep.z_scalar
    s = [complex(x) for x in s_spec]
    v = [1.0 + 0.0j] * n
    j = [0.0j] * nseg
    mismatch = 0.0
    for iteration in range(1, max_iter + 1):
        i_inj = [(s[k] / v[k]).conjugate() for k in range(n)]
        i_acc = [0.0j] * n
        for k in range(nseg - 1, -1, -1):
            child = k + 1
            jj = i_acc[child] - i_inj[child]
            j[k] = jj
            i_acc[par[k]] += jj
        for k in range(nseg):
            v[k + 1] = v[par[k]] - z[k] * j[k]
        mismatch = 0.0
        for k in range(nseg):
            child = k + 1
            gap = abs(s[child] - v[child] * (i_acc[child] - j[k]).conjugate())
            if gap > mismatch:
                mismatch = gap
        if mismatch <= tol:
            return v, iteration, mismatch
    raise ConvergenceError(max_iter, mismatch)


def _segment_drops(net: Network, sol: VoltageSolution):
    prep = _prepared(net, sol.balanced)
    for k in range(len(prep.order) - 1):
        child = k + 1
        ph = prep.seg_phases[k]
        dv = (sol.v[prep.parent_pos[k], ph] - sol.v[child, ph]) / net.base_voltage_v
        yield prep.seg_y[k], dv


def line_losses_exact(net: Network, sol: VoltageSolution) -> float:
    """Total active losses in kW from exact voltage drops.

    Per segment the dissipated power is Re{dV^H Y dV} with Y the segment
    admittance matrix; for a single-phase segment this reduces to
    Re{y} * ((dRe)^2 + (dIm)^2).
    """
    total = 0.0
    for y, dv in _segment_drops(net, sol):
        total += float(np.real(np.conj(dv) @ (y @ dv)))
    return total * net.base_power_kva


def slack_apparent_power(sol: VoltageSolution, net: Network) -> float:
    """|S| through the transformer in kVA, direction-agnostic."""
    prep = _prepared(net, sol.balanced)
    s = 0.0 + 0.0j
    for k in range(len(prep.order) - 1):
        if prep.parent_pos[k] != 0:
            continue
        ph = prep.seg_phases[k]
        dv = (sol.v[0, ph] - sol.v[k + 1, ph]) / net.base_voltage_v
        j = prep.seg_y[k] @ dv
        s += np.sum(sol.v[0, ph] / net.base_voltage_v * np.conj(j))
    return float(abs(s)) * net.base_power_kva
