"""Linearized voltage model used by the coordinated dispatch optimizer.

The balanced model maps per-bus net power injections (p, q) to complex
voltage perturbations through the resistance/reactance parts of the reduced
bus impedance matrix (slack row and column removed before inversion):

    Re{dV} = R p + X q        Im{dV} = X p - R q

optionally normalized by the nominal voltage at the source bus (first-order
Taylor form). The three-phase extension builds one such matrix per phase
pair from the segment phase impedance matrices and rotates each phase's
perturbation into the Cartesian frame with a 2x2 rotation (the frame angle
undoes the phase's nominal displacement of 0 / -120 / +120 degrees).

The linearization point tracks the measured operating point with a damped
update  v_nom <- v_nom + eta (v_measured - v_model).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netmodel import Network, NetworkError, phase_indices

PARK_ANGLES_DEG = {"A": 0.0, "B": 120.0, "C": -120.0}


@dataclass(frozen=True)
class ParkFrame:
    """Rotation between a phase's reference frame and the Cartesian frame."""

    theta_deg: float
    d: np.ndarray  # 2x2

    def rotate(self, re, im):
        return self.d[0, 0] * re + self.d[0, 1] * im, self.d[1, 0] * re + self.d[1, 1] * im


def park_frame(phase: str) -> ParkFrame:
    theta = PARK_ANGLES_DEG[phase]
    c, s = math.cos(math.radians(theta)), math.sin(math.radians(theta))
    return ParkFrame(theta, np.array([[c, s], [-s, c]]))


FRAMES = {p: park_frame(p) for p in "ABC"}


@dataclass
class SensitivityMatrices:
    """Reduced bus impedance matrix split into R and X parts (per-unit)."""

    r: np.ndarray  # (n, n)
    x: np.ndarray  # (n, n)
    bus_order: list[int]  # non-slack bus ids, row/column order

    def __post_init__(self):
        self.index = {b: k for k, b in enumerate(self.bus_order)}


@dataclass
class PhaseSensitivity:
    """Per phase-pair bus matrices: rr[i, j] couples source phase j to phase i."""

    rr: np.ndarray  # (3, 3, n, n)
    xx: np.ndarray  # (3, 3, n, n)
    bus_order: list[int]

    def __post_init__(self):
        self.index = {b: k for k, b in enumerate(self.bus_order)}


def build_sensitivity(net: Network) -> SensitivityMatrices:
    """Invert the reduced nodal admittance matrix of the single-wire equivalent."""
    order = net.non_slack()
    pos = {b: k for k, b in enumerate(order)}
    n = len(order)
    y = np.zeros((n, n), dtype=complex)
    zb = net.z_base_ohm
    for seg in net.lines:
        z = seg.cable.z_self * seg.length_km / zb
        ya = 1.0 / z
        a = pos.get(seg.from_bus)
        b = pos.get(seg.to_bus)
        if a is not None:
            y[a, a] += ya
        if b is not None:
            y[b, b] += ya
        if a is not None and b is not None:
            y[a, b] -= ya
            y[b, a] -= ya
    try:
        z_bus = np.linalg.inv(y)
    except np.linalg.LinAlgError:
        raise NetworkError("reduced admittance matrix is singular") from None
    return SensitivityMatrices(r=z_bus.real.copy(), x=z_bus.imag.copy(), bus_order=order)


def build_phase_sensitivity(net: Network) -> PhaseSensitivity:
    """Common-path sums of the segment phase impedance matrices.

    For a radial network the bus impedance entry (n, m) is the series
    impedance of the shared slack->n / slack->m path, taken per phase pair.
    """
    order = net.non_slack()
    pos = {b: k for k, b in enumerate(order)}
    n = len(order)
    nseg = len(net.lines)
    seg_index = {id(seg): k for k, seg in enumerate(net.lines)}

    # path incidence: rows buses, columns segments on the path to slack
    a = np.zeros((n, nseg))
    for b in order:
        cur = b
        while net.parent[cur] is not None:
            a[pos[b], seg_index[id(net.parent_line[cur])]] = 1.0
            cur = net.parent[cur]

    zb = net.z_base_ohm
    z_seg = np.zeros((3, 3, nseg), dtype=complex)
    for seg in net.lines:
        k = seg_index[id(seg)]
        idx = phase_indices(seg.phases)
        z_seg[np.ix_(idx, idx, [k])] = (seg.matrix_ohm() / zb)[:, :, None]

    rr = np.zeros((3, 3, n, n))
    xx = np.zeros((3, 3, n, n))
    for i in range(3):
        for j in range(3):
            zij = (a * z_seg[i, j]) @ a.T
            rr[i, j] = zij.real
            xx[i, j] = zij.imag
    return PhaseSensitivity(rr=rr, xx=xx, bus_order=order)


@dataclass
class LinearizationPoint:
    """Complex nominal voltages (per-unit) the model linearizes about."""

    v_nom: np.ndarray  # complex, (n,) balanced or (n, 3) unbalanced
    eta: float = 0.4

    def validate(self) -> None:
        mag = np.abs(self.v_nom)
        if np.any(mag < 0.8) or np.any(mag > 1.2):
            raise ValueError("nominal voltage outside the 0.8..1.2 pu sanity band")
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("eta must be in (0, 1]")


def update_vnom(
    point: LinearizationPoint, v_measured: np.ndarray, v_model: np.ndarray
) -> LinearizationPoint:
    """Damped tracking of the measured operating point (element-wise)."""
    v_measured = np.asarray(v_measured)
    v_model = np.asarray(v_model)
    if v_measured.shape != point.v_nom.shape or v_model.shape != point.v_nom.shape:
        raise ValueError("shape mismatch in nominal-point update")
    return LinearizationPoint(
        v_nom=point.v_nom + point.eta * (v_measured - v_model), eta=point.eta
    )


def _source_weights(v_nom, shape, normalize: bool) -> np.ndarray:
    if not normalize:
        return np.ones(shape)
    if v_nom is None:
        raise ValueError("normalize requires a nominal voltage")
    w = 1.0 / np.abs(np.asarray(v_nom))
    if w.shape != shape:
        raise ValueError("nominal voltage shape mismatch")
    return w


def delta_v_balanced(
    p_pu: np.ndarray,
    q_pu: np.ndarray,
    sens: SensitivityMatrices,
    v_nom: np.ndarray | None = None,
    normalize: bool = True,
) -> np.ndarray:
    """Complex voltage perturbation (pu) for net signed injections p + jq (pu)."""
    p = np.asarray(p_pu, dtype=float)
    q = np.asarray(q_pu, dtype=float)
    n = len(sens.bus_order)
    if p.shape != (n,) or q.shape != (n,):
        raise ValueError(f"injection vectors must have shape ({n},)")
    w = _source_weights(v_nom, (n,), normalize)
    pw, qw = p * w, q * w
    d_re = sens.r @ pw + sens.x @ qw
    d_im = sens.x @ pw - sens.r @ qw
    return d_re + 1j * d_im


def delta_v_unbalanced(
    p_pu: np.ndarray,
    q_pu: np.ndarray,
    psens: PhaseSensitivity,
    v_nom: np.ndarray | None = None,
    normalize: bool = True,
) -> np.ndarray:
    """Per-phase complex voltage perturbation (pu) for (n, 3) injections.

    Phase couplings are accumulated over source phases through the phase-pair
    matrices, then each observation phase's (Re, Im) pair is rotated with its
    frame matrix.
    """
    p = np.asarray(p_pu, dtype=float)
    q = np.asarray(q_pu, dtype=float)
    n = len(psens.bus_order)
    if p.shape != (n, 3) or q.shape != (n, 3):
        raise ValueError(f"injection arrays must have shape ({n}, 3)")
    w = _source_weights(v_nom, (n, 3), normalize)
    pw, qw = p * w, q * w
    out = np.zeros((n, 3), dtype=complex)
    for i, phase in enumerate("ABC"):
        br_re = np.zeros(n)
        br_im = np.zeros(n)
        for j in range(3):
            br_re += psens.rr[i, j] @ pw[:, j] + psens.xx[i, j] @ qw[:, j]
            br_im += psens.xx[i, j] @ pw[:, j] - psens.rr[i, j] @ qw[:, j]
        d_re, d_im = FRAMES[phase].rotate(br_re, br_im)
        out[:, i] = d_re + 1j * d_im
    return out


def recover_magnitude(v) -> np.ndarray | float:
    """Voltage magnitude sqrt(Re^2 + Im^2); the angle is atan2(Im, Re)."""
    return np.abs(v)


def response_maps(sens_or_psens) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Constant linear maps from stacked source (p, q) to stacked (dRe, dIm).

    Returns (Lp_re, Lp_im, Lq_re, Lq_im), each (N, N) with N = n buses times
    the number of phases, phase-major stacking v[bus, phase] -> bus * n_ph + phase.
    """
    if isinstance(sens_or_psens, SensitivityMatrices):
        s = sens_or_psens
        return s.r.copy(), s.x.copy(), s.x.copy(), -s.r.copy()
    ps: PhaseSensitivity = sens_or_psens
    n = len(ps.bus_order)
    nn = n * 3
    lp_re = np.zeros((nn, nn))
    lp_im = np.zeros((nn, nn))
    lq_re = np.zeros((nn, nn))
    lq_im = np.zeros((nn, nn))
    for i, phase in enumerate("ABC"):
        d = FRAMES[phase].d
        rows = np.arange(n) * 3 + i
        for j in range(3):
            cols = np.arange(n) * 3 + j
            r, x = ps.rr[i, j], ps.xx[i, j]
            # bracket: br_re = R p + X q ; br_im = X p - R q, then rotate by d
            lp_re[np.ix_(rows, cols)] = d[0, 0] * r + d[0, 1] * x
            lq_re[np.ix_(rows, cols)] = d[0, 0] * x - d[0, 1] * r
            lp_im[np.ix_(rows, cols)] = d[1, 0] * r + d[1, 1] * x
            lq_im[np.ix_(rows, cols)] = d[1, 0] * x - d[1, 1] * r
    return lp_re, lp_im, lq_re, lq_im
