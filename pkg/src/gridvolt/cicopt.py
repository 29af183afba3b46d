"""Coordinated inverter dispatch: one convex program per timestep.

Decision variables are each coordinated inverter's active power curtailment
P_c >= 0 and (lagging-only) reactive support Q_c <= 0. Voltages are affine
in the decisions through the linearized model, so they are eliminated and
recovered after the solve. The program minimizes

    sum_c P_c  +  loss_weight *線 predicted line losses  +  alpha * ratio variance

subject to the curtailment bound (excess power only), the inverter kVA disk,
the reactive support band, and the per-inverter voltage cap, either
|V_c|^2 <= V_max^2 (default) or the single-phase shortcut Re{V_c} <= V_max.

The solve runs as a second-order cone program on a primal-dual interior-point
solver; optimality is certified independently of the solver by reconstructing
KKT multipliers for the active constraints (non-negative least squares) and
reporting the worst stationarity / feasibility / complementarity residual.
A projected-gradient fallback covers degenerate instances.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from scipy.optimize import nnls

from .controllers import DroopSettings
from .linmodel import (
    LinearizationPoint,
    build_phase_sensitivity,
    build_sensitivity,
    response_maps,
)
from .netmodel import Network, phase_indices
from .pfsolve import SLACK_ANGLES_DEG

log = logging.getLogger("gridvolt.cicopt")

EXCESS_EPS_KW = 1e-9  # customers at or below this excess are left out of the fairness variance


@dataclass(frozen=True)
class InverterSpec:
    bus: int
    phase: str = "ABC"
    rating_kva: float = 5.5
    q_min_pu: float = -0.44


@dataclass
class CicSettings:
    alpha: float = 0.0
    loss_weight: float = 1.0
    balanced: bool = True
    normalize: bool = True
    kkt_target: float = 1e-6
    # "magnitude": |V_c|^2 <= V_max^2 (default; matches the magnitude-based
    # trip rule the cap protects against). "real": Re{V_c} <= V_max, the
    # single-phase shortcut form.
    voltage_cap: str = "magnitude"
    # Dispatch targets V_max minus this margin. The cap-ratchet loop only
    # contains overshoot when the model sits below the measurement by at
    # least the tracking error (about half a volt here when setpoints swing
    # hard between minutes); a positively biased model gets the buffer for
    # free, an accurate one needs it made explicit.
    cap_margin_v: float = 1.0

    def __post_init__(self):
        if self.voltage_cap not in ("magnitude", "real"):
            raise ValueError("voltage_cap must be 'magnitude' or 'real'")
        if self.cap_margin_v < 0:
            raise ValueError("cap_margin_v must be >= 0")


@dataclass
class CicProblem:
    """One timestep's data. Bounds are realized at construction.

    ``load_p_kw`` / ``load_q_kvar`` cover ALL consumption (including the
    coordinated customers' own demand) over the non-slack buses in
    ``network.non_slack()`` order, shape (n,) balanced or (n, 3) unbalanced.
    ``p_demand_kw`` is the same demand per inverter, used for the curtailment
    bound and the fairness excess.
    """

    network: Network
    inverters: list[InverterSpec]
    settings: CicSettings
    p_avail_kw: np.ndarray
    p_demand_kw: np.ndarray
    q_demand_kvar: np.ndarray
    load_p_kw: np.ndarray
    load_q_kvar: np.ndarray
    v_nom_pu: np.ndarray  # complex, same shape as load_p_kw
    v_max_v: np.ndarray  # per inverter, volts

    p_ub_kw: np.ndarray = field(init=False)
    q_lb_kvar: np.ndarray = field(init=False)
    excess_kw: np.ndarray = field(init=False)

    def __post_init__(self):
        c = len(self.inverters)
        for name in ("p_avail_kw", "p_demand_kw", "q_demand_kvar", "v_max_v"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.shape != (c,):
                raise ValueError(f"{name} must have shape ({c},)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if any(inv.rating_kva <= 0 for inv in self.inverters):
            raise ValueError("inverter ratings must be positive")
        n = len(self.network.non_slack())
        shape = (n,) if self.settings.balanced else (n, 3)
        for name in ("load_p_kw", "load_q_kvar"):
            arr = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, arr)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        self.v_nom_pu = np.asarray(self.v_nom_pu, dtype=complex)
        if self.v_nom_pu.shape != shape:
            raise ValueError(f"v_nom_pu must have shape {shape}")
        self.excess_kw = np.maximum(self.p_avail_kw - self.p_demand_kw, 0.0)
        self.p_ub_kw = self.excess_kw.copy()
        self.q_lb_kvar = np.array(
            [inv.q_min_pu * inv.rating_kva for inv in self.inverters]
        )


@dataclass
class CicSolution:
    status: str  # optimal | infeasible | max_iter
    p_curt_kw: np.ndarray
    q_kvar: np.ndarray
    v_model_pu: np.ndarray  # complex, non-slack buses (matches problem shape)
    objective_kw: float
    curtail_kw: float
    loss_kw: float
    fairness: float
    kkt_residual: float
    iterations: int
    solver: str
    violated: list[str] = field(default_factory=list)


def assemble(
    network: Network,
    inverters: list[InverterSpec],
    p_avail_kw,
    p_demand_kw,
    q_demand_kvar,
    load_p_kw,
    load_q_kvar,
    lin: LinearizationPoint,
    v_max_v,
    settings: CicSettings | None = None,
) -> CicProblem:
    """Bundle one timestep's dispatch problem (validates and realizes bounds)."""
    return CicProblem(
        network=network,
        inverters=list(inverters),
        settings=settings or CicSettings(),
        p_avail_kw=p_avail_kw,
        p_demand_kw=p_demand_kw,
        q_demand_kvar=q_demand_kvar,
        load_p_kw=load_p_kw,
        load_q_kvar=load_q_kvar,
        v_nom_pu=lin.v_nom,
        v_max_v=v_max_v,
    )


def fairness_penalty(p_curt_kw, excess_kw, alpha: float) -> float:
    """alpha times the variance of curtailment-to-excess ratios.

    Customers without positive excess are excluded (their ratio is undefined).
    """
    p = np.asarray(p_curt_kw, dtype=float)
    ex = np.asarray(excess_kw, dtype=float)
    keep = ex > EXCESS_EPS_KW
    if not np.all(keep):
        log.debug("fairness: excluding %d customers with no excess", int((~keep).sum()))
    if keep.sum() == 0:
        return 0.0
    r = p[keep] / ex[keep]
    return float(alpha * np.mean((r - r.mean()) ** 2))


def update_vmax(v_max_v: float, v_measured_v: float, settings: DroopSettings) -> float:
    """Ratchet the voltage cap down by the amount of any trip-level overshoot."""
    if v_measured_v > settings.v_trip:
        return v_max_v - (v_measured_v - settings.v_trip)
    return v_max_v


def _fairness_matrix(excess_kw: np.ndarray, base_kva: float) -> np.ndarray:
    """M such that ||M P_pu||^2 is the mean squared ratio deviation."""
    c = excess_kw.shape[0]
    m = np.zeros((c, c))
    keep = np.flatnonzero(excess_kw > EXCESS_EPS_KW)
    if keep.size == 0:
        return m
    inv_ex = np.zeros(c)
    inv_ex[keep] = base_kva / excess_kw[keep]  # pu curtailment -> ratio
    ca = keep.size
    for row, h in enumerate(keep):
        m[row] = -inv_ex / ca
        m[row, h] += inv_ex[h]
        m[row, np.setdiff1d(np.arange(c), keep)] = 0.0
    m[: keep.size] /= math.sqrt(ca)
    return m


class CicEngine:
    """Reusable solver for a fixed (network, inverter set, settings) structure.

    Problem data varies per step through cvxpy Parameters, so the expensive
    canonicalization happens once per scenario run.
    """

    def __init__(self, network: Network, inverters: list[InverterSpec], settings: CicSettings):
        self.network = network
        self.inverters = list(inverters)
        self.settings = settings
        self.order = network.non_slack()
        self.n = len(self.order)
        self.nph = 1 if settings.balanced else 3
        self.nn = self.n * self.nph
        self.base = network.base_power_kva
        self.c = len(self.inverters)
        if not settings.balanced and any(seg.phases != "ABC" for seg in network.lines):
            raise ValueError("unbalanced dispatch expects all segments to carry A, B and C")

        if settings.balanced:
            sens = build_sensitivity(network)
        else:
            sens = build_phase_sensitivity(network)
        self.lp_re, self.lp_im, self.lq_re, self.lq_im = response_maps(sens)

        # inverter placement over the stacked (bus, phase) axis
        self.place = np.zeros((self.nn, self.c))
        self.vrows: list[np.ndarray] = []
        pos = {b: k for k, b in enumerate(self.order)}
        for j, inv in enumerate(self.inverters):
            if inv.bus not in pos:
                raise ValueError(f"inverter bus {inv.bus} is not a non-slack bus")
            if settings.balanced:
                rows = np.array([pos[inv.bus]])
            else:
                rows = pos[inv.bus] * 3 + np.array(phase_indices(inv.phase))
            self.place[rows, j] = 1.0 / len(rows)
            self.vrows.append(rows)

        self._build_loss_rows()
        self._build_cvx()

    def _build_loss_rows(self):
        net = self.network
        pos = {b: k for k, b in enumerate(self.order)}
        zb = net.z_base_ohm
        rows, c_re, c_im = [], [], []
        ang = np.deg2rad(np.array(SLACK_ANGLES_DEG[: self.nph]))
        v_slack = np.exp(1j * ang)
        for seg in net.lines:
            z_pu = seg.cable.z_self * seg.length_km / zb
            y_r = (1.0 / z_pu).real
            w = math.sqrt(max(y_r, 0.0))
            for ph in range(self.nph):
                row = np.zeros(self.nn)
                const = 0.0 + 0.0j
                for sign, b in ((1.0, seg.from_bus), (-1.0, seg.to_bus)):
                    if b == net.slack:
                        const += sign * v_slack[ph]
                    else:
                        row[pos[b] * self.nph + ph] += sign
                rows.append(w * row)
                c_re.append(w * const.real)
                c_im.append(w * const.imag)
        self.w_loss = np.array(rows)
        self.c_loss_re = np.array(c_re)
        self.c_loss_im = np.array(c_im)

    def _build_cvx(self):
        c, nn = self.c, self.nn
        self.q_lb_pu = np.array(
            [inv.q_min_pu * inv.rating_kva for inv in self.inverters]
        ) / self.base
        self.s_pu = np.array([inv.rating_kva for inv in self.inverters]) / self.base

        self.P = cp.Variable(c, name="p_curt", nonneg=True) if c else None
        self.Q = cp.Variable(c, name="q_support", nonpos=True) if c else None
        self.prm_v0_re = cp.Parameter(nn)
        self.prm_v0_im = cp.Parameter(nn)
        self.prm_a_re_p = cp.Parameter((nn, c)) if c else None
        self.prm_a_re_q = cp.Parameter((nn, c)) if c else None
        self.prm_a_im_p = cp.Parameter((nn, c)) if c else None
        self.prm_a_im_q = cp.Parameter((nn, c)) if c else None
        self.prm_p_ub = cp.Parameter(c, nonneg=True) if c else None
        self.prm_p_av = cp.Parameter(c) if c else None
        self.prm_vmax = cp.Parameter(c) if c else None
        self.prm_mfair = (
            cp.Parameter((c, c)) if (c and self.settings.alpha > 0) else None
        )
        if self.c == 0:
            self.problem = None
            return

        v_re = self.prm_v0_re + self.prm_a_re_p @ self.P + self.prm_a_re_q @ self.Q
        v_im = self.prm_v0_im + self.prm_a_im_p @ self.P + self.prm_a_im_q @ self.Q
        loss = cp.sum_squares(self.w_loss @ v_re + self.c_loss_re) + cp.sum_squares(
            self.w_loss @ v_im + self.c_loss_im
        )
        obj = cp.sum(self.P) + self.settings.loss_weight * loss
        if self.prm_mfair is not None:
            obj = obj + (self.settings.alpha / self.base) * cp.sum_squares(
                self.prm_mfair @ self.P
            )

        cons = [self.P <= self.prm_p_ub, self.Q >= self.q_lb_pu]
        for j in range(self.c):
            cons.append(
                cp.SOC(
                    self.s_pu[j],
                    cp.hstack([self.prm_p_av[j] - self.P[j], self.Q[j]]),
                )
            )
            if self.settings.voltage_cap == "real":
                for r in self.vrows[j]:
                    cons.append(v_re[r] <= self.prm_vmax[j])
            else:
                for r in self.vrows[j]:
                    cons.append(cp.SOC(self.prm_vmax[j], cp.hstack([v_re[r], v_im[r]])))
        self.problem = cp.Problem(cp.Minimize(obj), cons)

    # ---- per-step data -> parameter values ------------------------------

    def _step_arrays(self, prob: CicProblem):
        base = self.base
        w = (
            1.0 / np.abs(prob.v_nom_pu.reshape(-1))
            if self.settings.normalize
            else np.ones(self.nn)
        )
        p_base = self.place @ (prob.p_avail_kw / base) - prob.load_p_kw.reshape(-1) / base
        q_base = -prob.load_q_kvar.reshape(-1) / base

        lw_p_re = self.lp_re * w[None, :]
        lw_p_im = self.lp_im * w[None, :]
        lw_q_re = self.lq_re * w[None, :]
        lw_q_im = self.lq_im * w[None, :]

        a_re_p = -(lw_p_re @ self.place)
        a_im_p = -(lw_p_im @ self.place)
        a_re_q = lw_q_re @ self.place
        a_im_q = lw_q_im @ self.place
        v0_re = prob.v_nom_pu.reshape(-1).real + lw_p_re @ p_base + lw_q_re @ q_base
        v0_im = prob.v_nom_pu.reshape(-1).imag + lw_p_im @ p_base + lw_q_im @ q_base
        return a_re_p, a_re_q, a_im_p, a_im_q, v0_re, v0_im

    def _set_parameters(self, prob: CicProblem, arrays) -> None:
        a_re_p, a_re_q, a_im_p, a_im_q, v0_re, v0_im = arrays
        self.prm_v0_re.value = v0_re
        self.prm_v0_im.value = v0_im
        if self.c == 0:
            return
        self.prm_a_re_p.value = a_re_p
        self.prm_a_re_q.value = a_re_q
        self.prm_a_im_p.value = a_im_p
        self.prm_a_im_q.value = a_im_q
        self.prm_p_ub.value = prob.p_ub_kw / self.base
        self.prm_p_av.value = prob.p_avail_kw / self.base
        self.prm_vmax.value = self._eff_vmax_pu(prob)
        if self.prm_mfair is not None:
            self.prm_mfair.value = _fairness_matrix(prob.excess_kw, self.base)

    def _eff_vmax_pu(self, prob: CicProblem) -> np.ndarray:
        return (prob.v_max_v - self.settings.cap_margin_v) / self.network.base_voltage_v

    # ---- objective / constraints in plain numpy (shared by fallback, KKT) --

    def _objective_terms(self, arrays, p_pu, q_pu, mfair):
        a_re_p, a_re_q, a_im_p, a_im_q, v0_re, v0_im = arrays
        v_re = v0_re + a_re_p @ p_pu + a_re_q @ q_pu
        v_im = v0_im + a_im_p @ p_pu + a_im_q @ q_pu
        g_re = self.w_loss @ v_re + self.c_loss_re
        g_im = self.w_loss @ v_im + self.c_loss_im
        loss_pu = float(g_re @ g_re + g_im @ g_im)
        fair = float(((mfair @ p_pu) ** 2).sum()) if mfair is not None else 0.0
        return v_re, v_im, loss_pu, fair

    def _objective_pu(self, arrays, p_pu, q_pu, mfair):
        _, _, loss_pu, fair = self._objective_terms(arrays, p_pu, q_pu, mfair)
        return (
            float(p_pu.sum())
            + self.settings.loss_weight * loss_pu
            + (self.settings.alpha / self.base) * fair
        )

    def _objective_grad(self, arrays, p_pu, q_pu, mfair):
        a_re_p, a_re_q, a_im_p, a_im_q, v0_re, v0_im = arrays
        v_re = v0_re + a_re_p @ p_pu + a_re_q @ q_pu
        v_im = v0_im + a_im_p @ p_pu + a_im_q @ q_pu
        g_re = self.w_loss @ v_re + self.c_loss_re
        g_im = self.w_loss @ v_im + self.c_loss_im
        wt_re = self.w_loss.T @ g_re
        wt_im = self.w_loss.T @ g_im
        lw = self.settings.loss_weight
        gp = np.ones(self.c) + 2.0 * lw * (a_re_p.T @ wt_re + a_im_p.T @ wt_im)
        gq = 2.0 * lw * (a_re_q.T @ wt_re + a_im_q.T @ wt_im)
        if mfair is not None:
            gp = gp + 2.0 * (self.settings.alpha / self.base) * (
                mfair.T @ (mfair @ p_pu)
            )
        return np.concatenate([gp, gq])

    def _constraints(self, prob: CicProblem, arrays, p_pu, q_pu):
        """All constraints as (value, gradient, label) with value <= 0 feasible."""
        c = self.c
        p_ub = prob.p_ub_kw / self.base
        p_av = prob.p_avail_kw / self.base
        vmax = self._eff_vmax_pu(prob)
        v_re, v_im, _, _ = self._objective_terms(arrays, p_pu, q_pu, None)
        a_re_p, a_re_q, a_im_p, a_im_q, _, _ = arrays
        out = []

        def e(idx):
            v = np.zeros(2 * c)
            v[idx] = 1.0
            return v

        for j in range(c):
            out.append((-p_pu[j], -e(j), f"p_curt[{j}] >= 0"))
            out.append((p_pu[j] - p_ub[j], e(j), f"p_curt[{j}] <= excess"))
            out.append((self.q_lb_pu[j] - q_pu[j], -e(c + j), f"q[{j}] >= q_min"))
            out.append((q_pu[j], e(c + j), f"q[{j}] <= 0"))
            g = (p_av[j] - p_pu[j]) ** 2 + q_pu[j] ** 2 - self.s_pu[j] ** 2
            grad = -2.0 * (p_av[j] - p_pu[j]) * e(j) + 2.0 * q_pu[j] * e(c + j)
            out.append((g, grad, f"rating disk[{j}]"))
            for r in self.vrows[j]:
                row_re = np.concatenate([a_re_p[r], a_re_q[r]])
                if self.settings.voltage_cap == "real":
                    out.append((v_re[r] - vmax[j], row_re, f"voltage cap[{j}]"))
                else:
                    row_im = np.concatenate([a_im_p[r], a_im_q[r]])
                    g = v_re[r] ** 2 + v_im[r] ** 2 - vmax[j] ** 2
                    grad = 2.0 * v_re[r] * row_re + 2.0 * v_im[r] * row_im
                    out.append((g, grad, f"voltage cap[{j}]"))
        return out

    def _kkt_residual(self, prob, arrays, p_pu, q_pu, mfair) -> float:
        grad_f = self._objective_grad(arrays, p_pu, q_pu, mfair)
        cons = self._constraints(prob, arrays, p_pu, q_pu)
        values = np.array([g for g, _, _ in cons])
        feas = float(np.max(values, initial=0.0))
        best = np.inf
        # one pass normally suffices; widen the active set only when it fails
        for act_tol in (1e-7, 1e-9, 1e-5, 1e-3):
            active = [k for k, gv in enumerate(values) if gv >= -act_tol]
            if active:
                g_mat = np.stack([cons[k][1] for k in active], axis=1)
                lam, _ = nnls(g_mat, -grad_f)
                stat = float(np.max(np.abs(grad_f + g_mat @ lam)))
                comp = float(np.max(lam * np.abs(values[active]), initial=0.0))
            else:
                stat = float(np.max(np.abs(grad_f)))
                comp = 0.0
            best = min(best, max(stat, comp))
            if best <= 0.1 * self.settings.kkt_target:
                break
        return max(best, feas)

    def _projected_gradient(self, prob, arrays, mfair, iters=800):
        """Penalty + projected gradient over the box/disk set. Last resort."""
        c = self.c
        p_ub = prob.p_ub_kw / self.base
        p_av = prob.p_avail_kw / self.base
        x = np.concatenate([p_ub.copy(), np.zeros(c)])
        mu = 1e4

        def project(x):
            p = np.clip(x[:c], 0.0, p_ub)
            q = np.clip(x[c:], self.q_lb_pu, 0.0)
            for _ in range(4):
                d = np.hypot(p_av - p, q)
                over = d > self.s_pu
                if not np.any(over):
                    break
                scale = np.where(over, self.s_pu / np.maximum(d, 1e-16), 1.0)
                p = p_av - (p_av - p) * scale
                q = q * scale
                p = np.clip(p, 0.0, p_ub)
                q = np.clip(q, self.q_lb_pu, 0.0)
            return np.concatenate([p, q])

        def penalized_grad(x):
            p, q = x[:c], x[c:]
            grad = self._objective_grad(arrays, p, q, mfair)
            for g, gg, label in self._constraints(prob, arrays, p, q):
                if label.startswith("voltage cap") and g > 0:
                    grad = grad + 2.0 * mu * g * gg
            return grad

        step = 1.0 / (1.0 + mu)
        for k in range(iters):
            x = project(x - step / (1.0 + 0.01 * k) * penalized_grad(x))
        return x[:c], x[c:]

    def solve(self, prob: CicProblem) -> CicSolution:
        if prob.network is not self.network or len(prob.inverters) != self.c:
            raise ValueError("problem structure does not match this engine")
        arrays = self._step_arrays(prob)
        mfair = (
            _fairness_matrix(prob.excess_kw, self.base)
            if (self.settings.alpha > 0 and self.c)
            else None
        )

        if self.c == 0:
            v_re = arrays[4]
            v_im = arrays[5]
            v = (v_re + 1j * v_im).reshape(prob.v_nom_pu.shape)
            loss_pu = self._objective_terms(arrays, np.zeros(0), np.zeros(0), None)[2]
            return CicSolution(
                status="optimal",
                p_curt_kw=np.zeros(0),
                q_kvar=np.zeros(0),
                v_model_pu=v,
                objective_kw=self.base * self.settings.loss_weight * loss_pu,
                curtail_kw=0.0,
                loss_kw=self.base * loss_pu,
                fairness=0.0,
                kkt_residual=0.0,
                iterations=0,
                solver="none",
            )

        self._set_parameters(prob, arrays)
        best = None  # (kkt, p_pu, q_pu, solver_name, iterations)
        for solver, opts in (
            (cp.CLARABEL, {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10}),
            (cp.CLARABEL, {}),
            (cp.SCS, {"eps": 1e-10, "max_iters": 100000}),
        ):
            try:
                with warnings.catch_warnings():
                    # inaccurate-solution warnings are moot: optimality is
                    # certified below, independently of the solver
                    warnings.simplefilter("ignore", UserWarning)
                    self.problem.solve(solver=solver, **opts)
            except (cp.error.SolverError, TypeError):
                continue
            if self.problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
                return self._infeasible(prob, arrays)
            if self.problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
                continue
            # clip solver-level noise off the box bounds before certification
            p_pu = np.clip(np.asarray(self.P.value, dtype=float), 0.0, prob.p_ub_kw / self.base)
            q_pu = np.clip(np.asarray(self.Q.value, dtype=float), self.q_lb_pu, 0.0)
            kkt = self._kkt_residual(prob, arrays, p_pu, q_pu, mfair)
            stats = self.problem.solver_stats
            iters = int(stats.num_iters or 0) if stats else 0
            if best is None or kkt < best[0]:
                best = (kkt, p_pu, q_pu, str(solver), iters)
            if kkt <= self.settings.kkt_target:
                break
        status = "optimal"
        if best is None:
            log.warning("cone solvers failed; using projected-gradient fallback")
            p_pu, q_pu = self._projected_gradient(prob, arrays, mfair)
            p_pu = np.clip(p_pu, 0.0, prob.p_ub_kw / self.base)
            q_pu = np.clip(q_pu, self.q_lb_pu, 0.0)
            kkt = self._kkt_residual(prob, arrays, p_pu, q_pu, mfair)
            best = (kkt, p_pu, q_pu, "projected-gradient", 800)
            status = "optimal" if kkt <= self.settings.kkt_target else "max_iter"
        kkt, p_pu, q_pu, solver_name, iterations = best

        v_re, v_im, loss_pu, fair = self._objective_terms(arrays, p_pu, q_pu, mfair)
        v = (v_re + 1j * v_im).reshape(prob.v_nom_pu.shape)
        curtail_kw = float(p_pu.sum()) * self.base
        loss_kw = loss_pu * self.base
        objective_kw = (
            curtail_kw + self.settings.loss_weight * loss_kw + self.settings.alpha * fair
        )
        return CicSolution(
            status=status,
            p_curt_kw=p_pu * self.base,
            q_kvar=q_pu * self.base,
            v_model_pu=v,
            objective_kw=objective_kw,
            curtail_kw=curtail_kw,
            loss_kw=loss_kw,
            fairness=fair,
            kkt_residual=kkt,
            iterations=iterations,
            solver=solver_name,
        )

    def _infeasible(self, prob: CicProblem, arrays) -> CicSolution:
        p_pu = prob.p_ub_kw / self.base
        q_pu = self.q_lb_pu.copy()
        violated = [
            label
            for g, _, label in self._constraints(prob, arrays, p_pu, q_pu)
            if g > 1e-9
        ]
        v_re, v_im, loss_pu, fair = self._objective_terms(arrays, p_pu, q_pu, None)
        return CicSolution(
            status="infeasible",
            p_curt_kw=p_pu * self.base,
            q_kvar=q_pu * self.base,
            v_model_pu=(v_re + 1j * v_im).reshape(prob.v_nom_pu.shape),
            objective_kw=float("nan"),
            curtail_kw=float(p_pu.sum()) * self.base,
            loss_kw=loss_pu * self.base,
            fairness=fair,
            kkt_residual=float("inf"),
            iterations=0,
            solver="",
            violated=violated,
        )


def solve_cic(problem: CicProblem, engine: CicEngine | None = None) -> CicSolution:
    """Solve one timestep. Pass a CicEngine to reuse the canonicalized program."""
    if engine is None:
        engine = CicEngine(problem.network, problem.inverters, problem.settings)
    return engine.solve(problem)
