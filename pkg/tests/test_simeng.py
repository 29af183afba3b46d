import numpy as np
import pytest

from gridvolt import simeng
from gridvolt.netmodel import generate_feeder
from gridvolt.simeng import (
    DayResult,
    Profiles,
    Scenario,
    SimSettings,
    generate_scenarios,
    hosting_capacity,
    interpolate_profile,
    load_profiles,
    max_consecutive_overtrip,
    read_profile_csv,
    relative_error_sigma,
    run_baseline,
    run_day,
    run_sweep,
    summarize_run,
    synthetic_profiles,
    transformer_peak,
    utilized_power,
    write_dayresult_csv,
    write_events_csv,
)


def natural_cubic_spline(xk, yk, xq):
    """Independent oracle: natural cubic spline via the tridiagonal system."""
    xk = np.asarray(xk, float)
    yk = np.asarray(yk, float)
    n = xk.shape[0]
    h = np.diff(xk)
    a = np.zeros((n, n))
    rhs = np.zeros(n)
    a[0, 0] = a[-1, -1] = 1.0
    for i in range(1, n - 1):
        a[i, i - 1] = h[i - 1]
        a[i, i] = 2 * (h[i - 1] + h[i])
        a[i, i + 1] = h[i]
        rhs[i] = 3 * ((yk[i + 1] - yk[i]) / h[i] - (yk[i] - yk[i - 1]) / h[i - 1])
    c = np.linalg.solve(a, rhs)
    b = (yk[1:] - yk[:-1]) / h - h * (2 * c[:-1] + c[1:]) / 3
    d = (c[1:] - c[:-1]) / (3 * h)
    out = np.empty(len(xq))
    for k, x in enumerate(xq):
        i = min(max(np.searchsorted(xk, x) - 1, 0), n - 2)
        dx = x - xk[i]
        out[k] = yk[i] + b[i] * dx + c[i] * dx**2 + d[i] * dx**3
    return out


def tiny_net(n=8, spacing=0.02, seed=3):
    return generate_feeder(n, spacing, "ow95", 1, seed=seed)


def tiny_profiles(n_customers, minutes=60, seed=1, cloud_depth=0.5):
    return synthetic_profiles(
        n_customers, seed=seed, start_min=700, end_min=700 + minutes,
        cloud_depth=cloud_depth,
    )


class TestInterpolation:
    def test_constant_series(self):
        km = np.arange(0, 301, 30)
        _, vals = interpolate_profile(km, np.full(len(km), 2.5))
        assert np.allclose(vals, 2.5)

    def test_knots_preserved(self):
        km = np.arange(0, 121, 30)
        kv = np.array([1.0, 3.0, 2.0, 4.0, 1.5])
        minutes, vals = interpolate_profile(km, kv)
        for m, v in zip(km, kv):
            assert vals[np.where(minutes == m)[0][0]] == pytest.approx(v, abs=1e-12)

    def test_matches_independent_natural_spline(self):
        km = np.array([0.0, 30.0, 60.0, 90.0, 120.0, 150.0])
        kv = np.array([0.2, 1.5, 3.8, 2.2, 0.9, 0.4])  # single hump
        minutes, vals = interpolate_profile(km, kv)
        expected = np.maximum(natural_cubic_spline(km, kv, minutes), 0.0)
        assert np.max(np.abs(vals - expected)) < 1e-9

    def test_few_knots_linear_fallback(self):
        with pytest.warns(UserWarning):
            _, vals = interpolate_profile([0, 60], [1.0, 2.0])
        assert vals[30] == pytest.approx(1.5)

    def test_negative_clamped(self):
        km = np.array([0.0, 30.0, 60.0, 90.0, 120.0])
        kv = np.array([0.0, 2.0, 0.0, 0.0, 0.0])
        _, vals = interpolate_profile(km, kv)  # overshoot dips below zero
        assert np.min(vals) == 0.0


class TestProfiles:
    def test_synthetic_statistics(self):
        p = synthetic_profiles(30, seed=1)
        assert p.horizon == 690
        assert p.demand_kw.mean() == pytest.approx(0.77, abs=1e-9)
        assert p.pv_kw.max() <= 5.0 + 1e-9
        assert np.all(p.demand_kw >= 0) and np.all(p.pv_kw >= 0)

    def test_deterministic(self):
        a = synthetic_profiles(10, seed=5)
        b = synthetic_profiles(10, seed=5)
        assert np.array_equal(a.demand_kw, b.demand_kw)
        assert np.array_equal(a.pv_kw, b.pv_kw)

    def test_modulo_assignment(self):
        p = synthetic_profiles(5, seed=2)
        assert np.array_equal(p.demand_for(7), p.demand_kw[2])

    def test_csv_roundtrip(self, tmp_path):
        import csv

        path = tmp_path / "prof.csv"
        minutes = np.arange(480, 601, 30)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "customer_id", "p_kw"])
            for cust in range(2):
                for m in minutes:
                    w.writerow([f"{m // 60:02d}:{m % 60:02d}", cust, 1.0 + cust])
        got_minutes, mat = read_profile_csv(path)
        assert np.array_equal(got_minutes, minutes)
        assert mat.shape == (2, 5)
        prof = load_profiles(path, None, start_min=480, end_min=600)
        assert prof.demand_kw.shape == (2, 120)
        assert prof.demand_kw[1, 0] == pytest.approx(2.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            Profiles(
                minutes=np.arange(3),
                demand_kw=np.array([[1.0, -0.1, 0.0]]),
                pv_kw=np.zeros((1, 3)),
            )


class TestScenarios:
    def test_cardinality(self):
        net = generate_feeder(21, 0.02, "ow95", 1, seed=2)  # 20 customers
        scens = generate_scenarios(net, 0.5, n_random=18, seed=0)
        assert len(scens) == 20
        for s in scens:
            assert len(s.pv_customers) == 10

    def test_cluster_far_most_distant(self):
        net = tiny_net(10)
        scens = generate_scenarios(net, 0.3, n_random=0, seed=0)
        far = next(s for s in scens if s.id == "far")
        z = {c: net.effective_impedance_ohm[net.customer_bus(c)] for c, _ in net.customers}
        picked = sorted(z[c] for c in far.pv_customers)
        all_z = sorted(z.values())
        assert picked == all_z[-len(picked):]

    def test_deterministic(self):
        net = tiny_net(12)
        a = generate_scenarios(net, 0.4, n_random=18, seed=9)
        b = generate_scenarios(net, 0.4, n_random=18, seed=9)
        assert [s.pv_customers for s in a] == [s.pv_customers for s in b]

    def test_zero_selection_rejected(self):
        net = tiny_net(12)
        with pytest.raises(ValueError):
            generate_scenarios(net, 0.01, seed=0)


class TestRunDay:
    def test_zero_pv_modes_identical(self):
        net = tiny_net()
        profiles = tiny_profiles(len(net.customers), minutes=30)
        settings = SimSettings(balanced=True)
        results = {}
        for mode in ("legacy", "autonomous", "cic"):
            scen = Scenario("none", 0.0, (), "none", mode)
            results[mode] = run_day(net, scen, profiles, settings, seed=1)
        ref = results["legacy"]
        for mode in ("autonomous", "cic"):
            assert np.allclose(
                results[mode].v_oracle_mag, ref.v_oracle_mag, equal_nan=True
            )
            assert np.allclose(results[mode].losses_kw, ref.losses_kw)

    def test_same_seed_bit_identical(self):
        net = tiny_net()
        profiles = tiny_profiles(len(net.customers), minutes=40)
        settings = SimSettings(balanced=True)
        scen = generate_scenarios(net, 0.8, n_random=1, seed=2)[2].with_mode("autonomous")
        a = run_day(net, scen, profiles, settings, seed=11)
        b = run_day(net, scen, profiles, settings, seed=11)
        assert np.array_equal(a.v_oracle_mag, b.v_oracle_mag, equal_nan=True)
        assert np.array_equal(a.p_out_kw, b.p_out_kw)
        assert a.events == b.events

    def test_energy_accounting_identity(self):
        net = tiny_net()
        profiles = tiny_profiles(len(net.customers), minutes=40)
        settings = SimSettings(balanced=True)
        for mode in ("legacy", "autonomous", "cic"):
            scen = generate_scenarios(net, 0.8, n_random=1, seed=2)[2].with_mode(mode)
            r = run_day(net, scen, profiles, settings, seed=1)
            assert np.allclose(
                r.p_avail_kw, r.p_out_kw + r.p_curt_kw, atol=1e-9
            )
            assert np.all(r.p_curt_kw >= -1e-12)

    def test_unbalanced_run(self):
        net = tiny_net()
        profiles = tiny_profiles(len(net.customers), minutes=20)
        settings = SimSettings(balanced=False)
        scen = generate_scenarios(net, 0.8, n_random=1, seed=2)[2].with_mode("cic")
        r = run_day(net, scen, profiles, settings, seed=1)
        assert r.v_oracle_mag.shape[2] == 3
        sigma, _, _ = relative_error_sigma(r.v_model_mag, r.v_oracle_mag)
        assert sigma < 3e-2

    def test_unknown_mode(self):
        net = tiny_net()
        profiles = tiny_profiles(len(net.customers), minutes=10)
        with pytest.raises(ValueError):
            run_day(net, Scenario("x", 0.0, (), "none", "nope"), profiles)


class TestMetrics:
    def test_utilized_arithmetic(self):
        r = _fake_result(pv_kwh=50.0, curt_kwh=2.0, loss_kwh=3.0)
        utilized, pct = utilized_power(r, baseline_losses_kwh=2.0)
        assert utilized == pytest.approx(47.0)
        assert pct == pytest.approx(94.0)

    def test_utilized_no_curtailment(self):
        r = _fake_result(pv_kwh=50.0, curt_kwh=0.0, loss_kwh=2.0)
        utilized, pct = utilized_power(r, baseline_losses_kwh=2.0)
        assert pct == pytest.approx(100.0)

    def test_utilized_can_exceed_100(self):
        r = _fake_result(pv_kwh=50.0, curt_kwh=0.0, loss_kwh=1.0)
        _, pct = utilized_power(r, baseline_losses_kwh=2.0)
        assert pct > 100.0

    def test_hosting_capacity_example(self):
        flags = {
            0.3: [True] + [False] * 19,
            0.6: [True] * 20,
            0.1: [False] * 20,
        }
        cap_min, cap_max = hosting_capacity(flags)
        assert cap_min == 0.3
        assert cap_max == 0.6

    def test_hosting_capacity_sentinel(self):
        assert hosting_capacity({0.5: [False, False]}) == (None, None)

    def test_hosting_cap_min_le_cap_max(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            flags = {
                pen: rng.random(5).tolist() < rng.random(5)
                for pen in (0.2, 0.4, 0.6)
            }
            flags = {p: [bool(x) for x in v] for p, v in flags.items()}
            cap_min, cap_max = hosting_capacity(flags)
            if cap_max is not None:
                assert cap_min is not None and cap_min <= cap_max

    def test_sigma_values(self):
        vm = np.full((2, 3, 1), 232.3)
        vo = np.full((2, 3, 1), 230.0)
        sigma, dvp, dvm = relative_error_sigma(vm, vo)
        assert sigma == pytest.approx(2.3 / 230.0)
        assert dvp == pytest.approx(0.01)
        assert dvm == 0.0
        assert relative_error_sigma(vo, vo) == (0.0, 0.0, 0.0)

    def test_sigma_zero_oracle_rejected(self):
        with pytest.raises(ValueError):
            relative_error_sigma(np.ones((1, 1, 1)), np.zeros((1, 1, 1)))

    def test_transformer_peak(self):
        r = _fake_result(pv_kwh=1.0, curt_kwh=0.0, loss_kwh=0.0)
        r.slack_kva = np.array([1.0, 9.0, 3.0])
        assert transformer_peak(r) == 9.0


def _fake_result(pv_kwh, curt_kwh, loss_kwh, minutes=60):
    scale = 60.0 / minutes
    return DayResult(
        mode="cic",
        scenario=Scenario("x", 0.5, (0,), "random", "cic"),
        minutes=np.arange(minutes),
        bus_order=[0, 1],
        balanced=True,
        v_oracle_mag=np.full((minutes, 2, 1), 230.0),
        v_model_mag=None,
        p_avail_kw=np.full((minutes, 1), pv_kwh * scale),
        p_out_kw=np.full((minutes, 1), (pv_kwh - curt_kwh) * scale),
        p_curt_kw=np.full((minutes, 1), curt_kwh * scale),
        q_kvar=np.zeros((minutes, 1)),
        losses_kw=np.full(minutes, loss_kwh * scale),
        slack_kva=np.zeros(minutes),
        events=[],
        pv_customers=(0,),
        inverter_buses=[1],
        infeasible_steps=[],
        kkt_max=0.0,
        oracle_iterations_max=1,
    )


class TestSweep:
    def test_small_sweep_structure(self):
        net = tiny_net(10)
        profiles = tiny_profiles(len(net.customers), minutes=20)
        settings = SimSettings(balanced=True)
        sweep = run_sweep(
            net, profiles, ["legacy", "cic"], [0.4, 0.8],
            n_random=1, seed=4, settings=settings,
        )
        # 2 pens x 3 placements x 2 modes
        assert len(sweep.rows) == 12
        assert set(sweep.hosting) == {"legacy", "cic"}
        # shared placements across modes at each penetration
        for pen in (0.4, 0.8):
            ids = {
                mode: [r.scenario_id for r in sweep.rows_for(mode, pen)]
                for mode in ("legacy", "cic")
            }
            assert ids["legacy"] == ids["cic"]

    def test_parallel_jobs_match_serial(self):
        net = tiny_net(8)
        profiles = tiny_profiles(len(net.customers), minutes=12)
        settings = SimSettings(balanced=True)
        a = run_sweep(net, profiles, ["legacy"], [0.5], n_random=1, seed=1,
                      settings=settings, jobs=1)
        b = run_sweep(net, profiles, ["legacy"], [0.5], n_random=1, seed=1,
                      settings=settings, jobs=2)
        assert [r.utilized_kwh for r in a.rows] == [r.utilized_kwh for r in b.rows]


class TestWriters:
    def test_dayresult_csv_schema(self, tmp_path):
        net = tiny_net()
        profiles = tiny_profiles(len(net.customers), minutes=5)
        settings = SimSettings(balanced=True)
        scen = generate_scenarios(net, 0.5, n_random=1, seed=2)[2].with_mode("cic")
        r = run_day(net, scen, profiles, settings, seed=1)
        path = tmp_path / "day.csv"
        write_dayresult_csv(r, path)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header == [
            "t", "bus", "phase", "v_model", "v_oracle", "p_inj", "p_curt", "q",
            "losses_kw", "slack_kva",
        ]
        assert len(lines) == 1 + 5 * net.n_buses

    def test_events_csv(self, tmp_path):
        r = _fake_result(1.0, 0.0, 0.0)
        r.events = [(3, 7, "trip_avg"), (9, 7, "reconnect")]
        path = tmp_path / "events.csv"
        write_events_csv(r, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,inverter,event"
        assert lines[1] == "3,7,trip_avg"

    def test_overtrip_counter(self):
        r = _fake_result(1.0, 0.0, 0.0, minutes=6)
        pos = 1  # inverter bus row
        r.v_oracle_mag[:, pos, 0] = [256, 258, 258, 256, 258, 256]
        assert max_consecutive_overtrip(r, 257.0) == 2
