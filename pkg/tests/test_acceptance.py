"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Every tolerance is pinned here; instances come from the seeded generators so
the whole gate is reproducible byte for byte.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from bridgelab import contraction, discrete, divergences as dv, gaussian as gs, harness, matcore
from bridgelab.divergences import relative_entropy

GOLDEN = 0.6180339887


def _verdict(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num:02d} {status} {name} {detail}".rstrip())
    assert ok, f"criterion {num} ({name}) failed: {detail}"


def discrete_instances(count=20, size=(5, 7), osc=1.0):
    return [
        harness.generate_instance("discrete", size, seed, "bounded", osc_cap=osc)
        for seed in range(count)
    ]


def test_criterion_01_entropy_ladder():
    start = time.perf_counter()
    worst = 0.0
    for model in discrete_instances(20):
        solution = discrete.solve_bridge(model)
        iterates = discrete.run_sinkhorn(model, 50)
        report = discrete.entropy_ladder(model, iterates, solution.bridge)
        worst = max(worst, report.max_residual)
    elapsed = time.perf_counter() - start
    _verdict(
        1, "entropy-ladder identity", worst <= 1e-9 and elapsed < 5.0,
        f"worst residual {worst:.3e}, {elapsed:.2f}s for 20 instances",
    )


def test_criterion_02_linear_decay():
    worst = -math.inf
    for model in discrete_instances(20):
        solution = discrete.solve_bridge(model)
        iterates = discrete.run_sinkhorn(model, 200)
        total = relative_entropy(solution.bridge, iterates[0].joint_even)
        for it in iterates:
            gap = relative_entropy(model.eta, it.pi_even) + relative_entropy(
                model.mu, it.pi_odd
            )
            worst = max(worst, (it.step + 1) * gap - total)
    _verdict(2, "linear decay bound", worst <= 1e-8, f"worst excess {worst:.3e}")


def test_criterion_03_bounded_cost_geometric_rate():
    worst = 0.0
    checked = 0
    for model in discrete_instances(10, osc=math.log(2.0)):
        assert model.eps_w == pytest.approx(0.25)
        report = discrete.geometric_rate_report(model, discrete.run_sinkhorn(model, 60))
        assert report.bound == pytest.approx(0.5625)
        for row in report.ratio_rows:
            if row.saturated or row.value < 1e-14:
                continue
            checked += 1
            worst = max(worst, row.ratio - 0.5625)
    _verdict(
        3, "bounded-cost geometric rate", worst <= 1e-10 and checked > 0,
        f"worst ratio excess {worst:.3e} over {checked} ratios",
    )


def test_criterion_04_riccati_equivalence():
    worst = 0.0
    for d in (1, 2, 3, 8):
        inst = harness.generate_instance("gaussian", d, d, "gaussian-random-spd")
        problem = gs.RiccatiProblem.from_instance(inst.mu, inst.eta, inst.kernel)
        states = gs.run_sinkhorn(inst.mu, inst.eta, inst.kernel, 400)
        current = states[0].rescaled_cov
        for state in states[2::2]:
            current = gs.riccati_apply(problem, current)
            worst = max(worst, float(np.max(np.abs(state.rescaled_cov - current))))
    golden_inst = gs.GaussianInstance(
        mu=dv.Gaussian(np.zeros(1), np.eye(1)),
        eta=dv.Gaussian(np.zeros(1), np.eye(1)),
        kernel=gs.LinearGaussianKernel(np.zeros(1), np.eye(1), np.eye(1)),
    )
    problem = gs.RiccatiProblem.from_instance(
        golden_inst.mu, golden_inst.eta, golden_inst.kernel
    )
    fixed = float(gs.riccati_fixed_point(problem)[0, 0])
    golden_err = abs(fixed - GOLDEN)
    _verdict(
        4, "riccati/sinkhorn equivalence", worst <= 1e-10 and golden_err <= 1e-9,
        f"worst flow gap {worst:.3e}, golden error {golden_err:.2e}",
    )


def _rate_fit_instances(count=10):
    """First seeded d <= 3 instances slow enough to leave a usable fit window.

    Instances whose theoretical rate empties the window above the 1e-14
    saturation floor in fewer than 5 pairs cannot carry a log-linear fit, so
    the deterministic scan skips them; the slope assertion itself is never
    relaxed.
    """
    instances = []
    seed = 100
    while len(instances) < count:
        d = 1 + seed % 3
        inst = harness.generate_instance("gaussian", d, seed, "gaussian-random-spd")
        bridge = gs.schrodinger_bridge_gaussian(inst.mu, inst.eta, inst.kernel)
        problem = gs.RiccatiProblem.from_instance(inst.mu, inst.eta, inst.kernel)
        lam = float(np.linalg.eigvalsh(bridge.fixed_point + problem.varpi)[0])
        slope = -2.0 * math.log(1.0 + lam)
        initial = matcore.spectral_norm(inst.kernel.tau - bridge.noise_cov)
        if slope >= -5.0 and initial >= 1e-3:
            instances.append((inst, bridge))
        seed += 1
    return instances


def test_criterion_05_riccati_rate():
    start = time.perf_counter()
    fits = []
    for inst, bridge in _rate_fit_instances(10):
        states = gs.run_sinkhorn(inst.mu, inst.eta, inst.kernel, 160)
        report = gs.rate_report(states, bridge, inst.mu, inst.eta, inst.kernel)
        assert report.fit is not None, "no usable fit window"
        fits.append((report.fit.slope, report.theoretical_slope, report.slope_within))
    elapsed = time.perf_counter() - start
    ok = all(within for _, _, within in fits) and elapsed < 10.0
    worst = max(s - t for s, t, _ in fits)
    _verdict(
        5, "riccati convergence rate", ok,
        f"worst slope excess {worst:.3e}, {elapsed:.2f}s for 10 instances",
    )


def test_criterion_06_bridge_transport():
    worst_mean = 0.0
    worst_cov = 0.0
    seeds = [(d, d) for d in (1, 2, 3, 8)] + [(1 + s % 3, 100 + s) for s in range(10)]
    for d, seed in seeds:
        inst = harness.generate_instance("gaussian", d, seed, "gaussian-random-spd")
        bridge = gs.schrodinger_bridge_gaussian(inst.mu, inst.eta, inst.kernel)
        pushed = gs.push_forward(inst.mu, bridge.as_kernel())
        worst_mean = max(worst_mean, float(np.linalg.norm(pushed.mean - inst.eta.mean)))
        worst_cov = max(
            worst_cov, float(np.linalg.norm(pushed.covariance - inst.eta.covariance))
        )
    _verdict(
        6, "bridge transport", worst_mean <= 1e-10 and worst_cov <= 1e-10,
        f"mean error {worst_mean:.3e}, cov error {worst_cov:.3e}",
    )


def test_criterion_07_entropy_formula_cross_check():
    worst = 0.0
    for d in (1, 2, 3):
        inst = harness.generate_instance("gaussian", d, 200 + d, "gaussian-random-spd")
        bridge = gs.schrodinger_bridge_gaussian(inst.mu, inst.eta, inst.kernel)
        b_joint = gs.bridge_joint(inst.mu, bridge)
        states = gs.run_sinkhorn(inst.mu, inst.eta, inst.kernel, 40)
        for state in states[::2]:
            formula = gs.bridge_entropy(state, bridge, inst.mu, inst.kernel)
            oracle = dv.gaussian_kl(gs.sinkhorn_joint(state, inst.mu, inst.eta), b_joint)
            worst = max(worst, abs(formula - oracle))
    _verdict(7, "entropy formula vs joint KL", worst <= 1e-9, f"worst gap {worst:.3e}")


def test_criterion_08_envelope_domination():
    worst = -math.inf
    w2_ok = True
    gates = 0
    cases = [(1, 300), (2, 301), (3, 302)]
    for d, seed in cases:
        inst = harness.generate_instance("gaussian", d, seed, "gaussian-random-spd")
        states = gs.run_sinkhorn(inst.mu, inst.eta, inst.kernel, 200)
        report = gs.envelope_report(inst.mu, inst.eta, inst.kernel, states)
        assert math.isfinite(report.eps)
        for row in report.entropy_rows:
            worst = max(worst, row.value - row.bound)
        w2_ok = w2_ok and all(r.within for r in report.w2_rows)
        if report.gate_contractive:
            gates += 1
            w2_ok = w2_ok and all(r.within for r in report.chained_w2_rows)
    # a strongly regularized scalar instance exercises the contractive gate
    inst = gs.GaussianInstance(
        mu=dv.Gaussian(np.array([0.2]), np.array([[0.8]])),
        eta=dv.Gaussian(np.array([-0.1]), np.array([[0.9]])),
        kernel=gs.LinearGaussianKernel(np.array([0.0]), np.array([[1.0]]), np.array([[2.0]])),
    )
    states = gs.run_sinkhorn(inst.mu, inst.eta, inst.kernel, 200)
    report = gs.envelope_report(inst.mu, inst.eta, inst.kernel, states)
    assert report.gate_contractive
    gates += 1
    for row in report.entropy_rows:
        worst = max(worst, row.value - row.bound)
    w2_ok = w2_ok and all(r.within for r in report.w2_rows)
    w2_ok = w2_ok and all(r.within for r in report.chained_w2_rows)
    _verdict(
        8, "transport-inequality envelopes", worst <= 1e-10 and w2_ok and gates >= 1,
        f"worst envelope excess {worst:.3e}, contractive gates {gates}",
    )


def test_criterion_09_lyapunov_certificate():
    model = harness.generate_instance("discrete", (10, 10), 17, "bounded", osc_cap=1.0)
    iterates = discrete.run_sinkhorn(model, 21)
    g = np.exp(0.25 * model.u_potential)
    h = np.exp(0.25 * model.v_potential)
    evens = [it.kernel_even for it in iterates[1:]]
    odds = [it.kernel_odd for it in iterates[1:]]
    cert = contraction.lyapunov_search(evens, odds, g, h)
    assert isinstance(cert, contraction.ContractionCertificate), cert
    pair = contraction.WeightPair(g=g, h=h, a=cert.a)
    base_even = base_odd = None
    worst = 0.0
    for it in iterates[1:21]:
        n = it.step
        dist_even = float(np.sum(pair.h_a * np.abs(it.pi_even - model.eta)))
        dist_odd = float(np.sum(pair.g_a * np.abs(it.pi_odd - model.mu)))
        if base_even is None:
            base_even, base_odd, base_n = dist_even, dist_odd, n
            continue
        factor = cert.rho ** (2 * (n - base_n))
        worst = max(worst, dist_even - factor * base_even, dist_odd - factor * base_odd)
    _verdict(
        9, "lyapunov certificate and weighted-TV decay",
        cert.rho < 1.0 and worst <= 1e-10,
        f"rho {cert.rho:.4f}, worst decay excess {worst:.3e}",
    )


def _enumerate_transport(cost, a, b):
    nx, ny = cost.shape
    m = nx + ny - 1
    best = math.inf
    rhs = np.concatenate([a, b])[:-1]
    for subset in itertools.combinations(list(itertools.product(range(nx), range(ny))), m):
        mat = np.zeros((m, m))
        for k, (i, j) in enumerate(subset):
            mat[i, k] = 1.0
            if nx + j < nx + ny - 1:
                mat[nx + j, k] += 1.0
        try:
            x = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError:
            continue
        if np.any(x < -1e-9):
            continue
        plan = np.zeros((nx, ny))
        for k, (i, j) in enumerate(subset):
            plan[i, j] = x[k]
        if max(
            np.max(np.abs(plan.sum(axis=1) - a)), np.max(np.abs(plan.sum(axis=0) - b))
        ) > 1e-9:
            continue
        best = min(best, float(np.sum(plan * cost)))
    return best


def test_criterion_10_oracle_equivalence():
    rng = np.random.default_rng(1000)
    worst = 0.0
    # dobrushin and lip_norm versus exhaustive pair enumeration
    for _ in range(8):
        n, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        kernel = rng.dirichlet(np.ones(m), size=n)
        brute_dob = max(
            0.5 * float(np.sum(np.abs(kernel[i] - kernel[j])))
            for i in range(n) for j in range(n)
        )
        worst = max(worst, abs(contraction.dobrushin(kernel) - brute_dob))
        g = rng.uniform(0.3, 2.0, size=n)
        h = rng.uniform(0.3, 2.0, size=m)
        brute_lip = max(
            (
                float(np.sum(h * np.abs(kernel[i] - kernel[j]))) / (g[i] + g[j])
                for i in range(n) for j in range(n) if i != j
            ),
            default=0.0,
        )
        worst = max(worst, abs(contraction.lip_norm(kernel, g, h) - brute_lip))
    # exact transport versus basic-solution enumeration
    for nx, ny in ((2, 2), (2, 3), (3, 3), (3, 4), (4, 4)):
        for _ in range(2):
            m1 = dv.DiscreteMeasure(rng.dirichlet(np.ones(nx)))
            m2 = dv.DiscreteMeasure(rng.dirichlet(np.ones(ny)))
            cost = rng.uniform(0.0, 3.0, size=(nx, ny))
            value = dv.kantorovich_discrete(cost, m1, m2).value
            worst = max(worst, abs(value - _enumerate_transport(cost, m1.weights, m2.weights)))
    # data-processing inequality over 1000 sampled tuples
    dp_violation = 0.0
    tuples = 0
    while tuples < 1000:
        n, m = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        kernel = rng.dirichlet(np.ones(m), size=n)
        m1 = rng.dirichlet(np.ones(n))
        m2 = rng.dirichlet(np.ones(n))
        for phi in dv.PHI_CATALOG.values():
            before = dv.phi_entropy(phi, m1, m2)
            after = dv.phi_entropy(phi, m1 @ kernel, m2 @ kernel)
            if math.isfinite(before):
                dp_violation = max(dp_violation, after - before)
            tuples += 1
    _verdict(
        10, "oracle equivalence + data processing",
        worst <= 1e-12 and dp_violation <= 1e-11,
        f"worst oracle gap {worst:.3e}, dp excess {dp_violation:.3e} over {tuples} tuples",
    )


def test_criterion_11_determinism(tmp_path):
    configs = [
        {
            "regime": "discrete",
            "instance": {"profile": "bounded", "size": [5, 7], "osc_cap": 1.0},
            "iterations": 20,
            "seed": 5,
            "checks": list(harness.DISCRETE_CHECKS),
        },
        {
            "regime": "gaussian",
            "instance": {"profile": "gaussian-random-spd", "size": 2},
            "iterations": 25,
            "seed": 6,
            "checks": list(harness.GAUSSIAN_CHECKS),
        },
    ]
    identical = True
    for idx, payload in enumerate(configs):
        out_a = tmp_path / f"{idx}-a"
        out_b = tmp_path / f"{idx}-b"
        config = harness.ExperimentConfig.from_json(payload)
        harness.run_experiment(config, out_dir=out_a)
        harness.run_experiment(config, out_dir=out_b)
        identical = identical and (
            (out_a / "report.csv").read_bytes() == (out_b / "report.csv").read_bytes()
        )
        identical = identical and (
            (out_a / "verdicts.json").read_bytes() == (out_b / "verdicts.json").read_bytes()
        )
    _verdict(11, "byte-identical reports", identical)
