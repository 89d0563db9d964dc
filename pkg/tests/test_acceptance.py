"""Acceptance suite: one test per criterion, one printed pass/fail line each.

The heavyweight pieces (trained instances, the 20-minefield benchmark) are
shared through module-scoped fixtures so the wall-clock budgets hold for
the suite as a whole.
"""

import math
import sys
import time
import warnings

import numpy as np
import pytest
import scipy.sparse
import scipy.sparse.csgraph
from scipy.stats import truncnorm

from demine import training
from demine.clustering import ClusteringParams, dbscan
from demine.patterns import LinearPattern, transform_linear
from demine.risk import (
    Coefficients,
    DEFAULT_EXPERT_ESTIMATES,
    PosteriorSamples,
    RiskModel,
    SamplerSettings,
    Scaler,
    TrainingSet,
    combine,
    derive_priors,
    fit_bayesian,
    fit_logistic,
    log_likelihood_gradient,
    sigmoid,
    weighted_log_likelihood,
)
from demine.simulator import (
    HyperGrid,
    SyntheticSpec,
    audit_route,
    cross_validate,
    generate_synthetic_minefield,
    run_pattern_suite,
    run_random,
    run_sequential_suite,
    t_x_of,
)


ACCEPTANCE_RESULTS: list[str] = []


def report(name: str, ok: bool, detail: str = "") -> None:
    tag = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    ACCEPTANCE_RESULTS.append(f"[{tag}] {name}{suffix}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Shared benchmark fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def linear_instance():
    regions = [
        generate_synthetic_minefield(SyntheticSpec(
            pattern="line", n_mines=12, spacing=30, jitter=3, region_size=500, seed=1001)),
        generate_synthetic_minefield(SyntheticSpec(
            pattern="arc", n_mines=12, spacing=30, jitter=3, region_size=500, seed=1002)),
    ]
    hyper = training.InstanceHyperparams(landmine_weight=30, cluster_max_distance=100)
    return training.train_instance(regions, "linear", hyper)


@pytest.fixture(scope="module")
def arc_instances():
    """Linear and curved instances trained on the same arc-pattern regions."""
    regions = [
        generate_synthetic_minefield(SyntheticSpec(
            pattern="arc", n_mines=12, spacing=30, jitter=3, region_size=500, seed=1003)),
        generate_synthetic_minefield(SyntheticSpec(
            pattern="arc", n_mines=12, spacing=30, jitter=3, region_size=500, seed=1004)),
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lin = training.train_instance(regions, "linear", training.InstanceHyperparams(
            landmine_weight=30, cluster_max_distance=100))
        cur = training.train_instance(regions, "curved", training.InstanceHyperparams(
            landmine_weight=90, cluster_max_distance=50, pc_smoothness_factor=5))
    return lin, cur


@pytest.fixture(scope="module")
def ordering_benchmark(linear_instance):
    """20 seeded line+arc minefields cleared by linear/sequential/random."""
    t0 = time.monotonic()
    results = []
    for seed in range(2001, 2021):
        grid, ds = generate_synthetic_minefield(SyntheticSpec(
            pattern="multi", n_mines=24, spacing=30, jitter=3,
            region_size=500, seed=seed))
        stack = training.make_stack(linear_instance, recalc_interval=25)
        results.append({
            "grid": grid,
            "dataset": ds,
            "linear": run_pattern_suite(grid, ds, stack),
            "sequential": run_sequential_suite(grid, ds),
            "random": run_random(grid, ds, seed=seed, runs=10),
        })
    return results, time.monotonic() - t0


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_clustering_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    for trial in range(200):
        n = int(rng.integers(1, 201))
        pts = rng.uniform(0, 1000, size=(n, 2))
        eps = float(rng.uniform(20, 200))
        clusters, noise = dbscan(pts, ClusteringParams(eps=eps, min_pts=1))
        got = sorted(sorted(c.member_indices) for c in clusters)
        # independent oracle: connected components of the eps-distance graph
        diff = pts[:, None, :] - pts[None, :, :]
        adj = np.einsum("ijk,ijk->ij", diff, diff) <= eps * eps
        _, labels = scipy.sparse.csgraph.connected_components(
            scipy.sparse.csr_matrix(adj), directed=False)
        comps: dict[int, list[int]] = {}
        for i, lab in enumerate(labels):
            comps.setdefault(int(lab), []).append(i)
        expected = sorted(sorted(m) for m in comps.values())
        assert noise == [], f"trial {trial}: min_pts=1 must produce no noise"
        assert got == expected, f"trial {trial}: partition mismatch"
    elapsed = time.monotonic() - t0
    report("clustering oracle equivalence (200 random sets)",
           elapsed < 10.0, f"{elapsed:.1f}s < 10s, all partitions equal")


def test_criterion_transform_identity():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10_000):
        center = rng.uniform(-1000, 1000, 2)
        ang = rng.uniform(0, math.pi)
        pattern = LinearPattern(center=center,
                                direction=np.array([math.cos(ang), math.sin(ang)]))
        p = rng.uniform(-2000, 2000, 2)
        pc = transform_linear(pattern, p)
        d2 = float(np.sum((p - center) ** 2))
        if d2 > 0:
            worst = max(worst, abs(pc.gamma**2 + pc.delta**2 - d2) / d2)
    report("transform identity gamma^2+delta^2=|p-c|^2 (1e4 pairs)",
           worst < 1e-9, f"max rel err {worst:.2e}")


def test_criterion_mle_correctness():
    rng = np.random.default_rng(42)
    n = 10_000
    g = rng.uniform(0, 800, n)
    d = rng.uniform(0, 400, n)
    true = np.array([2.0, -0.01, -0.02])
    p = sigmoid(true[0] + true[1] * g + true[2] * d)
    y = (rng.uniform(size=n) < p).astype(float)
    feats = np.column_stack([g, d])
    ts = TrainingSet(feats, y, np.ones(n), Scaler.fit(feats))

    # gradient vs central finite differences
    X = np.column_stack([np.ones(n), ts.scaler.transform(feats)])
    grad_ok = True
    for _ in range(10):
        beta = rng.normal(0, 1, 3)
        grad = log_likelihood_gradient(beta, X, y, ts.weights)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1e-5
            fd = (weighted_log_likelihood(beta + e, X, y, ts.weights)
                  - weighted_log_likelihood(beta - e, X, y, ts.weights)) / 2e-5
            if abs(grad[k] - fd) > 1e-4 * max(abs(fd), 1.0):
                grad_ok = False

    model = fit_logistic(ts)
    s = ts.scaler
    A = np.array([
        [1.0, -s.mean[0] / s.std[0], -s.mean[1] / s.std[1]],
        [0.0, 1.0 / s.std[0], 0.0],
        [0.0, 0.0, 1.0 / s.std[1]],
    ])
    est = model.coefficients.to_unscaled(s).as_array()
    se = np.sqrt(np.diag(A @ model.covariance @ A.T))
    z = np.abs(est - true) / se
    report("MLE correctness (finite differences + 3-SE recovery at n=1e4)",
           grad_ok and bool(np.all(z < 3)),
           f"max |z| {z.max():.2f} < 3, gradient ok={grad_ok}")


def test_criterion_prior_derivation():
    spec = derive_priors(DEFAULT_EXPERT_ESTIMATES)
    # hand-solved pairwise systems (the independent 6-line oracle)
    L90, L75, L50 = math.log(9.0), math.log(3.0), 0.0
    gam, dlt = (100.0, 200.0, 500.0), (50.0, 100.0, 250.0)

    def solve(xs):
        out = []
        for (li, xi), (lj, xj) in (((L90, xs[0]), (L75, xs[1])),
                                   ((L90, xs[0]), (L50, xs[2])),
                                   ((L75, xs[1]), (L50, xs[2]))):
            slope = (lj - li) / (xj - xi)
            out.append((li - slope * xi, slope))
        return out

    gs, ds = solve(gam), solve(dlt)
    pool = [s[0] for s in gs] + [s[0] for s in ds]
    mu0, mu1, mu2 = (float(np.median(pool)),
                     sorted(gs, key=lambda s: s[0])[1][1],
                     sorted(ds, key=lambda s: s[0])[1][1])
    s0 = float(np.std(pool))
    s1 = float(np.std([s[1] for s in gs]))
    s2 = float(np.std([s[1] for s in ds]))

    errs = [abs(spec.beta0.mu - mu0), abs(spec.beta1.mu - mu1), abs(spec.beta2.mu - mu2),
            abs(spec.beta0.sigma - s0), abs(spec.beta1.sigma - s1), abs(spec.beta2.sigma - s2)]
    expected_ok = (abs(spec.beta0.mu - 2.7465) < 1e-4
                   and abs(spec.beta1.mu - (-0.0054931)) < 1e-6
                   and abs(spec.beta2.mu - (-0.010986)) < 1e-5)
    report("prior derivation matches hand-solved oracle",
           max(errs) < 1e-6 and expected_ok,
           f"max |err| {max(errs):.2e}, mu=({spec.beta0.mu:.4f}, "
           f"{spec.beta1.mu:.7f}, {spec.beta2.mu:.6f})")


def test_criterion_bayesian_sanity():
    priors = derive_priors(DEFAULT_EXPERT_ESTIMATES)
    settings = SamplerSettings(chains=4, draws=2000, warmup=800, seed=11)
    model = fit_bayesian(TrainingSet.empty(), priors, settings)
    draws = model.posterior.draws
    prior_ok = True
    details = []
    for k, prior in enumerate([priors.beta0, priors.beta1, priors.beta2]):
        a = (prior.low - prior.mu) / prior.sigma
        b = (prior.high - prior.mu) / prior.sigma
        true_mean = truncnorm.mean(a, b, loc=prior.mu, scale=prior.sigma)
        batches = draws[:, k].reshape(-1, 100).mean(axis=1)
        se = batches.std(ddof=1) / math.sqrt(len(batches))
        err = abs(draws[:, k].mean() - true_mean)
        details.append(f"b{k} err {err:.3g} (MC err {se:.3g})")
        if err > 4 * se + 0.02 * prior.sigma:
            prior_ok = False

    coeffs = (2.7465, -0.0054931, -0.010986)
    freq = RiskModel(kind="frequentist", scaler=Scaler.identity(),
                     coefficients=Coefficients(*coeffs, space="scaled"))
    bayes = RiskModel(kind="bayesian", scaler=Scaler.identity(),
                      posterior=PosteriorSamples(draws=np.array([coeffs]),
                                                 acceptance_rate=1.0, chains=1,
                                                 draws_per_chain=1))
    grid_pts = [(0.0, 0.0), (100.0, 50.0), (700.0, 300.0), (25.0, 12.5)]
    degenerate_ok = all(bayes.predict_at(g, d) == freq.predict_at(g, d)
                        for g, d in grid_pts)

    small_ts = TrainingSet(
        features=np.array([[10.0, 5.0], [300.0, 200.0]]),
        labels=np.array([1.0, 0.0]),
        weights=np.array([30.0, 1.0]),
        scaler=Scaler.identity(),
    )
    s = SamplerSettings(chains=2, draws=500, warmup=300, seed=77)
    m1 = fit_bayesian(small_ts, priors, s)
    m2 = fit_bayesian(small_ts, priors, s)
    repro_ok = np.array_equal(m1.posterior.draws, m2.posterior.draws)

    report("Bayesian sanity (prior recovery, degenerate draw, reproducibility)",
           prior_ok and degenerate_ok and repro_ok,
           "; ".join(details) + f"; degenerate=={degenerate_ok}, seeded=={repro_ok}")


def test_criterion_combination_formula():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        ps = rng.uniform(0, 1, size=int(rng.integers(1, 10)))
        expected = 1.0
        for p in ps:
            expected *= 1.0 - p
        expected = 1.0 - expected
        worst = max(worst, abs(combine(ps) - expected))
    mono_ok = True
    perm_ok = True
    for _ in range(200):
        ps = list(rng.uniform(0, 1, size=int(rng.integers(1, 7))))
        base = combine(ps)
        if combine(ps + [rng.uniform(0, 1)]) < base - 1e-12:
            mono_ok = False
        if base < max(ps) - 1e-12:
            mono_ok = False
        shuffled = list(ps)
        rng.shuffle(shuffled)
        if abs(combine(shuffled) - base) > 1e-12:
            perm_ok = False
    report("combination formula (1e3 brute-force checks + properties)",
           worst < 1e-12 and mono_ok and perm_ok,
           f"max |err| {worst:.2e}, monotone={mono_ok}, permutation={perm_ok}")


def test_criterion_simulator_validity(ordering_benchmark):
    results, _ = ordering_benchmark
    audited = 0
    ok = True
    for r in results[:5]:  # audits are O(n_tiles^2); five minefields suffice
        for key in ("linear", "sequential", "random"):
            for h in r[key].histories:
                audited += 1
                if not audit_route(r["grid"], r["dataset"], h.route):
                    ok = False
                if np.any(np.diff(h.l) < 0):
                    ok = False
        for key in ("linear", "sequential", "random"):
            l = r[key].mean_l
            ts = [t_x_of(l, x) for x in (50, 75, 90, 100)]
            if ts != sorted(ts) or ts[-1] > 100.0:
                ok = False
    report("simulator validity (route audit, monotone l, T ordering)",
           ok, f"{audited} routes audited")


def test_criterion_random_baseline_band():
    t0 = time.monotonic()
    rng = np.random.default_rng(505)
    from demine.geodata import Bounds, MetricPoint, MinefieldDataset, assign_mines, build_grid

    grid = build_grid(Bounds(0, 0, 500, 500), 25)  # 20x20 tiles
    mines = [MetricPoint(x, y) for x, y in rng.uniform(1, 499, size=(30, 2))]
    ds = MinefieldDataset(mines=mines)
    grid = assign_mines(grid, ds)
    suite = run_random(grid, ds, seed=909, runs=10)
    d = suite.scorecard().demining_score
    elapsed = time.monotonic() - t0
    report("random baseline band on 20x20/30 mines",
           0.45 <= d <= 0.55 and elapsed < 30.0,
           f"mean d {d:.4f} in [0.45, 0.55], {elapsed:.1f}s < 30s")


def test_criterion_qualitative_ordering(ordering_benchmark):
    results, elapsed = ordering_benchmark
    d_lin = float(np.mean([r["linear"].scorecard().demining_score for r in results]))
    d_seq = float(np.mean([r["sequential"].scorecard().demining_score for r in results]))
    d_rnd = float(np.mean([r["random"].scorecard().demining_score for r in results]))
    report("qualitative ordering: linear >= sequential + 0.05 > random",
           (d_lin - d_seq >= 0.05) and (d_seq > d_rnd) and elapsed < 600.0,
           f"linear {d_lin:.4f}, sequential {d_seq:.4f}, random {d_rnd:.4f}, "
           f"gap {d_lin - d_seq:.4f}, {elapsed:.0f}s < 600s")


def test_criterion_curved_vs_linear_parity(arc_instances):
    lin, cur = arc_instances
    d_lin, d_cur = [], []
    for seed in range(3001, 3021):
        grid, ds = generate_synthetic_minefield(SyntheticSpec(
            pattern="arc", n_mines=12, spacing=30, jitter=3,
            region_size=500, seed=seed))
        d_lin.append(run_pattern_suite(
            grid, ds, training.make_stack(lin, 25)).scorecard().demining_score)
        d_cur.append(run_pattern_suite(
            grid, ds, training.make_stack(cur, 25)).scorecard().demining_score)
    m_lin, m_cur = float(np.mean(d_lin)), float(np.mean(d_cur))
    report("curved-vs-linear parity on arc minefields",
           m_cur >= m_lin - 0.05,
           f"curved {m_cur:.4f} >= linear {m_lin:.4f} - 0.05")


def test_criterion_cv_harness():
    regions = [
        generate_synthetic_minefield(SyntheticSpec(
            pattern="arc", n_mines=10, spacing=30, jitter=3, region_size=300, seed=401)),
        generate_synthetic_minefield(SyntheticSpec(
            pattern="line", n_mines=10, spacing=30, jitter=3, region_size=300, seed=402)),
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r1 = cross_validate(regions, "curved", HyperGrid(), recalc_interval=50)
        r2 = cross_validate(regions, "curved", HyperGrid(), recalc_interval=50)
    cells_ok = len(r1.cells) == 27
    deterministic = (r1.best == r2.best and r1.best_score == r2.best_score)
    cell = r1.cells[0]
    d, n = cell["fold_scores"], cell["fold_tiles"]
    hand = (d[0] * n[0] + d[1] * n[1]) / (n[0] + n[1])
    weighted_ok = abs(cell["weighted_score"] - hand) < 1e-12
    report("CV harness (27 cells, deterministic argmax, weighted-average check)",
           cells_ok and deterministic and weighted_ok,
           f"best={r1.best}, score {r1.best_score:.4f}")
