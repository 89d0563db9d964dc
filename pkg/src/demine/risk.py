"""Per-pattern risk classifiers and tile-level risk maps.

Two classifier families over the pattern coordinates (gamma, delta):

* frequentist — weighted logistic regression fitted by maximum likelihood
  on standard-scaled features, no regularization;

* bayesian — logistic regression with truncated-normal priors derived from
  six expert distance/progress estimates, sampled with random-walk
  Metropolis on the raw (meter) features. The predictive mean over the
  posterior draws is the reported risk.

Per-cluster risks are combined per tile as 1 - prod(1 - p_i).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .patterns import PatternCoordinates, transform_many

GRADIENT_TOL = 1e-8
MAX_NEWTON_ITER = 500
SEPARATION_NORM = 1e6


def sigmoid(z):
    z = np.clip(z, -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(-z))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class Scaler:
    """Per-feature standardization (population std, floored to avoid 0-div)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Scaler":
        f = np.asarray(features, dtype=float).reshape(-1, 2)
        if len(f) == 0:
            return cls(mean=np.zeros(2), std=np.ones(2))
        std = f.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean=f.mean(axis=0), std=std)

    @classmethod
    def identity(cls) -> "Scaler":
        return cls(mean=np.zeros(2), std=np.ones(2))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float).reshape(-1, 2) - self.mean) / self.std


@dataclass
class TrainingSet:
    features: np.ndarray  # (n, 2) unscaled (gamma, delta), meters
    labels: np.ndarray  # (n,) in {0, 1}
    weights: np.ndarray  # (n,) positive
    scaler: Scaler

    def __post_init__(self):
        if len(self.weights) and np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls) -> "TrainingSet":
        return cls(
            features=np.zeros((0, 2)),
            labels=np.zeros(0),
            weights=np.zeros(0),
            scaler=Scaler.identity(),
        )


@dataclass(frozen=True)
class Coefficients:
    beta0: float
    beta1: float  # gamma coefficient
    beta2: float  # delta coefficient
    space: str  # "scaled" | "unscaled"

    def __post_init__(self):
        if self.space not in ("scaled", "unscaled"):
            raise ValueError(f"unknown coefficient space {self.space!r}")
        if not all(map(math.isfinite, (self.beta0, self.beta1, self.beta2))):
            raise ValueError("coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2])

    def to_unscaled(self, scaler: Scaler) -> "Coefficients":
        """Rewrite scaled-space coefficients in raw meter units."""
        if self.space == "unscaled":
            return self
        b1 = self.beta1 / scaler.std[0]
        b2 = self.beta2 / scaler.std[1]
        b0 = self.beta0 - b1 * scaler.mean[0] - b2 * scaler.mean[1]
        return Coefficients(b0, b1, b2, space="unscaled")


@dataclass(frozen=True)
class TruncatedNormalPrior:
    mu: float
    sigma: float
    low: float
    high: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def log_density(self, x: float) -> float:
        # unnormalized: constants cancel in Metropolis ratios.
        # Support is [low, high): a finite lower bound is attainable
        # (beta0 >= 0) while a finite upper bound is not (beta1, beta2 < 0).
        if x < self.low or (math.isfinite(self.high) and x >= self.high):
            return -math.inf
        return -0.5 * ((x - self.mu) / self.sigma) ** 2


@dataclass(frozen=True)
class PriorSpec:
    beta0: TruncatedNormalPrior  # support [0, inf)
    beta1: TruncatedNormalPrior  # support (-inf, 0)
    beta2: TruncatedNormalPrior  # support (-inf, 0)

    def log_density(self, beta: np.ndarray) -> float:
        return (
            self.beta0.log_density(beta[0])
            + self.beta1.log_density(beta[1])
            + self.beta2.log_density(beta[2])
        )


@dataclass(frozen=True)
class ExpertEstimates:
    """Max progress/distance (meters) at which an expert still sees 90/75/50% risk."""

    gamma90: float
    gamma75: float
    gamma50: float
    delta90: float
    delta75: float
    delta50: float

    def __post_init__(self):
        if not (self.gamma90 < self.gamma75 < self.gamma50):
            raise ValueError("gamma estimates must increase as risk drops")
        if not (self.delta90 < self.delta75 < self.delta50):
            raise ValueError("delta estimates must increase as risk drops")


DEFAULT_EXPERT_ESTIMATES = ExpertEstimates(
    gamma90=100.0, gamma75=200.0, gamma50=500.0,
    delta90=50.0, delta75=100.0, delta50=250.0,
)


@dataclass
class PosteriorSamples:
    draws: np.ndarray  # (k, 3)
    acceptance_rate: float
    chains: int
    draws_per_chain: int


@dataclass
class RiskModel:
    """Either a coefficient point estimate or a posterior over coefficients."""

    kind: str  # "frequentist" | "bayesian"
    scaler: Scaler
    coefficients: Coefficients | None = None
    posterior: PosteriorSamples | None = None
    converged: bool = True
    separation: bool = False
    covariance: np.ndarray | None = None  # scaled-space, frequentist only

    def __post_init__(self):
        if self.kind == "frequentist":
            if self.coefficients is None or self.posterior is not None:
                raise ValueError("frequentist model carries coefficients only")
        elif self.kind == "bayesian":
            if self.posterior is None or self.coefficients is not None:
                raise ValueError("bayesian model carries posterior samples only")
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")

    def predict_at(self, gamma: float, delta: float) -> float:
        return float(self.predict_many(np.array([gamma]), np.array([delta]))[0])

    def predict_many(self, gamma: np.ndarray, delta: np.ndarray) -> np.ndarray:
        g = np.asarray(gamma, dtype=float).ravel()
        d = np.asarray(delta, dtype=float).ravel()
        if self.kind == "frequentist":
            feats = self.scaler.transform(np.column_stack([g, d]))
            c = self.coefficients
            return sigmoid(c.beta0 + c.beta1 * feats[:, 0] + c.beta2 * feats[:, 1])
        draws = self.posterior.draws  # (k, 3), unscaled meters
        z = draws[:, 0:1] + np.outer(draws[:, 1], g) + np.outer(draws[:, 2], d)
        return sigmoid(z).mean(axis=0)


def predict(model: RiskModel, pc: PatternCoordinates) -> float:
    """Landmine probability for one point in pattern coordinates."""
    return model.predict_at(pc.gamma, pc.delta)


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


def build_training_set(regions, patterns_per_region, landmine_weight: float) -> TrainingSet:
    """Pool (gamma, delta) samples over all fitted patterns of all regions.

    Per pattern: every mine in the region becomes a positive sample with
    weight `landmine_weight`; the center of every mine-free tile becomes a
    negative sample with weight 1. The scaler is fitted on the pooled
    unscaled features.
    """
    if landmine_weight <= 0:
        raise ValueError("landmine_weight must be positive")
    feats, labels, weights = [], [], []
    n_patterns = 0
    for (grid, dataset), patterns in zip(regions, patterns_per_region):
        mine_xy = dataset.coords()
        empty_centers = np.array(
            [[t.center.x, t.center.y] for t in grid.tiles if not t.mine_indices]
        ).reshape(-1, 2)
        for pattern in patterns:
            n_patterns += 1
            if len(mine_xy):
                g, d = transform_many(pattern, mine_xy)
                feats.append(np.column_stack([g, d]))
                labels.append(np.ones(len(g)))
                weights.append(np.full(len(g), float(landmine_weight)))
            if len(empty_centers):
                g, d = transform_many(pattern, empty_centers)
                feats.append(np.column_stack([g, d]))
                labels.append(np.zeros(len(g)))
                weights.append(np.ones(len(g)))
    if n_patterns == 0:
        raise ValueError("no fitted patterns; cannot build a training set")
    features = np.vstack(feats) if feats else np.zeros((0, 2))
    return TrainingSet(
        features=features,
        labels=np.concatenate(labels) if labels else np.zeros(0),
        weights=np.concatenate(weights) if weights else np.zeros(0),
        scaler=Scaler.fit(features),
    )


# ---------------------------------------------------------------------------
# Frequentist fit
# ---------------------------------------------------------------------------


def weighted_log_likelihood(beta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    z = X @ beta
    return float(np.sum(w * (y * z - np.logaddexp(0.0, z))))


def log_likelihood_gradient(beta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    p = sigmoid(X @ beta)
    return X.T @ (w * (y - p))


def fit_logistic(ts: TrainingSet, tol: float = GRADIENT_TOL,
                 max_iter: int = MAX_NEWTON_ITER) -> RiskModel:
    """Weighted maximum-likelihood logistic fit (damped Newton, no penalty)."""
    if len(ts) == 0 or len(np.unique(ts.labels)) < 2:
        raise ValueError("training set must contain both labels")
    Xs = ts.scaler.transform(ts.features)
    X = np.column_stack([np.ones(len(Xs)), Xs])
    y = np.asarray(ts.labels, dtype=float)
    w = np.asarray(ts.weights, dtype=float)

    beta = np.zeros(3)
    ll = weighted_log_likelihood(beta, X, y, w)
    converged = False
    separation = False
    for _ in range(max_iter):
        g = log_likelihood_gradient(beta, X, y, w)
        if np.linalg.norm(g) < tol:
            converged = True
            break
        p = sigmoid(X @ beta)
        ww = w * p * (1.0 - p)
        H = (X * ww[:, None]).T @ X + 1e-12 * np.eye(3)
        step = np.linalg.solve(H, g)
        # backtracking keeps the likelihood monotone
        alpha = 1.0
        for _ in range(50):
            cand = beta + alpha * step
            cand_ll = weighted_log_likelihood(cand, X, y, w)
            if cand_ll >= ll:
                beta, ll = cand, cand_ll
                break
            alpha *= 0.5
        if np.linalg.norm(beta) > SEPARATION_NORM:
            separation = True
            break
    if not separation:
        # a saturated fit that classifies every sample perfectly means the
        # gradient underflowed to zero, not that the MLE exists
        p = sigmoid(X @ beta)
        saturated = np.minimum(p, 1.0 - p) < 1e-8
        correct = (p > 0.5) == (y > 0.5)
        if np.all(saturated & correct):
            separation = True
    if separation:
        warnings.warn("perfect separation: coefficients diverge", RuntimeWarning)
    elif not converged:
        warnings.warn("logistic fit hit the iteration cap; returning best iterate", RuntimeWarning)

    p = sigmoid(X @ beta)
    ww = w * p * (1.0 - p)
    H = (X * ww[:, None]).T @ X
    cov = None
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        pass
    return RiskModel(
        kind="frequentist",
        scaler=ts.scaler,
        coefficients=Coefficients(float(beta[0]), float(beta[1]), float(beta[2]), space="scaled"),
        converged=converged,
        separation=separation,
        covariance=cov,
    )


# ---------------------------------------------------------------------------
# Priors from expert estimates
# ---------------------------------------------------------------------------


def derive_priors(est: ExpertEstimates) -> PriorSpec:
    """Truncated-normal priors from six expert risk-at-distance estimates.

    For each estimate pair the 2x2 system beta0 + b * x_i = logit(level_i)
    is solved, yielding three (beta0, beta1) solutions from the progress
    estimates and three (beta0, beta2) solutions from the distance
    estimates. The prior means are the solutions whose beta0 is the family
    median (beta0 itself uses the pooled median); sigmas are the population
    standard deviations of the three solutions per parameter.
    """
    levels = [(logit(0.9), "90"), (logit(0.75), "75"), (logit(0.5), "50")]
    gam = [est.gamma90, est.gamma75, est.gamma50]
    dlt = [est.delta90, est.delta75, est.delta50]

    def pair_solutions(xs: list[float]) -> list[tuple[float, float]]:
        sols = []
        for i, j in ((0, 1), (0, 2), (1, 2)):
            li, lj = levels[i][0], levels[j][0]
            slope = (lj - li) / (xs[j] - xs[i])
            b0 = li - slope * xs[i]
            sols.append((b0, slope))
        return sols

    gamma_sols = pair_solutions(gam)
    delta_sols = pair_solutions(dlt)

    def median_solution(sols: list[tuple[float, float]]) -> tuple[float, float]:
        ordered = sorted(sols, key=lambda s: s[0])
        return ordered[1]

    mu_b1 = median_solution(gamma_sols)[1]
    mu_b2 = median_solution(delta_sols)[1]
    pooled_b0 = np.array([s[0] for s in gamma_sols] + [s[0] for s in delta_sols])
    mu_b0 = float(np.median(pooled_b0))

    sigma_b0 = float(np.std(pooled_b0))
    sigma_b1 = float(np.std([s[1] for s in gamma_sols]))
    sigma_b2 = float(np.std([s[1] for s in delta_sols]))

    return PriorSpec(
        beta0=TruncatedNormalPrior(mu_b0, sigma_b0, 0.0, math.inf),
        beta1=TruncatedNormalPrior(mu_b1, sigma_b1, -math.inf, 0.0),
        beta2=TruncatedNormalPrior(mu_b2, sigma_b2, -math.inf, 0.0),
    )


# ---------------------------------------------------------------------------
# Bayesian fit (random-walk Metropolis)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerSettings:
    chains: int = 4
    draws: int = 2000
    warmup: int = 1000
    seed: int = 0
    target_acceptance: float = 0.3


def fit_bayesian(ts: TrainingSet, priors: PriorSpec,
                 settings: SamplerSettings = SamplerSettings()) -> RiskModel:
    """Sample the posterior over (beta0, beta1, beta2) on unscaled meters.

    Gaussian random-walk Metropolis; proposal scales adapt toward the
    target acceptance during warmup and are frozen for the retained draws.
    Seeded runs are bit-reproducible.
    """
    X = np.column_stack([np.ones(len(ts)), ts.features]) if len(ts) else np.zeros((0, 3))
    y = np.asarray(ts.labels, dtype=float)
    w = np.asarray(ts.weights, dtype=float)

    def log_post(beta: np.ndarray) -> float:
        lp = priors.log_density(beta)
        if not math.isfinite(lp):
            return -math.inf
        if len(ts) == 0:
            return lp
        return lp + weighted_log_likelihood(beta, X, y, w)

    start = np.array([
        max(priors.beta0.mu, 1e-6),
        min(priors.beta1.mu, -1e-9),
        min(priors.beta2.mu, -1e-9),
    ])
    base_scale = np.array([priors.beta0.sigma, priors.beta1.sigma, priors.beta2.sigma])

    all_draws = []
    accepted_total = 0
    for chain in range(settings.chains):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=settings.seed, spawn_key=(chain,)))
        beta = start.copy()
        lp = log_post(beta)
        scale = base_scale.copy()

        # warmup with batch adaptation
        batch = 50
        acc_in_batch = 0
        for i in range(settings.warmup):
            beta, lp, acc = _mh_step(rng, beta, lp, scale, log_post)
            acc_in_batch += acc
            if (i + 1) % batch == 0:
                rate = acc_in_batch / batch
                scale *= math.exp((rate - settings.target_acceptance) * 0.5)
                acc_in_batch = 0

        draws = np.empty((settings.draws, 3))
        accepted = 0
        for i in range(settings.draws):
            beta, lp, acc = _mh_step(rng, beta, lp, scale, log_post)
            accepted += acc
            draws[i] = beta
        if accepted == 0:
            raise RuntimeError(f"chain {chain}: no proposal accepted; sampler is stuck")
        accepted_total += accepted
        all_draws.append(draws)

    rate = accepted_total / (settings.chains * settings.draws)
    if not (0.05 <= rate <= 0.95):
        warnings.warn(f"MCMC acceptance rate {rate:.3f} outside [0.05, 0.95]", RuntimeWarning)

    posterior = PosteriorSamples(
        draws=np.vstack(all_draws),
        acceptance_rate=rate,
        chains=settings.chains,
        draws_per_chain=settings.draws,
    )
    return RiskModel(kind="bayesian", scaler=ts.scaler, posterior=posterior)


def _mh_step(rng, beta, lp, scale, log_post):
    proposal = beta + rng.normal(0.0, scale)
    lp_new = log_post(proposal)
    if math.isfinite(lp_new) and math.log(rng.uniform()) < lp_new - lp:
        return proposal, lp_new, 1
    return beta, lp, 0


# ---------------------------------------------------------------------------
# Combination and tile risk maps
# ---------------------------------------------------------------------------


def combine(per_cluster) -> float:
    """Total risk from independent per-cluster risks: 1 - prod(1 - p)."""
    ps = np.asarray(list(per_cluster), dtype=float)
    if ps.size == 0:
        return 0.0
    if np.any((ps < 0) | (ps > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - ps))


def risk_map(grid, patterns, model: RiskModel, cleared: np.ndarray | None = None) -> np.ndarray:
    """Combined per-tile risk over uncleared tiles.

    Returns an (n_tiles,) array; cleared tiles are NaN, and with no fitted
    patterns every entry is NaN (the caller falls back to sequential order).
    """
    n = grid.n_tiles
    out = np.full(n, np.nan)
    if not patterns:
        return out
    centers = grid.centers()
    survive = np.ones(n)
    for pattern in patterns:
        g, d = transform_many(pattern, centers)
        survive *= 1.0 - model.predict_many(g, d)
    out = 1.0 - survive
    if cleared is not None:
        out = np.where(np.asarray(cleared, dtype=bool), np.nan, out)
    return out
