"""Instance training: cluster regions, fit patterns, train a risk model.

An "instance" is one deminer flavor: linear (PCA patterns + logistic
regression), curved (principal curves + logistic regression) or bayesian
(principal curves + Bayesian logistic regression with expert priors).
Training uses a 1000 m anchor extent; for clearance the curved kinds
shrink it to the effective extent where the trained on-pattern risk drops
below 5%.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import clustering, patterns, risk
from .geodata import Grid, MinefieldDataset
from .simulator import RiskStack

INSTANCE_KINDS = ("linear", "curved", "bayesian")


@dataclass(frozen=True)
class InstanceHyperparams:
    landmine_weight: float
    cluster_max_distance: float
    pc_smoothness_factor: float | None = None

    def to_dict(self) -> dict:
        return {
            "landmine_weight": self.landmine_weight,
            "cluster_max_distance": self.cluster_max_distance,
            "pc_smoothness_factor": self.pc_smoothness_factor,
        }


@dataclass
class TrainedInstance:
    kind: str
    model: risk.RiskModel
    hyper: InstanceHyperparams
    effective_extent: float
    priors: risk.PriorSpec | None = None
    metadata: dict | None = None


def fit_region_patterns(grid: Grid, dataset: MinefieldDataset, kind: str,
                        hyper: InstanceHyperparams,
                        anchor_extent: float = patterns.TRAINING_ANCHOR_EXTENT) -> list:
    """Cluster the region's mines and fit one pattern per multi-mine cluster."""
    params = clustering.ClusteringParams(eps=hyper.cluster_max_distance, min_pts=1)
    clusters, _ = clustering.dbscan(dataset.coords(), params)
    fitted = []
    for cl in clusters:
        if len(cl) < 2:
            continue
        if kind == "linear":
            fitted.append(patterns.fit_linear(cl))
        else:
            config = patterns.PatternFitConfig(pc_smoothness_factor=hyper.pc_smoothness_factor)
            pat = patterns.fit_principal_curve(cl, config)
            fitted.append(patterns.build_anchors(pat, anchor_extent))
    return fitted


def train_instance(regions, kind: str, hyper: InstanceHyperparams,
                   sampler: risk.SamplerSettings | None = None,
                   estimates: risk.ExpertEstimates = risk.DEFAULT_EXPERT_ESTIMATES,
                   metadata: dict | None = None) -> TrainedInstance:
    """Fit patterns on fully-known regions and train the instance's classifier."""
    if kind not in INSTANCE_KINDS:
        raise ValueError(f"kind must be one of {INSTANCE_KINDS}")
    if kind in ("curved", "bayesian") and hyper.pc_smoothness_factor is None:
        raise ValueError(f"{kind} instances need pc_smoothness_factor")

    patterns_per_region = [
        fit_region_patterns(grid, dataset, kind, hyper) for grid, dataset in regions
    ]
    ts = risk.build_training_set(regions, patterns_per_region, hyper.landmine_weight)

    priors = None
    if kind == "bayesian":
        priors = risk.derive_priors(estimates)
        model = risk.fit_bayesian(ts, priors, sampler or risk.SamplerSettings())
    else:
        model = risk.fit_logistic(ts)

    extent = patterns.effective_extent(None, model)
    return TrainedInstance(
        kind=kind,
        model=model,
        hyper=hyper,
        effective_extent=extent,
        priors=priors,
        metadata=metadata,
    )


def make_stack(instance: TrainedInstance, recalc_interval: int = 25) -> RiskStack:
    """RiskStack for clearance runs with this trained instance."""
    fit_config = None
    if instance.kind in ("curved", "bayesian"):
        fit_config = patterns.PatternFitConfig(
            pc_smoothness_factor=instance.hyper.pc_smoothness_factor
        )
    return RiskStack(
        kind=instance.kind,
        model=instance.model,
        cluster_eps=instance.hyper.cluster_max_distance,
        fit_config=fit_config,
        anchor_extent=instance.effective_extent,
        recalc_interval=recalc_interval,
    )


# ---------------------------------------------------------------------------
# Model artifact file
# ---------------------------------------------------------------------------


def instance_to_dict(instance: TrainedInstance) -> dict:
    model = instance.model
    doc: dict = {
        "kind": instance.kind,
        "hyperparameters": instance.hyper.to_dict(),
        "effective_extent": instance.effective_extent,
        "scaler": {
            "mean": [float(v) for v in model.scaler.mean],
            "std": [float(v) for v in model.scaler.std],
        },
        "metadata": instance.metadata or {},
    }
    if model.kind == "frequentist":
        c = model.coefficients
        doc["coefficients"] = {
            "beta0": c.beta0, "beta1": c.beta1, "beta2": c.beta2, "space": c.space,
        }
        doc["converged"] = model.converged
        doc["separation"] = model.separation
    else:
        doc["posterior"] = {
            "draws": [[float(v) for v in row] for row in model.posterior.draws],
            "acceptance_rate": model.posterior.acceptance_rate,
            "chains": model.posterior.chains,
            "draws_per_chain": model.posterior.draws_per_chain,
        }
    if instance.priors is not None:
        doc["priors"] = {
            name: {"mu": p.mu, "sigma": p.sigma, "low": p.low, "high": p.high}
            for name, p in (
                ("beta0", instance.priors.beta0),
                ("beta1", instance.priors.beta1),
                ("beta2", instance.priors.beta2),
            )
        }
    return doc


def instance_from_dict(doc: dict) -> TrainedInstance:
    scaler = risk.Scaler(
        mean=np.array(doc["scaler"]["mean"], dtype=float),
        std=np.array(doc["scaler"]["std"], dtype=float),
    )
    hyper = InstanceHyperparams(
        landmine_weight=doc["hyperparameters"]["landmine_weight"],
        cluster_max_distance=doc["hyperparameters"]["cluster_max_distance"],
        pc_smoothness_factor=doc["hyperparameters"].get("pc_smoothness_factor"),
    )
    if "coefficients" in doc:
        c = doc["coefficients"]
        model = risk.RiskModel(
            kind="frequentist",
            scaler=scaler,
            coefficients=risk.Coefficients(c["beta0"], c["beta1"], c["beta2"], space=c["space"]),
            converged=doc.get("converged", True),
            separation=doc.get("separation", False),
        )
    else:
        p = doc["posterior"]
        model = risk.RiskModel(
            kind="bayesian",
            scaler=scaler,
            posterior=risk.PosteriorSamples(
                draws=np.array(p["draws"], dtype=float),
                acceptance_rate=p["acceptance_rate"],
                chains=p["chains"],
                draws_per_chain=p["draws_per_chain"],
            ),
        )
    priors = None
    if "priors" in doc:
        pr = doc["priors"]
        priors = risk.PriorSpec(
            beta0=risk.TruncatedNormalPrior(**_prior_args(pr["beta0"])),
            beta1=risk.TruncatedNormalPrior(**_prior_args(pr["beta1"])),
            beta2=risk.TruncatedNormalPrior(**_prior_args(pr["beta2"])),
        )
    return TrainedInstance(
        kind=doc["kind"],
        model=model,
        hyper=hyper,
        effective_extent=doc["effective_extent"],
        priors=priors,
        metadata=doc.get("metadata") or {},
    )


def _prior_args(d: dict) -> dict:
    low = d["low"] if d["low"] is not None else float("-inf")
    high = d["high"] if d["high"] is not None else float("inf")
    return {"mu": d["mu"], "sigma": d["sigma"], "low": low, "high": high}


def save_instance(path: str | Path, instance: TrainedInstance) -> None:
    doc = instance_to_dict(instance)
    # JSON has no inf literal; priors carry null for unbounded sides
    if "priors" in doc:
        for p in doc["priors"].values():
            p["low"] = None if p["low"] == float("-inf") else p["low"]
            p["high"] = None if p["high"] == float("inf") else p["high"]
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_instance(path: str | Path) -> TrainedInstance:
    with open(path) as fh:
        return instance_from_dict(json.load(fh))
