"""Derivative-free inner-loop attack search with feasibility projection.

A small rank-based evolution strategy (log-rank recombination, rank-mu
covariance update, cumulative step-size adaptation) runs in box-normalized
coordinates per attack family; every proposal is projected onto the
feasible set before evaluation, so the search only ever prices physically
realizable attacks.  A DRO-style exponential reweighting spreads the
mining effort across families within a total-variation budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (
    AttackParams,
    FeasibleSet,
    attack_cost,
    attack_from_vector,
    attack_vector,
    family_box,
    project,
)
from .physics import ChannelParams, DecoyConfig

FAMILIES = ("time_shift", "blinding", "pns", "trojan")


@dataclass(frozen=True)
class SearchState:
    """Evolution-strategy state in normalized [-1, 1] coordinates."""

    family: str
    mean: np.ndarray
    step_size: float
    covariance: np.ndarray
    step_path: np.ndarray
    population: int
    generation: int
    seed: int
    feas: FeasibleSet
    channel: ChannelParams
    decoy: DecoyConfig
    best_attack: AttackParams | None = None
    best_loss: float = -math.inf

    @property
    def dim(self) -> int:
        return self.mean.size


def _box(state_family: str, feas: FeasibleSet) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = family_box(state_family, feas)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return center, half


def _to_norm(vec: np.ndarray, family: str, feas: FeasibleSet) -> np.ndarray:
    center, half = _box(family, feas)
    return (vec - center) / half


def _from_norm(z: np.ndarray, family: str, feas: FeasibleSet) -> np.ndarray:
    center, half = _box(family, feas)
    return center + z * half


def search_init(
    family: str,
    feas: FeasibleSet,
    p: int,
    seed: int,
    channel: ChannelParams | None = None,
    decoy: DecoyConfig | None = None,
) -> SearchState:
    """Start at the feasible-box center with step 0.3 box half-widths."""
    if p < 4:
        raise ValueError("population must be at least 4")
    if family not in FAMILIES:
        raise ValueError(f"unknown attack family {family!r}")
    if channel is None:
        channel = ChannelParams()
    if decoy is None:
        decoy = DecoyConfig()
    k = family_box(family, feas)[0].size
    return SearchState(
        family=family,
        mean=np.zeros(k),
        step_size=0.3,
        covariance=np.eye(k),
        step_path=np.zeros(k),
        population=p,
        generation=0,
        seed=seed,
        feas=feas,
        channel=channel,
        decoy=decoy,
    )


def propose(state: SearchState) -> list[AttackParams]:
    """Sample and project one population; deterministic per (state, generation)."""
    key = (state.seed % (1 << 64)) * (1 << 64) + state.generation
    rng = np.random.Generator(np.random.Philox(key=key))
    chol = np.linalg.cholesky(state.covariance)
    z = state.mean + state.step_size * rng.standard_normal((state.population, state.dim)) @ chol.T
    out = []
    for row in z:
        raw = _from_norm(row, state.family, state.feas)
        cand = attack_from_vector(state.family, raw)
        out.append(project(cand, state.feas, state.channel, state.decoy))
    return out


def update(state: SearchState, evaluated: list[tuple[AttackParams, float]]) -> SearchState:
    """Rank-based ES update, maximizing loss; best-so-far is retained."""
    if len(evaluated) != state.population:
        raise ValueError("evaluated set does not match the population size")
    if any(a.family != state.family for a, _ in evaluated):
        raise ValueError("evaluated candidates from the wrong family")
    k = state.dim
    order = sorted(range(len(evaluated)), key=lambda i: -evaluated[i][1])
    mu = math.ceil(state.population / 2)
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mu_eff = 1.0 / float(np.sum(w**2))

    xs = np.array(
        [
            _to_norm(attack_vector(evaluated[i][0]), state.family, state.feas)
            for i in order[:mu]
        ]
    )
    new_mean = w @ xs
    ys = (xs - state.mean) / state.step_size

    # Cumulative step-size adaptation.
    c_sig = (mu_eff + 2.0) / (k + mu_eff + 5.0)
    d_sig = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (k + 1.0)) - 1.0) + c_sig
    evals, vecs = np.linalg.eigh(state.covariance)
    evals = np.maximum(evals, 1e-12)
    inv_sqrt = vecs @ np.diag(evals**-0.5) @ vecs.T
    path = (1.0 - c_sig) * state.step_path + math.sqrt(
        c_sig * (2.0 - c_sig) * mu_eff
    ) * inv_sqrt @ (new_mean - state.mean) / state.step_size
    chi_k = math.sqrt(k) * (1.0 - 1.0 / (4.0 * k) + 1.0 / (21.0 * k**2))
    step = state.step_size * math.exp(
        (c_sig / d_sig) * (float(np.linalg.norm(path)) / chi_k - 1.0)
    )
    step = min(2.0, max(1e-6, step))

    c_mu = min(0.25, mu_eff / (k**2 + mu_eff))
    rank_mu = (ys * w[:, None]).T @ ys
    cov = (1.0 - c_mu) * state.covariance + c_mu * rank_mu
    cov = 0.5 * (cov + cov.T) + 1e-12 * np.eye(k)

    best_attack, best_loss = state.best_attack, state.best_loss
    top_attack, top_loss = evaluated[order[0]]
    if top_loss > best_loss:
        best_attack, best_loss = top_attack, top_loss
    return replace(
        state,
        mean=new_mean,
        step_size=step,
        covariance=cov,
        step_path=path,
        generation=state.generation + 1,
        best_attack=best_attack,
        best_loss=best_loss,
    )


def budgeted_loss(
    raw_loss: float, a: AttackParams, feas: FeasibleSet, lambda_cost: float
) -> float:
    """Loss net of the normalized perturbation cost lambda_cost * c(a)."""
    if lambda_cost < 0:
        raise ValueError("lambda_cost must be non-negative")
    return raw_loss - lambda_cost * attack_cost(a, feas)


@dataclass(frozen=True)
class FamilyMixture:
    """DRO distribution over attack families inside a TV ball around uniform."""

    weights: dict[str, float] = field(
        default_factory=lambda: {f: 1.0 / len(FAMILIES) for f in FAMILIES}
    )
    temperature: float = 1.0
    budget: float = 0.5

    def __post_init__(self):
        vals = np.array(list(self.weights.values()))
        if np.any(vals < -1e-12) or abs(vals.sum() - 1.0) > 1e-9:
            raise ValueError("weights must form a probability vector")
        if tv_from_uniform(self.weights) > self.budget + 1e-9:
            raise ValueError("weights exceed the TV budget")


def tv_from_uniform(weights: dict[str, float]) -> float:
    vals = np.array(list(weights.values()))
    uniform = np.full(len(vals), 1.0 / len(vals))
    return 0.5 * float(np.abs(vals - uniform).sum())


def dro_reweight(
    mixture: FamilyMixture, losses: dict[str, float], eta_dro: float | None = None
) -> FamilyMixture:
    """Exponential-utility reweighting projected back into the TV ball."""
    if eta_dro is None:
        eta_dro = mixture.temperature
    families = list(mixture.weights)
    if any(not math.isfinite(losses[f]) for f in families):
        raise ValueError("family losses must be finite")
    raw = np.array(
        [mixture.weights[f] * math.exp(eta_dro * losses[f]) for f in families]
    )
    raw /= raw.sum()
    uniform = np.full(len(raw), 1.0 / len(raw))
    tv = 0.5 * float(np.abs(raw - uniform).sum())
    if tv > mixture.budget:
        raw = uniform + (mixture.budget / tv) * (raw - uniform)
    raw = raw / raw.sum()
    return replace(mixture, weights=dict(zip(families, map(float, raw))))
