"""Finite-key accounting for three-intensity decoy BB84.

Exact Clopper-Pearson intervals feed closed-form decoy bounds on the
single-photon yield and phase error; the per-emitted-pulse secret fraction
then subtracts error-correction leakage and an entropy-accumulation style
finite-size penalty:

    r >= (1/N) * ( s1 * (1 - h(e1_U)) - lambda_EC - Delta_EAT )

The count-scale penalty is evaluated over the sifted, detected key bits
(the rounds actually accumulating entropy); evaluating it over emitted
pulses would zero the rate at every desk-scale block size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import stats

from .physics import ChannelParams, DecoyConfig, error_gain, gain, qber

E0_VACUUM = 0.5  # error rate of dark-count detections: a coin flip
F_EC_DEFAULT = 1.16
C_EAT_DEFAULT = 4.0


@dataclass(frozen=True)
class EpsilonBudget:
    """Failure-probability allocation across the security subroutines."""

    eps_total: float = 1e-10
    eps_EC: float = 2.5e-11
    eps_PE: float = 2.5e-11
    eps_PA: float = 2.5e-11
    eps_EAT: float = 2.5e-11
    eps_decoy: float = 2.5e-11

    def __post_init__(self):
        parts = (self.eps_EC, self.eps_PE, self.eps_PA, self.eps_EAT)
        if any(e <= 0 for e in parts + (self.eps_decoy, self.eps_total)):
            raise ValueError("all epsilon components must be positive")
        if abs(sum(parts) - self.eps_total) > 1e-6 * self.eps_total:
            raise ValueError("component epsilons must sum to eps_total")
        if self.eps_decoy > self.eps_PE:
            raise ValueError("eps_decoy must not exceed eps_PE")

    @classmethod
    def split_evenly(cls, eps_total: float = 1e-10) -> "EpsilonBudget":
        e = eps_total / 4.0
        return cls(
            eps_total=eps_total,
            eps_EC=e,
            eps_PE=e,
            eps_PA=e,
            eps_EAT=e,
            eps_decoy=e,
        )


@dataclass(frozen=True)
class DecoyBounds:
    """Confidence-bounded single-photon parameters for one block."""

    Y0_L: float
    Y0_U: float
    Y1_L: float
    e1_U: float
    s1_ZL: float
    vacuous: bool = False


@dataclass(frozen=True)
class SecretFractionReport:
    """Secret fraction and its components, per emitted pulse."""

    r: float
    s1_ZL: float
    e1_U: float
    lambda_EC: float
    delta_EAT: float
    n_sift_Z: int


def binary_entropy(p: float) -> float:
    """Binary entropy in bits; h(0) = h(1) = 0."""
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"probability out of range: {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def clopper_pearson(k: int, n: int, eps: float) -> tuple[float, float]:
    """Exact two-sided binomial interval at total tail mass eps.

    Half the mass is spent per side via the usual regularized
    incomplete-beta inversion; the interval is [0, upper] for k = 0 and
    [lower, 1] for k = n.
    """
    if n < 1 or not (0 <= k <= n):
        raise ValueError(f"invalid counts k={k}, n={n}")
    if not (0 < eps < 1):
        raise ValueError("eps must lie in (0, 1)")
    lower = 0.0 if k == 0 else float(stats.beta.ppf(eps / 2.0, k, n - k + 1))
    upper = 1.0 if k == n else float(stats.beta.ppf(1.0 - eps / 2.0, k + 1, n - k))
    return lower, upper


def ec_leakage(n_sift_Z: float, E_obs: float, f_EC: float, eps_EC: float) -> float:
    """Error-correction leakage including the verification cost."""
    if not (0.0 <= E_obs <= 0.5):
        raise ValueError("observed QBER must lie in [0, 0.5]")
    return f_EC * n_sift_Z * binary_entropy(E_obs) + math.log2(1.0 / eps_EC)


def eat_penalty(eps_EAT: float, N: float, c_EAT: float = C_EAT_DEFAULT) -> float:
    """Count-scale finite-size penalty c * sqrt(N * ln(2/eps))."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if eps_EAT <= 0:
        raise ValueError("eps_EAT must be positive")
    return c_EAT * math.sqrt(N * math.log(2.0 / eps_EAT))


def decoy_bounds_from_rates(
    q_s_up: float,
    q_w_low: float,
    y0_low: float,
    y0_up: float,
    eq_w_up: float,
    mu_s: float,
    mu_w: float,
) -> tuple[float, float, bool]:
    """Closed-form single-photon bounds from (bounded) cell rates.

    Standard three-intensity algebra: the weak-decoy gain pins the linear
    combination isolating Y1 from below once the signal gain and vacuum
    yield are bounded from above.
    """
    coef = mu_s / (mu_s * mu_w - mu_w**2)
    bracket = (
        q_w_low * math.exp(mu_w)
        - q_s_up * math.exp(mu_s) * (mu_w**2 / mu_s**2)
        - ((mu_s**2 - mu_w**2) / mu_s**2) * y0_up
    )
    y1_low = min(1.0, max(0.0, coef * bracket))
    if y1_low <= 0.0:
        return 0.0, 0.5, True
    e1_up = (eq_w_up * math.exp(mu_w) - E0_VACUUM * y0_low) / (mu_w * y1_low)
    return y1_low, min(0.5, max(0.0, e1_up)), False


def _pooled_cell(block, label: str) -> tuple[int, int, int]:
    """Basis-pooled (sifted, detections, errors) for one intensity."""
    sifted = det = err = 0
    for basis in ("Z", "X"):
        cell = block.cells[f"{label}_{basis}"]
        sifted += cell.sifted
        det += cell.detections
        err += cell.errors
    return sifted, det, err


def decoy_bounds(block, decoy: DecoyConfig, eps_decoy: float) -> DecoyBounds:
    """Finite-sample decoy bounds from one block's counts.

    Gains are estimated from the basis-pooled sifted cells (yields are
    basis-independent in this channel model), the phase-error bound from
    the weak-intensity error rate.  The tail budget is split over the four
    intervals used.
    """
    eps_cell = eps_decoy / 4.0
    n_s, k_s, _ = _pooled_cell(block, "s")
    n_w, k_w, err_w = _pooled_cell(block, "w")
    n_v, k_v, _ = _pooled_cell(block, "v")
    if min(n_s, n_w, n_v) < 1:
        raise ValueError("block lacks emissions in one of the intensities")
    _, q_s_up = clopper_pearson(k_s, n_s, eps_cell)
    q_w_low, _ = clopper_pearson(k_w, n_w, eps_cell)
    y0_low, y0_up = clopper_pearson(k_v, n_v, eps_cell)
    _, eq_w_up = clopper_pearson(err_w, n_w, eps_cell)

    y1_low, e1_up, vacuous = decoy_bounds_from_rates(
        q_s_up, q_w_low, y0_low, y0_up, eq_w_up, decoy.mu_s, decoy.mu_w
    )
    n_sift_z = block.cells["s_Z"].sifted
    s1 = n_sift_z * math.exp(-decoy.mu_s) * decoy.mu_s * y1_low
    return DecoyBounds(
        Y0_L=y0_low, Y0_U=y0_up, Y1_L=y1_low, e1_U=e1_up, s1_ZL=s1, vacuous=vacuous
    )


def decoy_bounds_asymptotic(
    channel: ChannelParams, decoy: DecoyConfig
) -> tuple[float, float]:
    """(Y1_L, e1_U) from exact closed-form rates with collapsed intervals."""
    eta = channel.eta
    q_s = gain(decoy.mu_s, eta, channel.p_d)
    q_w = gain(decoy.mu_w, eta, channel.p_d)
    eq_w = error_gain(decoy.mu_w, eta, channel.p_d, channel.e_d)
    y0 = channel.p_d
    y1_low, e1_up, _ = decoy_bounds_from_rates(
        q_s, q_w, y0, y0, eq_w, decoy.mu_s, decoy.mu_w
    )
    return y1_low, e1_up


def secret_fraction(
    block,
    decoy: DecoyConfig,
    budget: EpsilonBudget,
    f_EC: float = F_EC_DEFAULT,
    c_EAT: float = C_EAT_DEFAULT,
) -> SecretFractionReport:
    """Finite-key secret fraction of one block, clamped at zero."""
    bounds = decoy_bounds(block, decoy, budget.eps_decoy)
    cell = block.cells["s_Z"]
    n_key = cell.detections
    e_obs = cell.errors / n_key if n_key > 0 else 0.0
    lam = ec_leakage(n_key, min(0.5, e_obs), f_EC, budget.eps_EC)
    delta = eat_penalty(budget.eps_EAT, max(1, n_key), c_EAT)
    key_term = bounds.s1_ZL * (1.0 - binary_entropy(bounds.e1_U))
    r = max(0.0, (key_term - lam - delta) / block.N)
    return SecretFractionReport(
        r=r,
        s1_ZL=bounds.s1_ZL,
        e1_U=bounds.e1_U,
        lambda_EC=lam,
        delta_EAT=delta,
        n_sift_Z=cell.sifted,
    )


def attacked_secret_fraction(
    block,
    decoy: DecoyConfig,
    budget: EpsilonBudget,
    leak: float,
    f_EC: float = F_EC_DEFAULT,
    c_EAT: float = C_EAT_DEFAULT,
) -> float:
    """Secret fraction after subtracting the adversary's ground-truth take."""
    if leak < 0:
        raise ValueError("leak must be non-negative")
    report = secret_fraction(block, decoy, budget, f_EC=f_EC, c_EAT=c_EAT)
    return max(0.0, report.r - leak)


def operational_loss(
    alarm_honest: bool,
    alarm_attack: bool,
    r0: float,
    r_a: float,
    alpha: float,
    beta: float,
    gamma: float,
) -> float:
    """Per-block loss: false-alarm cost plus damage-weighted missed detections."""
    if min(alpha, beta, gamma) < 0:
        raise ValueError("loss weights must be non-negative")
    loss = beta * float(alarm_honest)
    if not alarm_attack:
        loss += alpha + gamma * max(0.0, r0 - r_a)
    return loss


def asymptotic_reference_rate(
    channel: ChannelParams, decoy: DecoyConfig, f_EC: float = F_EC_DEFAULT
) -> float:
    """Honest secret fraction in the large-block limit.

    Uses exact rates with collapsed confidence intervals and drops the
    O(1/N) verification and EAT terms.  Serves as the stable damage scale
    for loss pricing at block sizes where per-block finite-key rates are
    identically zero.
    """
    eta = channel.eta
    y1_low, e1_up = decoy_bounds_asymptotic(channel, decoy)
    p1 = math.exp(-decoy.mu_s) * decoy.mu_s
    q_s = gain(decoy.mu_s, eta, channel.p_d)
    e_s = qber(decoy.mu_s, eta, channel.p_d, channel.e_d)
    per_sifted = p1 * y1_low * (1.0 - binary_entropy(e1_up)) - f_EC * q_s * binary_entropy(e_s)
    return max(0.0, decoy.p_s * decoy.p_Z**2 * per_sifted)


def pooled_secret_fraction(
    blocks,
    decoy: DecoyConfig,
    budget: EpsilonBudget,
    leaks=None,
    f_EC: float = F_EC_DEFAULT,
    c_EAT: float = C_EAT_DEFAULT,
) -> float:
    """Secret fraction of a concatenated stream, net of pooled leakage.

    Pooling is how alarms pay off: discarded blocks neither drag down the
    pooled decoy statistics nor contribute adversary-known bits that the
    pooled privacy amplification must burn.
    """
    from .simulator import pool_blocks  # local import to avoid a cycle

    blocks = list(blocks)
    if not blocks:
        return 0.0
    pooled = pool_blocks(blocks)
    report = secret_fraction(pooled, decoy, budget, f_EC=f_EC, c_EAT=c_EAT)
    if leaks is None:
        leaks = [b.truth.leak for b in blocks]
    total_n = sum(b.N for b in blocks)
    pooled_leak = sum(l * b.N for l, b in zip(leaks, blocks)) / total_n
    return max(0.0, report.r - pooled_leak)
