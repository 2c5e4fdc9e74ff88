"""Analytic channel and device model for a decoy-state BB84 link.

Closed-form transmittance, per-photon-number yields and error rates, and
their Poisson mixtures (gains / error gains), plus the domain randomization
used to decorrelate training data from a single channel condition.

Conventions baked into the closed forms:

* dark counts contribute an additive per-gate click probability ``p_d``
  (split evenly across the two detectors by the Monte Carlo layer);
* a detection caused purely by a dark count carries a random bit, so its
  error probability is exactly 1/2, while signal-caused detections err
  with the misalignment probability ``e_d``.  This makes the error-gain
  closed form ``e_d * (1 - exp(-eta*mu)) + p_d / 2`` exact under the
  Poisson mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

_TWO64 = 1 << 64


def _rng_from_key(key: int) -> np.random.Generator:
    """Counter-based generator keyed directly (no entropy mixing)."""
    return np.random.Generator(np.random.Philox(key=key % (1 << 128)))


@dataclass(frozen=True)
class ChannelParams:
    """Physical channel / device parameterization.

    Distances in km, attenuation in dB/km, times in ps.  Illumination and
    return powers are in arbitrary monitor units shared with the feasible
    set bounds.
    """

    L: float = 50.0
    alpha: float = 0.2
    p_d: float = 1e-6
    e_d: float = 0.01
    sigma_t: float = 80.0
    delta_det: float = 30.0
    sigma_g: float = 100.0
    dt_max: float = 150.0
    I_max: float = 1.0
    I_th: float = 0.2
    P_max: float = 0.6
    rho_max: float = 0.5
    kappa_tha: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ValueError("alpha must be positive")
        if self.L < 0:
            raise ValueError("distance must be non-negative")
        if not (0 <= self.p_d < 1):
            raise ValueError("p_d must be a probability below 1")
        if not (0 <= self.e_d < 0.5):
            raise ValueError("e_d must lie in [0, 0.5)")
        if not (0 < self.I_th < self.I_max):
            raise ValueError("need 0 < I_th < I_max")
        if not (0 < self.rho_max <= 1):
            raise ValueError("rho_max must lie in (0, 1]")
        for name in ("sigma_t", "sigma_g", "dt_max", "P_max", "kappa_tha"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive")

    @property
    def eta(self) -> float:
        return transmittance(self.L, self.alpha)


@dataclass(frozen=True)
class DecoyConfig:
    """Three-intensity decoy settings and basis bias.

    ``mu_v`` is exactly zero (vacuum decoy); the weak decoy sits near 0.1
    and the signal intensity in [0.5, 0.6].  ``p_Z`` is the key-basis
    probability used by both the sender and the receiver.
    """

    mu_s: float = 0.5
    mu_w: float = 0.1
    mu_v: float = 0.0
    p_s: float = 0.7
    p_w: float = 0.2
    p_v: float = 0.1
    p_Z: float = 0.9

    def __post_init__(self):
        if not (self.mu_s > self.mu_w > self.mu_v):
            raise ValueError("need mu_s > mu_w > mu_v")
        if self.mu_v != 0.0:
            raise ValueError("vacuum intensity must be exactly 0")
        probs = (self.p_s, self.p_w, self.p_v)
        if any(not (0 < p < 1) for p in probs):
            raise ValueError("intensity probabilities must lie in (0, 1)")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("intensity probabilities must sum to 1")
        if not (0.5 <= self.p_Z < 1):
            raise ValueError("p_Z must favor the key basis")

    @property
    def intensities(self) -> tuple[float, float, float]:
        return (self.mu_s, self.mu_w, self.mu_v)

    @property
    def probabilities(self) -> tuple[float, float, float]:
        return (self.p_s, self.p_w, self.p_v)


def transmittance(L: float, alpha: float) -> float:
    """Channel transmittance 10**(-alpha*L/10) for a fiber of length L."""
    if L < 0:
        raise ValueError("distance must be non-negative")
    if alpha <= 0:
        raise ValueError("attenuation must be positive")
    return 10.0 ** (-alpha * L / 10.0)


def yield_n(n: int, eta: float, p_d: float) -> float:
    """Detection probability of an n-photon pulse, clamped to 1."""
    if n < 0:
        raise ValueError("photon number must be non-negative")
    if not (0 < eta <= 1):
        raise ValueError("eta must lie in (0, 1]")
    if not (0 <= p_d < 1):
        raise ValueError("p_d must lie in [0, 1)")
    return min(1.0, 1.0 - (1.0 - eta) ** n + p_d)


def error_n(n: int, eta: float, p_d: float, e_d: float) -> float:
    """Error rate among detections of n-photon pulses.

    ``e_d + (p_d/2) / Y_n`` clamped to [0, 1/2]; the dark-count term
    dominates for vacuum pulses, where errors are coin flips.
    """
    y = yield_n(n, eta, p_d)
    if y <= 0:
        raise ValueError("yield is zero; error rate undefined")
    return min(0.5, max(0.0, e_d + (p_d / 2.0) / y))


def error_contribution_n(n: int, eta: float, p_d: float, e_d: float) -> float:
    """Per-pulse error probability e_n*Y_n of an n-photon pulse.

    Signal-caused detections err at e_d and dark-caused ones at 1/2, so
    the contribution is ``e_d*(Y_n - p_d) + p_d/2``.  Its Poisson mixture
    reproduces :func:`error_gain` exactly, which is what the Monte Carlo
    layer converges to.
    """
    y = yield_n(n, eta, p_d)
    return min(y, max(0.0, e_d * (y - p_d) + p_d / 2.0))


def gain(mu: float, eta: float, p_d: float) -> float:
    """Poisson-mixture gain Q(mu) = 1 - exp(-eta*mu) + p_d."""
    if mu < 0:
        raise ValueError("intensity must be non-negative")
    return min(1.0, -math.expm1(-eta * mu) + p_d)


def error_gain(mu: float, eta: float, p_d: float, e_d: float) -> float:
    """Poisson-mixture error gain E(mu)Q(mu) = e_d*(1 - exp(-eta*mu)) + p_d/2."""
    if mu < 0:
        raise ValueError("intensity must be non-negative")
    return e_d * -math.expm1(-eta * mu) + p_d / 2.0


def qber(mu: float, eta: float, p_d: float, e_d: float) -> float:
    """Conditional error fraction E(mu) = EQ/Q."""
    return error_gain(mu, eta, p_d, e_d) / gain(mu, eta, p_d)


def randomize_domain(
    base: ChannelParams, decoy: DecoyConfig, seed: int
) -> tuple[ChannelParams, DecoyConfig]:
    """Perturb channel and decoy settings within their nominal drift bands.

    Transmittance moves within +/-1 dB (absorbed into alpha), misalignment
    within +/-0.4 percentage points (floored at 0.1%), timing jitter within
    +/-20 ps, intensity probabilities by +/-0.05 then renormalized, and the
    dark-count rate is resampled log-uniformly in [1e-7, 1e-6].
    Deterministic for a fixed seed.
    """
    rng = _rng_from_key(seed % _TWO64)
    db = rng.uniform(-1.0, 1.0)
    alpha = base.alpha + db / max(base.L, 1e-9)
    e_d = max(1e-3, base.e_d + rng.uniform(-0.004, 0.004))
    sigma_t = max(5.0, base.sigma_t + rng.uniform(-20.0, 20.0))
    p_d = 10.0 ** rng.uniform(-7.0, -6.0)
    channel = replace(base, alpha=alpha, e_d=e_d, sigma_t=sigma_t, p_d=p_d)

    raw = np.array(decoy.probabilities) + rng.uniform(-0.05, 0.05, size=3)
    raw = np.maximum(raw, 0.01)
    raw /= raw.sum()
    # Compensate rounding so the simplex constraint holds exactly.
    p_s, p_w = float(raw[0]), float(raw[1])
    p_v = 1.0 - p_s - p_w
    return channel, replace(decoy, p_s=p_s, p_w=p_w, p_v=p_v)
