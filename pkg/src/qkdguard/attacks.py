"""Attack families, feasibility projection, and effective-channel mapping.

Four side-channel families are modeled on top of the honest link:

* time-shift: arrival offset inside the detector gates, producing a
  detector-efficiency mismatch through Gaussian gate profiles;
* detector blinding: a bright rectangular illumination envelope that puts
  a fraction of gates under adversary control and suppresses double clicks;
* photon-number splitting: multi-photon pulses forwarded losslessly while
  single photons are blocked just enough to keep decoy gains consistent;
* Trojan-horse probing: modulator readout with bounded correlation and
  return power, visible only through the leakage monitor proxy.

Every candidate is pushed through :func:`project`, which clamps each family
into its hardware box and, for PNS, shrinks the split fraction until the
attacked gains sit inside the finite-sample acceptance band of the honest
Poisson mixture.  :func:`eve_leakage` is the ground-truth oracle pricing an
attack in secret bits per emitted pulse; it defines the simulation world's
notion of damage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np
from scipy import stats

from .physics import ChannelParams, DecoyConfig, gain, yield_n
from .finite_key import binary_entropy

BLOCK_SPAN_PS = 600.0
COORD_TOL = 1e-6
FAMILIES = ("time_shift", "blinding", "pns", "trojan")


@dataclass(frozen=True)
class Null:
    family = "null"


@dataclass(frozen=True)
class TimeShift:
    family = "time_shift"
    dt: float = 0.0


@dataclass(frozen=True)
class Blinding:
    family = "blinding"
    I0: float = 0.0
    t1: float = 0.0
    t2: float = 0.0


@dataclass(frozen=True)
class PNS:
    family = "pns"
    f_split: float = 0.0


@dataclass(frozen=True)
class Trojan:
    family = "trojan"
    rho: float = 0.0
    P_ret: float = 0.0


AttackParams = Union[Null, TimeShift, Blinding, PNS, Trojan]


@dataclass(frozen=True)
class FeasibleSet:
    """Hardware and monitoring limits defining the attack search space.

    ``n_pulses`` sets the block size at which the decoy-consistency band
    is evaluated (larger blocks mean tighter bands).
    """

    dt_max: float = 150.0
    I_max: float = 1.0
    I_th: float = 0.2
    P_max: float = 0.6
    rho_max: float = 0.5
    kappa_tha: float = 1.0
    eps_decoy: float = 2.5e-11
    block_span: float = BLOCK_SPAN_PS
    n_pulses: int = 50_000

    def __post_init__(self):
        if not (0 < self.eps_decoy <= 0.1):
            raise ValueError("eps_decoy must lie in (0, 0.1]")
        for name in ("dt_max", "I_max", "P_max", "rho_max", "kappa_tha", "block_span"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_pulses < 1:
            raise ValueError("n_pulses must be positive")

    @classmethod
    def from_channel(
        cls,
        channel: ChannelParams,
        n_pulses: int = 50_000,
        eps_decoy: float = 2.5e-11,
        block_span: float = BLOCK_SPAN_PS,
    ) -> "FeasibleSet":
        return cls(
            dt_max=channel.dt_max,
            I_max=channel.I_max,
            I_th=channel.I_th,
            P_max=channel.P_max,
            rho_max=channel.rho_max,
            kappa_tha=channel.kappa_tha,
            eps_decoy=eps_decoy,
            block_span=block_span,
            n_pulses=n_pulses,
        )


@dataclass(frozen=True)
class EffectiveChannel:
    """Per-detector channel behavior induced by an attack.

    Neutral values reproduce the honest link exactly.
    """

    eta0: float
    eta1: float
    dt_applied: float = 0.0
    ctl_fraction: float = 0.0
    dc_suppression: float = 1.0
    y_mult_boost: float = 0.0
    y1_block: float = 0.0
    proxy_bias: float = 0.0
    proxy_Pret: float = 0.0

    def __post_init__(self):
        for name in ("eta0", "eta1", "ctl_fraction", "dc_suppression", "y1_block"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0, 1]: {v}")


# ---------------------------------------------------------------------------
# PNS consistency machinery (closed-form attacked gains, no series needed)


def _poisson_split(mu: float) -> tuple[float, float, float]:
    """(P[n=0], P[n=1], P[n>=2]) for a Poisson(mu) photon number."""
    p0 = math.exp(-mu)
    p1 = mu * p0
    return p0, p1, max(0.0, 1.0 - p0 - p1)


def pns_attacked_gain(
    mu: float, f_split: float, b: float, eta: float, p_d: float
) -> float:
    """Gain of intensity mu under a PNS attack with split f and blocking b.

    Multi-photon pulses are delivered losslessly with probability f_split,
    single photons blocked with probability b, the vacuum term untouched.
    """
    p0, p1, p2p = _poisson_split(mu)
    y0 = p_d
    y1 = yield_n(1, eta, p_d)
    tail = gain(mu, eta, p_d) - p0 * y0 - p1 * y1
    return p0 * y0 + p1 * y1 * (1.0 - b) + f_split * p2p + (1.0 - f_split) * tail


def pns_solve_block(
    f_split: float,
    channel: ChannelParams,
    decoy: DecoyConfig,
    feas: FeasibleSet,
) -> float:
    """Single-photon blocking fraction compensating the signal-intensity gain.

    Bisects b in [0, 1] to match the attacked signal gain to the honest one
    to 1e-9 resolution; clamps when no interior solution exists.
    """
    if not (0.0 <= f_split <= 1.0):
        raise ValueError("f_split must lie in [0, 1]")
    if f_split == 0.0:
        return 0.0
    eta = channel.eta
    target = gain(decoy.mu_s, eta, channel.p_d)

    def residual(b: float) -> float:
        return pns_attacked_gain(decoy.mu_s, f_split, b, eta, channel.p_d) - target

    if residual(0.0) <= 0.0:
        return 0.0
    if residual(1.0) >= 0.0:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        if residual(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@lru_cache(maxsize=64)
def _gain_bands(
    feas: FeasibleSet, channel: ChannelParams, decoy: DecoyConfig
) -> dict[str, tuple[float, float]]:
    """Finite-sample acceptance bands for the photon-bearing gain cells.

    Exact binomial quantiles around the honest expectation; the decoy tail
    budget is split across the two cells, half per side.
    """
    eta = channel.eta
    match = decoy.p_Z**2 + (1.0 - decoy.p_Z) ** 2
    eps_cell = feas.eps_decoy / 2.0
    bands: dict[str, tuple[float, float]] = {}
    for label, mu, p_mu in (
        ("s", decoy.mu_s, decoy.p_s),
        ("w", decoy.mu_w, decoy.p_w),
    ):
        n = max(1, int(round(feas.n_pulses * p_mu * match)))
        q = gain(mu, eta, channel.p_d)
        lo = stats.binom.ppf(eps_cell / 2.0, n, q) / n
        hi = stats.binom.ppf(1.0 - eps_cell / 2.0, n, q) / n
        bands[label] = (float(lo), float(hi))
    return bands


def _pns_consistent(
    f_split: float,
    feas: FeasibleSet,
    channel: ChannelParams,
    decoy: DecoyConfig,
) -> bool:
    b = pns_solve_block(f_split, channel, decoy, feas)
    bands = _gain_bands(feas, channel, decoy)
    eta = channel.eta
    for label, mu in (("s", decoy.mu_s), ("w", decoy.mu_w)):
        q_atk = pns_attacked_gain(mu, f_split, b, eta, channel.p_d)
        lo, hi = bands[label]
        if not (lo <= q_atk <= hi):
            return False
    return True


# ---------------------------------------------------------------------------
# Projection and feasibility


def project(
    a: AttackParams,
    feas: FeasibleSet,
    channel: ChannelParams,
    decoy: DecoyConfig,
) -> AttackParams:
    """Map an arbitrary candidate onto the feasible set.

    Idempotent: already-feasible candidates are returned unchanged
    (bit-identical), and projected outputs project to themselves.
    """
    if isinstance(a, Null):
        return a
    if isinstance(a, TimeShift):
        dt = min(feas.dt_max, max(-feas.dt_max, a.dt))
        return a if dt == a.dt else TimeShift(dt=dt)
    if isinstance(a, Blinding):
        t_lo, t_hi = sorted((a.t1, a.t2))
        t1 = min(feas.block_span, max(0.0, t_lo))
        t2 = min(feas.block_span, max(0.0, t_hi))
        i0 = min(feas.I_max, max(0.0, a.I0))
        if (i0, t1, t2) == (a.I0, a.t1, a.t2):
            return a
        return Blinding(I0=i0, t1=t1, t2=t2)
    if isinstance(a, Trojan):
        rho = min(feas.rho_max, max(0.0, a.rho))
        if feas.kappa_tha * rho > feas.P_max:
            rho = feas.P_max / feas.kappa_tha
        p_ret = min(feas.P_max, max(feas.kappa_tha * rho, a.P_ret))
        if (rho, p_ret) == (a.rho, a.P_ret):
            return a
        return Trojan(rho=rho, P_ret=p_ret)
    if isinstance(a, PNS):
        f = min(1.0, max(0.0, a.f_split))
        if _pns_consistent(f, feas, channel, decoy):
            return a if f == a.f_split else PNS(f_split=f)
        lo, hi = 0.0, f
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if _pns_consistent(mid, feas, channel, decoy):
                lo = mid
            else:
                hi = mid
        return PNS(f_split=lo)
    raise TypeError(f"unknown attack type {type(a)!r}")


def is_feasible(
    a: AttackParams,
    feas: FeasibleSet,
    channel: ChannelParams,
    decoy: DecoyConfig,
) -> bool:
    """True iff projection leaves the candidate unchanged (1e-6 tolerance)."""
    proj = project(a, feas, channel, decoy)
    if proj is a:
        return True
    va, vp = attack_vector(a), attack_vector(proj)
    return bool(np.all(np.abs(va - vp) <= COORD_TOL))


def structurally_feasible(a: AttackParams, feas: FeasibleSet) -> bool:
    """Hardware-bound checks only, without the decoy-consistency band.

    The statistical band is defined against the nominal honest model and is
    enforced by :func:`project` during the search; under domain drift the
    per-block world shifts while the vendor limits stay absolute, so the
    simulation layer rejects only out-of-bounds parameters.
    """
    tol = COORD_TOL
    if isinstance(a, Null):
        return True
    if isinstance(a, TimeShift):
        return abs(a.dt) <= feas.dt_max + tol
    if isinstance(a, Blinding):
        return (
            -tol <= a.t1 <= a.t2 + tol
            and a.t2 <= feas.block_span + tol
            and -tol <= a.I0 <= feas.I_max + tol
        )
    if isinstance(a, PNS):
        return -tol <= a.f_split <= 1.0 + tol
    if isinstance(a, Trojan):
        return (
            -tol <= a.rho <= feas.rho_max + tol
            and feas.kappa_tha * a.rho - tol <= a.P_ret <= feas.P_max + tol
        )
    raise TypeError(f"unknown attack type {type(a)!r}")


def apply_attack(
    a: AttackParams,
    channel: ChannelParams,
    decoy: DecoyConfig,
    feas: FeasibleSet | None = None,
) -> EffectiveChannel:
    """Translate feasible attack parameters into channel overrides."""
    if feas is None:
        feas = FeasibleSet.from_channel(channel)
    if not structurally_feasible(a, feas):
        raise ValueError(f"attack {a!r} violates the hardware bounds")
    eta = channel.eta
    if isinstance(a, Null):
        return EffectiveChannel(eta0=eta, eta1=eta)
    if isinstance(a, TimeShift):
        # Gaussian gate profiles centered at -delta/2 and +delta/2,
        # normalized so dt = 0 reproduces the honest efficiency.
        etas = []
        for c in (-channel.delta_det / 2.0, channel.delta_det / 2.0):
            num = math.exp(-((a.dt - c) ** 2) / (2.0 * channel.sigma_g**2))
            den = math.exp(-(c**2) / (2.0 * channel.sigma_g**2))
            etas.append(min(1.0, eta * num / den))
        return EffectiveChannel(eta0=etas[0], eta1=etas[1], dt_applied=a.dt)
    if isinstance(a, Blinding):
        duty = (a.t2 - a.t1) / feas.block_span
        depth = (a.I0 - channel.I_th) / (channel.I_max - channel.I_th)
        ctl = min(1.0, max(0.0, depth)) * duty
        return EffectiveChannel(
            eta0=eta,
            eta1=eta,
            ctl_fraction=ctl,
            dc_suppression=1.0 - ctl,
            proxy_bias=a.I0 * duty,
        )
    if isinstance(a, PNS):
        b = pns_solve_block(a.f_split, channel, decoy, feas)
        return EffectiveChannel(
            eta0=eta, eta1=eta, y_mult_boost=a.f_split, y1_block=b
        )
    if isinstance(a, Trojan):
        return EffectiveChannel(eta0=eta, eta1=eta, proxy_Pret=a.P_ret)
    raise TypeError(f"unknown attack type {type(a)!r}")


def eve_leakage(
    a: AttackParams,
    channel: ChannelParams,
    decoy: DecoyConfig,
    feas: FeasibleSet | None = None,
) -> float:
    """Ground-truth secret bits per emitted pulse available to the adversary.

    Declared truth of the simulation world: it prices the damage term of
    the operational loss, not a statement about real hardware.
    """
    if isinstance(a, Null):
        return 0.0
    if feas is None:
        feas = FeasibleSet.from_channel(channel)
    key_frac = decoy.p_s * decoy.p_Z
    eff = apply_attack(a, channel, decoy, feas)
    if isinstance(a, TimeShift):
        if eff.eta0 + eff.eta1 <= 0.0:
            return 0.0
        p_mis = eff.eta0 / (eff.eta0 + eff.eta1)
        q = gain(decoy.mu_s, channel.eta, channel.p_d)
        return key_frac * q * (1.0 - binary_entropy(p_mis))
    if isinstance(a, Blinding):
        q = gain(decoy.mu_s, channel.eta, channel.p_d)
        return key_frac * q * eff.ctl_fraction
    if isinstance(a, PNS):
        _, _, p2p = _poisson_split(decoy.mu_s)
        return key_frac * p2p * a.f_split
    if isinstance(a, Trojan):
        q = gain(decoy.mu_s, channel.eta, channel.p_d)
        return key_frac * a.rho * q
    raise TypeError(f"unknown attack type {type(a)!r}")


def attack_cost(a: AttackParams, feas: FeasibleSet) -> float:
    """Normalized perturbation magnitude c(a) in [0, ~1] for budgeted search."""
    if isinstance(a, Null):
        return 0.0
    if isinstance(a, TimeShift):
        return abs(a.dt) / feas.dt_max
    if isinstance(a, Blinding):
        return (a.I0 / feas.I_max) * (a.t2 - a.t1) / feas.block_span
    if isinstance(a, PNS):
        return a.f_split
    if isinstance(a, Trojan):
        return a.rho / feas.rho_max
    raise TypeError(f"unknown attack type {type(a)!r}")


# ---------------------------------------------------------------------------
# Parameter-vector codec (used by the search) and serialization


def attack_vector(a: AttackParams) -> np.ndarray:
    if isinstance(a, Null):
        return np.zeros(0)
    if isinstance(a, TimeShift):
        return np.array([a.dt], dtype=float)
    if isinstance(a, Blinding):
        return np.array([a.I0, a.t1, a.t2], dtype=float)
    if isinstance(a, PNS):
        return np.array([a.f_split], dtype=float)
    if isinstance(a, Trojan):
        return np.array([a.rho, a.P_ret], dtype=float)
    raise TypeError(f"unknown attack type {type(a)!r}")


def attack_from_vector(family: str, vec: np.ndarray) -> AttackParams:
    if family == "null":
        return Null()
    if family == "time_shift":
        return TimeShift(dt=float(vec[0]))
    if family == "blinding":
        return Blinding(I0=float(vec[0]), t1=float(vec[1]), t2=float(vec[2]))
    if family == "pns":
        return PNS(f_split=float(vec[0]))
    if family == "trojan":
        return Trojan(rho=float(vec[0]), P_ret=float(vec[1]))
    raise ValueError(f"unknown attack family {family!r}")


def family_box(family: str, feas: FeasibleSet) -> tuple[np.ndarray, np.ndarray]:
    """Raw coordinate box searched for each family."""
    if family == "time_shift":
        return np.array([-feas.dt_max]), np.array([feas.dt_max])
    if family == "blinding":
        return (
            np.array([0.0, 0.0, 0.0]),
            np.array([feas.I_max, feas.block_span, feas.block_span]),
        )
    if family == "pns":
        return np.array([0.0]), np.array([1.0])
    if family == "trojan":
        return np.array([0.0, 0.0]), np.array([feas.rho_max, feas.P_max])
    raise ValueError(f"unknown attack family {family!r}")


def attack_to_dict(a: AttackParams) -> dict:
    d = {"family": a.family}
    for name, value in zip(_FIELDS[a.family], attack_vector(a)):
        d[name] = float(value)
    return d


def attack_from_dict(d: dict) -> AttackParams:
    family = d["family"]
    if family == "null":
        return Null()
    vec = np.array([d[name] for name in _FIELDS[family]], dtype=float)
    return attack_from_vector(family, vec)


_FIELDS = {
    "null": (),
    "time_shift": ("dt",),
    "blinding": ("I0", "t1", "t2"),
    "pns": ("f_split",),
    "trojan": ("rho", "P_ret"),
}


def representative_attack(
    family: str,
    feas: FeasibleSet,
    channel: ChannelParams,
    decoy: DecoyConfig,
    strength: float = 1.0,
    sign: float = 1.0,
) -> AttackParams:
    """Feasible attack at a given fraction of its maximal magnitude.

    Used for fixed-operating-point evaluation; ``strength`` scales each
    family's dominant parameter toward the feasibility boundary.
    """
    if family == "null":
        return Null()
    if family == "time_shift":
        return TimeShift(dt=sign * strength * feas.dt_max)
    if family == "blinding":
        return Blinding(I0=strength * feas.I_max, t1=0.0, t2=feas.block_span)
    if family == "pns":
        f_max = project(PNS(f_split=1.0), feas, channel, decoy).f_split
        return PNS(f_split=strength * f_max)
    if family == "trojan":
        rho = strength * feas.rho_max
        return project(Trojan(rho=rho, P_ret=feas.kappa_tha * rho), feas, channel, decoy)
    raise ValueError(f"unknown attack family {family!r}")
