"""Monte Carlo block simulator for the decoy-state link.

Each aggregation block draws per-pulse intensity, bases, and bit, routes
photons through the (possibly attacked) effective channel with per-photon
misalignment flips, adds per-detector dark counts, squashes double clicks,
and aggregates counts by (intensity, sender basis) cell together with a
detection-time histogram and monitor proxies.

Randomness is counter-based: block ``t`` of a stream uses a Philox
generator keyed by ``base_seed XOR t``, so results are bit-reproducible
for a given (seed, index) regardless of execution order or thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attacks
from .attacks import AttackParams, FeasibleSet, Null, apply_attack, eve_leakage
from .physics import ChannelParams, DecoyConfig, randomize_domain

HIST_BINS = 64
HIST_RANGE_PS = 300.0
PROXY_NOISE_SD = 0.05
_RANDOMIZE_STREAM = 1 << 64

INTENSITY_LABELS = ("s", "w", "v")
BASIS_LABELS = ("Z", "X")
CELL_KEYS = tuple(f"{m}_{b}" for m in INTENSITY_LABELS for b in BASIS_LABELS)


@dataclass(frozen=True)
class CellCounts:
    emissions: int
    sifted: int
    detections: int
    errors: int


@dataclass(frozen=True)
class TruthRecord:
    """Ground truth attached to a simulated block."""

    attack: AttackParams
    leak: float
    channel: ChannelParams
    decoy: DecoyConfig

    @property
    def attacked(self) -> bool:
        return not isinstance(self.attack, Null)


@dataclass(frozen=True)
class BlockRecord:
    """Raw observables of one aggregation block."""

    N: int
    cells: dict[str, CellCounts]
    det0_clicks: int
    det1_clicks: int
    double_clicks: int
    timing_hist: np.ndarray
    proxy_bias: float
    proxy_temp: float
    proxy_Pret: float
    truth: TruthRecord = field(repr=False)

    def __post_init__(self):
        if sum(c.emissions for c in self.cells.values()) != self.N:
            raise ValueError("cell emissions must partition the block")
        for key, c in self.cells.items():
            if not (0 <= c.errors <= c.detections <= c.sifted <= c.emissions):
                raise ValueError(f"inconsistent counts in cell {key}")
        if int(self.timing_hist.sum()) != self.total_detections:
            raise ValueError("timing histogram must cover every detection")
        if min(self.det0_clicks, self.det1_clicks, self.double_clicks) < 0:
            raise ValueError("negative click counts")

    @property
    def total_detections(self) -> int:
        return sum(c.detections for c in self.cells.values())


def hist_midpoints() -> np.ndarray:
    edges = np.linspace(-HIST_RANGE_PS, HIST_RANGE_PS, HIST_BINS + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def _block_rng(key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key % (1 << 128)))


def simulate_block(
    channel: ChannelParams,
    decoy: DecoyConfig,
    attack: AttackParams,
    N: int,
    seed: int,
) -> BlockRecord:
    """Simulate one block of N pulses under the given attack."""
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"invalid block size {N!r}")
    feas = FeasibleSet.from_channel(channel, n_pulses=int(N))
    eff = apply_attack(attack, channel, decoy, feas)  # rejects infeasible attacks
    rng = _block_rng(seed)

    mus = np.array(decoy.intensities)
    cum = np.cumsum(decoy.probabilities)[:2]
    intensity = np.searchsorted(cum, rng.random(N), side="right")
    u = rng.random(N)
    alice_z = u < decoy.p_Z
    # Conditional-uniform reuse: the residual of u is U(0,1) independent
    # of alice_z, saving one full-length draw per block.
    resid = np.where(alice_z, u / decoy.p_Z, (u - decoy.p_Z) / (1.0 - decoy.p_Z))
    bob_z = resid < decoy.p_Z
    bit = rng.integers(0, 2, N, dtype=np.uint8).astype(bool)  # detector 1 encodes True

    match = alice_z == bob_z
    m_int = intensity[match]
    m_bit = bit[match]
    M = int(match.sum())

    forced = np.zeros(M, dtype=bool)
    forced_err = np.zeros(M, dtype=bool)
    if eff.y1_block > 0.0 or eff.y_mult_boost > 0.0:
        # PNS path: photon-number classes matter, so sample them.
        n_photon = rng.poisson(mus[m_int])
        blocked = (n_photon == 1) & (rng.random(M) < eff.y1_block)
        forced = (n_photon >= 2) & (rng.random(M) < eff.y_mult_boost)
        forced_err = forced & (rng.random(M) < channel.e_d)
        n_photon = np.where(blocked | forced, 0, n_photon)
        k_wrong = rng.binomial(n_photon, channel.e_d)
        eta_corr = np.where(m_bit, eff.eta1, eff.eta0)
        eta_wrong = np.where(m_bit, eff.eta0, eff.eta1)
        sig_corr = rng.binomial(n_photon - k_wrong, eta_corr) > 0
        sig_wrong = rng.binomial(k_wrong, eta_wrong) > 0
    else:
        # Poisson thinning: photons reaching the correct (wrong) detector
        # are independent Poissons, so only click indicators are needed.
        # P(click) per (intensity, bit) comes from a 3x2 table lookup.
        eta_c = np.where(m_bit, eff.eta1, eff.eta0)
        eta_w = np.where(m_bit, eff.eta0, eff.eta1)
        mu_m = mus[m_int]
        p_corr = -np.expm1(-mu_m * (1.0 - channel.e_d) * eta_c)
        p_wrong = -np.expm1(-mu_m * channel.e_d * eta_w)
        sig_corr = rng.random(M) < p_corr
        sig_wrong = rng.random(M) < p_wrong

    dark0 = rng.random(M) < channel.p_d / 2.0
    dark1 = rng.random(M) < channel.p_d / 2.0
    outcome_forced = m_bit ^ forced_err
    click0 = np.where(m_bit, sig_wrong, sig_corr) | dark0 | (forced & ~outcome_forced)
    click1 = np.where(m_bit, sig_corr, sig_wrong) | dark1 | (forced & outcome_forced)

    if eff.ctl_fraction > 0.0:
        # Controlled gates never double-click: the faked state reproduces
        # the expected outcome on a single detector.
        controlled = rng.random(M) < eff.ctl_fraction
        demote = controlled & click0 & click1
        click0 &= ~(demote & m_bit)
        click1 &= ~(demote & ~m_bit)

    double = click0 & click1
    detected = click0 | click1
    outcome = click1.copy()
    n_double = int(double.sum())
    if n_double:
        outcome[double] = rng.random(n_double) < 0.5
    error = detected & (outcome != m_bit)

    # Per-(intensity, sender-basis) aggregation.  Emissions count every
    # pulse; sifted/detected/error counts only basis-matched ones.
    cat_all = intensity * 2 + (~alice_z).astype(int)
    emissions = np.bincount(cat_all, minlength=6)
    cat_m = cat_all[match]
    sifted = np.bincount(cat_m, minlength=6)
    detections = np.bincount(cat_m[detected], minlength=6)
    errors = np.bincount(cat_m[error], minlength=6)
    cells = {
        key: CellCounts(int(emissions[i]), int(sifted[i]), int(detections[i]), int(errors[i]))
        for i, key in enumerate(CELL_KEYS)
    }

    n_det = int(detected.sum())
    times = rng.normal(eff.dt_applied, channel.sigma_t, size=n_det)
    width = 2.0 * HIST_RANGE_PS / HIST_BINS
    bins = np.clip(((times + HIST_RANGE_PS) // width).astype(int), 0, HIST_BINS - 1)
    hist = np.bincount(bins, minlength=HIST_BINS)

    proxy = rng.normal(0.0, PROXY_NOISE_SD, size=3)
    leak = eve_leakage(attack, channel, decoy, feas)
    return BlockRecord(
        N=int(N),
        cells=cells,
        det0_clicks=int(click0.sum()),
        det1_clicks=int(click1.sum()),
        double_clicks=int(double.sum()),
        timing_hist=hist,
        proxy_bias=float(proxy[0] + eff.proxy_bias),
        proxy_temp=float(proxy[1]),
        proxy_Pret=float(proxy[2] + eff.proxy_Pret),
        truth=TruthRecord(attack=attack, leak=leak, channel=channel, decoy=decoy),
    )


def simulate_stream(
    channel: ChannelParams,
    decoy: DecoyConfig,
    schedule,
    N: int,
    base_seed: int,
    randomize: bool = False,
    threads: int | None = None,
) -> list[BlockRecord]:
    """Simulate a block-synchronous stream, one attack entry per block.

    Block t uses seed ``base_seed XOR t``; with ``randomize`` each block
    first draws its own domain-randomized channel and decoy settings.
    """
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must be non-empty")
    if threads is None:
        threads = int(os.environ.get("QKDGUARD_THREADS", "1"))

    def one(t_attack):
        t, attack = t_attack
        key = base_seed ^ t
        ch, dc = channel, decoy
        if randomize:
            ch, dc = randomize_domain(channel, decoy, seed=_RANDOMIZE_STREAM | key)
        return simulate_block(ch, dc, attack, N, seed=key)

    jobs = list(enumerate(schedule))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def pool_blocks(blocks) -> BlockRecord:
    """Concatenate blocks into one record with summed counts.

    The pooled truth keeps the first block's model snapshot and the
    pulse-weighted mean leak; intended for streams simulated under a
    common (non-randomized) configuration.
    """
    blocks = list(blocks)
    if not blocks:
        raise ValueError("cannot pool an empty stream")
    total_n = sum(b.N for b in blocks)
    cells = {}
    for key in CELL_KEYS:
        cells[key] = CellCounts(
            emissions=sum(b.cells[key].emissions for b in blocks),
            sifted=sum(b.cells[key].sifted for b in blocks),
            detections=sum(b.cells[key].detections for b in blocks),
            errors=sum(b.cells[key].errors for b in blocks),
        )
    leak = sum(b.truth.leak * b.N for b in blocks) / total_n
    first = blocks[0]
    return BlockRecord(
        N=total_n,
        cells=cells,
        det0_clicks=sum(b.det0_clicks for b in blocks),
        det1_clicks=sum(b.det1_clicks for b in blocks),
        double_clicks=sum(b.double_clicks for b in blocks),
        timing_hist=np.sum([b.timing_hist for b in blocks], axis=0),
        proxy_bias=float(np.mean([b.proxy_bias for b in blocks])),
        proxy_temp=float(np.mean([b.proxy_temp for b in blocks])),
        proxy_Pret=float(np.mean([b.proxy_Pret for b in blocks])),
        truth=TruthRecord(
            attack=first.truth.attack,
            leak=leak,
            channel=first.truth.channel,
            decoy=first.truth.decoy,
        ),
    )


def block_to_dict(block: BlockRecord) -> dict:
    """JSON-ready representation of a block (ints for counts)."""
    return {
        "N": block.N,
        "cells": {
            k: [c.emissions, c.sifted, c.detections, c.errors]
            for k, c in block.cells.items()
        },
        "det0": block.det0_clicks,
        "det1": block.det1_clicks,
        "double_clicks": block.double_clicks,
        "timing_hist": [int(x) for x in block.timing_hist],
        "proxy_bias": block.proxy_bias,
        "proxy_temp": block.proxy_temp,
        "proxy_Pret": block.proxy_Pret,
        "truth": {
            "attack": attacks.attack_to_dict(block.truth.attack),
            "leak": block.truth.leak,
            "channel": asdict(block.truth.channel),
            "decoy": asdict(block.truth.decoy),
        },
    }


def block_from_dict(d: dict) -> BlockRecord:
    truth = TruthRecord(
        attack=attacks.attack_from_dict(d["truth"]["attack"]),
        leak=float(d["truth"]["leak"]),
        channel=ChannelParams(**d["truth"]["channel"]),
        decoy=DecoyConfig(**d["truth"]["decoy"]),
    )
    cells = {k: CellCounts(*map(int, v)) for k, v in d["cells"].items()}
    return BlockRecord(
        N=int(d["N"]),
        cells=cells,
        det0_clicks=int(d["det0"]),
        det1_clicks=int(d["det1"]),
        double_clicks=int(d["double_clicks"]),
        timing_hist=np.array(d["timing_hist"], dtype=int),
        proxy_bias=float(d["proxy_bias"]),
        proxy_temp=float(d["proxy_temp"]),
        proxy_Pret=float(d["proxy_Pret"]),
        truth=truth,
    )
