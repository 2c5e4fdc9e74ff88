"""Block-level telemetry: the fixed 16-component feature map and robust
normalization fitted on honest traffic.

Residual components compare observed cell rates against the closed-form
honest expectations recorded in the block's model snapshot, so domain
randomization does not masquerade as an attack signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import ChannelParams, DecoyConfig, error_gain, gain
from .simulator import BlockRecord, hist_midpoints

FEATURE_DIM = 16
FEATURE_NAMES = (
    "gain_resid_sZ",
    "gain_resid_sX",
    "gain_resid_wZ",
    "gain_resid_wX",
    "gain_resid_vZ",
    "gain_resid_vX",
    "errgain_resid_sZ",
    "errgain_resid_wZ",
    "resid_norm",
    "timing_mean",
    "timing_skew",
    "timing_kurt",
    "gate_asymmetry",
    "detector_imbalance",
    "double_click_rate",
    "proxy_composite",
)

_GAIN_CELLS = ("s_Z", "s_X", "w_Z", "w_X", "v_Z", "v_X")
_ERR_CELLS = ("s_Z", "w_Z")


class DegenerateBlockError(ValueError):
    """Raised for blocks without a single detection."""


def extract_features(
    block: BlockRecord,
    channel: ChannelParams | None = None,
    decoy: DecoyConfig | None = None,
) -> np.ndarray:
    """Deterministic map from a block to its 16-component feature vector."""
    if channel is None:
        channel = block.truth.channel
    if decoy is None:
        decoy = block.truth.decoy
    total_det = block.total_detections
    if total_det < 1:
        raise DegenerateBlockError("block has no detections")

    eta = channel.eta
    mu_of = {"s": decoy.mu_s, "w": decoy.mu_w, "v": decoy.mu_v}
    x = np.zeros(FEATURE_DIM)
    for i, key in enumerate(_GAIN_CELLS):
        cell = block.cells[key]
        if cell.sifted > 0:
            expected = gain(mu_of[key[0]], eta, channel.p_d)
            x[i] = cell.detections / cell.sifted - expected
    for j, key in enumerate(_ERR_CELLS):
        cell = block.cells[key]
        if cell.sifted > 0:
            expected = error_gain(mu_of[key[0]], eta, channel.p_d, channel.e_d)
            x[6 + j] = cell.errors / cell.sifted - expected
    x[8] = float(np.linalg.norm(x[:8]))

    counts = np.asarray(block.timing_hist, dtype=float)
    mids = hist_midpoints()
    mean = float(np.dot(counts, mids) / total_det)
    centered = mids - mean
    m2 = float(np.dot(counts, centered**2) / total_det)
    if m2 > 1e-12:
        m3 = float(np.dot(counts, centered**3) / total_det)
        m4 = float(np.dot(counts, centered**4) / total_det)
        x[10] = m3 / m2**1.5
        x[11] = m4 / m2**2 - 3.0
    x[9] = mean

    half = len(counts) // 2
    x[12] = float((counts[:half].sum() - counts[half:].sum()) / total_det)
    clicks = block.det0_clicks + block.det1_clicks
    if clicks > 0:
        x[13] = (block.det0_clicks - block.det1_clicks) / clicks
    x[14] = block.double_clicks / total_det
    x[15] = block.proxy_bias + block.proxy_Pret + block.proxy_temp
    return x


@dataclass(frozen=True)
class Normalizer:
    """Per-component median/IQR standardization fitted on honest data."""

    center: np.ndarray
    scale: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) / self.scale


def fit_normalizer(features: np.ndarray, min_samples: int = 100) -> Normalizer:
    """Fit robust location/scale; scales are floored to stay invertible."""
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[1] != FEATURE_DIM:
        raise ValueError(f"expected (n, {FEATURE_DIM}) features, got {feats.shape}")
    if feats.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} honest feature vectors")
    center = np.median(feats, axis=0)
    q75, q25 = np.percentile(feats, [75, 25], axis=0)
    scale = np.maximum((q75 - q25) / 1.349, 1e-9)
    return Normalizer(center=center, scale=scale)
