"""Hybrid anomaly scorer and decision layer.

A shrunk-covariance Mahalanobis one-class score handles point anomalies; a
small gated recurrent scorer (from scratch, float64, exact backprop) reads
a sliding window of recent feature vectors for structured drifts.  The two
are mixed convexly, thresholded at a calibrated false-alarm quantile, and
optionally fed into a CUSUM chart for sequential detection.  Randomized
smoothing provides a Monte Carlo stability certificate for the decision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .telemetry import FEATURE_DIM, Normalizer

MODEL_FORMAT = "qkdguard-defender"
MODEL_VERSION = 1
_SQRT_EPS = 1e-12


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# One-class component


def oc_fit(
    features: np.ndarray, shrinkage: float = 0.1
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and inverse shrunk covariance of honest normalized features.

    The covariance is shrunk toward a scaled identity, which keeps the
    precision well defined even for degenerate training sets.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a 2-d feature matrix")
    n, d = x.shape
    if n < 10 * d:
        raise ValueError(f"need at least {10 * d} samples, got {n}")
    if not (0 < shrinkage <= 1):
        raise ValueError("shrinkage must lie in (0, 1]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    scale = max(float(np.trace(cov)) / d, _SQRT_EPS)
    shrunk = (1.0 - shrinkage) * cov + shrinkage * scale * np.eye(d)
    precision = np.linalg.inv(shrunk)
    precision = 0.5 * (precision + precision.T)
    if not np.all(np.isfinite(precision)):
        raise ValueError("covariance inversion failed")
    return mean, precision


def oc_score(mean: np.ndarray, precision: np.ndarray, x: np.ndarray) -> float:
    """Squared Mahalanobis distance of one normalized feature vector."""
    delta = np.asarray(x, dtype=float) - mean
    return float(delta @ precision @ delta)


def oc_score_batch(mean: np.ndarray, precision: np.ndarray, xs: np.ndarray) -> np.ndarray:
    delta = np.asarray(xs, dtype=float) - mean
    return np.einsum("ij,jk,ik->i", delta, precision, delta)


def oc_to_unit(score, d: int = FEATURE_DIM):
    """Map a Mahalanobis-squared score into (0, 1) for convex mixing."""
    return 1.0 - np.exp(-np.asarray(score, dtype=float) / d)


# ---------------------------------------------------------------------------
# Gated recurrent temporal scorer

PARAM_KEYS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h", "w_o", "b_o")


class TemporalScorer:
    """Single-layer gated recurrent scorer with an affine sigmoid head.

    Processes a (window, features) sequence and returns a score in (0, 1).
    All arithmetic is float64 and the backward pass is exact, which the
    finite-difference hygiene checks rely on.
    """

    def __init__(self, n_in: int = FEATURE_DIM, hidden: int = 32, seed: int = 0):
        self.n_in = n_in
        self.hidden = hidden
        rng = np.random.Generator(np.random.Philox(key=seed))
        def init(rows, cols, fan):
            return rng.normal(0.0, 1.0 / math.sqrt(fan), size=(rows, cols))
        h, d = hidden, n_in
        self.params: dict[str, np.ndarray] = {}
        for gate in ("z", "r", "h"):
            self.params[f"W_{gate}"] = init(h, d, d)
            self.params[f"U_{gate}"] = init(h, h, h)
            self.params[f"b_{gate}"] = np.zeros(h)
        self.params["w_o"] = init(1, h, h)[0]
        self.params["b_o"] = np.zeros(1)

    # -- forward / backward ------------------------------------------------

    def forward(self, windows: np.ndarray, mask: np.ndarray | None = None):
        """Batched forward pass.

        windows: (B, T, n_in); mask: (B, T) with False for padded steps,
        which leave the hidden state untouched.
        Returns (probs, cache).
        """
        x = np.asarray(windows, dtype=float)
        if x.ndim == 2:
            x = x[None, :, :]
        B, T, _ = x.shape
        m = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=float)
        p = self.params
        h_t = np.zeros((B, self.hidden))
        steps = []
        for t in range(T):
            xt = x[:, t, :]
            z = _sigmoid(xt @ p["W_z"].T + h_t @ p["U_z"].T + p["b_z"])
            r = _sigmoid(xt @ p["W_r"].T + h_t @ p["U_r"].T + p["b_r"])
            rh = r * h_t
            h_tilde = np.tanh(xt @ p["W_h"].T + rh @ p["U_h"].T + p["b_h"])
            h_new = (1.0 - z) * h_t + z * h_tilde
            mt = m[:, t][:, None]
            h_next = mt * h_new + (1.0 - mt) * h_t
            steps.append((xt, h_t, z, r, rh, h_tilde, mt))
            h_t = h_next
        logit = h_t @ p["w_o"] + p["b_o"][0]
        prob = _sigmoid(logit)
        cache = (steps, h_t, prob)
        return prob, cache

    def backward(self, cache, dlogit: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(dlogit * logit) w.r.t. every parameter."""
        steps, h_last, _ = cache
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["w_o"] = dlogit @ h_last
        grads["b_o"] = np.array([dlogit.sum()])
        dh = np.outer(dlogit, p["w_o"])
        for xt, h_prev, z, r, rh, h_tilde, mt in reversed(steps):
            dh_gate = dh * mt
            dh_prev = dh * (1.0 - mt)
            dz = dh_gate * (h_tilde - h_prev)
            dh_tilde = dh_gate * z
            dh_prev += dh_gate * (1.0 - z)
            da_h = dh_tilde * (1.0 - h_tilde**2)
            grads["W_h"] += da_h.T @ xt
            grads["U_h"] += da_h.T @ rh
            grads["b_h"] += da_h.sum(axis=0)
            drh = da_h @ p["U_h"]
            dr = drh * h_prev
            dh_prev += drh * r
            da_r = dr * r * (1.0 - r)
            grads["W_r"] += da_r.T @ xt
            grads["U_r"] += da_r.T @ h_prev
            grads["b_r"] += da_r.sum(axis=0)
            dh_prev += da_r @ p["U_r"]
            da_z = dz * z * (1.0 - z)
            grads["W_z"] += da_z.T @ xt
            grads["U_z"] += da_z.T @ h_prev
            grads["b_z"] += da_z.sum(axis=0)
            dh_prev += da_z @ p["U_z"]
            dh = dh_prev
        return grads

    def score(self, windows: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        prob, _ = self.forward(windows, mask)
        return prob

    # -- training ----------------------------------------------------------

    def train_step(
        self,
        windows: np.ndarray,
        labels: np.ndarray,
        weights: np.ndarray,
        lr: float,
        mask: np.ndarray | None = None,
    ) -> float:
        """One SGD step on the weighted logistic loss; mean over the batch.

        A non-finite loss aborts the step (parameters unchanged).
        """
        y = np.asarray(labels, dtype=float)
        w = np.asarray(weights, dtype=float)
        prob, cache = self.forward(windows, mask)
        eps = 1e-12
        losses = -(y * np.log(prob + eps) + (1.0 - y) * np.log(1.0 - prob + eps))
        loss = float(np.mean(w * losses))
        if not math.isfinite(loss):
            return loss
        dlogit = w * (prob - y) / len(y)
        grads = self.backward(cache, dlogit)
        for key in PARAM_KEYS:
            self.params[key] -= lr * grads[key]
        return loss

    # -- parameter plumbing -------------------------------------------------

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_KEYS])

    def set_param_vector(self, vec: np.ndarray) -> None:
        pos = 0
        for k in PARAM_KEYS:
            size = self.params[k].size
            self.params[k] = vec[pos : pos + size].reshape(self.params[k].shape).copy()
            pos += size

    def grad_vector(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in PARAM_KEYS])

    def copy(self) -> "TemporalScorer":
        clone = TemporalScorer.__new__(TemporalScorer)
        clone.n_in = self.n_in
        clone.hidden = self.hidden
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone


def temporal_score(scorer: TemporalScorer, window: np.ndarray, mask=None) -> float:
    """Score one window; zero-weight scorers return exactly 0.5."""
    return float(scorer.score(window[None, :, :] if window.ndim == 2 else window, mask)[0])


def score_gradient(scorer: TemporalScorer, window: np.ndarray) -> np.ndarray:
    """d(score)/d(parameters) for one window, flattened."""
    prob, cache = scorer.forward(window[None, :, :])
    dlogit = prob * (1.0 - prob)  # chain through the output sigmoid
    return scorer.grad_vector(scorer.backward(cache, dlogit))


# ---------------------------------------------------------------------------
# Model container, mixing, thresholding


@dataclass
class DefenderModel:
    normalizer: Normalizer
    oc_mean: np.ndarray
    oc_precision: np.ndarray
    temporal: TemporalScorer
    lambda_mix: float = 1.0
    tau: float = math.inf
    window: int = 8
    version: int = MODEL_VERSION
    calibrations: int = 0
    cusum: "CusumState | None" = field(default=None)

    def __post_init__(self):
        if not (0.0 <= self.lambda_mix <= 1.0):
            raise ValueError("lambda_mix must lie in [0, 1]")


def mixed_score(model: DefenderModel, x: np.ndarray, window: np.ndarray) -> float:
    """Convex mix of the rescaled one-class score and the temporal score."""
    s_oc = oc_to_unit(oc_score(model.oc_mean, model.oc_precision, x))
    s_temp = temporal_score(model.temporal, window)
    return float(model.lambda_mix * s_oc + (1.0 - model.lambda_mix) * s_temp)


def windowed(features: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows (T, w, d) over a stream with zero-padded prefixes."""
    feats = np.asarray(features, dtype=float)
    T, d = feats.shape
    wins = np.zeros((T, w, d))
    mask = np.zeros((T, w))
    for t in range(T):
        lo = max(0, t - w + 1)
        chunk = feats[lo : t + 1]
        wins[t, w - len(chunk) :] = chunk
        mask[t, w - len(chunk) :] = 1.0
    return wins, mask


def score_stream(model: DefenderModel, features: np.ndarray) -> np.ndarray:
    """Mixed scores over a stream of (already normalized) feature rows."""
    feats = np.asarray(features, dtype=float)
    s_oc = oc_to_unit(oc_score_batch(model.oc_mean, model.oc_precision, feats))
    if model.lambda_mix >= 1.0:
        return s_oc
    wins, mask = windowed(feats, model.window)
    s_temp = model.temporal.score(wins, mask)
    return model.lambda_mix * s_oc + (1.0 - model.lambda_mix) * s_temp


def calibrate_threshold(honest_scores: np.ndarray, far_target: float) -> float:
    """Conservative empirical quantile: alarms on the calibration set never
    exceed far_target * n; ties resolve toward fewer alarms."""
    s = np.asarray(honest_scores, dtype=float)
    if s.size == 0:
        raise ValueError("cannot calibrate on an empty score set")
    if not (0 < far_target < 1):
        raise ValueError("far_target must lie in (0, 1)")
    budget = int(math.floor(far_target * s.size))
    s_sorted = np.sort(s)
    for v in np.unique(s_sorted):
        alarms = s.size - int(np.searchsorted(s_sorted, v, side="left"))
        if alarms <= budget:
            return float(v)
    return float(np.nextafter(s_sorted[-1], math.inf))


def decide(s: float, tau: float) -> bool:
    """Alarm policy 1{s >= tau}."""
    if not math.isfinite(s):
        raise ValueError(f"non-finite score {s!r}")
    return s >= tau


# ---------------------------------------------------------------------------
# Sequential detection (CUSUM)


@dataclass(frozen=True)
class CusumState:
    """Gaussian log-likelihood-ratio CUSUM over mixed scores."""

    mu0: float
    sigma0: float
    mu1: float
    sigma1: float
    S: float = 0.0
    h_cusum: float = 5.0

    def __post_init__(self):
        if self.sigma0 <= 0 or self.sigma1 <= 0:
            raise ValueError("score-model sigmas must be positive")
        if self.S < 0:
            raise ValueError("CUSUM statistic cannot be negative")


def cusum_llr(state: CusumState, s: float) -> float:
    """log p1(s) / p0(s) under the fitted Gaussian score models."""
    def logpdf(x, mu, sig):
        return -0.5 * ((x - mu) / sig) ** 2 - math.log(sig)
    return logpdf(s, state.mu1, state.sigma1) - logpdf(s, state.mu0, state.sigma0)


def cusum_update(S: float, L: float) -> float:
    return max(0.0, S + L)


def cusum_step(state: CusumState, s: float) -> tuple[CusumState, bool]:
    S = cusum_update(state.S, cusum_llr(state, s))
    return replace(state, S=S), S >= state.h_cusum


def _calibrate_h(state: CusumState, arl0_target: float, seed: int) -> float:
    """Smallest threshold whose Monte Carlo honest run length meets target."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    trials, max_len = 1024, int(10 * arl0_target)
    scores = rng.normal(state.mu0, state.sigma0, size=(trials, max_len))
    llr = (
        -0.5 * ((scores - state.mu1) / state.sigma1) ** 2
        - math.log(state.sigma1)
        + 0.5 * ((scores - state.mu0) / state.sigma0) ** 2
        + math.log(state.sigma0)
    )
    paths = np.empty_like(llr)
    s_run = np.zeros(trials)
    for t in range(max_len):
        s_run = np.maximum(0.0, s_run + llr[:, t])
        paths[:, t] = s_run

    def arl0(h: float) -> float:
        crossed = paths >= h
        any_cross = crossed.any(axis=1)
        first = np.where(any_cross, crossed.argmax(axis=1) + 1, max_len)
        return float(first.mean())

    lo, hi = 0.25, 64.0
    if arl0(hi) < arl0_target:
        return hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if arl0(mid) >= arl0_target:
            hi = mid
        else:
            lo = mid
    return hi


def cusum_fit(
    honest_scores: np.ndarray,
    attacked_scores: np.ndarray,
    arl0_target: float = 500.0,
    seed: int = 20_624,
) -> CusumState:
    """Fit Gaussian score models and calibrate the alarm threshold."""
    h0 = np.asarray(honest_scores, dtype=float)
    h1 = np.asarray(attacked_scores, dtype=float)
    if h0.size < 2 or h1.size < 2:
        raise ValueError("need at least two scores per class")
    s0, s1 = float(h0.std(ddof=1)), float(h1.std(ddof=1))
    if s0 < _SQRT_EPS or s1 < _SQRT_EPS:
        raise ValueError("zero-variance score sets cannot be fitted")
    state = CusumState(
        mu0=float(h0.mean()), sigma0=s0, mu1=float(h1.mean()), sigma1=s1
    )
    return replace(state, h_cusum=_calibrate_h(state, arl0_target, seed))


# ---------------------------------------------------------------------------
# Randomized smoothing


def smoothed_score(
    model: DefenderModel,
    x: np.ndarray,
    window: np.ndarray,
    sigma_smooth: float,
    n_mc: int,
    seed: int,
) -> tuple[float, bool, float]:
    """Monte Carlo smoothed score with a concentration-based certificate.

    Returns (mean score, certified, margin), where the decision is
    certified when |mean - tau| exceeds three standard errors of the
    smoothed estimate.
    """
    if n_mc < 100:
        raise ValueError("need at least 100 Monte Carlo samples")
    if sigma_smooth < 0:
        raise ValueError("sigma_smooth must be non-negative")
    if sigma_smooth == 0.0:
        s_bar = mixed_score(model, x, np.asarray(window, dtype=float))
        certified = abs(s_bar - model.tau) > 0.0
        return s_bar, certified, 0.0
    rng = np.random.Generator(np.random.Philox(key=seed))
    scores = np.empty(n_mc)
    for i in range(n_mc):
        xp = x + rng.normal(0.0, sigma_smooth, size=x.shape)
        win = np.array(window, dtype=float)
        win[-1] = xp
        scores[i] = mixed_score(model, xp, win)
    s_bar = float(scores.mean())
    spread = float(scores.std(ddof=1)) if n_mc > 1 else 0.0
    margin = 3.0 * spread / math.sqrt(n_mc)
    certified = abs(s_bar - model.tau) > margin
    return s_bar, certified, margin


# ---------------------------------------------------------------------------
# Persistence (versioned structured text)


def _write_matrix(fh, name: str, arr: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(arr, dtype=float))
    fh.write(f"matrix {name} {a.shape[0]} {a.shape[1]}\n")
    for row in a:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def save_model(model: DefenderModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{MODEL_FORMAT} v{model.version}\n")
        fh.write(f"scalar lambda_mix {model.lambda_mix!r}\n")
        fh.write(f"scalar tau {model.tau!r}\n")
        fh.write(f"scalar window {model.window}\n")
        fh.write(f"scalar calibrations {model.calibrations}\n")
        if model.cusum is not None:
            c = model.cusum
            fh.write(
                "scalar cusum "
                f"{c.mu0!r} {c.sigma0!r} {c.mu1!r} {c.sigma1!r} {c.S!r} {c.h_cusum!r}\n"
            )
        _write_matrix(fh, "norm_center", model.normalizer.center)
        _write_matrix(fh, "norm_scale", model.normalizer.scale)
        _write_matrix(fh, "oc_mean", model.oc_mean)
        _write_matrix(fh, "oc_precision", model.oc_precision)
        for key in PARAM_KEYS:
            _write_matrix(fh, f"gru_{key}", model.temporal.params[key])


def load_model(path) -> DefenderModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split()
    if header[0] != MODEL_FORMAT or header[1] != f"v{MODEL_VERSION}":
        raise ValueError(f"unsupported model format: {lines[0]!r}")
    scalars: dict[str, list[str]] = {}
    matrices: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] == "scalar":
            scalars[parts[1]] = parts[2:]
            i += 1
        elif parts[0] == "matrix":
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            data = [list(map(float, lines[i + 1 + r].split())) for r in range(rows)]
            matrices[name] = np.array(data).reshape(rows, cols)
            i += 1 + rows
        else:
            raise ValueError(f"unrecognized model line: {lines[i]!r}")
    normalizer = Normalizer(
        center=matrices["norm_center"][0], scale=matrices["norm_scale"][0]
    )
    gru = TemporalScorer.__new__(TemporalScorer)
    gru.params = {}
    for key in PARAM_KEYS:
        arr = matrices[f"gru_{key}"]
        gru.params[key] = arr[0] if key.startswith("b") or key == "w_o" else arr
    gru.hidden = gru.params["U_z"].shape[0]
    gru.n_in = gru.params["W_z"].shape[1]
    cusum = None
    if "cusum" in scalars:
        v = list(map(float, scalars["cusum"]))
        cusum = CusumState(
            mu0=v[0], sigma0=v[1], mu1=v[2], sigma1=v[3], S=v[4], h_cusum=v[5]
        )
    return DefenderModel(
        normalizer=normalizer,
        oc_mean=matrices["oc_mean"][0],
        oc_precision=matrices["oc_precision"],
        temporal=gru,
        lambda_mix=float(scalars["lambda_mix"][0]),
        tau=float(scalars["tau"][0]),
        window=int(scalars["window"][0]),
        calibrations=int(scalars["calibrations"][0]),
        cusum=cusum,
    )
