"""Alternating minimax training loop and the evaluation metric suite.

Each round draws fresh honest traffic, refits the one-class scorer and the
normalizer, trains the temporal scorer on honest data plus the accumulated
hard-negative pool with damage-weighted labels, calibrates the threshold
at the target false-alarm rate, then lets the projected evolution-strategy
adversary mine the currently hardest feasible attacks, which are appended
to the pool for the next round.

Loss pricing uses the asymptotic honest reference rate: per-block
finite-key rates are identically zero at desk-scale block sizes, which
would otherwise erase the damage term of the operational loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sp_stats

from .adversary import (
    FAMILIES,
    FamilyMixture,
    SearchState,
    budgeted_loss,
    dro_reweight,
    propose,
    search_init,
    update,
)
from .attacks import (
    FeasibleSet,
    Null,
    attack_to_dict,
    attack_vector,
    family_box,
    representative_attack,
)
from .defender import (
    CusumState,
    DefenderModel,
    TemporalScorer,
    calibrate_threshold,
    cusum_fit,
    cusum_step,
    oc_fit,
    score_stream,
)
from .finite_key import (
    EpsilonBudget,
    asymptotic_reference_rate,
    pooled_secret_fraction,
)
from .physics import ChannelParams, DecoyConfig
from .simulator import BlockRecord, simulate_stream
from .telemetry import FEATURE_DIM, extract_features, fit_normalizer

_MIX = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic integer mixing for sub-stream seeds."""
    key = seed & _MASK
    for t in tags:
        key = (key * _MIX + t + 1) & _MASK
    return key


@dataclass(frozen=True)
class TrainConfig:
    channel: ChannelParams = field(default_factory=ChannelParams)
    decoy: DecoyConfig = field(default_factory=DecoyConfig)
    budget: EpsilonBudget = field(default_factory=EpsilonBudget)
    feasible: FeasibleSet = field(default_factory=FeasibleSet)
    rounds: int = 6
    generations: int = 40
    population: int = 16
    far_target: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1000.0
    window: int = 8
    block_size: int = 50_000
    honest_blocks_per_round: int = 667
    hard_negative_cap: int = 2000
    hard_negatives_per_round: int = 160
    eval_blocks_per_candidate: int = 4
    miss_eval_blocks: int = 200
    families: tuple[str, ...] = FAMILIES
    dro: bool = True
    eta_dro: float = 1.0
    tv_budget: float = 0.5
    lambda_cost: float = 0.0
    temporal_epochs: int = 8
    temporal_lr: float = 0.05
    temporal_hidden: int = 32
    shrinkage: float = 0.1
    randomize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("need at least one round")
        if not (0 < self.far_target <= 0.05):
            raise ValueError("far_target must lie in (0, 0.05]")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown families: {sorted(unknown)}")


@dataclass
class RoundRecord:
    round: int
    lambda_mix: float
    tau: float
    best_family: str
    best_attack: dict
    best_loss: float
    miss_rate: float
    family_losses: dict[str, float]
    mixture: dict[str, float]
    pool_blocks: int


@dataclass
class RetentionReport:
    pooled_with: float
    pooled_without: float
    per_block_with: float
    per_block_without: float
    discard_rate: float


@dataclass
class MetricsReport:
    auc: dict[str, float]
    miss_at_far: dict[str, float]
    retention: RetentionReport | None
    latency_mean: float | None
    latency_censored: int
    importance: np.ndarray | None
    history: list[RoundRecord] = field(default_factory=list)


class TrainingAborted(RuntimeError):
    """Raised when a round fails; carries the completed-round history."""

    def __init__(self, message: str, history: list[RoundRecord]):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# Metrics


def auc(honest_scores, attacked_scores) -> float:
    """Mann-Whitney AUC: P(attacked > honest) with ties counted 1/2."""
    h = np.asarray(honest_scores, dtype=float)
    a = np.asarray(attacked_scores, dtype=float)
    if h.size == 0 or a.size == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = sp_stats.rankdata(np.concatenate([h, a]))
    u = ranks[h.size :].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (h.size * a.size))


def miss_at_far(honest_scores, attacked_scores, far_target: float) -> float:
    """Missed-attack fraction at a threshold calibrated on honest scores."""
    a = np.asarray(attacked_scores, dtype=float)
    if a.size == 0:
        raise ValueError("attacked score set must be non-empty")
    tau = calibrate_threshold(honest_scores, far_target)
    return float(np.mean(a < tau))


def permutation_importance(
    score_fn, features: np.ndarray, labels: np.ndarray, seed: int = 0
) -> np.ndarray:
    """Per-feature AUC drop when that column is shuffled across the set.

    ``score_fn`` maps a raw feature matrix (stream order preserved) to
    scores; shuffling uses one fixed seed per feature index.
    """
    feats = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    scores = score_fn(feats)
    base = auc(scores[y == 0], scores[y == 1])
    out = np.zeros(feats.shape[1])
    for j in range(feats.shape[1]):
        rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, j)))
        shuffled = feats.copy()
        shuffled[:, j] = rng.permutation(shuffled[:, j])
        s = score_fn(shuffled)
        out[j] = base - auc(s[y == 0], s[y == 1])
    return out


def detection_latency(
    score_streams, onsets, state: CusumState
) -> tuple[float | None, int]:
    """Mean blocks from onset to the first CUSUM alarm at or after onset.

    Alarms fired before the onset reset the statistic and the run
    continues; streams that never alarm after onset are censored.
    Returns (mean delay over alarmed streams or None, censored count).
    """
    delays = []
    censored = 0
    for scores, onset in zip(score_streams, onsets):
        st = replace(state, S=0.0)
        hit = None
        for t, s in enumerate(scores):
            st, alarm = cusum_step(st, float(s))
            if alarm:
                if t >= onset:
                    hit = t - onset
                    break
                st = replace(st, S=0.0)
        if hit is None:
            censored += 1
        else:
            delays.append(hit)
    mean = float(np.mean(delays)) if delays else None
    return mean, censored


def retained_fraction(
    blocks: list[BlockRecord],
    model: DefenderModel,
    budget: EpsilonBudget,
    decoy: DecoyConfig,
    r0_ref: float,
    tau: float | None = None,
) -> RetentionReport:
    """Secret-bit retention with and without alarm gating.

    Pooled mode (headline) runs the finite-key evaluation over the
    concatenated passed blocks versus all blocks, so alarmed blocks are
    excluded from the pooled decoy statistics and their leakage never
    enters the pooled privacy amplification.  Per-block mode prices each
    block against the reference honest rate as a diagnostic.
    """
    feats = np.array([extract_features(b) for b in blocks])
    scores = score_stream(model, model.normalizer.apply(feats))
    thr = model.tau if tau is None else tau
    alarms = scores >= thr
    honest = np.array([not b.truth.attacked for b in blocks])
    leaks = np.array([b.truth.leak for b in blocks])

    r_true = np.where(honest, r0_ref, np.maximum(0.0, r0_ref - leaks))
    denom = len(blocks) * r0_ref
    pb_without = float(r_true.sum() / denom) if denom > 0 else 0.0
    pb_with = float(r_true[~alarms].sum() / denom) if denom > 0 else 0.0

    honest_blocks = [b for b, h in zip(blocks, honest) if h]
    passed = [b for b, alarm in zip(blocks, alarms) if not alarm]
    r0_pool = pooled_secret_fraction(honest_blocks, decoy, budget, leaks=[0.0] * len(honest_blocks))
    if r0_pool <= 0.0:
        pooled_with = pooled_without = 0.0
    else:
        n_all = sum(b.N for b in blocks)
        r_all = pooled_secret_fraction(blocks, decoy, budget)
        pooled_without = r_all / r0_pool
        if passed:
            n_passed = sum(b.N for b in passed)
            r_passed = pooled_secret_fraction(passed, decoy, budget)
            pooled_with = r_passed * n_passed / (r0_pool * n_all)
        else:
            pooled_with = 0.0
    discard = float(alarms[honest].mean()) if honest.any() else 0.0
    return RetentionReport(
        pooled_with=pooled_with,
        pooled_without=pooled_without,
        per_block_with=pb_with,
        per_block_without=pb_without,
        discard_rate=discard,
    )


# ---------------------------------------------------------------------------
# Hard-negative pool and window construction


@dataclass
class HardRun:
    """One contiguous mined attack run (raw features, per-block leaks)."""

    features: np.ndarray
    leaks: np.ndarray
    family: str


class HardPool:
    def __init__(self, cap: int):
        self.cap = cap
        self.runs: list[HardRun] = []

    def add(self, run: HardRun) -> None:
        self.runs.append(run)
        while self.size > self.cap and len(self.runs) > 1:
            self.runs.pop(0)

    @property
    def size(self) -> int:
        return sum(len(r.features) for r in self.runs)

    def split(self, val_every: int = 4) -> tuple[list[HardRun], list[HardRun]]:
        train = [r for i, r in enumerate(self.runs) if i % val_every != 0]
        val = [r for i, r in enumerate(self.runs) if i % val_every == 0]
        if not train:
            train, val = val, []
        return train, val


def _attack_weight(leak: float, r0_ref: float, cfg: TrainConfig) -> float:
    return cfg.alpha + cfg.gamma * min(r0_ref, leak)


def _build_windows(
    honest_norm: np.ndarray,
    runs: list[HardRun],
    normalizer,
    cfg: TrainConfig,
    r0_ref: float,
    seed: int,
):
    """Training windows: honest sliding windows plus attacked suffixes.

    Attacked windows keep the mined run order, padded in front with honest
    context rows, so the temporal scorer sees both onset and persistence.
    """
    w = cfg.window
    rng = np.random.Generator(np.random.Philox(key=seed))
    wins, labels, weights = [], [], []
    for t in range(len(honest_norm)):
        lo = max(0, t - w + 1)
        chunk = honest_norm[lo : t + 1]
        pad = np.zeros((w - len(chunk), FEATURE_DIM))
        wins.append(np.vstack([pad, chunk]))
        labels.append(0.0)
        weights.append(cfg.beta)
    for run in runs:
        feats = normalizer.apply(run.features)
        for end in range(1, len(feats) + 1):
            suffix = feats[max(0, end - w) : end]
            n_ctx = w - len(suffix)
            ctx = honest_norm[rng.integers(0, len(honest_norm), size=n_ctx)]
            wins.append(np.vstack([ctx, suffix]) if n_ctx else suffix)
            labels.append(1.0)
            weights.append(_attack_weight(float(run.leaks[end - 1]), r0_ref, cfg))
    return np.array(wins), np.array(labels), np.array(weights)


def _train_temporal(
    temporal: TemporalScorer,
    wins: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    cfg: TrainConfig,
    seed: int,
) -> None:
    mean_w = float(weights.mean())
    w_norm = weights / mean_w if mean_w > 0 else weights
    rng = np.random.Generator(np.random.Philox(key=seed))
    n = len(wins)
    batch = 64
    for _ in range(cfg.temporal_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            temporal.train_step(
                wins[idx], labels[idx], w_norm[idx], cfg.temporal_lr
            )


def _pick_lambda(
    model: DefenderModel, val_honest: np.ndarray, val_attacked: np.ndarray
) -> float:
    """Validation-AUC grid search over the mixing weight."""
    if len(val_attacked) < 4:
        return 1.0
    best_lam, best_auc = 1.0, -1.0
    for lam in np.linspace(0.0, 1.0, 11):
        probe = replace_lambda(model, float(lam))
        s_h = score_stream(probe, val_honest)
        s_a = score_stream(probe, val_attacked)
        a = auc(s_h, s_a)
        if a >= best_auc:
            best_auc, best_lam = a, float(lam)
    return best_lam


def replace_lambda(model: DefenderModel, lam: float) -> DefenderModel:
    return DefenderModel(
        normalizer=model.normalizer,
        oc_mean=model.oc_mean,
        oc_precision=model.oc_precision,
        temporal=model.temporal,
        lambda_mix=lam,
        tau=model.tau,
        window=model.window,
        calibrations=model.calibrations,
        cusum=model.cusum,
    )


# ---------------------------------------------------------------------------
# Candidate evaluation and the main loop


def _norm_vec(attack, feas: FeasibleSet) -> np.ndarray:
    lo, hi = family_box(attack.family, feas)
    return (attack_vector(attack) - lo) / (hi - lo)


def _scores_for_run(
    model: DefenderModel, ctx: np.ndarray, feats_norm: np.ndarray
) -> np.ndarray:
    stream = np.vstack([ctx, feats_norm]) if len(ctx) else feats_norm
    return score_stream(model, stream)[len(ctx) :]


def _candidate_loss(
    attack,
    model: DefenderModel,
    ctx: np.ndarray,
    cfg: TrainConfig,
    r0_ref: float,
    seed: int,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean damage-weighted missed-detection loss over m fresh blocks."""
    blocks = simulate_stream(
        cfg.channel,
        cfg.decoy,
        [attack] * cfg.eval_blocks_per_candidate,
        cfg.block_size,
        base_seed=seed,
        randomize=cfg.randomize,
    )
    feats = np.array([extract_features(b) for b in blocks])
    scores = _scores_for_run(model, ctx, model.normalizer.apply(feats))
    losses = []
    for b, s in zip(blocks, scores):
        missed = s < model.tau
        damage = cfg.alpha + cfg.gamma * min(r0_ref, b.truth.leak)
        losses.append(damage if missed else 0.0)
    raw = float(np.mean(losses))
    leaks = np.array([b.truth.leak for b in blocks])
    return budgeted_loss(raw, attack, cfg.feasible, cfg.lambda_cost), feats, leaks


def _search_family(
    family: str,
    model: DefenderModel,
    ctx: np.ndarray,
    cfg: TrainConfig,
    r0_ref: float,
    seed: int,
    log: list | None = None,
) -> tuple[SearchState, float]:
    """Run the ES for one family; returns final state and last-gen mean loss."""
    state = search_init(
        family, cfg.feasible, cfg.population, seed, cfg.channel, cfg.decoy
    )
    mean_loss = 0.0
    for gen in range(cfg.generations):
        cands = propose(state)
        evaluated = []
        for i, cand in enumerate(cands):
            loss, _, _ = _candidate_loss(
                cand, model, ctx, cfg, r0_ref, derive_seed(seed, gen, i)
            )
            evaluated.append((cand, loss))
        state = update(state, evaluated)
        mean_loss = float(np.mean([l for _, l in evaluated]))
        if log is not None:
            log.append(
                {
                    "family": family,
                    "generation": gen,
                    "best_loss": state.best_loss,
                    "best_attack": attack_to_dict(state.best_attack),
                    "mean_loss": mean_loss,
                }
            )
    return state, mean_loss


def _probe_runs(cfg: TrainConfig, strengths: tuple, tag: int) -> list[HardRun]:
    """Fixed per-family probe attacks at the given magnitude fractions."""
    runs = []
    for fi, family in enumerate(cfg.families):
        for si, strength in enumerate(strengths):
            attack = representative_attack(
                family, cfg.feasible, cfg.channel, cfg.decoy, strength
            )
            blocks = simulate_stream(
                cfg.channel,
                cfg.decoy,
                [attack] * cfg.window,
                cfg.block_size,
                base_seed=derive_seed(cfg.seed, tag, fi, si),
                randomize=cfg.randomize,
            )
            runs.append(
                HardRun(
                    features=np.array([extract_features(b) for b in blocks]),
                    leaks=np.array([b.truth.leak for b in blocks]),
                    family=family,
                )
            )
    return runs


def _seed_pool(pool: HardPool, cfg: TrainConfig) -> None:
    """Seed the attacked pool with full-strength textbook attacks.

    The inner adversary concentrates on quiet, damaging parameterizations;
    these loud operating points keep the temporal scorer anchored on the
    families it would otherwise never train against, while leaving the
    quiet frontier for the minimax rounds to discover.
    """
    for run in _probe_runs(cfg, (1.0,), 0x5EED):
        pool.add(run)


def minimax_train(cfg: TrainConfig) -> tuple[DefenderModel, list[RoundRecord]]:
    """Alternating minimax training with hard-negative mining."""
    r0_ref = asymptotic_reference_rate(cfg.channel, cfg.decoy)
    pool = HardPool(cfg.hard_negative_cap)
    probe_val: list[HardRun] = []
    if cfg.families:
        # Validation-only probes: the mixing weight must not reward a
        # temporal scorer that misfires on families or magnitudes it was
        # never trained on.
        probe_val = _probe_runs(cfg, (0.5, 1.0), 0xFACE)
    mixture = FamilyMixture(
        weights={f: 1.0 / len(cfg.families) for f in cfg.families},
        temperature=cfg.eta_dro,
        budget=cfg.tv_budget,
    ) if cfg.families else None
    temporal = TemporalScorer(
        FEATURE_DIM, cfg.temporal_hidden, seed=derive_seed(cfg.seed, 0xBEEF)
    )
    history: list[RoundRecord] = []
    model: DefenderModel | None = None
    cal_scores = pool_scores = None

    for rd in range(cfg.rounds):
        if rd == 1 and cfg.families:
            # The first round trains a naive, honest-only defender; the
            # textbook seeds enter with the first batch of mined data.
            _seed_pool(pool, cfg)
        try:
            model, mixture, cal_scores, pool_scores = _run_round(
                rd, cfg, r0_ref, pool, mixture, temporal, history, probe_val
            )
        except Exception as exc:  # pragma: no cover - defensive path
            raise TrainingAborted(f"round {rd} failed: {exc}", history) from exc

    assert model is not None
    # Sequential-detection layer from the final round's score populations.
    if (
        pool_scores is not None
        and len(pool_scores) >= 2
        and float(np.std(pool_scores)) > 1e-9
        and float(np.std(cal_scores)) > 1e-9
    ):
        model.cusum = cusum_fit(
            cal_scores, pool_scores, seed=derive_seed(cfg.seed, 0xC05)
        )
    return model, history


def _run_round(rd, cfg, r0_ref, pool, mixture, temporal, history, probe_val=()):
    # Step 1: honest data, split 60/20/20 into train/val/cal.
    honest = simulate_stream(
        cfg.channel,
        cfg.decoy,
        [Null()] * cfg.honest_blocks_per_round,
        cfg.block_size,
        base_seed=derive_seed(cfg.seed, rd, 0),
        randomize=cfg.randomize,
    )
    feats_raw = np.array([extract_features(b) for b in honest])
    n = len(feats_raw)
    n_tr, n_val = int(0.6 * n), int(0.2 * n)
    normalizer = fit_normalizer(feats_raw[:n_tr], min_samples=min(100, n_tr))
    x_tr = normalizer.apply(feats_raw[:n_tr])
    x_val = normalizer.apply(feats_raw[n_tr : n_tr + n_val])
    x_cal = normalizer.apply(feats_raw[n_tr + n_val :])
    oc_mean, oc_prec = oc_fit(x_tr, cfg.shrinkage)

    # Step 2: temporal training on honest plus the hard-negative pool.
    train_runs, val_runs = pool.split()
    if train_runs:
        wins, labels, weights = _build_windows(
            x_tr, train_runs, normalizer, cfg, r0_ref, derive_seed(cfg.seed, rd, 1)
        )
        _train_temporal(
            temporal, wins, labels, weights, cfg, derive_seed(cfg.seed, rd, 2)
        )

    model = DefenderModel(
        normalizer=normalizer,
        oc_mean=oc_mean,
        oc_precision=oc_prec,
        temporal=temporal,
        lambda_mix=1.0,
        tau=math.inf,
        window=cfg.window,
    )

    # Step 3: mixing weight by validation AUC, threshold at the FAR target.
    val_sources = list(val_runs) + list(probe_val)
    val_attacked = (
        np.vstack([normalizer.apply(r.features) for r in val_sources])
        if val_sources
        else np.zeros((0, FEATURE_DIM))
    )
    model.lambda_mix = _pick_lambda(model, x_val, val_attacked)
    cal_scores = score_stream(model, x_cal)
    model.tau = calibrate_threshold(cal_scores, cfg.far_target)

    # Step 4: inner maximization per family.
    ctx = x_tr[-(cfg.window - 1) :]
    family_states: dict[str, SearchState] = {}
    family_mean_loss: dict[str, float] = {}
    for fi, family in enumerate(cfg.families):
        state, mean_loss = _search_family(
            family, model, ctx, cfg, r0_ref, derive_seed(cfg.seed, rd, 3, fi)
        )
        family_states[family] = state
        family_mean_loss[family] = mean_loss
    if cfg.dro and mixture is not None and family_mean_loss:
        mixture = dro_reweight(mixture, family_mean_loss, cfg.eta_dro)

    # Step 5: mine hard negatives and record the round.
    best_family, best_loss, a_star = "null", -math.inf, Null()
    for family, state in family_states.items():
        if state.best_loss > best_loss and state.best_attack is not None:
            best_family, best_loss, a_star = family, state.best_loss, state.best_attack

    pool_scores = None
    if family_states:
        run_len = cfg.window
        n_runs = max(1, cfg.hard_negatives_per_round // run_len)
        alloc = _allocate_runs(n_runs, cfg, mixture, family_states)
        # Mine from the search distribution, not just its argmax: the best
        # candidate plus fresh proposals from the final-generation state,
        # so consecutive rounds cover a band of the quiet frontier instead
        # of one point.
        mine_from: dict[str, list] = {}
        for family, state in family_states.items():
            cands = [state.best_attack] + propose(state)
            seen, distinct = set(), []
            for c in cands:
                key = tuple(np.round(_norm_vec(c, cfg.feasible), 6))
                if key not in seen:
                    seen.add(key)
                    distinct.append(c)
            mine_from[family] = distinct[:4]
        counters: dict[str, int] = {f: 0 for f in family_states}
        for ri, family in enumerate(alloc):
            options = mine_from[family]
            attack = options[counters[family] % len(options)]
            counters[family] += 1
            blocks = simulate_stream(
                cfg.channel,
                cfg.decoy,
                [attack] * run_len,
                cfg.block_size,
                base_seed=derive_seed(cfg.seed, rd, 4, ri),
                randomize=cfg.randomize,
            )
            pool.add(
                HardRun(
                    features=np.array([extract_features(b) for b in blocks]),
                    leaks=np.array([b.truth.leak for b in blocks]),
                    family=family,
                )
            )
        pool_feats = np.vstack([normalizer.apply(r.features) for r in pool.runs])
        pool_scores = score_stream(model, pool_feats)

    miss = _miss_on_attack(model, a_star, ctx, cfg, derive_seed(cfg.seed, rd, 5))
    history.append(
        RoundRecord(
            round=rd,
            lambda_mix=model.lambda_mix,
            tau=model.tau,
            best_family=best_family,
            best_attack=attack_to_dict(a_star),
            best_loss=best_loss,
            miss_rate=miss,
            family_losses=dict(family_mean_loss),
            mixture=dict(mixture.weights) if mixture is not None else {},
            pool_blocks=pool.size,
        )
    )
    return model, mixture, cal_scores, pool_scores


def _allocate_runs(n_runs, cfg, mixture, family_states) -> list[str]:
    """Hard-negative run allocation: DRO-weighted or all on the best attack."""
    families = [f for f in cfg.families if family_states[f].best_attack is not None]
    if not families:
        return []
    if not cfg.dro or mixture is None:
        best = max(families, key=lambda f: family_states[f].best_loss)
        return [best] * n_runs
    weights = np.array([mixture.weights[f] for f in families])
    weights = weights / weights.sum()
    counts = np.floor(weights * n_runs).astype(int)
    while counts.sum() < n_runs:
        counts[int(np.argmax(weights * n_runs - counts))] += 1
    out: list[str] = []
    for f, c in zip(families, counts):
        out.extend([f] * int(c))
    return out


def _miss_on_attack(model, attack, ctx, cfg, seed) -> float:
    """Missed-detection rate on fresh blocks under one attack."""
    blocks = simulate_stream(
        cfg.channel,
        cfg.decoy,
        [attack] * cfg.miss_eval_blocks,
        cfg.block_size,
        base_seed=seed,
        randomize=cfg.randomize,
    )
    feats = np.array([extract_features(b) for b in blocks])
    scores = _scores_for_run(model, ctx, model.normalizer.apply(feats))
    return float(np.mean(scores < model.tau))


# ---------------------------------------------------------------------------
# Post-training evaluation


def build_eval_stream(
    cfg: TrainConfig,
    seed: int,
    n_blocks: int = 1000,
    rho_atk: float = 0.3,
    strength: float = 1.0,
) -> list[BlockRecord]:
    """Mixed labeled stream: honest plus feasibility-strength attacks.

    Attacked blocks draw their family uniformly; magnitudes sit at the
    given fraction of each family's feasible maximum (worst-case oriented).
    Evaluation streams are not domain-randomized so pooled finite-key
    accounting stays well defined.
    """
    rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, 0xE7A1)))
    schedule = []
    for _ in range(n_blocks):
        if rng.random() < rho_atk:
            family = cfg.families[int(rng.integers(0, len(cfg.families)))]
            sign = 1.0 if rng.random() < 0.5 else -1.0
            schedule.append(
                representative_attack(
                    family, cfg.feasible, cfg.channel, cfg.decoy, strength, sign
                )
            )
        else:
            schedule.append(Null())
    return simulate_stream(
        cfg.channel, cfg.decoy, schedule, cfg.block_size, base_seed=seed
    )


def evaluate_model(
    model: DefenderModel,
    cfg: TrainConfig,
    seed: int,
    n_honest: int = 400,
    n_attacked: int = 400,
    strength: float = 0.5,
    history: list[RoundRecord] | None = None,
    with_retention: bool = True,
    with_latency: bool = True,
    with_importance: bool = True,
) -> MetricsReport:
    """Fixed-operating-point metrics for a trained model."""
    honest = simulate_stream(
        cfg.channel,
        cfg.decoy,
        [Null()] * n_honest,
        cfg.block_size,
        base_seed=derive_seed(seed, 1),
    )
    honest_feats = np.array([extract_features(b) for b in honest])
    s_honest = score_stream(model, model.normalizer.apply(honest_feats))

    aucs, misses = {}, {}
    all_feats = [honest_feats]
    all_labels = [np.zeros(n_honest, dtype=int)]
    for fi, family in enumerate(cfg.families):
        attack = representative_attack(
            family, cfg.feasible, cfg.channel, cfg.decoy, strength
        )
        blocks = simulate_stream(
            cfg.channel,
            cfg.decoy,
            [attack] * n_attacked,
            cfg.block_size,
            base_seed=derive_seed(seed, 2, fi),
        )
        feats = np.array([extract_features(b) for b in blocks])
        s_atk = score_stream(model, model.normalizer.apply(feats))
        aucs[family] = auc(s_honest, s_atk)
        misses[family] = miss_at_far(s_honest, s_atk, cfg.far_target)
        all_feats.append(feats)
        all_labels.append(np.ones(n_attacked, dtype=int))

    retention = None
    if with_retention:
        stream = build_eval_stream(cfg, derive_seed(seed, 3))
        tau = calibrate_threshold(s_honest, cfg.far_target)
        r0_ref = asymptotic_reference_rate(cfg.channel, cfg.decoy)
        retention = retained_fraction(
            stream, model, cfg.budget, cfg.decoy, r0_ref, tau=tau
        )

    latency_mean, censored = None, 0
    if with_latency and model.cusum is not None:
        streams, onsets = [], []
        for trial in range(20):
            family = cfg.families[trial % len(cfg.families)]
            attack = representative_attack(
                family, cfg.feasible, cfg.channel, cfg.decoy, strength
            )
            onset = 20
            schedule = [Null()] * onset + [attack] * 40
            blocks = simulate_stream(
                cfg.channel,
                cfg.decoy,
                schedule,
                cfg.block_size,
                base_seed=derive_seed(seed, 4, trial),
            )
            feats = np.array([extract_features(b) for b in blocks])
            streams.append(score_stream(model, model.normalizer.apply(feats)))
            onsets.append(onset)
        latency_mean, censored = detection_latency(streams, onsets, model.cusum)

    importance = None
    if with_importance:
        feats = np.vstack(all_feats)
        labels = np.concatenate(all_labels)
        importance = permutation_importance(
            lambda f: score_stream(model, model.normalizer.apply(f)),
            feats,
            labels,
            seed=derive_seed(seed, 5),
        )

    return MetricsReport(
        auc=aucs,
        miss_at_far=misses,
        retention=retention,
        latency_mean=latency_mean,
        latency_censored=censored,
        importance=importance,
        history=list(history) if history else [],
    )
