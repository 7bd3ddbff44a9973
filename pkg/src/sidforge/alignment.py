"""Business-value alignment: advantage-reweighted NTP and preference pairs.

RFT rescales each sample's next-token loss by (1 + lambda * clipped,
batch-normalized advantage) of a composite reward.  DPO contrasts
winner/loser paths drawn from the same request against a frozen reference
model, optionally stopping gradients on every decoding step except the
final SID layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import CLICK, EXPOSURE, PURCHASE
from .scorer import Sample, _accumulate_backward, _forward_sample, zero_grads


class AlignmentError(ValueError):
    pass


@dataclass
class RewardSpec:
    metric_weights: dict  # metric name -> weight
    lam: float = 0.2  # reweighting strength (must keep 1 + lam*clip > 0)
    c_clip: float = 3.0
    eps: float = 1e-8
    alpha_cap: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.c_clip <= 0:
            raise ValueError("c_clip must be > 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


def composite_reward(metrics: dict, spec: RewardSpec) -> float:
    """Weighted sum of the (already normalized) named metrics."""
    total = 0.0
    for name, weight in spec.metric_weights.items():
        if name not in metrics:
            raise AlignmentError(f"missing metric {name!r} in {sorted(metrics)}")
        total += weight * metrics[name]
    return total


def minmax_normalize_metrics(metric_dicts) -> list:
    """Batch min-max normalization per metric, constants mapping to 0."""
    names = sorted({k for m in metric_dicts for k in m})
    lo = {n: min(m[n] for m in metric_dicts if n in m) for n in names}
    hi = {n: max(m[n] for m in metric_dicts if n in m) for n in names}
    out = []
    for m in metric_dicts:
        norm = {}
        for n, v in m.items():
            span = hi[n] - lo[n]
            norm[n] = (v - lo[n]) / span if span > 0 else 0.0
        out.append(norm)
    return out


@dataclass
class AdvantageBatch:
    rewards: np.ndarray
    centered: np.ndarray  # A_i = R_i - mean(R)
    normalized: np.ndarray  # A_i / (sigma_A + eps)
    clipped: np.ndarray  # clip(normalized, -c_clip, c_clip)
    sigma: float


def normalize_advantages(rewards, c_clip: float, eps: float) -> AdvantageBatch:
    """Center, scale by the batch root-mean-square, and clip."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 1:
        raise ValueError("batch must contain at least one reward")
    centered = r - r.mean()
    sigma = float(np.sqrt((centered**2).mean()))
    normalized = centered / (sigma + eps)
    clipped = np.clip(normalized, -c_clip, c_clip)
    return AdvantageBatch(r, centered, normalized, clipped, sigma)


def engagement_alpha(level: int, gmv: float, mean_gmv: float, cap: float = 10.0) -> float:
    """Sample weight: 1 for clicks, GMV-damped boost for purchases."""
    if level == PURCHASE and mean_gmv > 0:
        return min(cap, 1.0 + math.log1p(gmv / mean_gmv))
    return 1.0


def rft_loss_and_grad(batch, advantages: AdvantageBatch, lam: float, params):
    """NTP with each sample scaled by (1 + lam * clipped advantage) * alpha."""
    if len(batch) != advantages.clipped.shape[0]:
        raise AlignmentError("advantages not aligned with batch")
    weights = 1.0 + lam * advantages.clipped
    bad = np.flatnonzero(weights <= 0)
    if bad.size:
        raise AlignmentError(
            f"non-positive effective weight {weights[bad[0]]:.4f} at sample {int(bad[0])}; "
            f"require lam * c_clip < 1"
        )
    grads = zero_grads(params)
    loss = 0.0
    n_steps = params.space.n_steps
    for sample, w in zip(batch, weights):
        cache = _forward_sample(params, sample)
        coeff = -w * sample.alpha
        loss += coeff * float(cache.target_logps.sum())
        _accumulate_backward(params, cache, np.full(n_steps, coeff), grads)
    return loss, grads


# ----------------------------------------------------------------------
# preference pairs and DPO
# ----------------------------------------------------------------------

def preference_level(event) -> int:
    """Behavioral level of an interaction event: purchase 2, click 1, exposure 0."""
    level = event["level"] if isinstance(event, dict) else event.level
    if level not in (EXPOSURE, CLICK, PURCHASE):
        raise AlignmentError(f"invalid preference level {level!r}")
    return level


@dataclass(frozen=True)
class PreferencePair:
    request_id: str
    behavior: tuple
    bos: int
    winner: tuple  # token path of the preferred item
    loser: tuple
    winner_item: int
    loser_item: int
    winner_level: int
    loser_level: int
    winner_rank: int
    loser_rank: int


def enumerate_request_pairs(events) -> list:
    """All ordered (winner, loser) event index pairs within one request.

    Winner has the strictly higher level, or the smaller exposure rank at
    equal levels.
    """
    pairs = []
    n = len(events)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            li, lj = preference_level(events[i]), preference_level(events[j])
            if li > lj or (li == lj and events[i]["exposure_rank"] < events[j]["exposure_rank"]):
                pairs.append((i, j))
    return pairs


def build_dpo_pairs(log, sequences_by_item: dict, contexts_by_request: dict,
                    per_request_cap: int, seed) -> list:
    """Request-grouped preference pairs, capped per request by seeded sampling.

    ``sequences_by_item`` maps item_id to its decoded token path (no BOS);
    ``contexts_by_request`` maps request_id to (behavior tokens, bos token).
    Requests without a usable pair contribute nothing.
    """
    rng = np.random.default_rng(seed)
    out = []
    for req in log:
        ctx = contexts_by_request.get(req.request_id)
        if ctx is None:
            continue
        behavior, bos = ctx
        events = [e for e in req.events if e["item_id"] in sequences_by_item]
        candidates = enumerate_request_pairs(events)
        if not candidates:
            continue
        if len(candidates) > per_request_cap:
            idx = rng.choice(len(candidates), size=per_request_cap, replace=False)
            candidates = [candidates[int(i)] for i in np.sort(idx)]
        for i, j in candidates:
            ei, ej = events[i], events[j]
            out.append(
                PreferencePair(
                    request_id=req.request_id,
                    behavior=tuple(behavior),
                    bos=bos,
                    winner=tuple(sequences_by_item[ei["item_id"]]),
                    loser=tuple(sequences_by_item[ej["item_id"]]),
                    winner_item=ei["item_id"],
                    loser_item=ej["item_id"],
                    winner_level=preference_level(ei),
                    loser_level=preference_level(ej),
                    winner_rank=ei["exposure_rank"],
                    loser_rank=ej["exposure_rank"],
                )
            )
    return out


def _sigmoid(x: float) -> float:
    # sigma(x) = exp(-softplus(-x)), stable for both signs
    return float(np.exp(-np.logaddexp(0.0, -x)))


def _pair_samples(pair: PreferencePair):
    w = Sample(behavior=pair.behavior, bos=pair.bos, tokens=pair.winner)
    l = Sample(behavior=pair.behavior, bos=pair.bos, tokens=pair.loser)
    return w, l


def dpo_loss_and_grad(pairs, params, reference, beta: float, stop_grad: bool = True):
    """-mean log sigmoid(beta * (winner log-ratio - loser log-ratio)).

    Sequence log-probs are teacher-forced step sums against the frozen
    reference snapshot.  With ``stop_grad`` on, every decoding step except
    the last contributes its value but no gradient.
    """
    if beta <= 0:
        raise AlignmentError("beta must be > 0")
    if not pairs:
        raise AlignmentError("no preference pairs")
    n_steps = params.space.n_steps
    coeff_mask = np.zeros(n_steps)
    if stop_grad:
        coeff_mask[-1] = 1.0
    else:
        coeff_mask[:] = 1.0

    grads = zero_grads(params)
    loss = 0.0
    for k, pair in enumerate(pairs):
        w_sample, l_sample = _pair_samples(pair)
        cache_w = _forward_sample(params, w_sample)
        cache_l = _forward_sample(params, l_sample)
        lp_w = float(cache_w.target_logps.sum())
        lp_l = float(cache_l.target_logps.sum())
        ref_w = float(_forward_sample(reference, w_sample).target_logps.sum())
        ref_l = float(_forward_sample(reference, l_sample).target_logps.sum())
        if not all(map(math.isfinite, (lp_w, lp_l, ref_w, ref_l))):
            raise AlignmentError(
                f"non-finite log-prob for pair {k} "
                f"(items {pair.winner_item} vs {pair.loser_item})"
            )
        margin = (lp_w - ref_w) - (lp_l - ref_l)
        loss += float(np.logaddexp(0.0, -beta * margin))  # -log sigmoid(beta*margin)
        d_margin = -beta * _sigmoid(-beta * margin)
        _accumulate_backward(params, cache_w, d_margin * coeff_mask, grads)
        _accumulate_backward(params, cache_l, -d_margin * coeff_mask, grads)

    n = len(pairs)
    loss /= n
    for name in grads:
        grads[name] /= n
    return loss, grads


def joint_loss(batch, pairs, params, reference, advantages, lam: float = 0.2,
               beta: float = 0.1, stop_grad: bool = True,
               lambda_rft: float = 1.0, lambda_dpo: float = 0.15):
    """lambda_rft * L_RFT + lambda_dpo * L_DPO with summed gradients.

    An empty pair set (or lambda_dpo == 0) contributes a zero DPO term by
    convention, leaving the RFT term untouched bit for bit when
    lambda_rft == 1.
    """
    loss_rft, grads = rft_loss_and_grad(batch, advantages, lam, params)
    if lambda_rft != 1.0:
        loss_rft = lambda_rft * loss_rft
        for name in grads:
            grads[name] *= lambda_rft
    if lambda_dpo == 0.0 or not pairs:
        return loss_rft, grads
    loss_dpo, grads_dpo = dpo_loss_and_grad(pairs, params, reference, beta, stop_grad)
    total = loss_rft + lambda_dpo * loss_dpo
    for name in grads:
        grads[name] += lambda_dpo * grads_dpo[name]
    return total, grads
