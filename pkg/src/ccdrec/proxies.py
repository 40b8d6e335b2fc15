"""Stability/plasticity proxies, rank disparities, and guided sampling.

The proxies are exponential moving averages of the per-block distilled
student parameters: the stability proxy moves slowly and retains long-term
knowledge, the plasticity proxy moves fast and tracks recent trends. Items
a reference model ranks far below a proxy (large positive rank disparity)
are the replay candidates most likely to carry forgotten preferences.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .models import (EmbeddingModel, ParameterSnapshot, RankingList, blend_snapshots,
                     rank_of, restore, top_n)

SOURCE_STUDENT = "student"
SOURCE_STABILITY = "stability"
SOURCE_PLASTICITY = "plasticity"


class ProxyError(ValueError):
    pass


@dataclass
class DisparitySample:
    user: int
    item: int
    target_score: float
    weight: float
    source: str


class ProxyPair:
    def __init__(self, stability: EmbeddingModel, plasticity: EmbeddingModel,
                 w_stability: float, w_plasticity: float, last_update_block: int):
        if not (0.0 <= w_stability < w_plasticity <= 1.0):
            raise ProxyError("need 0 <= w_stability < w_plasticity <= 1")
        if (stability.variant, stability.dim) != (plasticity.variant, plasticity.dim):
            raise ProxyError("proxies must share variant and dimension")
        self.stability = stability
        self.plasticity = plasticity
        self.w_stability = w_stability
        self.w_plasticity = w_plasticity
        self.last_update_block = last_update_block

    @classmethod
    def from_first_distilled(cls, distilled: ParameterSnapshot, w_stability: float,
                             w_plasticity: float, block: int) -> "ProxyPair":
        """Both proxies start as exact copies of the first distilled student."""
        return cls(restore(distilled), restore(distilled), w_stability, w_plasticity, block)


def update_proxies(pair: ProxyPair, distilled: ParameterSnapshot, block: int):
    """Elementwise EMA toward the block's distilled student parameters.

    Rows that are new in the distilled snapshot are copied verbatim (there is
    no history to average). At most one update per block is accepted; a
    repeat leaves the pair untouched.
    """
    if block <= pair.last_update_block:
        raise ProxyError(f"proxies already updated for block {pair.last_update_block}")
    for model, w in ((pair.stability, pair.w_stability), (pair.plasticity, pair.w_plasticity)):
        blended = blend_snapshots(model.snapshot(), distilled, w)
        model.user_table = blended.user_table
        model.item_table = blended.item_table
        model.bump_version()
    pair.last_update_block = block


# ---------------------------------------------------------------------------
# rank disparity


def rank_disparity(list_a: RankingList, list_b: RankingList, item: int, epsilon: float) -> float:
    """exp(epsilon * (rank under A - rank under B)); rank 0 is the top.

    The item must appear in B's list; if it is missing from A's list it is
    assigned rank len(A), one past the last slot.
    """
    rb = rank_of(list_b, item)
    if rb is None:
        raise ProxyError(f"item {item} outside the reference top-N list")
    ra = rank_of(list_a, item)
    if ra is None:
        ra = len(list_a)
    return math.exp(epsilon * (ra - rb))


def _limited_top(scorer, user: int, n: int, exclude, item_limit: int, source: str) -> RankingList:
    blocked = set(int(e) for e in exclude)
    blocked.update(range(item_limit, scorer.num_items))
    return top_n(scorer, user, n, exclude=blocked, source=source)


def _weighted_draws(rng: np.random.Generator, weights, n: int) -> list[int]:
    """Sequential weighted draws without replacement; returns positions.

    Inverse-CDF sampling: one uniform variate per draw, so the generator
    consumption is fixed and reproducible.
    """
    w = [float(x) for x in weights]
    out: list[int] = []
    for _ in range(min(n, len(w))):
        total = 0.0
        cdf = []
        for x in w:
            total += x
            cdf.append(total)
        r = rng.random() * total
        pick = min(bisect.bisect_right(cdf, r), len(w) - 1)
        while w[pick] == 0.0 and pick > 0:  # guard against float roundoff at the edge
            pick -= 1
        out.append(pick)
        w[pick] = 0.0
    return out


def sample_replay_set(current: EmbeddingModel, proxy: EmbeddingModel, user: int,
                      n_samples: int, top_n_size: int, epsilon: float, seed,
                      exclude=(), source: str = SOURCE_STABILITY) -> list[DisparitySample]:
    """Disparity-weighted sample from the proxy's top-N list for one user.

    Sampling probability is proportional to exp(epsilon * rank gap) between
    the current model and the proxy over a shared candidate set; targets are
    the proxy's raw scores. Users unknown to the proxy yield no samples.
    """
    if n_samples <= 0 or user >= proxy.num_users or user >= current.num_users:
        return []
    rng = np.random.default_rng(seed)
    limit = min(current.num_items, proxy.num_items)
    proxy_list = _limited_top(proxy, user, top_n_size, exclude, limit, source)
    if len(proxy_list) == 0:
        return []
    current_list = _limited_top(current, user, top_n_size, exclude, limit, "current")
    weights = np.array([rank_disparity(current_list, proxy_list, int(it), epsilon)
                        for it in proxy_list.items])
    picks = _weighted_draws(rng, weights, n_samples)
    return [DisparitySample(user=user, item=int(proxy_list.items[p]),
                            target_score=proxy.score(user, int(proxy_list.items[p])),
                            weight=float(weights[p]), source=source)
            for p in picks]


def sample_transfer_sets(teacher, student_side: dict[str, EmbeddingModel], user: int,
                         n_samples: int, top_n_size: int, epsilon: float, seed,
                         exclude=()) -> list[DisparitySample]:
    """Items each student-side model ranks far above the fused teacher.

    One disparity-weighted sample set per source model, concatenated; target
    scores come from the respective source model, teacher ranks from the
    standardized ensemble score over the shared candidate set.
    """
    rng = np.random.default_rng(seed)
    out: list[DisparitySample] = []
    if n_samples <= 0:
        return out
    for source in (SOURCE_STUDENT, SOURCE_STABILITY, SOURCE_PLASTICITY):
        model = student_side.get(source)
        if model is None or user >= model.num_users or user >= teacher.num_users:
            continue
        limit = min(teacher.num_items, model.num_items)
        model_list = _limited_top(model, user, top_n_size, exclude, limit, source)
        if len(model_list) == 0:
            continue
        teacher_list = _limited_top(teacher, user, top_n_size, exclude, limit, "teacher")
        weights = np.array([rank_disparity(teacher_list, model_list, int(it), epsilon)
                            for it in model_list.items])
        picks = _weighted_draws(rng, weights, n_samples)
        out.extend(DisparitySample(user=user, item=int(model_list.items[p]),
                                   target_score=model.score(user, int(model_list.items[p])),
                                   weight=float(weights[p]), source=source)
                   for p in picks)
    return out


# ---------------------------------------------------------------------------
# batched samplers
#
# Same semantics and generator consumption as looping the per-user ops above,
# but the score matrices and their argsorts are computed once per call, which
# is what makes per-epoch resampling affordable.


def _blocked_mask(exclude, limit: int) -> np.ndarray:
    mask = np.zeros(limit, dtype=bool)
    if exclude:
        idx = [e for e in exclude if e < limit]
        if idx:
            mask[np.array(idx)] = True
    return mask


def _filtered_prefix(order_row: np.ndarray, blocked: np.ndarray | None, n_blocked: int,
                     n: int) -> list[int]:
    """First ``n`` non-blocked entries; only the first n + n_blocked entries
    can be needed, so only that prefix is scanned."""
    if blocked is None:
        return order_row[:n].tolist()
    prefix = order_row[: n + n_blocked]
    return prefix[~blocked[prefix]][:n].tolist()


def _pair_samples(order_a: np.ndarray, order_b: np.ndarray, mat_b: np.ndarray, user: int,
                  blocked: np.ndarray | None, n_blocked: int, n_samples: int,
                  top_n_size: int, epsilon: float, rng, source: str) -> list[DisparitySample]:
    top_b = _filtered_prefix(order_b[user], blocked, n_blocked, top_n_size)
    if not top_b:
        return []
    top_a = _filtered_prefix(order_a[user], blocked, n_blocked, top_n_size)
    cap = len(top_a)
    pos_a = {it: p for p, it in enumerate(top_a)}
    weights = [math.exp(epsilon * (pos_a.get(it, cap) - rank_b))
               for rank_b, it in enumerate(top_b)]
    picks = _weighted_draws(rng, weights, n_samples)
    return [DisparitySample(user=user, item=top_b[p],
                            target_score=float(mat_b[user, top_b[p]]),
                            weight=weights[p], source=source)
            for p in picks]


def _cached_order(matrix: np.ndarray, limit: int, cache: dict | None, tag: str) -> np.ndarray:
    key = (tag, limit)
    if cache is not None and key in cache:
        return cache[key]
    order = np.argsort(-matrix[:, :limit], axis=1, kind="stable")
    if cache is not None:
        cache[key] = order
    return order


def _mask_and_count(exclude, limit: int) -> tuple[np.ndarray | None, int]:
    if not exclude:
        return None, 0
    mask = _blocked_mask(exclude, limit)
    return mask, int(mask.sum())


def sample_replay_sets_batch(current, proxy, users, n_samples: int, top_n_size: int,
                             epsilon: float, rng, exclusions: dict, source: str,
                             order_cache: dict | None = None, current_tag: str = "current",
                             proxy_tag: str | None = None) -> dict[int, list[DisparitySample]]:
    """Replay samples for many users against one proxy, keyed by user.

    ``order_cache`` lets callers reuse argsorts across calls for models that
    have not changed (tagged entries; a tag must be refreshed when its model
    trains).
    """
    out: dict[int, list[DisparitySample]] = {}
    if n_samples <= 0:
        return out
    cm = current.score_matrix()
    pm = proxy.score_matrix()
    limit = min(cm.shape[1], pm.shape[1])
    rows = min(cm.shape[0], pm.shape[0])
    order_c = _cached_order(cm, limit, order_cache, current_tag)
    order_p = _cached_order(pm, limit, order_cache, proxy_tag or source)
    for u in users:
        if u >= rows:
            continue
        blocked, n_blocked = _mask_and_count(exclusions.get(u, ()), limit)
        samples = _pair_samples(order_c, order_p, pm, u, blocked, n_blocked, n_samples,
                                top_n_size, epsilon, rng, source)
        if samples:
            out[u] = samples
    return out


def sample_transfer_sets_batch(teacher, side_models: dict[str, object], users,
                               n_samples: int, top_n_size: int, epsilon: float, rng,
                               exclusions: dict, order_cache: dict | None = None,
                               teacher_tag: str = "teacher") -> list[DisparitySample]:
    """Transfer samples for many users; iterates users outer, sources inner,
    in the same order as the per-user op."""
    out: list[DisparitySample] = []
    if n_samples <= 0 or not side_models:
        return out
    tm = teacher.score_matrix()
    prepared = []
    for source in (SOURCE_STUDENT, SOURCE_STABILITY, SOURCE_PLASTICITY):
        model = side_models.get(source)
        if model is None:
            continue
        mm = model.score_matrix()
        limit = min(tm.shape[1], mm.shape[1])
        rows = min(tm.shape[0], mm.shape[0])
        prepared.append((source, mm, rows, limit,
                         _cached_order(tm, limit, order_cache, teacher_tag),
                         _cached_order(mm, limit, order_cache, source)))
    limits = {p[3] for p in prepared}
    for u in users:
        exclude = exclusions.get(u, ())
        masks = {lim: _mask_and_count(exclude, lim) for lim in limits}
        for source, mm, rows, limit, order_t, order_m in prepared:
            if u >= rows:
                continue
            blocked, n_blocked = masks[limit]
            out.extend(_pair_samples(order_t, order_m, mm, u, blocked, n_blocked, n_samples,
                                     top_n_size, epsilon, rng, source))
    return out
