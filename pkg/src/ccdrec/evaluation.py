"""Ranking metrics, stream-level aggregates, and user-slice analyses.

LA scores a model on the newest block's holdout, RA is the unweighted mean
of the same metric over all earlier blocks' holdouts, and their harmonic
mean summarizes the adaptation/retention balance. All metrics depend only on
rank order, use a per-user candidate set that excludes the user's training
items, and skip users without any scorable relevant item.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import RankingList, ranked_items

METRIC_KINDS = ("recall", "ndcg")


@dataclass
class MetricResult:
    name: str
    k: int
    value: float | None
    user_count: int


@dataclass
class ModelMetrics:
    la: dict[str, float] = field(default_factory=dict)         # "recall@20" -> value
    ra: dict[str, float] = field(default_factory=dict)
    hmean: dict[str, float] = field(default_factory=dict)
    ra_defined: bool = False
    la_users: int = 0
    ra_users: int = 0


@dataclass
class BlockReport:
    block: int
    method: str
    metrics: dict[str, ModelMetrics] = field(default_factory=dict)   # model name -> metrics
    slices: dict[str, MetricResult] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def recall_at_k(ranking: RankingList, relevant: set[int], k: int) -> float:
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    hits = sum(1 for item in ranking.items[:k].tolist() if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranking: RankingList, relevant: set[int], k: int) -> float:
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    dcg = sum(1.0 / np.log2(pos + 2.0)
              for pos, item in enumerate(ranking.items[:k].tolist()) if item in relevant)
    ideal = sum(1.0 / np.log2(pos + 2.0) for pos in range(min(len(relevant), k)))
    return float(dcg / ideal)


def hmean(la: float, ra: float) -> float:
    if la <= 0.0 or ra <= 0.0:
        return 0.0
    return 2.0 * la * ra / (la + ra)


# ---------------------------------------------------------------------------
# per-block scoring


def scorable_test_sets(block, scorer, exclusions) -> dict[int, set[int]]:
    """Per-user relevant sets the scorer can actually rank: users and items
    within the model's tables, minus items the user trained on."""
    out: dict[int, set[int]] = {}
    tu, ti = block.test_arrays
    for u, i in zip(tu.tolist(), ti.tolist()):
        if u >= scorer.num_users or i >= scorer.num_items:
            continue
        if i in exclusions.get(u, ()):
            continue
        out.setdefault(u, set()).add(i)
    return out


class _RankCache:
    """One full candidate ranking per user, shared across blocks/metrics."""

    def __init__(self, scorer, exclusions, limit: int):
        self.scorer = scorer
        self.exclusions = exclusions
        self.limit = limit
        self._cache: dict[int, RankingList] = {}

    def get(self, user: int) -> RankingList:
        ranking = self._cache.get(user)
        if ranking is None:
            items = ranked_items(self.scorer, user,
                                 exclude=self.exclusions.get(user, ()), limit=self.limit)
            ranking = RankingList(user=user, items=items)
            self._cache[user] = ranking
        return ranking


def _mean_metrics(test_sets: dict[int, set[int]], cache: _RankCache,
                  ks: list[int]) -> tuple[dict[str, float], int]:
    """Mean recall/ndcg at each cutoff over the users in ``test_sets``."""
    sums = {f"{kind}@{k}": 0.0 for kind in METRIC_KINDS for k in ks}
    count = 0
    for u in sorted(test_sets):
        relevant = test_sets[u]
        if not relevant:
            continue
        ranking = cache.get(u)
        count += 1
        for k in ks:
            sums[f"recall@{k}"] += recall_at_k(ranking, relevant, k)
            sums[f"ndcg@{k}"] += ndcg_at_k(ranking, relevant, k)
    if count == 0:
        return {key: 0.0 for key in sums}, 0
    return {key: v / count for key, v in sums.items()}, count


def evaluate_scorer(scorer, blocks, current: int, ks: list[int], exclusions) -> ModelMetrics:
    """LA on the current block, RA as the uniform mean over earlier blocks."""
    cache = _RankCache(scorer, exclusions, limit=max(ks))
    out = ModelMetrics()
    la, la_n = _mean_metrics(scorable_test_sets(blocks[current], scorer, exclusions), cache, ks)
    out.la = la
    out.la_users = la_n
    if current > 0:
        per_block = []
        total_users = 0
        for j in range(current):
            vals, n = _mean_metrics(scorable_test_sets(blocks[j], scorer, exclusions), cache, ks)
            per_block.append(vals)
            total_users += n
        out.ra = {key: float(np.mean([vals[key] for vals in per_block])) for key in la}
        out.ra_defined = True
        out.ra_users = total_users
        out.hmean = {key: hmean(out.la[key], out.ra[key]) for key in la}
    else:
        out.ra = {}
        out.ra_defined = False
        out.hmean = dict(la)
    return out


def compute_la_ra(scorer, blocks, current: int, k: int, exclusions,
                  metric: str = "recall") -> tuple[float, float | None]:
    mm = evaluate_scorer(scorer, blocks, current, [k], exclusions)
    key = f"{metric}@{k}"
    return mm.la[key], (mm.ra[key] if mm.ra_defined else None)


# ---------------------------------------------------------------------------
# user slices


def dormant_user_eval(scorer, blocks, k: int, exclusions,
                      metric: str = "recall") -> MetricResult:
    """Users active in the first block, silent through the middle blocks, and
    holding test edges in the final block, scored on that final holdout.

    The caller is responsible for passing the model state reached after the
    penultimate block.
    """
    if len(blocks) < 5:
        raise ValueError("dormant analysis needs at least 5 blocks")
    final = len(blocks) - 1
    first_active = blocks[0].users_present()
    middle_active: set[int] = set()
    for b in blocks[1:final]:
        middle_active |= b.users_present()
    test_sets = scorable_test_sets(blocks[final], scorer, exclusions)
    cohort = {u: rel for u, rel in test_sets.items()
              if u in first_active and u not in middle_active}
    name = f"dormant_{metric}"
    if not cohort:
        return MetricResult(name=name, k=k, value=None, user_count=0)
    vals, count = _mean_metrics(cohort, _RankCache(scorer, exclusions, k), [k])
    return MetricResult(name=name, k=k, value=vals[f"{metric}@{k}"], user_count=count)


def new_user_eval(scorer, blocks, current: int, k: int, exclusions,
                  metric: str = "recall") -> MetricResult:
    """Metric over users first seen in the current block."""
    test_sets = scorable_test_sets(blocks[current], scorer, exclusions)
    cohort = {u: rel for u, rel in test_sets.items() if u in blocks[current].new_users}
    name = f"new_user_{metric}"
    if not cohort:
        return MetricResult(name=name, k=k, value=None, user_count=0)
    vals, count = _mean_metrics(cohort, _RankCache(scorer, exclusions, k), [k])
    return MetricResult(name=name, k=k, value=vals[f"{metric}@{k}"], user_count=count)


# ---------------------------------------------------------------------------
# report serialization


def reports_to_tsv(reports: list[BlockReport]) -> str:
    """Machine-readable report: one record per block/model/metric.

    Stage timings are deliberately not included here so that reruns with the
    same seed produce byte-identical output; they are serialized separately.
    """
    lines = ["block\tmethod\tmodel\tmetric\tvalue\tusers"]
    for rep in reports:
        for model in sorted(rep.metrics):
            mm = rep.metrics[model]
            for key in sorted(mm.la):
                lines.append(f"{rep.block}\t{rep.method}\t{model}\tla_{key}\t{mm.la[key]:.10f}\t{mm.la_users}")
            if mm.ra_defined:
                for key in sorted(mm.ra):
                    lines.append(f"{rep.block}\t{rep.method}\t{model}\tra_{key}\t{mm.ra[key]:.10f}\t{mm.ra_users}")
            for key in sorted(mm.hmean):
                flag = "" if mm.ra_defined else "_la_only"
                lines.append(f"{rep.block}\t{rep.method}\t{model}\thmean_{key}{flag}\t{mm.hmean[key]:.10f}\t{mm.la_users}")
        for name in sorted(rep.slices):
            res = rep.slices[name]
            value = "" if res.value is None else f"{res.value:.10f}"
            lines.append(f"{rep.block}\t{rep.method}\t{name.split('/')[0]}\t{res.name}@{res.k}\t{value}\t{res.user_count}")
        for model in sorted(rep.param_counts):
            lines.append(f"{rep.block}\t{rep.method}\t{model}\tparam_count\t{rep.param_counts[model]}\t0")
    return "\n".join(lines) + "\n"


def timings_to_tsv(reports: list[BlockReport]) -> str:
    lines = ["block\tmethod\tstage\tseconds"]
    for rep in reports:
        for stage in sorted(rep.timings):
            lines.append(f"{rep.block}\t{rep.method}\t{stage}\t{rep.timings[stage]:.6f}")
    return "\n".join(lines) + "\n"


def reports_to_table(reports: list[BlockReport], key: str = "recall@20") -> str:
    """Fixed-width human-readable summary at one metric cutoff."""
    lines = [f"{'block':>5} {'method':>9} {'model':>8} {'LA':>8} {'RA':>8} {'H-mean':>8} {'users':>6}"]
    for rep in reports:
        for model in sorted(rep.metrics):
            mm = rep.metrics[model]
            ra = f"{mm.ra[key]:.4f}" if mm.ra_defined else "-"
            lines.append(f"{rep.block:>5} {rep.method:>9} {model:>8} "
                         f"{mm.la.get(key, 0.0):>8.4f} {ra:>8} {mm.hmean.get(key, 0.0):>8.4f} "
                         f"{mm.la_users:>6}")
    return "\n".join(lines) + "\n"
