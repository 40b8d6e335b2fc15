"""Training objectives with analytic gradients, plus the SGD update.

Every loss returns a :class:`LossBatch` holding the scalar value and sparse
row-level gradients keyed by ``(table, row)``. Gradients are derived with
respect to the raw embedding tables (graph-propagation models route their
chain rule through the propagation operator), so each loss can be verified
against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .models import MF, EmbeddingModel, RankingList, TeacherEnsemble


class LossError(ValueError):
    pass


@dataclass
class LossBatch:
    value: float = 0.0
    grads: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    def add_grad(self, table: str, row: int, g: np.ndarray):
        key = (table, row)
        if key in self.grads:
            self.grads[key] = self.grads[key] + g
        else:
            self.grads[key] = g


@dataclass
class ObjectiveWeights:
    """Mixing weights of the composite objectives.

    ``replay`` scales the proxy replay term in the student update;
    ``anchor`` scales the quadratic pull toward the previous teacher
    snapshot; ``transfer_init`` and ``transfer_tau`` parameterize the
    annealed student-to-teacher transfer weight.
    """

    replay: float = 0.5
    anchor: float = 1.0
    transfer_init: float = 0.5
    transfer_tau: float = 5.0

    def __post_init__(self):
        for name in ("replay", "anchor", "transfer_init"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0")
        if self.transfer_tau <= 0:
            raise LossError("transfer_tau must be > 0")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _pack(batch: LossBatch, model: EmbeddingModel, grad_users: np.ndarray,
          grad_items: np.ndarray, prefix: str = ""):
    """Push dense propagated-space gradients through the model and collect
    nonzero rows into the batch."""
    gu, gi = model.backprop_embedding_grads(grad_users, grad_items)
    for table, dense in ((prefix + "user", gu), (prefix + "item", gi)):
        rows = np.nonzero(np.abs(dense).sum(axis=1))[0]
        packed = dense[rows]
        batch.grads.update(zip(((table, int(r)) for r in rows), packed))


# ---------------------------------------------------------------------------
# pairwise ranking


def bpr_loss(model: EmbeddingModel, triples) -> LossBatch:
    """Summed -log sigmoid(score(u,i) - score(u,j)) over (u, i+, j-) triples."""
    triples = list(triples)
    if not triples:
        return LossBatch()
    u = np.array([t[0] for t in triples], dtype=np.int64)
    i = np.array([t[1] for t in triples], dtype=np.int64)
    j = np.array([t[2] for t in triples], dtype=np.int64)
    pu, pi = model.propagated()
    x = np.einsum("nd,nd->n", pu[u], pi[i] - pi[j])
    loss = float(_softplus(-x).sum())
    c = expit(-x)  # -dL/dx
    gu = np.zeros_like(pu)
    gi = np.zeros_like(pi)
    np.add.at(gu, u, c[:, None] * (pi[j] - pi[i]))
    scaled = c[:, None] * pu[u]
    np.add.at(gi, np.concatenate([i, j]), np.concatenate([-scaled, scaled]))
    batch = LossBatch(value=loss)
    _pack(batch, model, gu, gi)
    return batch


# ---------------------------------------------------------------------------
# list-wise distillation


def listwise_kd_loss(student: EmbeddingModel, teacher_lists: list[RankingList],
                     n_top: int, tail_sample: int | None = None,
                     rng: np.random.Generator | None = None) -> LossBatch:
    """Negative log-likelihood of the teacher's item permutation under the
    student's scores (sequential-choice model over ranked suffixes).

    Each teacher list must be the full candidate permutation for its user;
    the first ``n_top`` positions contribute one term each, with the choice
    denominator running over the position's whole suffix. With
    ``tail_sample`` set, suffix mass beyond position ``n_top`` is estimated
    from a uniform item sample (scaled up), which keeps large catalogs cheap.
    """
    if not teacher_lists:
        return LossBatch()
    pu, pi = student.propagated()
    gu = np.zeros_like(pu)
    gi = np.zeros_like(pi)
    total = 0.0
    for ranking in teacher_lists:
        items = np.asarray(ranking.items, dtype=np.int64)
        length = len(items)
        if length == 0:
            raise LossError("empty catalog in teacher ranking")
        n_eff = min(n_top, length)
        s = pi[items] @ pu[ranking.user]
        g = np.zeros(length)
        if tail_sample is not None and length > n_eff + tail_sample:
            if rng is None:
                raise LossError("tail_sample requires an rng")
            tail_idx = np.sort(rng.choice(np.arange(n_eff, length), size=tail_sample, replace=False))
            scale = (length - n_eff) / tail_sample
            head = s[:n_eff]
            tail = s[tail_idx]
            shift = max(head.max(), tail.max())
            e_head = np.exp(head - shift)
            e_tail = np.exp(tail - shift)
            tail_mass = scale * e_tail.sum()
            # suffix sums of the head beyond each position n
            suffix = np.cumsum(e_head[::-1])[::-1]
            denom = suffix + tail_mass
            total += float((np.log(denom) + shift - head).sum())
            g[:n_eff] -= 1.0
            inv = 1.0 / denom
            prefix_inv = np.cumsum(inv)
            g[:n_eff] += e_head * prefix_inv
            g[tail_idx] += scale * e_tail * prefix_inv[-1]
        else:
            lse = np.logaddexp.accumulate(s[::-1])[::-1]
            total += float((lse[:n_eff] - s[:n_eff]).sum())
            g[:n_eff] -= 1.0
            # position t collects softmax mass exp(s_t - lse_n) from every
            # choice step n <= min(t, n_eff-1); shift by max(s) for stability
            shift = s.max()
            prefix = np.cumsum(np.exp(shift - lse[:n_eff]))
            g += np.exp(s - shift) * prefix[np.minimum(np.arange(length), n_eff - 1)]
        gu[ranking.user] += g @ pi[items]
        # the ranking is a permutation, so indices are unique and fancy
        # indexing accumulates correctly
        gi[items] += np.outer(g, pu[ranking.user])
    batch = LossBatch(value=total)
    _pack(batch, student, gu, gi)
    return batch


# ---------------------------------------------------------------------------
# prediction replay (binary cross-entropy between squashed scores)


def _bce_terms(pred_raw: np.ndarray, target_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair BCE of sigmoid(pred) against sigmoid(target), and d/dpred."""
    t = expit(target_raw)
    loss = t * _softplus(-pred_raw) + (1.0 - t) * _softplus(pred_raw)
    return loss, expit(pred_raw) - t


def replay_loss(student: EmbeddingModel, targets) -> LossBatch:
    """Pull student scores toward replayed proxy predictions on sampled items.

    ``targets`` holds (user, item, target_score, ...) tuples; gradients flow
    only into the student.
    """
    targets = list(targets)
    if not targets:
        return LossBatch()
    u = np.array([t[0] for t in targets], dtype=np.int64)
    i = np.array([t[1] for t in targets], dtype=np.int64)
    raw = np.array([t[2] for t in targets], dtype=np.float64)
    pu, pi = student.propagated()
    s = np.einsum("nd,nd->n", pu[u], pi[i])
    loss, dldp = _bce_terms(s, raw)
    gu = np.zeros_like(pu)
    gi = np.zeros_like(pi)
    np.add.at(gu, u, dldp[:, None] * pi[i])
    np.add.at(gi, i, dldp[:, None] * pu[u])
    batch = LossBatch(value=float(loss.sum()))
    _pack(batch, student, gu, gi)
    return batch


def student_to_teacher_loss(teacher: TeacherEnsemble, targets, stats) -> LossBatch:
    """Same BCE form as replay, applied to the fused teacher score.

    The fused score standardizes each member's raw score with the per-user
    mean/std in ``stats`` (a frozen :class:`~ccdrec.models.FusionStats`);
    those statistics are treated as constants of the epoch, so each member
    receives the gradient of its own standardized contribution only. Keys in
    the returned batch are prefixed ``"{member}:"``.
    """
    targets = list(targets)
    if not targets:
        return LossBatch()
    u = np.array([t[0] for t in targets], dtype=np.int64)
    i = np.array([t[1] for t in targets], dtype=np.int64)
    raw = np.array([t[2] for t in targets], dtype=np.float64)
    n_members = len(teacher.members)
    member_scores = []
    fused = np.zeros(len(targets))
    for j, m in enumerate(teacher.members):
        pu, pi = m.propagated()
        s = np.einsum("nd,nd->n", pu[u], pi[i])
        member_scores.append(s)
        sd = stats.sd[j, u]
        safe = sd > 0
        z = np.where(safe, (s - stats.mu[j, u]) / np.where(safe, sd, 1.0), 0.0)
        fused += z
    fused /= n_members
    loss, dldp = _bce_terms(fused, raw)
    batch = LossBatch(value=float(loss.sum()))
    for j, m in enumerate(teacher.members):
        sd = stats.sd[j, u]
        coef = np.where(sd > 0, dldp / (n_members * np.where(sd > 0, sd, 1.0)), 0.0)
        pu, pi = m.propagated()
        gu = np.zeros_like(pu)
        gi = np.zeros_like(pi)
        np.add.at(gu, u, coef[:, None] * pi[i])
        np.add.at(gi, i, coef[:, None] * pu[u])
        _pack(batch, m, gu, gi, prefix=f"{j}:")
    return batch


# ---------------------------------------------------------------------------
# parameter anchoring


def cl_anchor_loss(model: EmbeddingModel, anchor) -> LossBatch:
    """0.5 * squared distance of the raw tables to an anchored snapshot,
    over the rows that existed at anchor time."""
    if anchor.dim != model.dim or anchor.variant != model.variant:
        raise LossError("anchor shape/variant mismatch")
    if anchor.num_users > model.num_users or anchor.num_items > model.num_items:
        raise LossError("anchor larger than the current tables")
    batch = LossBatch()
    total = 0.0
    for table, current, anchored in (("user", model.user_table, anchor.user_table),
                                     ("item", model.item_table, anchor.item_table)):
        n = anchored.shape[0]
        diff = current[:n] - anchored
        total += 0.5 * float((diff * diff).sum())
        for row in np.nonzero(np.abs(diff).sum(axis=1))[0]:
            batch.add_grad(table, int(row), diff[row].copy())
    batch.value = total
    return batch


def anneal_lambda_st(epoch: int, weights: ObjectiveWeights) -> float:
    """Exponentially decayed transfer weight at a given teacher epoch."""
    if epoch < 0:
        raise LossError("epoch must be >= 0")
    return weights.transfer_init * math.exp(-epoch / weights.transfer_tau)


# ---------------------------------------------------------------------------
# optimizer


def combine(parts: list[tuple[LossBatch, float]]) -> LossBatch:
    """Weighted sum of loss batches (used to mix composite objectives)."""
    out = LossBatch()
    for batch, w in parts:
        if w == 0.0:
            continue
        out.value += w * batch.value
        for (table, row), g in batch.grads.items():
            out.add_grad(table, row, w * g)
    return out


def _resolve_table(target, table: str) -> np.ndarray:
    if isinstance(target, TeacherEnsemble):
        member, _, name = table.partition(":")
        if not name:
            raise LossError(f"ensemble gradients need member-prefixed keys, got {table!r}")
        return _resolve_table(target.members[int(member)], name)
    if table == "user":
        return target.user_table
    if table == "item":
        return target.item_table
    raise LossError(f"unknown table: {table!r}")


def sgd_step(target, batch: LossBatch, lr: float, weight_decay: float = 0.0):
    """Apply ``row -= lr * (grad + weight_decay * row)`` to every touched row."""
    if lr < 0:
        raise LossError("lr must be >= 0")
    grouped: dict[str, tuple[list[int], list[np.ndarray]]] = {}
    for (table, row), g in batch.grads.items():
        rows, grads = grouped.setdefault(table, ([], []))
        rows.append(row)
        grads.append(g)
    for table, (rows, grads) in grouped.items():
        arr = _resolve_table(target, table)
        idx = np.asarray(rows, dtype=np.int64)
        g = np.asarray(grads)
        if not np.isfinite(g).all():
            bad = rows[int(np.nonzero(~np.isfinite(g).all(axis=1))[0][0])]
            raise LossError(f"non-finite gradient at {table}[{bad}]")
        if len(idx) and (idx.min() < 0 or idx.max() >= arr.shape[0]):
            raise LossError(f"gradient row out of range in table {table!r}")
        arr[idx] -= lr * (g + weight_decay * arr[idx])
    if isinstance(target, TeacherEnsemble):
        for m in target.members:
            m.bump_version()
    else:
        target.bump_version()
