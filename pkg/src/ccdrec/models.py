"""Embedding scorers, the teacher ensemble, rankings, and snapshots.

Two scorer variants share one parameter layout (a user table and an item
table): plain dot-product factorization, and a light graph-propagation
variant that averages mean-aggregated neighbor embeddings over L layers of
the current block graph before taking the dot product. Both kinds of model
expose ``score_items`` so ranking and evaluation code is scorer-agnostic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data_stream import BlockGraph

MF = "mf"
GRAPHPROP = "graphprop"
SNAPSHOT_FORMAT = "ccdrec-snapshot-v1"


class ModelError(ValueError):
    pass


def init_table(rows: int, dim: int, rng: np.random.Generator | None) -> np.ndarray:
    """Fresh embedding rows, uniform in [-0.5/d, 0.5/d]."""
    if rng is None or rows == 0:
        return np.zeros((rows, dim), dtype=np.float64)
    return rng.uniform(-0.5 / dim, 0.5 / dim, size=(rows, dim))


class EmbeddingModel:
    def __init__(self, num_users: int, num_items: int, dim: int,
                 variant: str = MF, layers: int = 2,
                 rng: np.random.Generator | None = None):
        if variant not in (MF, GRAPHPROP):
            raise ModelError(f"unknown variant: {variant}")
        if variant == GRAPHPROP and layers < 0:
            raise ModelError("layers must be >= 0")
        self.variant = variant
        self.layers = layers if variant == GRAPHPROP else 0
        self.dim = dim
        self.user_table = init_table(num_users, dim, rng)
        self.item_table = init_table(num_items, dim, rng)
        self._graph: BlockGraph | None = None
        self._version = 0
        self._prop_cache = None

    # -- bookkeeping

    @property
    def num_users(self) -> int:
        return self.user_table.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    def param_count(self) -> int:
        return self.user_table.size + self.item_table.size

    def bump_version(self):
        self._version += 1
        self._prop_cache = None

    def set_graph(self, graph: BlockGraph | None):
        self._graph = graph
        self._prop_cache = None

    def grow(self, num_users: int, num_items: int, rng: np.random.Generator | None = None):
        """Append rows for newly arrived entities (zeros unless rng given)."""
        if num_users < self.num_users or num_items < self.num_items:
            raise ModelError("tables never shrink")
        if num_users > self.num_users:
            extra = init_table(num_users - self.num_users, self.dim, rng)
            self.user_table = np.vstack([self.user_table, extra])
        if num_items > self.num_items:
            extra = init_table(num_items - self.num_items, self.dim, rng)
            self.item_table = np.vstack([self.item_table, extra])
        self.bump_version()

    # -- propagation

    def _propagation_operator(self) -> sp.csr_matrix:
        n = self.num_users + self.num_items
        if self._graph is None:
            return sp.identity(n, format="csr")
        rows, cols = [], []
        for u, items in self._graph.user_adj.items():
            if u >= self.num_users:
                continue
            for i in items:
                if i >= self.num_items:
                    continue
                rows.append(u)
                cols.append(self.num_users + i)
                rows.append(self.num_users + i)
                cols.append(u)
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return sp.diags(inv) @ adj

    def propagated(self) -> tuple[np.ndarray, np.ndarray]:
        """Embeddings actually used for scoring (raw tables for MF)."""
        if self.variant == MF or self.layers == 0:
            return self.user_table, self.item_table
        if self._prop_cache is not None and self._prop_cache[0] == self._version:
            return self._prop_cache[1], self._prop_cache[2]
        op = self._propagation_operator()
        emb = np.vstack([self.user_table, self.item_table])
        acc = emb.copy()
        cur = emb
        for _ in range(self.layers):
            cur = op @ cur
            acc += cur
        final = acc / (self.layers + 1)
        users, items = final[: self.num_users], final[self.num_users:]
        self._prop_cache = (self._version, users, items)
        return users, items

    def backprop_embedding_grads(self, grad_users: np.ndarray, grad_items: np.ndarray
                                 ) -> tuple[np.ndarray, np.ndarray]:
        """Map gradients w.r.t. propagated embeddings back to the raw tables."""
        if self.variant == MF or self.layers == 0:
            return grad_users, grad_items
        op_t = self._propagation_operator().T.tocsr()
        g = np.vstack([grad_users, grad_items])
        acc = g.copy()
        cur = g
        for _ in range(self.layers):
            cur = op_t @ cur
            acc += cur
        acc /= self.layers + 1
        return acc[: self.num_users], acc[self.num_users:]

    # -- scoring

    def score(self, user: int, item: int) -> float:
        if not (0 <= user < self.num_users and 0 <= item < self.num_items):
            raise ModelError(f"index out of range: user={user} item={item}")
        pu, pi = self.propagated()
        return float(pu[user] @ pi[item])

    def score_items(self, user: int) -> np.ndarray:
        if not 0 <= user < self.num_users:
            raise ModelError(f"user index out of range: {user}")
        pu, pi = self.propagated()
        return pi @ pu[user]

    def score_matrix(self, users: np.ndarray | None = None) -> np.ndarray:
        pu, pi = self.propagated()
        if users is not None:
            pu = pu[users]
        return pu @ pi.T

    def snapshot(self) -> "ParameterSnapshot":
        return ParameterSnapshot(self.variant, self.layers, self.dim,
                                 self.user_table.copy(), self.item_table.copy())


# ---------------------------------------------------------------------------
# teacher ensemble


class TeacherEnsemble:
    """A set of embedding models fused by per-user standardized score mean.

    For each member and user, scores over the full item catalog are shifted
    by the user's mean and scaled by the user's standard deviation before
    averaging, so members with different score scales contribute equally. A
    member with zero deviation for a user contributes nothing for that user.
    """

    def __init__(self, members: list[EmbeddingModel]):
        if not members:
            raise ModelError("ensemble needs at least one member")
        dims = {(m.num_users, m.num_items) for m in members}
        if len(dims) > 1:
            raise ModelError("ensemble members must share entity tables sizes")
        self.members = members

    @property
    def num_users(self) -> int:
        return self.members[0].num_users

    @property
    def num_items(self) -> int:
        return self.members[0].num_items

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.members)

    def grow(self, num_users: int, num_items: int, rngs=None):
        for j, m in enumerate(self.members):
            m.grow(num_users, num_items, None if rngs is None else rngs[j])

    def set_graph(self, graph):
        for m in self.members:
            m.set_graph(graph)

    def fusion_stats(self) -> "FusionStats":
        """Per-member, per-user mean/std of catalog scores, frozen as arrays."""
        return self.fusion_bundle()[1]

    def fusion_bundle(self) -> tuple[np.ndarray, "FusionStats"]:
        """Fused score matrix plus the standardization stats, in one pass."""
        mu = np.zeros((len(self.members), self.num_users))
        sd = np.zeros_like(mu)
        fused = np.zeros((self.num_users, self.num_items))
        for j, m in enumerate(self.members):
            s = m.score_matrix()
            mu[j] = s.mean(axis=1)
            sd[j] = s.std(axis=1)
            safe = sd[j] > 0
            z = np.divide(s - mu[j][:, None], np.where(safe, sd[j], 1.0)[:, None])
            fused += np.where(safe[:, None], z, 0.0)
        fused /= len(self.members)
        return fused, FusionStats(mu=mu, sd=sd)

    def score_items(self, user: int) -> np.ndarray:
        if not 0 <= user < self.num_users:
            raise ModelError(f"user index out of range: {user}")
        fused = np.zeros(self.num_items)
        for m in self.members:
            s = m.score_items(user)
            dev = s.std()
            if dev > 0:
                fused += (s - s.mean()) / dev
        return fused / len(self.members)

    def score(self, user: int, item: int) -> float:
        if not 0 <= item < self.num_items:
            raise ModelError(f"item index out of range: {item}")
        return float(self.score_items(user)[item])

    def score_matrix(self, users: np.ndarray | None = None) -> np.ndarray:
        fused = None
        for m in self.members:
            s = m.score_matrix(users)
            mu = s.mean(axis=1, keepdims=True)
            sd = s.std(axis=1, keepdims=True)
            z = np.divide(s - mu, sd, out=np.zeros_like(s), where=sd > 0)
            fused = z if fused is None else fused + z
        return fused / len(self.members)

    def snapshot(self) -> list["ParameterSnapshot"]:
        return [m.snapshot() for m in self.members]


@dataclass
class FusionStats:
    mu: np.ndarray  # (members, users)
    sd: np.ndarray


def ensemble_score(ensemble: TeacherEnsemble, user: int, item: int) -> float:
    return ensemble.score(user, item)


class CachedScorer:
    """Snapshot of a scorer's full score matrix behind the scorer interface.

    Ranking-heavy loops (replay/transfer sampling, evaluation) hit the same
    frozen model once per user; caching the matrix up front removes the
    repeated per-call scoring work without changing any semantics.
    """

    def __init__(self, scorer):
        self.matrix = scorer.score_matrix()
        self.num_users = scorer.num_users
        self.num_items = scorer.num_items

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "CachedScorer":
        out = cls.__new__(cls)
        out.matrix = matrix
        out.num_users, out.num_items = matrix.shape
        return out

    def score_items(self, user: int) -> np.ndarray:
        return self.matrix[user]

    def score(self, user: int, item: int) -> float:
        return float(self.matrix[user, item])

    def score_matrix(self, users: np.ndarray | None = None) -> np.ndarray:
        return self.matrix if users is None else self.matrix[users]


# ---------------------------------------------------------------------------
# rankings


@dataclass
class RankingList:
    user: int
    items: np.ndarray
    source: str = ""

    def __len__(self):
        return len(self.items)


def ranked_items(scorer, user: int, exclude=(), limit: int | None = None) -> np.ndarray:
    """Item indices ordered by descending score, ties by ascending index,
    with the excluded items removed entirely."""
    scores = scorer.score_items(user)
    candidates = np.arange(len(scores))
    if exclude:
        mask = np.ones(len(scores), dtype=bool)
        known = [e for e in exclude if e < len(scores)]
        mask[known] = False
        candidates = candidates[mask]
    order = np.argsort(-scores[candidates], kind="stable")
    ranked = candidates[order]
    return ranked if limit is None else ranked[:limit]


def top_n(scorer, user: int, n: int, exclude=(), source: str = "") -> RankingList:
    if n < 1:
        raise ModelError("n must be >= 1")
    return RankingList(user=user, items=ranked_items(scorer, user, exclude, limit=n), source=source)


def full_ranking(scorer, user: int, exclude=(), source: str = "") -> RankingList:
    return RankingList(user=user, items=ranked_items(scorer, user, exclude), source=source)


def rank_of(ranking: RankingList, item: int) -> int | None:
    hits = np.nonzero(ranking.items == item)[0]
    return int(hits[0]) if len(hits) else None


# ---------------------------------------------------------------------------
# snapshots


@dataclass
class ParameterSnapshot:
    variant: str
    layers: int
    dim: int
    user_table: np.ndarray
    item_table: np.ndarray

    @property
    def num_users(self) -> int:
        return self.user_table.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_table.shape[0]

    def save(self, path):
        with open(path, "wb") as fh:
            header = (f"{SNAPSHOT_FORMAT}\n"
                      f"variant={self.variant} layers={self.layers} dim={self.dim} "
                      f"users={self.num_users} items={self.num_items}\n")
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(self.user_table, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.item_table, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParameterSnapshot":
        with open(path, "rb") as fh:
            magic = fh.readline().decode("ascii").strip()
            if magic != SNAPSHOT_FORMAT:
                raise ModelError(f"unsupported snapshot format: {magic!r}")
            fields = dict(tok.split("=") for tok in fh.readline().decode("ascii").split())
            dim = int(fields["dim"])
            nu, ni = int(fields["users"]), int(fields["items"])
            buf = fh.read()
        want = (nu + ni) * dim * 8
        if len(buf) != want:
            raise ModelError("snapshot payload truncated")
        data = np.frombuffer(buf, dtype="<f8")
        return cls(variant=fields["variant"], layers=int(fields["layers"]), dim=dim,
                   user_table=data[: nu * dim].reshape(nu, dim).copy(),
                   item_table=data[nu * dim:].reshape(ni, dim).copy())


def snapshot(model: EmbeddingModel) -> ParameterSnapshot:
    return model.snapshot()


def restore(snap: ParameterSnapshot, variant: str | None = None,
            graph: BlockGraph | None = None) -> EmbeddingModel:
    """Rebuild a model from a snapshot; a mismatching expected variant errors."""
    if variant is not None and variant != snap.variant:
        raise ModelError(f"variant mismatch: snapshot is {snap.variant}, requested {variant}")
    model = EmbeddingModel(0, 0, snap.dim, variant=snap.variant,
                           layers=snap.layers if snap.variant == GRAPHPROP else 0)
    model.user_table = snap.user_table.copy()
    model.item_table = snap.item_table.copy()
    if graph is not None:
        model.set_graph(graph)
    model.bump_version()
    return model


def blend_snapshots(old: ParameterSnapshot, new: ParameterSnapshot, weight: float) -> ParameterSnapshot:
    """Rowwise (1-weight)*old + weight*new; rows that exist only in ``new``
    (freshly arrived entities) are copied verbatim."""
    if old.variant != new.variant or old.dim != new.dim:
        raise ModelError("snapshot blend requires matching variant and dim")
    if new.num_users < old.num_users or new.num_items < old.num_items:
        raise ModelError("newer snapshot must cover at least the older rows")

    def blend(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = b.copy()
        n = a.shape[0]
        out[:n] = (1.0 - weight) * a + weight * b[:n]
        return out

    return ParameterSnapshot(new.variant, new.layers, new.dim,
                             blend(old.user_table, new.user_table),
                             blend(old.item_table, new.item_table))
