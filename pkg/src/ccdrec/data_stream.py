"""Interaction stream ingestion, block partitioning, and per-block graphs.

Timestamped (user, item) events are sorted, mapped to dense integer ids in
first-appearance order, and cut into consecutive blocks with a per-user
train/test holdout inside each block. Because ids follow first appearance,
the entities known up to any point in the stream always form the prefix
``[0, n)`` of the id space, which is what lets embedding tables grow by
appending rows.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_right
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .seeding import child_rng

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for unusable input data or invalid stream parameters."""


# ---------------------------------------------------------------------------
# leakage audit


class LeakageAudit:
    """Records which block data is touched while training is in progress.

    The engine wraps each training stage in :meth:`training`; any read of
    test edges, or of train records from a block beyond the one being
    processed, is logged as a violation. Evaluation code runs outside the
    training context and is unrestricted.
    """

    def __init__(self):
        self.phase = "idle"
        self.current_block = None
        self.violations: list[tuple] = []

    def reset(self):
        self.phase = "idle"
        self.current_block = None
        self.violations = []

    @contextmanager
    def training(self, block_index: int):
        prev = (self.phase, self.current_block)
        self.phase, self.current_block = "train", block_index
        try:
            yield self
        finally:
            self.phase, self.current_block = prev

    def note_test_access(self, block_index: int):
        if self.phase == "train":
            self.violations.append(("test-read-in-training", block_index, self.current_block))

    def note_train_access(self, block_index: int):
        if self.phase == "train" and self.current_block is not None and block_index > self.current_block:
            self.violations.append(("future-train-read", block_index, self.current_block))


audit = LeakageAudit()


# ---------------------------------------------------------------------------
# core types


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be nonempty")
        if self.timestamp < 0:
            raise DataError("timestamp must be >= 0")


class EntityRegistry:
    """Bidirectional external-id <-> dense-index maps with first-seen info.

    Dense indices are issued in order of first appearance in the time-sorted
    stream and are never reassigned, so ``first_block`` and ``first_pos``
    are non-decreasing over the index.
    """

    def __init__(self):
        self.user_map: dict[str, int] = {}
        self.item_map: dict[str, int] = {}
        self.user_ids: list[str] = []
        self.item_ids: list[str] = []
        self.user_first_block: list[int] = []
        self.item_first_block: list[int] = []
        self.user_first_pos: list[int] = []
        self.item_first_pos: list[int] = []

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def _intern(self, kind: str, external: str, block: int, pos: int) -> int:
        mapping = self.user_map if kind == "user" else self.item_map
        idx = mapping.get(external)
        if idx is None:
            idx = len(mapping)
            mapping[external] = idx
            if kind == "user":
                self.user_ids.append(external)
                self.user_first_block.append(block)
                self.user_first_pos.append(pos)
            else:
                self.item_ids.append(external)
                self.item_first_block.append(block)
                self.item_first_pos.append(pos)
        return idx

    def users_through_block(self, k: int) -> int:
        return bisect_right(self.user_first_block, k)

    def items_through_block(self, k: int) -> int:
        return bisect_right(self.item_first_block, k)

    def users_through_position(self, pos: int) -> int:
        return bisect_right(self.user_first_pos, pos)

    def items_through_position(self, pos: int) -> int:
        return bisect_right(self.item_first_pos, pos)


class DataBlock:
    """One contiguous span of the stream with its train/test holdout.

    Train records keep their timestamps and global stream positions so the
    block can later be cut into sub-spans. Access goes through properties so
    the leakage audit can observe it.
    """

    def __init__(self, index, train_u, train_i, train_t, train_pos, test_u, test_i,
                 new_users, new_items, ts_min, ts_max):
        self.index = int(index)
        self._train_u = np.asarray(train_u, dtype=np.int64)
        self._train_i = np.asarray(train_i, dtype=np.int64)
        self._train_t = np.asarray(train_t, dtype=np.int64)
        self._train_pos = np.asarray(train_pos, dtype=np.int64)
        self._test_u = np.asarray(test_u, dtype=np.int64)
        self._test_i = np.asarray(test_i, dtype=np.int64)
        self.new_users: set[int] = set(new_users)
        self.new_items: set[int] = set(new_items)
        self.ts_min = int(ts_min)
        self.ts_max = int(ts_max)

    @property
    def train_arrays(self):
        """(users, items, timestamps, stream positions) of train records."""
        audit.note_train_access(self.index)
        return self._train_u, self._train_i, self._train_t, self._train_pos

    @property
    def train_edges(self) -> set[tuple[int, int]]:
        audit.note_train_access(self.index)
        return set(zip(self._train_u.tolist(), self._train_i.tolist()))

    @property
    def test_edges(self) -> set[tuple[int, int]]:
        audit.note_test_access(self.index)
        return set(zip(self._test_u.tolist(), self._test_i.tolist()))

    @property
    def test_arrays(self):
        audit.note_test_access(self.index)
        return self._test_u, self._test_i

    @property
    def num_train(self) -> int:
        return len(self._train_u)

    @property
    def num_test(self) -> int:
        return len(self._test_u)

    def users_present(self) -> set[int]:
        """Users with any interaction (train or test) in this block."""
        audit.note_test_access(self.index)
        return set(self._train_u.tolist()) | set(self._test_u.tolist())


class BlockGraph:
    """Bipartite adjacency over a set of train edges, with degree counts."""

    def __init__(self, edges):
        self.user_adj: dict[int, set[int]] = {}
        self.item_adj: dict[int, set[int]] = {}
        for u, i in edges:
            self.user_adj.setdefault(int(u), set()).add(int(i))
            self.item_adj.setdefault(int(i), set()).add(int(u))

    @classmethod
    def from_block(cls, block: DataBlock) -> "BlockGraph":
        u, i, _, _ = block.train_arrays
        return cls(zip(u.tolist(), i.tolist()))

    def degree(self, kind: str, idx: int) -> int:
        adj = self.user_adj if kind == "user" else self.item_adj
        return len(adj.get(idx, ()))

    def neighbors(self, kind: str, idx: int, hops: int) -> set[int]:
        """1-hop partners across the bipartite split, or same-side 2-hop set.

        The query entity itself is excluded from its 2-hop set. Entities
        absent from the block yield empty sets.
        """
        if hops not in (1, 2):
            raise ValueError("hops must be 1 or 2")
        near = self.user_adj if kind == "user" else self.item_adj
        far = self.item_adj if kind == "user" else self.user_adj
        one_hop = near.get(idx, set())
        if hops == 1:
            return set(one_hop)
        two_hop: set[int] = set()
        for partner in one_hop:
            two_hop |= far.get(partner, set())
        two_hop.discard(idx)
        return two_hop


def neighbors(graph: BlockGraph, kind: str, idx: int, hops: int) -> set[int]:
    return graph.neighbors(kind, idx, hops)


def prominent_entities(graph: BlockGraph, top_fraction: float) -> tuple[set[int], set[int]]:
    """Entities of top interaction frequency in the block, per side.

    Within each side the top ``ceil(top_fraction * active)`` entities are
    kept, ordering by (degree desc, index asc).
    """
    if not (0 < top_fraction <= 1):
        raise DataError("top_fraction must be in (0, 1]")
    if not graph.user_adj and not graph.item_adj:
        raise DataError("prominent_entities: empty block")

    def top(adj: dict[int, set[int]]) -> set[int]:
        if not adj:
            return set()
        order = sorted(adj, key=lambda e: (-len(adj[e]), e))
        return set(order[: math.ceil(top_fraction * len(order))])

    return top(graph.user_adj), top(graph.item_adj)


# ---------------------------------------------------------------------------
# loading and partitioning


def load_interactions(path, delimiter: str = "\t",
                      columns: tuple[str, str, str] = ("user", "item", "timestamp"),
                      ) -> list[InteractionRecord]:
    """Parse one interaction per line; malformed lines are counted and logged."""
    order = {name: pos for pos, name in enumerate(columns)}
    if set(order) != {"user", "item", "timestamp"}:
        raise DataError("columns must name user, item and timestamp exactly once")
    records: list[InteractionRecord] = []
    malformed = 0
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"unreadable file: {path}: {exc}") from exc
    with fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(delimiter)
            try:
                rec = InteractionRecord(
                    user_id=parts[order["user"]].strip(),
                    item_id=parts[order["item"]].strip(),
                    timestamp=int(parts[order["timestamp"]].strip()),
                )
            except (IndexError, ValueError, DataError):
                malformed += 1
                continue
            records.append(rec)
    if malformed:
        log.warning("load_interactions: skipped %d malformed lines in %s", malformed, path)
    if not records:
        raise DataError(f"zero valid records in {path}")
    return records


def partition_blocks(records: list[InteractionRecord], num_blocks: int,
                     test_fraction: float = 0.2, seed: int = 0,
                     mode: str = "count") -> tuple[list[DataBlock], EntityRegistry]:
    """Sort the stream by timestamp and split it into consecutive blocks.

    ``mode="count"`` cuts near-equal-count spans; ``mode="time"`` cuts the
    covered time range into equal intervals. Within each block every user's
    distinct items are split train/test by ``test_fraction`` with seeded
    randomness; a user's very first block always keeps at least one train
    edge so that no test user is ever without training history.
    """
    if num_blocks < 2:
        raise DataError("num_blocks must be >= 2")
    if not (0 < test_fraction < 1):
        raise DataError("test_fraction must be in (0, 1)")
    if not records:
        raise DataError("no records to partition")

    ts = np.array([r.timestamp for r in records], dtype=np.int64)
    order = np.argsort(ts, kind="stable")

    if mode == "count":
        spans = np.array_split(order, num_blocks)
    elif mode == "time":
        lo, hi = int(ts.min()), int(ts.max())
        width = max(1, math.ceil((hi - lo + 1) / num_blocks))
        bins = np.minimum((ts[order] - lo) // width, num_blocks - 1)
        spans = [order[bins == b] for b in range(num_blocks)]
    else:
        raise DataError(f"unknown partition mode: {mode}")
    for k, span in enumerate(spans):
        if len(span) == 0:
            raise DataError(f"block {k} has zero interactions")

    registry = EntityRegistry()
    blocks: list[DataBlock] = []
    pos_of: dict[int, int] = {}
    pos = 0
    # First pass: dense ids in first-appearance order over the sorted stream.
    per_block: list[list[tuple[int, int, int, int]]] = []
    for k, span in enumerate(spans):
        rows = []
        for rec_idx in span:
            rec = records[rec_idx]
            u = registry._intern("user", rec.user_id, k, pos)
            i = registry._intern("item", rec.item_id, k, pos)
            rows.append((u, i, rec.timestamp, pos))
            pos_of[(u, i, k)] = pos
            pos += 1
        per_block.append(rows)

    for k, rows in enumerate(per_block):
        # Collapse duplicate (user, item) pairs inside the block, keeping the
        # earliest occurrence, so the same pair can never sit in both splits.
        by_user: dict[int, list[tuple[int, int, int]]] = {}
        seen: set[tuple[int, int]] = set()
        for u, i, t, p in rows:
            if (u, i) in seen:
                continue
            seen.add((u, i))
            by_user.setdefault(u, []).append((i, t, p))

        train_rows: list[tuple[int, int, int, int]] = []
        test_rows: list[tuple[int, int]] = []
        for u in sorted(by_user):
            entries = by_user[u]
            n = len(entries)
            n_test = int(math.floor(n * test_fraction))
            if registry.user_first_block[u] == k:
                n_test = min(n_test, n - 1)
            if n_test > 0:
                rng = child_rng(seed, "split", k, u)
                test_sel = set(rng.choice(n, size=n_test, replace=False).tolist())
            else:
                test_sel = set()
            for slot, (i, t, p) in enumerate(entries):
                if slot in test_sel:
                    test_rows.append((u, i))
                else:
                    train_rows.append((u, i, t, p))

        train_rows.sort(key=lambda r: (r[2], r[3]))
        tu = [r[0] for r in train_rows]
        ti = [r[1] for r in train_rows]
        tt = [r[2] for r in train_rows]
        tp = [r[3] for r in train_rows]
        block_ts = [records[idx].timestamp for idx in spans[k]]
        blocks.append(DataBlock(
            index=k,
            train_u=tu, train_i=ti, train_t=tt, train_pos=tp,
            test_u=[r[0] for r in test_rows], test_i=[r[1] for r in test_rows],
            new_users={u for u in registry.user_map.values() if registry.user_first_block[u] == k},
            new_items={i for i in registry.item_map.values() if registry.item_first_block[i] == k},
            ts_min=min(block_ts), ts_max=max(block_ts),
        ))
    return blocks, registry


def format_block_manifest(blocks: list[DataBlock], registry: EntityRegistry) -> str:
    """Human-readable per-block summary (counts, new entities, time range)."""
    lines = [f"blocks={len(blocks)} users={registry.num_users} items={registry.num_items}"]
    header = f"{'block':>5} {'train':>8} {'test':>8} {'new_users':>9} {'new_items':>9} {'ts_min':>12} {'ts_max':>12}"
    lines.append(header)
    for b in blocks:
        lines.append(f"{b.index:>5} {b.num_train:>8} {b.num_test:>8} "
                     f"{len(b.new_users):>9} {len(b.new_items):>9} {b.ts_min:>12} {b.ts_max:>12}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic stream


@dataclass
class SyntheticStreamSpec:
    """Parameters of the drifting latent-factor interaction generator."""

    num_users: int = 300
    num_items: int = 500
    num_blocks: int = 5
    interactions_per_block: int = 2000
    latent_dim: int = 8
    drift_rate: float = 0.3
    arrival_rate: float = 0.1
    num_dormant_users: int = 0
    affinity_sharpness: float = 4.0
    dormant_edges: int = 8

    def validate(self):
        for name in ("num_users", "num_items", "num_blocks", "interactions_per_block", "latent_dim"):
            if getattr(self, name) <= 0:
                raise DataError(f"synthetic spec: {name} must be positive")
        if not (0.0 <= self.drift_rate <= 1.0):
            raise DataError("synthetic spec: drift_rate must be in [0, 1]")
        if not (0.0 <= self.arrival_rate < 1.0):
            raise DataError("synthetic spec: arrival_rate must be in [0, 1)")
        if self.arrival_rate * (self.num_blocks - 1) >= 1.0:
            raise DataError("synthetic spec: arrival_rate too high for the block count")
        if self.num_dormant_users < 0:
            raise DataError("synthetic spec: num_dormant_users must be >= 0")


def _active_counts(total: int, num_blocks: int, arrival_rate: float) -> list[int]:
    new_per_block = int(math.floor(arrival_rate * total))
    base = total - new_per_block * (num_blocks - 1)
    return [base + new_per_block * b for b in range(num_blocks)]


def generate_synthetic_stream(spec: SyntheticStreamSpec, seed: int = 0) -> list[InteractionRecord]:
    """Sample a drifting-preference stream of timestamped interactions.

    Later blocks activate fresh users/items per the arrival rate; user latent
    vectors random-walk between blocks at the drift rate. Optionally a set of
    designated dormant users interacts in the first and last block only, and
    no other user accidentally matches that pattern.
    """
    spec.validate()
    rng = child_rng(seed, "synth")
    dim = spec.latent_dim
    user_latent = rng.normal(size=(spec.num_users, dim)) / math.sqrt(dim)
    item_latent = rng.normal(size=(spec.num_items, dim)) / math.sqrt(dim)
    activity = rng.gamma(shape=2.0, scale=1.0, size=spec.num_users) + 0.05

    users_per_block = _active_counts(spec.num_users, spec.num_blocks, spec.arrival_rate)
    items_per_block = _active_counts(spec.num_items, spec.num_blocks, spec.arrival_rate)

    n_dormant = spec.num_dormant_users
    if n_dormant:
        if spec.num_blocks < 5:
            raise DataError("dormant users need at least 5 blocks")
        if n_dormant >= users_per_block[0]:
            raise DataError("too many dormant users for the first block")
    dormant = list(range(n_dormant))

    block_users: list[np.ndarray] = []
    block_items: list[np.ndarray] = []
    for b in range(spec.num_blocks):
        n_active_u = users_per_block[b]
        n_active_i = items_per_block[b]
        active_u = np.arange(n_active_u)
        middle = 0 < b < spec.num_blocks - 1
        if dormant and middle:
            active_u = active_u[~np.isin(active_u, dormant)]
        count = spec.interactions_per_block
        forced: list[tuple[int, int]] = []
        if dormant and not middle:
            brng = child_rng(seed, "synth-dormant", b)
            for du in dormant:
                probs = _item_probs(user_latent[du], item_latent[:n_active_i], spec.affinity_sharpness)
                picks = brng.choice(n_active_i, size=min(spec.dormant_edges, n_active_i),
                                    replace=False, p=probs)
                forced.extend((du, int(p)) for p in picks)
            active_u = active_u[~np.isin(active_u, dormant)]
        count -= len(forced)
        if count < 0:
            raise DataError("interactions_per_block too small for the dormant cohort")

        brng = child_rng(seed, "synth-block", b)
        weights = activity[active_u]
        weights = weights / weights.sum()
        drawn_users = brng.choice(active_u, size=count, p=weights)
        pairs: list[tuple[int, int]] = list(forced)
        taken: dict[int, set[int]] = {}
        for u, i in forced:
            taken.setdefault(u, set()).add(i)
        for u in sorted(set(drawn_users.tolist())):
            k_u = int((drawn_users == u).sum())
            probs = _item_probs(user_latent[u], item_latent[:n_active_i], spec.affinity_sharpness)
            avoid = taken.get(u, set())
            take = min(k_u + len(avoid), n_active_i)
            picks = brng.choice(n_active_i, size=take, replace=False, p=probs)
            fresh = [int(p) for p in picks if int(p) not in avoid][:k_u]
            pairs.extend((u, i) for i in fresh)
            taken.setdefault(u, set()).update(fresh)
        block_users.append(np.array([p[0] for p in pairs], dtype=np.int64))
        block_items.append(np.array([p[1] for p in pairs], dtype=np.int64))

        # Preference drift between blocks.
        if spec.drift_rate > 0 and b < spec.num_blocks - 1:
            noise = child_rng(seed, "synth-drift", b).normal(size=user_latent.shape) / math.sqrt(dim)
            user_latent = (1.0 - spec.drift_rate) * user_latent + spec.drift_rate * noise

    if dormant:
        _break_false_dormants(block_users, block_items, dormant, spec, seed,
                              user_latent, item_latent, items_per_block)

    records: list[InteractionRecord] = []
    ts = 0
    for b in range(spec.num_blocks):
        for u, i in zip(block_users[b].tolist(), block_items[b].tolist()):
            records.append(InteractionRecord(f"u{u:05d}", f"i{i:05d}", ts))
            ts += 1
    return records


def _item_probs(user_vec: np.ndarray, items: np.ndarray, sharpness: float) -> np.ndarray:
    scores = sharpness * (items @ user_vec)
    scores -= scores.max()
    p = np.exp(scores)
    return p / p.sum()


def _break_false_dormants(block_users, block_items, dormant, spec, seed,
                          user_latent, item_latent, items_per_block):
    """Give one middle-block interaction to any regular user whose activity
    pattern would otherwise mimic the designated dormant cohort."""
    last = spec.num_blocks - 1
    first_users = set(block_users[0].tolist())
    last_users = set(block_users[last].tolist())
    middle_users: set[int] = set()
    for b in range(1, last):
        middle_users |= set(block_users[b].tolist())
    impostors = sorted((first_users & last_users) - middle_users - set(dormant))
    if not impostors:
        return
    rng = child_rng(seed, "synth-impostor")
    b = 1
    n_active_i = items_per_block[b]
    for slot, u in enumerate(impostors):
        probs = _item_probs(user_latent[u], item_latent[:n_active_i], spec.affinity_sharpness)
        item = int(rng.choice(n_active_i, p=probs))
        # Replace a tail interaction so the per-block count stays exact.
        pos = len(block_users[b]) - 1 - slot
        block_users[b][pos] = u
        block_items[b][pos] = item
