"""Embedding initialization for newly arrived users and items.

A new entity starts from the mean of its 1-hop partners plus the prominent
entities among its same-side 2-hop neighborhood in the current graph (all of
which already own embeddings). Isolated entities, or entities surrounded
only by other newcomers, fall back to random rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_stream import BlockGraph
from .models import EmbeddingModel, init_table

STRATEGY_TWO_HOP = "ccd_2hop"
STRATEGY_ONE_HOP = "onehop"
STRATEGY_RANDOM = "random"
STRATEGIES = (STRATEGY_TWO_HOP, STRATEGY_ONE_HOP, STRATEGY_RANDOM)


class InitError(ValueError):
    pass


@dataclass
class InitPlan:
    kind: str                      # "user" | "item"
    index: int
    neighbor_refs: list[tuple[str, int]]  # (side, row) of embeddings to average
    fallback: str = "none"         # "none" | "random"


def _plan_for(kind, idx, graph: BlockGraph, prominent_same_side: set[int],
              embedded_users: int, embedded_items: int, use_two_hop: bool) -> InitPlan:
    other = "item" if kind == "user" else "user"
    other_limit = embedded_items if kind == "user" else embedded_users
    same_limit = embedded_users if kind == "user" else embedded_items
    refs = [(other, n) for n in sorted(graph.neighbors(kind, idx, 1)) if n < other_limit]
    if use_two_hop:
        two_hop = graph.neighbors(kind, idx, 2) & prominent_same_side
        refs += [(kind, n) for n in sorted(two_hop) if n < same_limit]
    if not refs:
        return InitPlan(kind=kind, index=idx, neighbor_refs=[], fallback="random")
    return InitPlan(kind=kind, index=idx, neighbor_refs=refs)


def plan_initialization(graph: BlockGraph, new_users, new_items,
                        prominent: tuple[set[int], set[int]],
                        embedded_users: int, embedded_items: int) -> list[InitPlan]:
    """Neighbor-aggregation plans using 1-hop plus prominent 2-hop relations.

    ``embedded_users``/``embedded_items`` bound the rows that already carry
    embeddings; newcomers never appear in each other's neighbor sets.
    """
    prominent_users, prominent_items = prominent
    plans = [_plan_for("user", int(u), graph, prominent_users,
                       embedded_users, embedded_items, True)
             for u in sorted(new_users)]
    plans += [_plan_for("item", int(i), graph, prominent_items,
                        embedded_users, embedded_items, True)
              for i in sorted(new_items)]
    return plans


def onehop_baseline(graph: BlockGraph, new_users, new_items,
                    embedded_users: int, embedded_items: int) -> list[InitPlan]:
    """Directly-interacted neighbors only (conventional baseline)."""
    plans = [_plan_for("user", int(u), graph, set(), embedded_users, embedded_items, False)
             for u in sorted(new_users)]
    plans += [_plan_for("item", int(i), graph, set(), embedded_users, embedded_items, False)
              for i in sorted(new_items)]
    return plans


def plan_random(new_users, new_items) -> list[InitPlan]:
    plans = [InitPlan("user", int(u), [], "random") for u in sorted(new_users)]
    plans += [InitPlan("item", int(i), [], "random") for i in sorted(new_items)]
    return plans


def apply_initialization(model: EmbeddingModel, plans: list[InitPlan],
                         rng: np.random.Generator,
                         embedded_users: int | None = None,
                         embedded_items: int | None = None):
    """Write each planned row as the mean of its neighbor rows.

    The model's tables must already contain (zero) rows for the new entities.
    Random fallbacks draw from the model's init distribution.
    """
    limits = {"user": embedded_users if embedded_users is not None else model.num_users,
              "item": embedded_items if embedded_items is not None else model.num_items}
    for plan in plans:
        table = model.user_table if plan.kind == "user" else model.item_table
        if plan.index >= table.shape[0]:
            raise InitError(f"no row for new {plan.kind} {plan.index}; grow the model first")
        if plan.fallback == "random":
            table[plan.index] = init_table(1, model.dim, rng)[0]
            continue
        rows = []
        for side, ref in plan.neighbor_refs:
            src = model.user_table if side == "user" else model.item_table
            if ref >= limits[side]:
                raise InitError(f"plan references {side} {ref} without an embedding")
            rows.append(src[ref])
        table[plan.index] = np.mean(rows, axis=0)
    model.bump_version()
