"""Per-block orchestration: distill, update the student, update the teacher.

Each data block is processed in three stages. Stage 1 distills a fresh
compact student from the teacher's ranking lists. Stage 2 streams the
block's train edges through ``sub_cycles`` sub-spans, initializing newly
arrived entities and training the student with pairwise ranking plus
proxy-replay. Stage 3 trains every ensemble member on the block with an
anchored-parameter term and an annealed transfer term that injects the
student-side knowledge back into the teacher.

Two reference runners share the loop: ``finetune`` keeps the distillation
step but strips replay, transfer, anchoring and entity initialization;
``fullbatch`` retrains everything from scratch on all observed data at each
block.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import entity_init as einit
from .data_stream import (BlockGraph, DataBlock, EntityRegistry, audit, partition_blocks,
                          prominent_entities)
from .evaluation import (BlockReport, dormant_user_eval, evaluate_scorer, new_user_eval)
from .losses import (LossBatch, ObjectiveWeights, anneal_lambda_st, bpr_loss, cl_anchor_loss,
                     combine, listwise_kd_loss, replay_loss, sgd_step, student_to_teacher_loss)
from .models import (GRAPHPROP, CachedScorer, EmbeddingModel, ParameterSnapshot,
                     TeacherEnsemble, full_ranking)
from .proxies import (SOURCE_PLASTICITY, SOURCE_STABILITY, SOURCE_STUDENT, ProxyPair,
                      sample_replay_sets_batch, sample_transfer_sets_batch, update_proxies)
from .seeding import child_rng

log = logging.getLogger(__name__)

METHOD_CCD = "ccd"
METHOD_FINETUNE = "finetune"
METHOD_FULLBATCH = "fullbatch"
METHODS = (METHOD_CCD, METHOD_FINETUNE, METHOD_FULLBATCH)

ABLATION_FLAGS = {
    "disable_replay": "w/o proxy learning",
    "disable_sp": "w/o S-proxy",
    "disable_pp": "w/o P-proxy",
    "disable_s_to_t": "w/o student-side knowledge",
    "disable_proxies_in_s_to_t": "w/o proxies (student only)",
    "disable_annealing": "w/o annealing",
    "disable_entity_init": "w/o entity initialization",
}


class EngineError(RuntimeError):
    pass


class StageOrderError(EngineError):
    pass


@dataclass
class CycleConfig:
    """Per-block schedule: sub-cycle count, epoch budgets, loss mix, ablations."""

    sub_cycles: int = 4
    kd_epochs: int = 15
    student_epochs: int = 4
    teacher_epochs: int = 25
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    disable_replay: bool = False
    disable_sp: bool = False
    disable_pp: bool = False
    disable_s_to_t: bool = False
    disable_proxies_in_s_to_t: bool = False
    disable_annealing: bool = False
    disable_entity_init: bool = False
    resample_replay_each_epoch: bool = True

    def __post_init__(self):
        if self.sub_cycles < 1:
            raise EngineError("sub_cycles must be >= 1")
        for name in ("kd_epochs", "student_epochs", "teacher_epochs"):
            if getattr(self, name) < 0:
                raise EngineError(f"{name} must be >= 0")


@dataclass
class EngineState:
    teacher: TeacherEnsemble
    student: EmbeddingModel | None = None
    proxies: ProxyPair | None = None
    teacher_anchor: list[ParameterSnapshot] = field(default_factory=list)
    block_index: int = -1
    stage: str = "init"            # last completed stage for the current block
    distilled: ParameterSnapshot | None = None
    exclusions: dict[int, set[int]] = field(default_factory=dict)
    block_positives: dict[int, set[int]] = field(default_factory=dict)
    current_graph: BlockGraph | None = None


def _require(condition: bool, message: str):
    if not condition:
        raise StageOrderError(message)


def initialize_state(registry: EntityRegistry, cfg) -> EngineState:
    """Teacher ensemble sized to the entities known at deployment start."""
    nu = registry.users_through_block(0)
    ni = registry.items_through_block(0)
    members = [EmbeddingModel(nu, ni, cfg.teacher_dim, variant=cfg.variant,
                              layers=cfg.graph_layers, rng=child_rng(cfg.seed, "teacher-init", j))
               for j in range(cfg.ensemble_size)]
    teacher = TeacherEnsemble(members)
    return EngineState(teacher=teacher, teacher_anchor=teacher.snapshot())


# ---------------------------------------------------------------------------
# shared training helpers


def _sample_negatives(rng, users, num_items, positives) -> np.ndarray:
    j = rng.integers(0, num_items, size=len(users))
    for _ in range(100):
        bad = [t for t, u in enumerate(users) if int(j[t]) in positives.get(u, ())]
        if not bad:
            return j
        j[np.array(bad)] = rng.integers(0, num_items, size=len(bad))
    for t in bad:
        pos = positives.get(users[t], set())
        for candidate in range(num_items):
            if candidate not in pos:
                j[t] = candidate
                break
    return j


def _user_chunks(users: list[int], chunk_size: int, rng=None) -> list[list[int]]:
    users = list(users)
    if rng is not None:
        rng.shuffle(users)
    return [users[i:i + chunk_size] for i in range(0, len(users), chunk_size)] or [[]]


def _bpr_epoch(model, edges_by_user, num_items, positives, rng_neg, rng_order,
               lr, weight_decay, chunk_size) -> float:
    """One epoch of pairwise updates with one fresh uniform negative per
    positive, stepped per user-chunk."""
    total = 0.0
    for chunk in _user_chunks(sorted(edges_by_user), chunk_size, rng_order):
        triples = []
        for u in chunk:
            items = edges_by_user[u]
            negs = _sample_negatives(rng_neg, [u] * len(items), num_items, positives)
            triples.extend((u, i, int(jj)) for i, jj in zip(items, negs))
        if not triples:
            continue
        batch = bpr_loss(model, triples)
        sgd_step(model, batch, lr, weight_decay)
        total += batch.value
    return total


# ---------------------------------------------------------------------------
# stage 1: distillation


def stage1_distill(state: EngineState, blocks, registry, k: int, cfg) -> ParameterSnapshot:
    """Generate a fresh student that mimics the teacher's ranking lists."""
    _require(state.teacher is not None, "stage1 requires a teacher")
    _require(k == state.block_index + 1,
             f"stage1 expects block {state.block_index + 1}, got {k}")
    _require(state.stage in ("init", "teacher"),
             f"stage1 cannot run after stage {state.stage!r}")
    with audit.training(k):
        teacher = state.teacher
        student = EmbeddingModel(teacher.num_users, teacher.num_items, cfg.student_dim,
                                 variant=cfg.variant, layers=cfg.graph_layers,
                                 rng=child_rng(cfg.seed, "student-init", k))
        if cfg.variant == GRAPHPROP:
            student.set_graph(state.current_graph)
        fused = CachedScorer(teacher)
        lists = [full_ranking(fused, u, exclude=state.exclusions.get(u, ()), source="teacher")
                 for u in range(teacher.num_users)]
        rng_tail = child_rng(cfg.seed, "kd-tail", k)
        for epoch in range(cfg.cycle.kd_epochs):
            order = child_rng(cfg.seed, "kd-order", k, epoch)
            for chunk in _user_chunks(list(range(len(lists))), cfg.user_batch, order):
                if not chunk:
                    continue
                batch = listwise_kd_loss(student, [lists[u] for u in chunk], cfg.top_n,
                                         tail_sample=cfg.kd_tail_sample, rng=rng_tail)
                sgd_step(student, batch, cfg.lr, cfg.weight_decay)
        state.student = student
        state.distilled = student.snapshot()
        state.block_index = k
        state.stage = "distilled"
    return state.distilled


def proxy_update_step(state: EngineState, k: int, cfg):
    """Fold the block's distilled parameters into both proxies (once per block)."""
    _require(state.stage == "distilled" and state.block_index == k,
             "proxy update must follow stage1 of the same block")
    if state.proxies is None:
        state.proxies = ProxyPair.from_first_distilled(state.distilled, cfg.w_sp, cfg.w_pp, block=k)
    else:
        update_proxies(state.proxies, state.distilled, k)
    state.stage = "proxies"


# ---------------------------------------------------------------------------
# stage 2: student continual update


def _replay_sources(state: EngineState, cfg) -> list[tuple[str, EmbeddingModel]]:
    cyc = cfg.cycle
    if cyc.disable_replay or state.proxies is None:
        return []
    out = []
    if not cyc.disable_sp:
        out.append((SOURCE_STABILITY, state.proxies.stability))
    if not cyc.disable_pp:
        out.append((SOURCE_PLASTICITY, state.proxies.plasticity))
    return out


def stage2_student_update(state: EngineState, blocks, registry: EntityRegistry, k: int, cfg,
                          trace=None, sub_cycle_hook=None):
    """Stream the block through sub-cycles of init + ranking + replay updates."""
    _require(state.stage == "proxies" and state.block_index == k,
             "stage2 must follow the proxy update of the same block")
    cyc = cfg.cycle
    block: DataBlock = blocks[k]
    state.block_positives = {}
    cum_edges: list[tuple[int, int]] = []
    with audit.training(k):
        tu, ti, _, tpos = block.train_arrays
    spans = np.array_split(np.arange(len(tu)), cyc.sub_cycles)

    for s, span in enumerate(spans):
        with audit.training(k):
            if len(span) == 0:
                continue
            sub_edges = [(int(tu[t]), int(ti[t])) for t in span]
            cum_edges.extend(sub_edges)
            boundary = int(tpos[span[-1]])
            new_nu = max(state.student.num_users, registry.users_through_position(boundary))
            new_ni = max(state.student.num_items, registry.items_through_position(boundary))
            old_nu, old_ni = state.student.num_users, state.student.num_items
            state.student.grow(new_nu, new_ni)  # zero rows, filled by the init plans
            sub_graph = BlockGraph(sub_edges)
            plans = _make_plans(sub_graph, range(old_nu, new_nu), range(old_ni, new_ni),
                                old_nu, old_ni, cfg)
            einit.apply_initialization(state.student, plans, child_rng(cfg.seed, "init", k, s),
                                       embedded_users=old_nu, embedded_items=old_ni)
            if cfg.variant == GRAPHPROP:
                graph_so_far = BlockGraph(cum_edges)
                state.student.set_graph(graph_so_far)
                if state.proxies is not None:
                    state.proxies.stability.set_graph(graph_so_far)
                    state.proxies.plasticity.set_graph(graph_so_far)

            edges_by_user: dict[int, list[int]] = {}
            for u, i in sub_edges:
                edges_by_user.setdefault(u, []).append(i)
                state.block_positives.setdefault(u, set()).add(i)
                state.exclusions.setdefault(u, set()).add(i)

            sources = _replay_sources(state, cfg)
            replay_by_user: dict[int, list] = {}
            order_cache: dict = {}  # proxies are frozen for the whole sub-cycle
            for epoch in range(cyc.student_epochs):
                if sources and (epoch == 0 or cyc.resample_replay_each_epoch):
                    rng_rep = child_rng(cfg.seed, "replay", k, s, epoch)
                    replay_by_user = {}
                    for source, proxy in sources:
                        per_user = sample_replay_sets_batch(
                            state.student, proxy, sorted(edges_by_user), cfg.n_samples,
                            cfg.top_n, cfg.epsilon, rng_rep, state.exclusions, source,
                            order_cache=order_cache, current_tag=f"student-{epoch}")
                        for u, samples in per_user.items():
                            replay_by_user.setdefault(u, []).extend(samples)
                rng_neg = child_rng(cfg.seed, "neg", k, s, epoch)
                rng_order = child_rng(cfg.seed, "order", k, s, epoch)
                epoch_loss = 0.0
                for chunk in _user_chunks(sorted(edges_by_user), cfg.user_batch, rng_order):
                    triples = []
                    replays = []
                    for u in chunk:
                        items = edges_by_user[u]
                        negs = _sample_negatives(rng_neg, [u] * len(items),
                                                 state.student.num_items, state.block_positives)
                        triples.extend((u, i, int(jj)) for i, jj in zip(items, negs))
                        replays.extend((r.user, r.item, r.target_score)
                                       for r in replay_by_user.get(u, ()))
                    if not triples and not replays:
                        continue
                    batch = combine([(bpr_loss(state.student, triples), 1.0),
                                     (replay_loss(state.student, replays), cyc.weights.replay)])
                    sgd_step(state.student, batch, cfg.lr, cfg.weight_decay)
                    epoch_loss += batch.value
                if trace is not None:
                    trace.append((k, "student", s, epoch, "objective", epoch_loss))
        if sub_cycle_hook is not None:
            sub_cycle_hook(k, s, state)

    # Cover the rest of the block's catalog (entities only ever seen in the
    # holdout) with random rows so evaluation can rank them.
    state.student.grow(registry.users_through_block(k), registry.items_through_block(k),
                       rng=child_rng(cfg.seed, "grow-eval", k))
    with audit.training(k):
        state.current_graph = BlockGraph(zip(tu.tolist(), ti.tolist()))
        if cfg.variant == GRAPHPROP:
            state.student.set_graph(state.current_graph)
            if state.proxies is not None:
                state.proxies.stability.set_graph(state.current_graph)
                state.proxies.plasticity.set_graph(state.current_graph)
    state.stage = "student"


def _make_plans(graph, new_users, new_items, embedded_users, embedded_items, cfg):
    strategy = einit.STRATEGY_RANDOM if cfg.cycle.disable_entity_init else cfg.init_strategy
    if strategy == einit.STRATEGY_TWO_HOP:
        try:
            prominent = prominent_entities(graph, cfg.prominent_fraction)
        except ValueError:
            prominent = (set(), set())
        return einit.plan_initialization(graph, new_users, new_items, prominent,
                                         embedded_users, embedded_items)
    if strategy == einit.STRATEGY_ONE_HOP:
        return einit.onehop_baseline(graph, new_users, new_items, embedded_users, embedded_items)
    return einit.plan_random(new_users, new_items)


# ---------------------------------------------------------------------------
# stage 3: teacher update


def stage3_teacher_update(state: EngineState, blocks, registry: EntityRegistry, k: int, cfg,
                          trace=None):
    """Train the ensemble on the closed block with anchoring and transfer."""
    _require(state.stage == "student" and state.block_index == k,
             "stage3 must follow stage2 of the same block")
    cyc = cfg.cycle
    with audit.training(k):
        teacher = state.teacher
        teacher.grow(registry.users_through_block(k), registry.items_through_block(k),
                     rngs=[child_rng(cfg.seed, "teacher-grow", k, j)
                           for j in range(len(teacher.members))])
        if cfg.variant == GRAPHPROP:
            teacher.set_graph(state.current_graph)

        tu, ti, _, _ = blocks[k].train_arrays
        edges_by_user: dict[int, list[int]] = {}
        positives: dict[int, set[int]] = {}
        for u, i in zip(tu.tolist(), ti.tolist()):
            edges_by_user.setdefault(u, []).append(i)
            positives.setdefault(u, set()).add(i)

        side_models: dict[str, EmbeddingModel] = {}
        if not cyc.disable_s_to_t:
            side_models[SOURCE_STUDENT] = state.student
            if not cyc.disable_proxies_in_s_to_t and state.proxies is not None:
                side_models[SOURCE_STABILITY] = state.proxies.stability
                side_models[SOURCE_PLASTICITY] = state.proxies.plasticity

        transfer_cache: dict = {}  # student-side models are frozen during stage 3
        for epoch in range(cyc.teacher_epochs):
            rng_neg = child_rng(cfg.seed, "t-neg", k, epoch)
            rng_order = child_rng(cfg.seed, "t-order", k, epoch)
            cf_loss = 0.0
            for chunk in _user_chunks(sorted(edges_by_user), cfg.user_batch, rng_order):
                triples = []
                for u in chunk:
                    items = edges_by_user[u]
                    negs = _sample_negatives(rng_neg, [u] * len(items),
                                             teacher.num_items, positives)
                    triples.extend((u, i, int(jj)) for i, jj in zip(items, negs))
                if not triples:
                    continue
                for j, member in enumerate(teacher.members):
                    batch = bpr_loss(member, triples)
                    sgd_step(member, batch, cfg.lr, cfg.weight_decay)
                    cf_loss += batch.value

            lam_st = 0.0
            if side_models:
                lam_st = (cyc.weights.transfer_init if cyc.disable_annealing
                          else anneal_lambda_st(epoch, cyc.weights))
            extra_parts = []
            if cyc.weights.anchor > 0:
                anchor_batch = LossBatch()
                for j, member in enumerate(teacher.members):
                    part = cl_anchor_loss(member, state.teacher_anchor[j])
                    anchor_batch.value += part.value
                    for (table, row), g in part.grads.items():
                        anchor_batch.grads[(f"{j}:{table}", row)] = g
                extra_parts.append((anchor_batch, cyc.weights.anchor))
            if lam_st > 0:
                fused_matrix, stats = teacher.fusion_bundle()
                rng_tr = child_rng(cfg.seed, "transfer", k, epoch)
                targets = sample_transfer_sets_batch(
                    CachedScorer.from_matrix(fused_matrix), side_models, sorted(edges_by_user),
                    cfg.n_samples, cfg.top_n, cfg.epsilon, rng_tr, state.exclusions,
                    order_cache=transfer_cache, teacher_tag=f"teacher-{epoch}")
                transfer_batch = student_to_teacher_loss(
                    teacher, [(t.user, t.item, t.target_score) for t in targets], stats)
                extra_parts.append((transfer_batch, lam_st))
            if extra_parts:
                extra = combine(extra_parts)
                if extra.grads:
                    sgd_step(teacher, extra, cfg.lr, cfg.weight_decay)
            if trace is not None:
                trace.append((k, "teacher", 0, epoch, "cf", cf_loss))

        state.teacher_anchor = teacher.snapshot()
        state.stage = "teacher"


# ---------------------------------------------------------------------------
# stream runners


def _finetune_cfg(cfg):
    """The reference per-block pipeline: distill, then plain CF updates only."""
    weights = dataclasses.replace(cfg.cycle.weights, anchor=0.0)
    cycle = dataclasses.replace(cfg.cycle, weights=weights, disable_replay=True,
                                disable_s_to_t=True, disable_entity_init=True)
    return dataclasses.replace(cfg, cycle=cycle)


def run_stream(records, cfg, method: str = METHOD_CCD, trace=None, history=None):
    """Partition the record stream and run the selected method end to end."""
    blocks, registry = partition_blocks(records, cfg.num_blocks, cfg.test_fraction,
                                        cfg.seed, mode=cfg.partition_mode)
    return run_partitioned(blocks, registry, cfg, method, trace=trace, history=history)


def run_partitioned(blocks, registry: EntityRegistry, cfg, method: str = METHOD_CCD,
                    trace=None, history=None) -> list[BlockReport]:
    method = method.lower()
    if method not in METHODS:
        raise EngineError(f"unknown method: {method}")
    audit.reset()
    if method == METHOD_FULLBATCH:
        return _run_fullbatch(blocks, registry, cfg, trace)
    eff_cfg = _finetune_cfg(cfg) if method == METHOD_FINETUNE else cfg
    state = initialize_state(registry, eff_cfg)
    reports: list[BlockReport] = []
    dormant_slices: dict[str, object] = {}
    final = len(blocks) - 1
    for k in range(len(blocks)):
        if k == final and len(blocks) >= 5 and state.student is not None:
            dormant_slices = _dormant_slices(CachedScorer(state.teacher),
                                             CachedScorer(state.student), blocks, cfg,
                                             state.exclusions)
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        stage1_distill(state, blocks, registry, k, eff_cfg)
        timings["stage1_distill"] = time.perf_counter() - t0
        if history is not None:
            history.setdefault("distilled", {})[k] = state.distilled
        t0 = time.perf_counter()
        proxy_update_step(state, k, eff_cfg)
        timings["proxy_update"] = time.perf_counter() - t0
        if history is not None:
            history.setdefault("stability", {})[k] = state.proxies.stability.snapshot()
            history.setdefault("plasticity", {})[k] = state.proxies.plasticity.snapshot()
        hook = None
        if trace is not None:
            hook = _sub_cycle_la_hook(blocks, cfg, trace)
        t0 = time.perf_counter()
        stage2_student_update(state, blocks, registry, k, eff_cfg, trace=trace,
                              sub_cycle_hook=hook)
        timings["stage2_student"] = time.perf_counter() - t0
        student_metrics = evaluate_scorer(CachedScorer(state.student), blocks, k,
                                          cfg.k_values, state.exclusions)
        t0 = time.perf_counter()
        stage3_teacher_update(state, blocks, registry, k, eff_cfg, trace=trace)
        timings["stage3_teacher"] = time.perf_counter() - t0
        teacher_metrics = evaluate_scorer(CachedScorer(state.teacher), blocks, k,
                                          cfg.k_values, state.exclusions)
        report = BlockReport(block=k, method=method,
                             metrics={"student": student_metrics, "teacher": teacher_metrics},
                             param_counts={"student": state.student.param_count(),
                                           "teacher": state.teacher.param_count()},
                             timings=timings)
        _attach_slices(report, CachedScorer(state.teacher), CachedScorer(state.student),
                       blocks, k, cfg, state.exclusions)
        if k == final:
            report.slices.update(dormant_slices)
        reports.append(report)
    return reports


def _sub_cycle_la_hook(blocks, cfg, trace):
    from .evaluation import compute_la_ra

    def hook(k, s, state):
        la, _ = compute_la_ra(CachedScorer(state.student), blocks, k, max(cfg.k_values),
                              state.exclusions)
        trace.append((k, "student-eval", s, 0, f"la_recall@{max(cfg.k_values)}", la))

    return hook


def _attach_slices(report, teacher, student, blocks, k, cfg, exclusions):
    primary = max(cfg.k_values)
    report.slices["student/new_user"] = new_user_eval(student, blocks, k, primary, exclusions)
    report.slices["teacher/new_user"] = new_user_eval(teacher, blocks, k, primary, exclusions)


def _dormant_slices(teacher, student, blocks, cfg, exclusions):
    primary = max(cfg.k_values)
    return {"student/dormant": dormant_user_eval(student, blocks, primary, exclusions),
            "teacher/dormant": dormant_user_eval(teacher, blocks, primary, exclusions)}


def _run_fullbatch(blocks, registry, cfg, trace=None) -> list[BlockReport]:
    """Retrain teacher and student from scratch on blocks[0..k] at every k."""
    cyc = cfg.cycle
    reports: list[BlockReport] = []
    prev_models = None
    final = len(blocks) - 1
    exclusions: dict[int, set[int]] = {}
    dormant_slices: dict[str, object] = {}
    for k in range(len(blocks)):
        if k == final and len(blocks) >= 5 and prev_models is not None:
            dormant_slices = _dormant_slices(CachedScorer(prev_models[0]),
                                             CachedScorer(prev_models[1]), blocks, cfg,
                                             exclusions)
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        with audit.training(k):
            edges_by_user: dict[int, list[int]] = {}
            positives: dict[int, set[int]] = {}
            all_edges: list[tuple[int, int]] = []
            for j in range(k + 1):
                bu, bi, _, _ = blocks[j].train_arrays
                for u, i in zip(bu.tolist(), bi.tolist()):
                    edges_by_user.setdefault(u, []).append(i)
                    positives.setdefault(u, set()).add(i)
                    exclusions.setdefault(u, set()).add(i)
                    all_edges.append((u, i))
            nu = registry.users_through_block(k)
            ni = registry.items_through_block(k)
            graph = BlockGraph(all_edges) if cfg.variant == GRAPHPROP else None
            members = [EmbeddingModel(nu, ni, cfg.teacher_dim, variant=cfg.variant,
                                      layers=cfg.graph_layers,
                                      rng=child_rng(cfg.seed, "fb-teacher", k, j))
                       for j in range(cfg.ensemble_size)]
            teacher = TeacherEnsemble(members)
            student = EmbeddingModel(nu, ni, cfg.student_dim, variant=cfg.variant,
                                     layers=cfg.graph_layers,
                                     rng=child_rng(cfg.seed, "fb-student", k))
            if graph is not None:
                teacher.set_graph(graph)
                student.set_graph(graph)
            for epoch in range(cyc.teacher_epochs):
                rng_neg = child_rng(cfg.seed, "fb-t-neg", k, epoch)
                rng_order = child_rng(cfg.seed, "fb-t-order", k, epoch)
                for chunk in _user_chunks(sorted(edges_by_user), cfg.user_batch, rng_order):
                    triples = []
                    for u in chunk:
                        negs = _sample_negatives(rng_neg, [u] * len(edges_by_user[u]),
                                                 ni, positives)
                        triples.extend((u, i, int(jj))
                                       for i, jj in zip(edges_by_user[u], negs))
                    if not triples:
                        continue
                    for member in teacher.members:
                        sgd_step(member, bpr_loss(member, triples), cfg.lr, cfg.weight_decay)
            timings["teacher_retrain"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            student_epochs = cyc.kd_epochs + cyc.sub_cycles * cyc.student_epochs
            for epoch in range(student_epochs):
                _bpr_epoch(student, edges_by_user, ni, positives,
                           child_rng(cfg.seed, "fb-s-neg", k, epoch),
                           child_rng(cfg.seed, "fb-s-order", k, epoch),
                           cfg.lr, cfg.weight_decay, cfg.user_batch)
            timings["student_retrain"] = time.perf_counter() - t0
        report = BlockReport(block=k, method=METHOD_FULLBATCH,
                             metrics={"student": evaluate_scorer(CachedScorer(student), blocks,
                                                                 k, cfg.k_values, exclusions),
                                      "teacher": evaluate_scorer(CachedScorer(teacher), blocks,
                                                                 k, cfg.k_values, exclusions)},
                             param_counts={"student": student.param_count(),
                                           "teacher": teacher.param_count()},
                             timings=timings)
        _attach_slices(report, CachedScorer(teacher), CachedScorer(student), blocks, k,
                       cfg, exclusions)
        if k == final:
            report.slices.update(dormant_slices)
        reports.append(report)
        prev_models = (teacher, student)
    return reports


def trace_to_tsv(trace) -> str:
    lines = ["block\tstage\tsub\tepoch\tname\tvalue"]
    for block, stage, sub, epoch, name, value in trace:
        lines.append(f"{block}\t{stage}\t{sub}\t{epoch}\t{name}\t{value:.10f}")
    return "\n".join(lines) + "\n"
