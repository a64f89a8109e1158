"""Trace-driven scheduler over the dual radix cache.

Each step admits queued requests in FIFO order (fork, then prefill, one
request at a time so later forks see what earlier ones published), runs one
decode iteration for every agent that was already running, then advances the
simulated clock by ``alpha * flops + beta * bytes``.

Modes:
  unified        merged K/V rows cached per adapter (classic prefix caching)
  disaggregated  shared base rows plus per-agent rank-r residual rows
  full_reuse     merged rows shared across adapters; later agents read the
                 first writer's rows as they are
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np

from .dual_radix import AgentCacheView, DualRadixTree, PartialHitPlan
from .kv_pool import BYTES_PER_VALUE, BlockPool, KVPools, NeedsEviction, PoolKind, split_budget
from .lora import (
    BaseModel,
    CacheContext,
    LayerKV,
    LoraAdapter,
    Mode,
    ModelGeometry,
    adapter_seed,
    head_flops,
    layer_flops,
    make_adapter,
    make_base_model,
    projection_flops,
    run_layers,
)
from .numerics import DTYPE
from .workloads import Trace, TraceRecord


class EngineMode(str, Enum):
    UNIFIED = "unified"
    DISAGGREGATED = "disaggregated"
    FULL_REUSE = "full_reuse"

    @property
    def forward_mode(self) -> Mode:
        return {
            EngineMode.UNIFIED: Mode.EXACT,
            EngineMode.DISAGGREGATED: Mode.SHARED_BASE,
            EngineMode.FULL_REUSE: Mode.FULL_REUSE,
        }[self]

    @property
    def split(self) -> bool:
        return self is EngineMode.DISAGGREGATED


_GEOMETRY_KEYS = tuple(f.name for f in fields(ModelGeometry))


@dataclass(frozen=True)
class EngineConfig:
    mode: EngineMode = EngineMode.DISAGGREGATED
    geometry: ModelGeometry = field(default_factory=ModelGeometry)
    rank: int = 8
    num_adapters: int = 64
    adapter_strength: float = 0.5
    block_capacity: int = 16
    pool_bytes: int = 64 * 2**20
    residual_fraction: float = 0.25
    alpha: float = 1e-12  # simulated seconds per FLOP
    beta: float = 1e-10  # simulated seconds per byte moved
    seed: int = 0
    numerics: bool = True  # False: exact block/FLOP accounting without computing values
    block_size_keys: int = 64
    tool_latency: float = 0.1
    max_steps: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "mode", EngineMode(self.mode))
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.block_capacity < 1:
            raise ValueError("block_capacity must be >= 1")
        if not 1 <= self.rank < self.geometry.n_kv:
            raise ValueError(f"rank must be in [1, n_kv={self.geometry.n_kv})")
        if self.pool_bytes < 0 or self.num_adapters < 0:
            raise ValueError("pool_bytes and num_adapters must be >= 0")
        if not 0.0 <= self.residual_fraction < 1.0:
            raise ValueError("residual_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "geometry"}
        d["mode"] = self.mode.value
        d.update(asdict(self.geometry))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        own = {f.name for f in fields(cls)} - {"geometry"}
        unknown = sorted(set(d) - own - set(_GEOMETRY_KEYS))
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        geometry = ModelGeometry(**{k: d[k] for k in _GEOMETRY_KEYS if k in d})
        return cls(geometry=geometry, **{k: d[k] for k in own if k in d})

    def with_mode(self, mode: EngineMode | str) -> "EngineConfig":
        d = self.to_dict()
        d["mode"] = EngineMode(mode).value
        return EngineConfig.from_dict(d)

    @property
    def base_row_width(self) -> int:
        return 2 * self.geometry.n_kv

    @property
    def residual_row_width(self) -> int:
        return 2 * self.rank if self.mode.split else 0


@dataclass
class AgentRequest:
    workflow_id: str
    agent_id: str
    adapter_id: str
    arrival_time: float
    prompt_tokens: list[int]
    max_new_tokens: int
    parent_agent: str | None = None
    request_id: int = -1

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not self.prompt_tokens:
            raise ValueError("prompt must not be empty")


@dataclass
class Event:
    time: float
    kind: str
    agent_id: str
    detail: str = ""


@dataclass
class AgentState:
    request: AgentRequest
    view: AgentCacheView
    plan: PartialHitPlan
    generated: list[int] = field(default_factory=list)
    kv: list[LayerKV] | None = None
    admitted_at: float = 0.0

    @property
    def done(self) -> bool:
        return len(self.generated) >= self.request.max_new_tokens


@dataclass
class Metrics:
    mode: str = ""
    sim_time: float = 0.0
    steps: int = 0
    tasks_per_second: float = 0.0
    workflows_completed: int = 0
    agents_completed: int = 0
    requests_completed: int = 0
    rejected: int = 0
    admission_failures: int = 0
    per_agent_bytes: float = 0.0
    peak_bytes: int = 0
    peak_active_agents: int = 0
    cache_hit_rate: float = 0.0
    residual_hit_rate: float = 0.0
    avg_decode_batch_size: float = 0.0
    prefill_tokens: int = 0
    matched_base_tokens: int = 0
    matched_residual_tokens: int = 0
    truncation_loss_tokens: int = 0
    base_recompute_flops: int = 0
    residual_recompute_flops: int = 0
    total_flops: int = 0
    total_bytes_moved: int = 0
    evictions_base: int = 0
    evictions_residual: int = 0
    evicted_blocks_base: int = 0
    evicted_blocks_residual: int = 0
    decode_stalls: int = 0
    pool_base_blocks: int = 0
    pool_residual_blocks: int = 0
    residual_fraction: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


TIMELINE_COLUMNS = ("sim_time", "active_agents", "decode_batch", "bytes_base", "bytes_residual", "hits", "evictions")


def _pseudo_token(agent_id: str, position: int, vocab: int) -> int:
    return zlib.crc32(f"{agent_id}:{position}".encode()) % vocab


class Engine:
    def __init__(self, config: EngineConfig, model: BaseModel | None = None, adapters: dict[str, LoraAdapter] | None = None):
        self.config = config
        g = config.geometry
        self.geometry = g
        self.model = model if model is not None else make_base_model(g, config.seed)
        self._adapters: dict[str, LoraAdapter] = dict(adapters or {})
        cap = config.block_capacity
        base_w, res_w = config.base_row_width, config.residual_row_width
        if config.mode.split:
            budget = split_budget(config.pool_bytes, cap, base_w, res_w, config.residual_fraction)
        else:
            budget = split_budget(config.pool_bytes, cap, base_w, 0, 0.0)
        store = config.numerics
        self.pools = KVPools(
            BlockPool(PoolKind.BASE, budget.base_blocks, cap, base_w, store_rows=store),
            BlockPool(PoolKind.RESIDUAL, budget.residual_blocks, cap, res_w, store_rows=store),
        )
        self.tree = DualRadixTree(self.pools, cap, g.num_layers)
        self.clock = 0.0
        self._seq = 0
        self.queue: list[AgentRequest] = []
        self.active: dict[int, AgentState] = {}
        self.events: list[Event] = []
        self.timeline: list[dict] = []
        self.metrics = Metrics(
            mode=config.mode.value,
            pool_base_blocks=budget.base_blocks,
            pool_residual_blocks=budget.residual_blocks,
            residual_fraction=config.residual_fraction if config.mode.split else 0.0,
        )
        self._per_agent_samples: list[float] = []
        self._decode_batches: list[int] = []
        self._step_flops = 0
        self._step_bytes = 0
        self._step_hits = 0
        self._step_forward = False
        # Workload bookkeeping (filled by load_trace).
        self._trace_records: list[TraceRecord] = []
        self._waiting: dict[int, list[int]] = defaultdict(list)
        self._final_context: dict[int, list[int]] = {}
        self._workflow_requests: dict[str, set[int]] = defaultdict(set)
        self._finished_requests: set[int] = set()
        self._finished_agents: set[str] = set()
        self._rejected_requests: set[int] = set()
        self._tool_latency = config.tool_latency
        self._vocab = g.vocab

    # -- adapters ------------------------------------------------------------

    def adapter(self, adapter_id: str) -> LoraAdapter:
        if adapter_id not in self._adapters:
            self._adapters[adapter_id] = make_adapter(
                self.geometry,
                adapter_id,
                self.config.rank,
                adapter_seed(self.config.seed, adapter_id),
                strength=self.config.adapter_strength,
            )
        return self._adapters[adapter_id]

    # -- submission ------------------------------------------------------------

    def submit(self, req: AgentRequest) -> None:
        """Queue FIFO by arrival time, ties kept in submission order."""
        if req.request_id < 0:
            req.request_id = 10**9 + self._seq
        self._seq += 1
        if any(t < 0 or t >= self._vocab for t in req.prompt_tokens):
            raise ValueError(f"{req.agent_id}: prompt token outside vocab {self._vocab}")
        pos = len(self.queue)
        while pos > 0 and self.queue[pos - 1].arrival_time > req.arrival_time:
            pos -= 1
        self.queue.insert(pos, req)
        self._workflow_requests[req.workflow_id].add(req.request_id)

    def load_trace(self, trace: Trace) -> None:
        """Submit root records now; children and follow-up turns wait for their predecessor."""
        self._tool_latency = trace.tool_latency
        last_request: dict[str, int] = {}
        for i, rec in enumerate(trace.records):
            self._trace_records.append(rec)
            self._workflow_requests[rec.workflow_id].add(i)
            dep = None
            if rec.kind == "message":
                dep = last_request[rec.agent_id]
            elif rec.parent_agent is not None:
                dep = last_request[rec.parent_agent]
            last_request[rec.agent_id] = i
            if dep is None:
                self._submit_record(i, rec.time, rec.context_tokens(self._vocab))
            else:
                self._waiting[dep].append(i)

    def _submit_record(self, index: int, arrival: float, prompt: list[int]) -> None:
        rec = self._trace_records[index]
        self.submit(
            AgentRequest(
                workflow_id=rec.workflow_id,
                agent_id=rec.agent_id,
                adapter_id=rec.adapter_id,
                arrival_time=arrival,
                prompt_tokens=prompt,
                max_new_tokens=rec.max_new_tokens,
                parent_agent=rec.parent_agent,
                request_id=index,
            )
        )

    def _release_dependents(self, request_id: int, done_at: float) -> None:
        for j in self._waiting.pop(request_id, []):
            rec = self._trace_records[j]
            prompt = self._final_context[request_id] + rec.own_tokens(self._vocab)
            self._submit_record(j, max(rec.time, done_at + self._tool_latency), prompt)

    def _reject_cascade(self, request_id: int) -> None:
        self._rejected_requests.add(request_id)
        self.metrics.rejected += 1
        for j in self._waiting.pop(request_id, []):
            self._reject_cascade(j)

    # -- cost accounting -----------------------------------------------------------

    def _row_bytes(self, kind: PoolKind) -> int:
        return self.pools[kind].width * BYTES_PER_VALUE * self.geometry.num_layers

    def _charge(self, flops: int = 0, bytes_moved: int = 0) -> None:
        self._step_flops += flops
        self._step_bytes += bytes_moved

    # -- admission and prefill ----------------------------------------------------

    def _base_namespace(self, req: AgentRequest) -> str:
        return req.adapter_id if self.config.mode is EngineMode.UNIFIED else ""

    def _try_admit(self, req: AgentRequest) -> AgentState | None:
        try:
            view, plan = self.tree.fork_agent(
                req.agent_id,
                req.adapter_id,
                req.prompt_tokens,
                base_namespace=self._base_namespace(req),
                use_residual=self.config.mode.split,
                decode_tokens=req.max_new_tokens - 1,
                allow_evict=True,
            )
        except NeedsEviction:
            return None
        return AgentState(request=req, view=view, plan=plan, admitted_at=self.clock)

    def _prefill(self, state: AgentState) -> None:
        view, req = state.view, state.request
        cfg, g = self.config, self.geometry
        s = len(view.tokens)
        mb = view.matched_base_len
        mr = view.matched_residual_len if cfg.mode.split else mb
        # The last prompt row is always recomputed to get the first token's logits.
        p0 = min(mb, mr, s - 1)
        rows = s - p0
        self.metrics.prefill_tokens += s
        self.metrics.matched_base_tokens += mb
        self.metrics.matched_residual_tokens += view.matched_residual_len if cfg.mode.split else mb
        self.metrics.truncation_loss_tokens += view.truncated_tokens
        self._step_hits += mb
        base_rows = s - max(mb, p0)
        res_rows = s - max(mr, p0) if cfg.mode.split else base_rows
        width_n, rank = g.n_kv, self.config.rank

        if cfg.numerics:
            adapter = self.adapter(req.adapter_id)
            contexts = []
            for layer in range(g.num_layers):
                past = self._read_kv(view, layer, 0, p0)
                known_base = self._read_kv(view, layer, p0, mb, residual=False) if mb > p0 else None
                known_res = self._read_kv(view, layer, p0, mr, base=False) if cfg.mode.split and mr > p0 else None
                contexts.append(CacheContext(start=p0, past=past, known_base=known_base, known_res=known_res))
            result = run_layers(self.model, adapter, view.tokens[p0:], cfg.mode.forward_mode, contexts, cfg.block_size_keys)
            state.kv = []
            for layer, (ctx, out) in enumerate(zip(contexts, result.outputs)):
                kv = out.kv
                self.tree.write_rows(view, PoolKind.BASE, layer, mb, np.hstack([kv.k_base, kv.v_base])[mb - p0 :])
                if cfg.mode.split and mr < s:
                    self.tree.write_rows(view, PoolKind.RESIDUAL, layer, mr, np.hstack([kv.k_res, kv.v_res])[mr - p0 :])
                state.kv.append(ctx.past.concat(kv))
            flops = sum(out.flops for out in result.outputs)
            first = result.next_token
        else:
            for layer in range(g.num_layers):
                if mb < s:
                    self.tree.write_rows(view, PoolKind.BASE, layer, mb, s - mb)
                if cfg.mode.split and mr < s:
                    self.tree.write_rows(view, PoolKind.RESIDUAL, layer, mr, s - mr)
            flops = g.num_layers * layer_flops(g, rank, cfg.mode.split, rows, s, base_rows, res_rows)
            first = _pseudo_token(req.agent_id, s, g.vocab)
        flops += head_flops(g)
        self.metrics.base_recompute_flops += g.num_layers * projection_flops(base_rows, g.hidden, 2 * width_n)
        self.metrics.residual_recompute_flops += g.num_layers * projection_flops(res_rows, g.hidden, 2 * rank)
        read_rows = p0 + (max(mb, p0) - p0)
        read = read_rows * self._row_bytes(PoolKind.BASE)
        written = (s - mb) * self._row_bytes(PoolKind.BASE)
        if cfg.mode.split:
            read += (p0 + max(mr, p0) - p0) * self._row_bytes(PoolKind.RESIDUAL)
            written += (s - mr) * self._row_bytes(PoolKind.RESIDUAL)
        self._charge(flops, read + written)
        self._step_forward = True
        self.tree.commit(view)
        state.generated.append(first)

    def _read_kv(self, view: AgentCacheView, layer: int, lo: int, hi: int, base: bool = True, residual: bool = True) -> LayerKV:
        n = self.geometry.n_kv
        r = self.config.rank if self.config.mode.split else 0
        if base:
            rows = self.tree.read_rows(view, PoolKind.BASE, layer, lo, hi)
            k_base, v_base = rows[:, :n], rows[:, n:]
        else:
            k_base = v_base = np.zeros((hi - lo, n), dtype=DTYPE)
        if residual and r:
            rows = self.tree.read_rows(view, PoolKind.RESIDUAL, layer, lo, hi)
            k_res, v_res = rows[:, :r], rows[:, r:]
        else:
            k_res = v_res = np.zeros((hi - lo, r), dtype=DTYPE)
        return LayerKV(k_base, v_base, k_res, v_res)

    # -- decode ---------------------------------------------------------------------

    def _decode_one(self, state: AgentState) -> bool:
        view, req = state.view, state.request
        cfg, g = self.config, self.geometry
        token = state.generated[-1]
        pos = len(view.tokens)
        if cfg.numerics:
            adapter = self.adapter(req.adapter_id)
            contexts = [CacheContext(start=pos, past=kv) for kv in state.kv]
            result = run_layers(self.model, adapter, [token], cfg.mode.forward_mode, contexts, cfg.block_size_keys)
            base_rows = [np.hstack([o.kv.k_base, o.kv.v_base]) for o in result.outputs]
            res_rows = [np.hstack([o.kv.k_res, o.kv.v_res]) for o in result.outputs] if cfg.mode.split else None
            nxt = result.next_token
            flops = sum(o.flops for o in result.outputs)
        else:
            base_rows = res_rows = None
            nxt = _pseudo_token(req.agent_id, pos + 1, g.vocab)
            flops = g.num_layers * layer_flops(g, cfg.rank, cfg.mode.split, 1, pos + 1, 1, 1)
        try:
            self.tree.append_generated(view, [token], base_rows, res_rows)
        except NeedsEviction as exc:
            self.tree.evict(exc.kind, exc.needed)
            try:
                self.tree.append_generated(view, [token], base_rows, res_rows)
            except NeedsEviction:
                self.metrics.decode_stalls += 1
                return False
        if cfg.numerics:
            state.kv = [kv.concat(o.kv) for kv, o in zip(state.kv, result.outputs)]
        moved = (pos + 1) * self._row_bytes(PoolKind.BASE)
        if cfg.mode.split:
            moved += (pos + 1) * self._row_bytes(PoolKind.RESIDUAL)
        self._charge(flops + head_flops(g), moved)
        self._step_forward = True
        state.generated.append(nxt)
        return True

    # -- main loop ------------------------------------------------------------------

    def _has_work(self) -> bool:
        return bool(self.queue or self.active)

    def step(self) -> list[Event]:
        """One scheduling round; returns the events it produced."""
        events: list[Event] = []
        if not self._has_work():
            return events
        if not self.active and self.queue[0].arrival_time > self.clock:
            self.clock = self.queue[0].arrival_time  # idle until the next arrival
        self._step_flops = self._step_bytes = self._step_hits = 0
        self._step_forward = False
        evicted_before = self.tree.base.evicted_nodes + self.tree.residual.evicted_nodes

        running = [s for s in self.active.values() if not s.done]
        admitted_now = 0
        while self.queue and self.queue[0].arrival_time <= self.clock:
            req = self.queue[0]
            state = self._try_admit(req)
            if state is None:
                self.metrics.admission_failures += 1
                if not self.active and admitted_now == 0:
                    # Nothing holds a lock, so no amount of waiting frees more room.
                    self.queue.pop(0)
                    self._reject_cascade(req.request_id)
                    events.append(Event(self.clock, "rejected", req.agent_id, "does not fit in the pool"))
                    continue
                events.append(Event(self.clock, "admission_failed", req.agent_id))
                break
            self.queue.pop(0)
            self.active[req.request_id] = state
            admitted_now += 1
            self._prefill(state)
            events.append(Event(self.clock, "admitted", req.agent_id, f"base_hit={state.view.matched_base_len}"))

        batch = 0
        for state in running:
            if self._decode_one(state):
                batch += 1
        if batch:
            self._decode_batches.append(batch)

        if self._step_forward:
            self._charge(0, self.geometry.weight_bytes())
        self.clock += self.config.alpha * self._step_flops + self.config.beta * self._step_bytes
        self.metrics.total_flops += self._step_flops
        self.metrics.total_bytes_moved += self._step_bytes

        bytes_base, bytes_res = self.pools.base.bytes_used, self.pools.residual.bytes_used
        active = len(self.active)
        if active:
            self._per_agent_samples.append((bytes_base + bytes_res) / active)
        self.metrics.peak_active_agents = max(self.metrics.peak_active_agents, active)
        self.metrics.peak_bytes = max(self.metrics.peak_bytes, bytes_base + bytes_res)
        evicted_now = self.tree.base.evicted_nodes + self.tree.residual.evicted_nodes - evicted_before
        self.timeline.append(
            {
                "sim_time": self.clock,
                "active_agents": active,
                "decode_batch": batch,
                "bytes_base": bytes_base,
                "bytes_residual": bytes_res,
                "hits": self._step_hits,
                "evictions": evicted_now,
            }
        )

        for rid in [rid for rid, s in self.active.items() if s.done]:
            state = self.active.pop(rid)
            self.tree.release_view(state.view)
            self._final_context[rid] = list(state.request.prompt_tokens) + state.generated
            self._finished_requests.add(rid)
            self._finished_agents.add(state.request.agent_id)
            self.metrics.requests_completed += 1
            events.append(Event(self.clock, "completed", state.request.agent_id, f"tokens={len(state.generated)}"))
            self._release_dependents(rid, self.clock)
        self.metrics.steps += 1
        self.events.extend(events)
        return events

    def run(self) -> Metrics:
        while self._has_work():
            if self.metrics.steps >= self.config.max_steps:
                raise RuntimeError(f"no completion after {self.config.max_steps} steps")
            self.step()
        return self.report()

    def generated_tokens(self) -> dict[int, list[int]]:
        return {rid: ctx for rid, ctx in self._final_context.items()}

    def report(self) -> Metrics:
        m = self.metrics
        m.sim_time = self.clock
        m.per_agent_bytes = float(np.mean(self._per_agent_samples)) if self._per_agent_samples else 0.0
        m.avg_decode_batch_size = float(np.mean(self._decode_batches)) if self._decode_batches else 0.0
        m.cache_hit_rate = m.matched_base_tokens / m.prefill_tokens if m.prefill_tokens else 0.0
        m.residual_hit_rate = m.matched_residual_tokens / m.prefill_tokens if m.prefill_tokens else 0.0
        m.evictions_base = self.tree.base.evicted_nodes
        m.evictions_residual = self.tree.residual.evicted_nodes
        m.evicted_blocks_base = self.tree.base.evicted_blocks
        m.evicted_blocks_residual = self.tree.residual.evicted_blocks
        done = [
            wf for wf, reqs in self._workflow_requests.items() if reqs and reqs <= self._finished_requests
        ]
        m.workflows_completed = len(done)
        m.agents_completed = len(self._finished_agents)
        m.tasks_per_second = m.workflows_completed / m.sim_time if m.sim_time > 0 else 0.0
        return m

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TIMELINE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.timeline:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def check_hygiene(self) -> None:
        """Every live block is held by exactly its tree (no view references remain)."""
        if self.active:
            raise AssertionError(f"{len(self.active)} agent view(s) still active")
        for kind in (PoolKind.BASE, PoolKind.RESIDUAL):
            pool = self.pools[kind]
            held = self.tree.tree(kind).held_handles()
            counts: dict = defaultdict(int)
            for h in held:
                counts[h] += 1
            live = pool.live_handles()
            if set(live) != set(counts):
                raise AssertionError(f"{kind.value}: live blocks and tree-held blocks differ")
            for h in live:
                if pool.refcount(h) != counts[h]:
                    raise AssertionError(f"{kind.value} {h!r}: refcount {pool.refcount(h)} != tree holds {counts[h]}")
            if pool.reserved:
                raise AssertionError(f"{kind.value}: {pool.reserved} block(s) still reserved")


def run_trace(config: EngineConfig, trace: Trace, model: BaseModel | None = None) -> Engine:
    engine = Engine(config, model=model)
    engine.load_trace(trace)
    engine.run()
    return engine
