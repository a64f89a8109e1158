"""Synthetic agent-workflow traces: generation, JSON-lines serialization and validation.

A trace file starts with one ``{"kind": "meta", ...}`` line followed by one
record per line. Records either embed their tokens or give ``token_count``
plus ``seed`` so long contexts stay compact; ``shared_context`` names a
prefix (also count + seed) that every record carrying it starts with.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

TRACE_VERSION = 1
PATTERNS = ("react", "mapreduce")
RECORD_KINDS = ("spawn", "message")
_ADAPTER_RE = re.compile(r"^lora-(\d+)$")


class TraceError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class TokenSpec:
    token_count: int
    seed: int

    def materialize(self, vocab: int) -> list[int]:
        rng = np.random.default_rng(self.seed)
        return rng.integers(0, vocab, size=self.token_count).tolist()

    def to_dict(self) -> dict:
        return {"token_count": self.token_count, "seed": self.seed}


@dataclass(frozen=True)
class TraceRecord:
    time: float
    workflow_id: str
    agent_id: str
    adapter_id: str
    kind: str
    max_new_tokens: int
    parent_agent: str | None = None
    tokens: tuple[int, ...] | None = None
    token_count: int | None = None
    seed: int | None = None
    shared_context: TokenSpec | None = None

    def own_tokens(self, vocab: int) -> list[int]:
        if self.tokens is not None:
            return list(self.tokens)
        return TokenSpec(self.token_count, self.seed).materialize(vocab)

    def context_tokens(self, vocab: int) -> list[int]:
        """Shared prefix (if any) followed by the record's own tokens."""
        head = self.shared_context.materialize(vocab) if self.shared_context else []
        return head + self.own_tokens(vocab)

    def to_dict(self) -> dict:
        d = {
            "time": self.time,
            "workflow_id": self.workflow_id,
            "agent_id": self.agent_id,
            "adapter_id": self.adapter_id,
            "kind": self.kind,
            "max_new_tokens": self.max_new_tokens,
            "parent_agent": self.parent_agent,
        }
        if self.tokens is not None:
            d["tokens"] = list(self.tokens)
        else:
            d["token_count"] = self.token_count
            d["seed"] = self.seed
        if self.shared_context is not None:
            d["shared_context"] = self.shared_context.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, line: int | None = None) -> "TraceRecord":
        if not isinstance(d, dict):
            raise TraceError("record must be a JSON object", line)
        required = ("time", "workflow_id", "agent_id", "adapter_id", "kind", "max_new_tokens")
        missing = [k for k in required if k not in d]
        if missing:
            raise TraceError(f"missing field(s) {', '.join(missing)}", line)
        known = set(required) | {"parent_agent", "tokens", "token_count", "seed", "shared_context"}
        extra = sorted(set(d) - known)
        if extra:
            raise TraceError(f"unknown field(s) {', '.join(extra)}", line)
        if d["kind"] not in RECORD_KINDS:
            raise TraceError(f"kind must be one of {RECORD_KINDS}, got {d['kind']!r}", line)
        if not isinstance(d["time"], (int, float)) or isinstance(d["time"], bool) or d["time"] < 0:
            raise TraceError("time must be a non-negative number", line)
        if not isinstance(d["max_new_tokens"], int) or d["max_new_tokens"] < 1:
            raise TraceError("max_new_tokens must be an integer >= 1", line)
        for key in ("workflow_id", "agent_id", "adapter_id"):
            if not isinstance(d[key], str) or not d[key]:
                raise TraceError(f"{key} must be a non-empty string", line)
        has_tokens = "tokens" in d
        has_spec = "token_count" in d or "seed" in d
        if has_tokens == has_spec:
            raise TraceError("give either tokens or token_count+seed", line)
        tokens = None
        if has_tokens:
            if not isinstance(d["tokens"], list) or not all(isinstance(t, int) and t >= 0 for t in d["tokens"]):
                raise TraceError("tokens must be a list of non-negative integers", line)
            tokens = tuple(d["tokens"])
        else:
            if not isinstance(d.get("token_count"), int) or d["token_count"] < 0 or not isinstance(d.get("seed"), int):
                raise TraceError("token_count and seed must both be integers (count >= 0)", line)
        shared = None
        if d.get("shared_context") is not None:
            sc = d["shared_context"]
            if not isinstance(sc, dict) or not isinstance(sc.get("token_count"), int) or not isinstance(sc.get("seed"), int):
                raise TraceError("shared_context needs integer token_count and seed", line)
            shared = TokenSpec(sc["token_count"], sc["seed"])
        return cls(
            time=float(d["time"]),
            workflow_id=d["workflow_id"],
            agent_id=d["agent_id"],
            adapter_id=d["adapter_id"],
            kind=d["kind"],
            max_new_tokens=d["max_new_tokens"],
            parent_agent=d.get("parent_agent"),
            tokens=tokens,
            token_count=None if has_tokens else d["token_count"],
            seed=None if has_tokens else d["seed"],
            shared_context=shared,
        )


@dataclass
class Trace:
    meta: dict = field(default_factory=dict)
    records: list[TraceRecord] = field(default_factory=list)

    @property
    def tool_latency(self) -> float:
        return float(self.meta.get("tool_latency", 0.1))

    @property
    def workflows(self) -> list[str]:
        return sorted({r.workflow_id for r in self.records})


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def serialize_trace(trace: Trace) -> str:
    lines = [_dumps({"kind": "meta", **trace.meta})]
    lines += [_dumps(r.to_dict()) for r in trace.records]
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> Trace:
    """Parse JSON-lines text; errors name the 1-based line number."""
    trace = Trace()
    for no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceError(f"not valid JSON ({exc.msg})", no) from None
        if isinstance(obj, dict) and obj.get("kind") == "meta":
            if trace.records or trace.meta:
                raise TraceError("meta record must be the first line", no)
            trace.meta = {k: v for k, v in obj.items() if k != "kind"}
            continue
        trace.records.append(TraceRecord.from_dict(obj, no))
    return trace


def adapter_index(adapter_id: str) -> int | None:
    m = _ADAPTER_RE.match(adapter_id)
    return int(m.group(1)) if m else None


def validate_trace(trace: Trace, vocab: int | None = None, num_adapters: int | None = None) -> None:
    """Reject traces the engine cannot run. Line numbers count the meta line."""
    offset = 2 if trace.meta else 1
    seen_agents: dict[str, str] = {}
    last_time = 0.0
    for i, rec in enumerate(trace.records):
        line = i + offset
        if rec.time < last_time:
            raise TraceError(f"time {rec.time} goes backwards (previous {last_time})", line)
        last_time = rec.time
        if num_adapters is not None:
            k = adapter_index(rec.adapter_id)
            if k is None or k >= num_adapters:
                raise TraceError(f"adapter {rec.adapter_id!r} is not defined by the config ({num_adapters} adapters)", line)
        if rec.kind == "spawn":
            if rec.agent_id in seen_agents:
                raise TraceError(f"agent {rec.agent_id!r} spawned twice", line)
            # Parents must already exist, which also rules out cycles.
            if rec.parent_agent is not None and rec.parent_agent not in seen_agents:
                raise TraceError(f"parent {rec.parent_agent!r} has not been spawned yet", line)
            seen_agents[rec.agent_id] = rec.adapter_id
        else:
            if rec.agent_id not in seen_agents:
                raise TraceError(f"message to unknown agent {rec.agent_id!r}", line)
            if seen_agents[rec.agent_id] != rec.adapter_id:
                raise TraceError(f"agent {rec.agent_id!r} changed adapter", line)
            if rec.parent_agent is not None:
                raise TraceError("message records cannot name a parent", line)
        if vocab is not None and rec.tokens is not None and any(t >= vocab for t in rec.tokens):
            raise TraceError(f"token id outside vocab of {vocab}", line)
        if rec.parent_agent is None and rec.kind == "spawn" and rec.shared_context is None:
            if (rec.tokens is not None and not rec.tokens) or rec.token_count == 0:
                raise TraceError("root spawn has an empty context", line)


def gen_trace(
    pattern: str,
    workflows: int,
    agents_per_workflow: int,
    shared_context_tokens: int,
    dynamic_tokens: int,
    seed: int,
    arrival_rate: float = 2.0,
    tool_latency: float = 0.1,
    tool_tokens: int = 100,
    max_new_tokens: int = 256,
    turns: int = 1,
    context_scope: str = "global",
) -> Trace:
    """Build a ReAct (sequential chain) or MapReduce (parallel fan-out) trace.

    Workflows start at exponential inter-arrival times with mean
    ``1 / arrival_rate``. Every agent has its own adapter ``lora-<k>``.
    ReAct children inherit the parent's final context and add a tool
    response plus their own dynamic tokens; each record in a chain is
    nominally ``tool_latency`` after the previous one (the engine still waits
    for the parent to finish). ``turns > 1`` adds message records that
    resume the same agent with another tool response.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"pattern must be one of {PATTERNS}")
    if min(workflows, agents_per_workflow, turns) < 1:
        raise ValueError("workflows, agents_per_workflow and turns must be >= 1")
    if shared_context_tokens < 0 or dynamic_tokens < 0 or tool_tokens < 0:
        raise ValueError("token counts must be >= 0")
    if shared_context_tokens + dynamic_tokens < 1:
        raise ValueError("agents need at least one context token")
    if arrival_rate <= 0:
        raise ValueError("arrival_rate must be positive")
    if context_scope not in ("global", "workflow"):
        raise ValueError("context_scope must be 'global' or 'workflow'")
    rng = np.random.default_rng(seed)

    def next_seed() -> int:
        return int(rng.integers(0, 2**31 - 1))

    global_ctx = TokenSpec(shared_context_tokens, next_seed()) if shared_context_tokens else None
    starts = np.concatenate([[0.0], np.cumsum(rng.exponential(1.0 / arrival_rate, size=workflows - 1))])
    records: list[tuple[float, int, TraceRecord]] = []
    order = 0
    for w in range(workflows):
        wf = f"wf{w}"
        if shared_context_tokens and context_scope == "workflow":
            ctx = TokenSpec(shared_context_tokens, next_seed())
        else:
            ctx = global_ctx
        t0 = round(float(starts[w]), 6)
        t = t0
        parent = None
        for k in range(agents_per_workflow):
            agent = f"{wf}-a{k}"
            adapter = f"lora-{w * agents_per_workflow + k}"
            if pattern == "mapreduce":
                t = t0
            first = pattern == "mapreduce" or k == 0
            rec = TraceRecord(
                time=round(t, 6),
                workflow_id=wf,
                agent_id=agent,
                adapter_id=adapter,
                kind="spawn",
                max_new_tokens=max_new_tokens,
                parent_agent=None if first else parent,
                token_count=dynamic_tokens if first else tool_tokens + dynamic_tokens,
                seed=next_seed(),
                shared_context=ctx if first else None,
            )
            records.append((rec.time, order, rec))
            order += 1
            for _ in range(turns - 1):
                t += tool_latency
                msg = TraceRecord(
                    time=round(t, 6),
                    workflow_id=wf,
                    agent_id=agent,
                    adapter_id=adapter,
                    kind="message",
                    max_new_tokens=max_new_tokens,
                    token_count=tool_tokens,
                    seed=next_seed(),
                )
                records.append((msg.time, order, msg))
                order += 1
            t += tool_latency
            parent = agent
    records.sort(key=lambda item: (item[0], item[1]))
    meta = {
        "version": TRACE_VERSION,
        "pattern": pattern,
        "workflows": workflows,
        "agents_per_workflow": agents_per_workflow,
        "shared_context_tokens": shared_context_tokens,
        "dynamic_tokens": dynamic_tokens,
        "seed": seed,
        "arrival": "exponential",
        "arrival_rate": arrival_rate,
        "tool_latency": tool_latency,
        "tool_tokens": tool_tokens,
        "max_new_tokens": max_new_tokens,
        "turns": turns,
        "context_scope": context_scope,
    }
    return Trace(meta=meta, records=[r for _, _, r in records])
