"""Append-only decision traces and the queries that explain them.

Every decision either agent takes is written as one JSON line carrying the
full score breakdown that produced it: dueling V/A/Q per factor for service
picks, per-child visit counts and UCT terms for avoidance picks.  Because
the selection rules are deterministic functions of those scores, a trace
can be audited without the model: re-running the stored scores through the
rule must reproduce the chosen action.  The file is flushed per record so a
crash loses at most the line being written.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

from .world import AVOID_ACTIONS, ServiceMove

SCHEMA_VERSION = 1
PHASES = ("service", "avoidance")


class TraceError(Exception):
    """Base class for trace failures."""


class TraceSchemaError(TraceError):
    """A record violates the schema or its selection invariant."""


class TraceQueryError(TraceError):
    """A query references a step, episode or action that is not in the trace."""


def observation_digest(values) -> str:
    """Short stable digest of an observation vector."""
    blob = json.dumps([float(v) for v in values])
    return hashlib.sha256(blob.encode("ascii")).hexdigest()[:16]


@dataclass
class DecisionRecord:
    """One decision with enough context to re-derive it."""

    phase: str
    episode: int
    step: int
    observation_digest: str
    chosen: dict
    alternatives: dict | list
    explored: bool = False
    terminal: str | None = None
    simulations: int | None = None

    def to_dict(self) -> dict:
        doc = {
            "kind": "decision",
            "phase": self.phase,
            "episode": self.episode,
            "step": self.step,
            "observation_digest": self.observation_digest,
            "chosen": self.chosen,
            "alternatives": self.alternatives,
            "explored": self.explored,
        }
        if self.terminal is not None:
            doc["terminal"] = self.terminal
        if self.simulations is not None:
            doc["simulations"] = self.simulations
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DecisionRecord":
        return cls(
            phase=doc["phase"],
            episode=doc["episode"],
            step=doc["step"],
            observation_digest=doc["observation_digest"],
            chosen=doc["chosen"],
            alternatives=doc["alternatives"],
            explored=doc.get("explored", False),
            terminal=doc.get("terminal"),
            simulations=doc.get("simulations"),
        )


def service_record(episode, step, obs, detail, explored=False,
                   terminal=None) -> DecisionRecord:
    """Build a service-phase record from a greedy-rollout step detail."""
    factors = []
    for gi, factor in enumerate(detail["factors"]):
        factors.append({
            "factor": "move" if gi == 0 else f"power_user_{gi - 1}",
            "value": factor["value"],
            "advantage": factor["advantage"],
            "q": factor["q"],
            "chosen": factor["chosen"],
        })
    action = detail["action"]
    return DecisionRecord(
        phase="service",
        episode=episode,
        step=step,
        observation_digest=observation_digest(obs),
        chosen={"move": int(action.move),
                "power_levels": [int(l) for l in action.power_levels]},
        alternatives={"factors": factors},
        explored=explored,
        terminal=terminal,
    )


def avoidance_record(episode, step, own, action, snapshot,
                     terminal=None) -> DecisionRecord:
    """Build an avoidance-phase record from a planning snapshot."""
    from .world import avoid_action_index  # local to avoid a wide import list

    children = [
        {
            "action": c.action_index,
            "name": c.action,
            "visits": c.visits,
            "mean_value": None if math.isnan(c.mean_value) else c.mean_value,
            "exploration": None if math.isinf(c.exploration) else c.exploration,
            "uct": None if math.isinf(c.uct) else c.uct,
        }
        for c in snapshot.children
    ]
    return DecisionRecord(
        phase="avoidance",
        episode=episode,
        step=step,
        observation_digest=observation_digest(
            [own.x, own.y, own.speed, own.heading, own.tilt]),
        chosen={"action": avoid_action_index(action), "name": action.name},
        alternatives=children,
        terminal=terminal,
        simulations=snapshot.simulations,
    )


# --- record validation --------------------------------------------------------


def _argmax_lowest(values) -> int:
    best = -math.inf
    idx = 0
    for i, v in enumerate(values):
        if v > best:
            best = v
            idx = i
    return idx


def record_violations(doc: dict) -> list[str]:
    """All invariant breaches of one parsed decision record."""
    problems = []
    phase = doc.get("phase")
    if phase not in PHASES:
        return [f"unknown phase {phase!r}"]
    for key in ("episode", "step", "observation_digest", "chosen", "alternatives"):
        if key not in doc:
            return [f"missing field {key!r}"]

    if phase == "avoidance":
        children = doc["alternatives"]
        if not isinstance(children, list) or len(children) != len(AVOID_ACTIONS):
            return [f"avoidance record must carry {len(AVOID_ACTIONS)} children"]
        visits = [c.get("visits", 0) for c in children]
        chosen = doc["chosen"].get("action")
        if not isinstance(chosen, int) or not 0 <= chosen < len(AVOID_ACTIONS):
            return [f"chosen action index {chosen!r} out of range"]
        if not doc.get("explored") and chosen != _argmax_lowest(visits):
            problems.append(
                f"chosen action {chosen} is not the visit-count argmax "
                f"{_argmax_lowest(visits)}")
        sims = doc.get("simulations")
        if sims is not None and sum(visits) != sims:
            problems.append(
                f"child visits sum to {sum(visits)}, expected {sims} simulations")
    else:
        alts = doc["alternatives"]
        factors = alts.get("factors") if isinstance(alts, dict) else None
        if not factors:
            return ["service record must carry factor breakdowns"]
        chosen = doc["chosen"]
        picks = [chosen.get("move")] + list(chosen.get("power_levels", []))
        if len(picks) != len(factors):
            return [f"{len(factors)} factors but {len(picks)} chosen indices"]
        if not doc.get("explored"):
            for pick, factor in zip(picks, factors):
                q = factor.get("q", [])
                if pick != _argmax_lowest(q):
                    problems.append(
                        f"factor {factor.get('factor')}: chosen {pick} is not "
                        f"the Q argmax {_argmax_lowest(q)}")
    return problems


# --- writing ------------------------------------------------------------------


class TraceWriter:
    """Single-writer append-only trace file (one JSON document per line)."""

    def __init__(self, path, run_id: str, seed: int, config_hash: str,
                 meta: dict | None = None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")
        self._last_step: dict[tuple, int] = {}
        header = {
            "kind": "header",
            "schema_version": SCHEMA_VERSION,
            "run_id": run_id,
            "seed": seed,
            "config_hash": config_hash,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        if meta:
            header["meta"] = meta
        self._write(header)

    def _write(self, doc: dict):
        self._fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        self._fh.write("\n")
        self._fh.flush()

    def record(self, rec: DecisionRecord):
        doc = rec.to_dict()
        problems = record_violations(doc)
        if problems:
            raise TraceSchemaError("; ".join(problems))
        key = (rec.phase, rec.episode)
        last = self._last_step.get(key)
        if last is not None and rec.step <= last:
            raise TraceSchemaError(
                f"step {rec.step} not increasing within {key} (last {last})")
        self._last_step[key] = rec.step
        self._write(doc)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- reading / validation -------------------------------------------------------


@dataclass
class TraceData:
    header: dict
    records: list
    partial: bool = False


def read_trace(path) -> TraceData:
    """Parse a trace; a truncated final line marks the trace partial."""
    header = None
    records = []
    partial = False
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                partial = True
                continue
            raise TraceError(f"unparseable record at line {i + 1}")
        if doc.get("kind") == "header":
            header = doc
        else:
            records.append(doc)
    if header is None:
        raise TraceError(f"{path} has no header line")
    return TraceData(header=header, records=records, partial=partial)


@dataclass
class ValidationReport:
    checked: int
    violations: list = field(default_factory=list)
    partial: bool = False

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        lines = [f"records checked: {self.checked}"]
        if self.partial:
            lines.append("note: final record truncated (partial write)")
        if self.violations:
            lines.append(f"violations: {len(self.violations)}")
            lines.extend(f"  record {idx}: {msg}" for idx, msg in self.violations)
        else:
            lines.append("violations: none")
        return "\n".join(lines)


def validate_trace(path) -> ValidationReport:
    """Re-check every record's invariants; lists violations by record index."""
    try:
        data = read_trace(path)
    except TraceError as exc:
        return ValidationReport(checked=0, violations=[(-1, str(exc))])
    report = ValidationReport(checked=len(data.records), partial=data.partial)
    seen_steps: dict[tuple, int] = {}
    for idx, doc in enumerate(data.records):
        for msg in record_violations(doc):
            report.violations.append((idx, msg))
        key = (doc.get("phase"), doc.get("episode"))
        step = doc.get("step")
        if isinstance(step, int):
            last = seen_steps.get(key)
            if last is not None and step <= last:
                report.violations.append(
                    (idx, f"step {step} not increasing within {key}"))
            seen_steps[key] = step
    return report


# --- queries ------------------------------------------------------------------


def _selection_scores(doc: dict):
    """(label, score) pairs under the phase's selection rule."""
    if doc["phase"] == "avoidance":
        return [(c["name"], float(c["visits"])) for c in doc["alternatives"]]
    pairs = []
    for factor in doc["alternatives"]["factors"]:
        for i, q in enumerate(factor["q"]):
            pairs.append((f"{factor['factor']}={i}", float(q)))
    return pairs


def _find_record(data: TraceData, step: int, episode: int, phase: str | None):
    for doc in data.records:
        if doc["step"] == step and doc["episode"] == episode:
            if phase is None or doc["phase"] == phase:
                return doc
    raise TraceQueryError(
        f"no record for step {step}, episode {episode}"
        + (f", phase {phase}" if phase else ""))


@dataclass
class Explanation:
    """Structured answer; to_text() renders the human-readable form."""

    query: str
    body: dict

    def to_text(self) -> str:
        q = self.query
        b = self.body
        if q == "why":
            lines = [
                f"step {b['step']} (episode {b['episode']}, {b['phase']}): "
                f"chose {b['chosen']}"]
            if b.get("explored"):
                lines.append("decision was an exploratory (epsilon-random) pick;"
                             " score maximality is waived")
            for fac in b["factors"]:
                lines.append(
                    f"  {fac['factor']}: picked {fac['chosen']} "
                    f"score={fac['score']:.6g} runner-up {fac['runner_up']} "
                    f"score={fac['runner_up_score']:.6g} "
                    f"margin={fac['margin']:.6g}")
            if b.get("terminal"):
                lines.append(f"  terminal verdict: {b['terminal']}")
            return "\n".join(lines)
        if q == "why-not":
            return (
                f"step {b['step']} (episode {b['episode']}, {b['phase']}): "
                f"{b['action']} scored {b['score']:.6g} vs chosen "
                f"{b['chosen']} at {b['chosen_score']:.6g}; "
                f"deficit {b['deficit']:.6g}")
        if q == "path":
            lines = [f"episode {b['episode']} ({b['phase']}): "
                     f"{len(b['steps'])} decisions"]
            for s in b["steps"]:
                suffix = " [explored]" if s["explored"] else ""
                lines.append(f"  step {s['step']}: {s['chosen']}{suffix}")
            if b.get("terminal"):
                lines.append(f"terminal verdict: {b['terminal']}"
                             + (f" (reward {b['terminal_reward']})"
                                if b.get("terminal_reward") is not None else ""))
            return "\n".join(lines)
        lines = [
            f"records: {b['records']}",
            f"episodes with verdicts: goal={b['goal']} "
            f"collision={b['collision']} timeout={b['timeout']}",
        ]
        if b.get("mean_margin") is not None:
            lines.append(f"mean decision margin: {b['mean_margin']:.6g}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"query": self.query, **self.body}


def _chosen_label(doc: dict) -> str:
    if doc["phase"] == "avoidance":
        return doc["chosen"]["name"]
    move = ServiceMove(doc["chosen"]["move"]).name.lower()
    levels = ",".join(str(l) for l in doc["chosen"]["power_levels"])
    return f"move={move} power_levels=[{levels}]"


def _factor_breakdowns(doc: dict) -> list[dict]:
    """Per-factor chosen/runner-up margins under the selection rule."""
    out = []
    if doc["phase"] == "avoidance":
        visits = [(c["visits"], c["name"]) for c in doc["alternatives"]]
        scores = [v for v, _ in visits]
        chosen_idx = doc["chosen"]["action"]
        order = sorted(range(len(scores)),
                       key=lambda i: (-scores[i], i))
        runner = order[1] if order[0] == chosen_idx else order[0]
        out.append({
            "factor": "avoidance",
            "chosen": visits[chosen_idx][1],
            "score": float(scores[chosen_idx]),
            "runner_up": visits[runner][1],
            "runner_up_score": float(scores[runner]),
            "margin": float(scores[chosen_idx] - scores[runner]),
        })
        return out
    picks = [doc["chosen"]["move"]] + list(doc["chosen"]["power_levels"])
    for pick, factor in zip(picks, doc["alternatives"]["factors"]):
        q = [float(x) for x in factor["q"]]
        order = sorted(range(len(q)), key=lambda i: (-q[i], i))
        runner = order[1] if order[0] == pick else order[0]
        out.append({
            "factor": factor["factor"],
            "chosen": pick,
            "score": q[pick],
            "runner_up": runner,
            "runner_up_score": q[runner],
            "margin": q[pick] - q[runner],
        })
    return out


def explain_why(data: TraceData, step: int, episode: int = 0,
                phase: str | None = None) -> Explanation:
    doc = _find_record(data, step, episode, phase)
    return Explanation("why", {
        "step": doc["step"],
        "episode": doc["episode"],
        "phase": doc["phase"],
        "chosen": _chosen_label(doc),
        "explored": doc.get("explored", False),
        "factors": _factor_breakdowns(doc),
        "terminal": doc.get("terminal"),
    })


def _resolve_action_score(doc: dict, action: str):
    """Score of a named alternative under the record's selection rule."""
    if doc["phase"] == "avoidance":
        children = doc["alternatives"]
        for c in children:
            if action in (c["name"], str(c["action"])):
                return c["name"], float(c["visits"])
        raise TraceQueryError(f"unknown avoidance action {action!r}")
    parts = action.split(":")
    factors = doc["alternatives"]["factors"]
    if parts[0] == "move" and len(parts) == 2:
        names = [m.name.lower() for m in ServiceMove]
        idx = int(parts[1]) if parts[1].isdigit() else (
            names.index(parts[1]) if parts[1] in names else -1)
        if not 0 <= idx < len(factors[0]["q"]):
            raise TraceQueryError(f"unknown move {parts[1]!r}")
        return f"move={parts[1]}", float(factors[0]["q"][idx])
    if parts[0] == "power" and len(parts) == 3:
        user, level = int(parts[1]), int(parts[2])
        if not 0 <= user < len(factors) - 1:
            raise TraceQueryError(f"unknown user index {user}")
        q = factors[user + 1]["q"]
        if not 0 <= level < len(q):
            raise TraceQueryError(f"unknown power level {level}")
        return f"power_user_{user}={level}", float(q[level])
    raise TraceQueryError(
        f"cannot parse action {action!r}; use 'move:<name>' or "
        f"'power:<user>:<level>' for service records")


def _chosen_score(doc: dict, action_label: str):
    if doc["phase"] == "avoidance":
        chosen = doc["chosen"]["action"]
        return doc["alternatives"][chosen]["name"], float(
            doc["alternatives"][chosen]["visits"])
    # service: compare within the factor the queried action belongs to
    factor_name = action_label.split("=")[0]
    picks = [doc["chosen"]["move"]] + list(doc["chosen"]["power_levels"])
    for pick, factor in zip(picks, doc["alternatives"]["factors"]):
        fname = factor["factor"]
        if (factor_name == "move" and fname == "move") or fname == factor_name:
            return f"{fname}={pick}", float(factor["q"][pick])
    raise TraceQueryError(f"no factor for {action_label!r}")


def explain_why_not(data: TraceData, step: int, action: str,
                    episode: int = 0, phase: str | None = None) -> Explanation:
    if phase is None and (action.startswith("move:") or action.startswith("power:")):
        phase = "service"
    doc = _find_record(data, step, episode, phase)
    label, score = _resolve_action_score(doc, action)
    chosen_label, chosen_score = _chosen_score(doc, label)
    return Explanation("why-not", {
        "step": doc["step"],
        "episode": doc["episode"],
        "phase": doc["phase"],
        "action": label,
        "score": score,
        "chosen": chosen_label,
        "chosen_score": chosen_score,
        "deficit": chosen_score - score,
    })


def explain_path(data: TraceData, episode: int,
                 phase: str = "avoidance") -> Explanation:
    steps = []
    terminal = None
    for doc in data.records:
        if doc["episode"] != episode or doc["phase"] != phase:
            continue
        steps.append({
            "step": doc["step"],
            "chosen": _chosen_label(doc),
            "explored": doc.get("explored", False),
        })
        if doc.get("terminal"):
            terminal = doc["terminal"]
    reward = {"goal": 1.0, "timeout": 0.1, "collision": 0.0}.get(terminal)
    return Explanation("path", {
        "episode": episode,
        "phase": phase,
        "steps": steps,
        "terminal": terminal,
        "terminal_reward": reward,
    })


def explain_summary(data: TraceData) -> Explanation:
    counts = {"goal": 0, "collision": 0, "timeout": 0}
    margins = []
    for doc in data.records:
        verdict = doc.get("terminal")
        if verdict in counts:
            counts[verdict] += 1
        for fac in _factor_breakdowns(doc):
            margins.append(fac["margin"])
    return Explanation("summary", {
        "records": len(data.records),
        "goal": counts["goal"],
        "collision": counts["collision"],
        "timeout": counts["timeout"],
        "mean_margin": (sum(margins) / len(margins)) if margins else None,
    })
