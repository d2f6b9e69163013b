"""Semantic fixups applied to recorded entity data.

* event activation one-hots (upgrade-style "finished before now" flags)
* identity stabilization: re-associating churned UIDs by position and
  recalling the last known quantity of entities that drop out of view
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousMatch, SchemaInvalid
from .replay import Observation, ReplaySequence


@dataclass(frozen=True)
class EventActivationTable:
    entries: tuple[tuple[int, int], ...]  # (event_id, finished_step)
    total_events: int

    def __post_init__(self):
        entries = tuple((int(e), int(s)) for e, s in self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [e for e, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("event ids must be unique")
        for event_id, finished in entries:
            if not 0 <= event_id < self.total_events:
                raise ValueError(f"event id {event_id} outside [0, {self.total_events})")
            if finished < 0:
                raise ValueError(f"finished step for event {event_id} is negative")


def active_onehot(table: EventActivationTable, step: int) -> np.ndarray:
    """Bit ``i`` is set iff event ``i`` finished strictly before ``step``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    bits = np.zeros(table.total_events, dtype=np.uint8)
    for event_id, finished in table.entries:
        if step > finished:
            bits[event_id] = 1
    return bits


def stabilize_identity(seq: ReplaySequence, match_radius: float = 0.0) -> ReplaySequence:
    """Undo UID churn and recall quantities hidden while unobserved.

    A UID never seen before is rewritten to an earlier UID that is absent at
    the current step when its last known position lies within
    ``match_radius``. The rewrite is remembered, so later observations of the
    churned UID map to the same original. Quantity-role fields reading zero
    are replaced with the last nonzero value seen for that (stabilized) UID,
    or the schema default if none has been seen yet.
    """
    schema = seq.schema
    pos = schema.position_fields
    if pos is None:
        raise SchemaInvalid("stabilize_identity needs a position field pair")
    if seq.observations is None:
        return seq
    id_name = schema.instance_id
    xname, yname = pos
    quantities = schema.quantity_fields
    r2 = float(match_radius) ** 2

    alias: dict[int, int] = {}
    seen: set[int] = set()
    last_pos: dict[int, tuple[float, float]] = {}
    last_qty: dict[str, dict[int, object]] = {q.name: {} for q in quantities}

    out = []
    for obs in seq.observations:
        ents = obs.entities
        if ents is None or len(ents) == 0:
            out.append(obs)
            continue
        raw = ents[id_name].tolist()
        xs = ents[xname].tolist()
        ys = ents[yname].tolist()
        out_ids = [alias.get(u, u) for u in raw]
        is_new = [u not in seen and u not in alias for u in raw]
        candidates = []
        if any(is_new):
            present = {o for o, n in zip(out_ids, is_new) if not n}
            candidates = sorted(u for u in seen if u not in present)
        for k, new in enumerate(is_new):
            if not new or not candidates:
                continue
            hits = [
                c
                for c in candidates
                if (last_pos[c][0] - xs[k]) ** 2 + (last_pos[c][1] - ys[k]) ** 2 <= r2
            ]
            if len(hits) > 1:
                raise AmbiguousMatch(
                    f"step {obs.step}: new uid {raw[k]} matches prior uids {sorted(hits)} "
                    f"within radius {match_radius}"
                )
            if hits:
                c = hits[0]
                alias[raw[k]] = c
                out_ids[k] = c
                candidates.remove(c)

        changed = out_ids != raw
        new_ents = ents.copy() if (changed or quantities) else ents
        if changed:
            new_ents[id_name] = out_ids
        for q in quantities:
            memory = last_qty[q.name]
            vals = new_ents[q.name].tolist()
            for k, (uid, v) in enumerate(zip(out_ids, vals)):
                if v == 0:
                    vals[k] = memory.get(uid, q.default)
                else:
                    memory[uid] = v
            new_ents[q.name] = vals
        if quantities and new_ents.tobytes() == ents.tobytes():
            new_ents = ents

        for uid, x, y in zip(out_ids, xs, ys):
            seen.add(uid)
            last_pos[uid] = (x, y)
        if new_ents is ents:
            out.append(obs)
        else:
            out.append(Observation(obs.step, new_ents, obs.scalars, obs.planes))
    return ReplaySequence(schema, seq.metadata, out, seq.declared_step_count)
