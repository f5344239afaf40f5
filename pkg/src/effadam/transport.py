"""In-process parameter-server rounds with exact payload bit accounting.

Trace format: one JSON object per line, one line per round::

    {"t": 3,
     "up": [[1032, "<hex payload>"], ...],     # one entry per worker, index order
     "down": [1032, "<hex payload>"],
     "ledger": {"uplink_bits": 30960, "downlink_bits": 3096, "rounds": 3}}

Payload hex strings are the packed bytes of the message, MSB first, padded
with zero bits to a whole byte. Only payload bits are counted; there is no
framing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from effadam.node import (
    HyperParams,
    ProtocolError,
    ServerState,
    WorkerState,
    server_step,
    step,
    worker_apply_broadcast,
)
from effadam.quantize import QuantizedMessage, parse_kind


@dataclass(frozen=True)
class BitLedger:
    uplink_bits: int = 0
    downlink_bits: int = 0
    rounds: int = 0

    def charge(self, uplink: int, downlink: int) -> "BitLedger":
        return BitLedger(self.uplink_bits + uplink, self.downlink_bits + downlink, self.rounds + 1)

    def downlink_bits_per_recipient(self, n_workers: int) -> int:
        """Downlink volume if the broadcast is sent separately to each worker."""
        return self.downlink_bits * n_workers


@dataclass(frozen=True)
class RoundTrace:
    t: int
    per_worker_msgs: tuple[QuantizedMessage, ...]
    broadcast: QuantizedMessage
    ledger_snapshot: BitLedger

    def to_line(self) -> str:
        record = {
            "t": self.t,
            "up": [[m.bit_len, m.payload.hex()] for m in self.per_worker_msgs],
            "down": [self.broadcast.bit_len, self.broadcast.payload.hex()],
            "ledger": {
                "uplink_bits": self.ledger_snapshot.uplink_bits,
                "downlink_bits": self.ledger_snapshot.downlink_bits,
                "rounds": self.ledger_snapshot.rounds,
            },
        }
        return json.dumps(record, separators=(",", ":"))


def parse_trace_line(line: str, uplink_spec: str, downlink_spec: str, dim: int) -> RoundTrace:
    rec = json.loads(line)
    up_kind, down_kind = parse_kind(uplink_spec), parse_kind(downlink_spec)
    ups = tuple(QuantizedMessage(up_kind, bytes.fromhex(h), n, dim) for n, h in rec["up"])
    n, h = rec["down"]
    down = QuantizedMessage(down_kind, bytes.fromhex(h), n, dim)
    led = rec["ledger"]
    return RoundTrace(rec["t"], ups, down, BitLedger(led["uplink_bits"], led["downlink_bits"], led["rounds"]))


def run_round(
    workers: Sequence[WorkerState],
    server: ServerState,
    h: HyperParams,
    grads: Sequence[np.ndarray],
    ledger: Optional[BitLedger] = None,
) -> tuple[list[WorkerState], ServerState, RoundTrace]:
    """One lockstep round: every worker sends, the server broadcasts, all apply it."""
    if len(workers) == 0:
        raise ProtocolError("a round needs at least one worker")
    if len(grads) != len(workers):
        raise ProtocolError(f"{len(workers)} workers but {len(grads)} gradients")
    ledger = ledger or BitLedger()
    t = server.t

    stepped = [step(w, h, g) for w, g in zip(workers, grads)]
    msgs = tuple(msg for _, msg, _ in stepped)
    server, broadcast = server_step(server, msgs, len(workers))
    workers = [worker_apply_broadcast(w, broadcast) for w, _, _ in stepped]

    ledger = ledger.charge(sum(m.bit_len for m in msgs), broadcast.bit_len)
    return workers, server, RoundTrace(t, msgs, broadcast, ledger)


def iterate_synced(workers: Iterable[WorkerState], server: ServerState) -> bool:
    """True iff every worker holds exactly the server's iterate."""
    return all(np.array_equal(w.x, server.x) for w in workers)


@dataclass
class Cluster:
    """N workers and a server, advanced one round at a time."""

    workers: list[WorkerState]
    server: ServerState
    ledger: BitLedger = field(default_factory=BitLedger)

    @property
    def n_workers(self) -> int:
        return len(self.workers)

    def round(self, h: HyperParams, grads: Sequence[np.ndarray]) -> RoundTrace:
        self.workers, self.server, trace = run_round(self.workers, self.server, h, grads, self.ledger)
        self.ledger = trace.ledger_snapshot
        return trace

    def synced(self) -> bool:
        return iterate_synced(self.workers, self.server)
