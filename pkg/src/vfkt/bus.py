"""In-memory message bus for the party/server protocol simulation.

Channels are ordered FIFO queues keyed by (sender, recipient). Every send
is recorded in a trace as {from, to, kind, shape, checksum} -- never the
payload itself -- so privacy properties (who saw what kind of message) can
be asserted from the trace alone, and optionally streamed to a JSON-lines
sink for audit.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from typing import Any

import numpy as np


class ChannelEmpty(RuntimeError):
    pass


def _payload_fingerprint(payload: Any):
    """(shape, checksum) of a payload without retaining its content."""
    h = hashlib.sha256()
    shape: list | None

    def feed(obj):
        if isinstance(obj, np.ndarray):
            h.update(str(obj.shape).encode())
            h.update(np.ascontiguousarray(obj).tobytes())
        elif isinstance(obj, (tuple, list)):
            for item in obj:
                feed(item)
        elif obj is None:
            h.update(b"none")
        else:
            h.update(repr(obj).encode())

    if isinstance(payload, np.ndarray):
        shape = list(payload.shape)
    elif isinstance(payload, (tuple, list)) and all(isinstance(p, np.ndarray) for p in payload):
        shape = [list(p.shape) for p in payload]
    else:
        shape = None
    feed(payload)
    return shape, h.hexdigest()[:16]


@dataclass(frozen=True)
class BusMessage:
    sender: str
    recipient: str
    kind: str
    payload: Any


class MessageBus:
    """Ordered, reliable, in-memory point-to-point channels with tracing."""

    def __init__(self, trace_path=None):
        self._channels: dict[tuple[str, str], deque[BusMessage]] = {}
        self.trace: list[dict] = []
        self._trace_path = trace_path
        if trace_path is not None:
            # truncate any stale trace
            open(trace_path, "w").close()

    def send(self, sender: str, recipient: str, kind: str, payload: Any) -> None:
        msg = BusMessage(sender, recipient, kind, payload)
        self._channels.setdefault((sender, recipient), deque()).append(msg)
        shape, checksum = _payload_fingerprint(payload)
        record = {"from": sender, "to": recipient, "kind": kind,
                  "shape": shape, "checksum": checksum}
        self.trace.append(record)
        if self._trace_path is not None:
            with open(self._trace_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def recv(self, sender: str, recipient: str) -> BusMessage:
        chan = self._channels.get((sender, recipient))
        if not chan:
            raise ChannelEmpty(f"no message from {sender!r} to {recipient!r}")
        return chan.popleft()

    def messages_to(self, recipient: str) -> list[dict]:
        return [r for r in self.trace if r["to"] == recipient]

    def messages_of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.trace if r["kind"] == kind]
