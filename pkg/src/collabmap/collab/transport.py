"""In-process message transport with per-agent FIFO queues.

Deterministic mode delivers in global (timestamp, agent_id) order. Live mode
picks the next agent at random among non-empty queues, which preserves
per-agent order but interleaves agents arbitrarily.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import Disconnect
from .messages import EndOfStream, FrameSubmission, KeyframeSubmission, decode, encode


def _timestamp(msg) -> float:
    if isinstance(msg, (FrameSubmission, KeyframeSubmission)):
        return float(msg.frame.timestamp)
    return np.inf


class Channel:
    """Lossless ordered per-agent queue; optionally round-trips through the wire format."""

    def __init__(self, agent_id: int, wire: bool = False):
        self.agent_id = agent_id
        self.wire = wire
        self._q: deque = deque()
        self.closed = False
        self.disconnected = False
        self._last_t = -np.inf

    def send(self, msg):
        if self.closed:
            raise Disconnect(f"agent {self.agent_id} channel is closed")
        t = _timestamp(msg)
        if np.isfinite(t):
            if t < self._last_t:
                raise ValueError(f"agent {self.agent_id}: timestamp {t} after {self._last_t}")
            self._last_t = t
        self._q.append(encode(msg) if self.wire else msg)
        if isinstance(msg, EndOfStream):
            self.closed = True

    def disconnect(self):
        """Drop the link: pending messages stay deliverable, nothing more is accepted."""
        self.closed = True
        self.disconnected = True

    def peek(self):
        item = self._q[0]
        return decode(item) if self.wire else item

    def receive(self):
        item = self._q.popleft()
        return decode(item) if self.wire else item

    def __len__(self):
        return len(self._q)


class Transport:
    def __init__(self, agent_ids, deterministic: bool = True, seed: int = 0, wire: bool = False):
        self.channels = {a: Channel(a, wire) for a in sorted(agent_ids)}
        self.deterministic = deterministic
        self.rng = np.random.default_rng(seed)

    def send(self, msg):
        self.channels[msg.agent_id].send(msg)

    def pending(self) -> int:
        return sum(len(c) for c in self.channels.values())

    def next(self):
        """Pop the next message to deliver, or None when all queues are empty."""
        ready = [a for a, c in self.channels.items() if len(c)]
        if not ready:
            return None
        if self.deterministic:
            a = min(ready, key=lambda a: (_timestamp(self.channels[a].peek()), a))
        else:
            a = ready[int(self.rng.integers(len(ready)))]
        return self.channels[a].receive()

    def drain(self):
        while True:
            msg = self.next()
            if msg is None:
                return
            yield msg


def frame_messages(streams, disconnect_after: dict | None = None) -> dict:
    """Per-agent FrameSubmission lists from mission streams, truncated on disconnect."""
    disconnect_after = disconnect_after or {}
    out = {}
    for aid in sorted(streams):
        frames = [f.public() if hasattr(f, "public") else f for f in streams[aid].frames]
        if aid in disconnect_after:
            frames = frames[:disconnect_after[aid]]
        msgs = [FrameSubmission(aid, f) for f in frames]
        if aid not in disconnect_after:
            msgs.append(EndOfStream(aid))
        out[aid] = msgs
    return out


def replay(server, messages: dict, deterministic: bool = True, seed: int = 0, wire: bool = False):
    """Push pre-built per-agent message lists through a transport into ``server``."""
    tr = Transport(messages, deterministic=deterministic, seed=seed, wire=wire)
    for aid, msgs in messages.items():
        for m in msgs:
            tr.send(m)
        if not msgs or not isinstance(msgs[-1], EndOfStream):
            tr.channels[aid].disconnect()
    updates = []
    for msg in tr.drain():
        updates += server.ingest(msg) or []
    return updates
