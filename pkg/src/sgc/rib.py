"""Routing Information Base: per-router map from names to routing state.

Each entry records the connection the name was advertised over (upstream),
the set of connections subscribed downstream (sinks), the topic's
certificate, and a bounded LRU of advertisement nonces for dedup. Entries
are marked stale rather than deleted when their upstream connection drops,
so a re-advertisement restores routing without tearing down subscriber
state.

All operations are plain in-memory mutations intended to run on a single
event loop: reads never block behind writes, and writes are serialized by
the loop itself.
"""

from __future__ import annotations

import enum
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional

from .crypto import Certificate
from .naming import GdpName

# Opaque handle for one live peer/proxy connection; unique per router
# lifetime, never reused while live.
ConnectionId = int

NONCE_CAPACITY = 1024


class LruSet:
    """Bounded set that evicts its least-recently-added member."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: "OrderedDict" = OrderedDict()

    def add(self, item) -> bool:
        """Record ``item``; returns False when it was already present."""
        if item in self._items:
            self._items.move_to_end(item)
            return False
        self._items[item] = None
        if len(self._items) > self.capacity:
            self._items.popitem(last=False)
        return True

    def __contains__(self, item) -> bool:
        return item in self._items

    def __len__(self) -> int:
        return len(self._items)


class InsertResult(enum.Enum):
    FRESH = "fresh"
    DUPLICATE = "duplicate"


class AddSinkResult(enum.Enum):
    ADDED = "added"
    UNKNOWN_NAME = "unknown-name"


@dataclass
class RibEntry:
    name: GdpName
    upstream: ConnectionId
    cert: Certificate
    last_advertised: float
    sinks: set = field(default_factory=set)
    stale: bool = False
    seen_nonces: LruSet = field(default_factory=lambda: LruSet(NONCE_CAPACITY))
    # Replayable control blobs: the verified advertisement payload (served
    # in RIB responses and re-floods) and the last verified subscribe
    # credential (re-sent upstream after a reconnect).
    adv_payload: Optional[bytes] = None
    subscribe_payload: Optional[bytes] = None


class RoutingInformationBase:
    def __init__(self):
        self._entries: Dict[GdpName, RibEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def seen(self, name: GdpName, nonce: int) -> bool:
        """True when this (name, nonce) advertisement was already recorded."""
        entry = self._entries.get(name)
        return entry is not None and nonce in entry.seen_nonces

    def insert_advertisement(
        self,
        name: GdpName,
        from_conn: ConnectionId,
        cert: Certificate,
        nonce: int,
        adv_payload: Optional[bytes] = None,
    ) -> InsertResult:
        """Record a verified advertisement; dedups on (name, nonce).

        The caller must have verified the certificate and signature. A
        fresh nonce updates the upstream to ``from_conn`` and revives a
        stale entry while keeping its sinks.
        """
        entry = self._entries.get(name)
        if entry is None:
            entry = RibEntry(
                name=name,
                upstream=from_conn,
                cert=cert,
                last_advertised=time.monotonic(),
            )
            entry.seen_nonces.add(nonce)
            entry.adv_payload = adv_payload
            self._entries[name] = entry
            return InsertResult.FRESH
        if not entry.seen_nonces.add(nonce):
            return InsertResult.DUPLICATE
        entry.upstream = from_conn
        entry.cert = cert
        entry.last_advertised = time.monotonic()
        entry.stale = False
        entry.sinks.discard(from_conn)  # an upstream is never its own sink
        if adv_payload is not None:
            entry.adv_payload = adv_payload
        return InsertResult.FRESH

    def add_sink(self, name: GdpName, sink: ConnectionId) -> AddSinkResult:
        entry = self._entries.get(name)
        if entry is None or entry.stale:
            return AddSinkResult.UNKNOWN_NAME
        if sink == entry.upstream:
            raise ValueError("a sink may not equal the entry's upstream")
        entry.sinks.add(sink)
        return AddSinkResult.ADDED

    def set_subscribe_payload(self, name: GdpName, payload: bytes) -> None:
        entry = self._entries.get(name)
        if entry is not None:
            entry.subscribe_payload = payload

    def lookup(self, name: GdpName) -> Optional[RibEntry]:
        """Routing lookup; stale entries are invisible until re-advertised."""
        entry = self._entries.get(name)
        if entry is None or entry.stale:
            return None
        return entry

    def get(self, name: GdpName) -> Optional[RibEntry]:
        """Raw entry access, stale included (instrumentation and dumps)."""
        return self._entries.get(name)

    def remove_connection(self, conn: ConnectionId) -> List[GdpName]:
        """Drop ``conn`` everywhere; returns the names whose state changed."""
        affected = []
        for name, entry in self._entries.items():
            touched = False
            if conn in entry.sinks:
                entry.sinks.discard(conn)
                touched = True
            if entry.upstream == conn and not entry.stale:
                entry.stale = True
                touched = True
            if touched:
                affected.append(name)
        return affected

    def entries(self) -> Iterator[RibEntry]:
        return iter(self._entries.values())

    def dump(self) -> Iterator[dict]:
        """One JSON-ready object per entry: {name_hex, upstream, sinks, stale}."""
        for entry in self._entries.values():
            yield {
                "name_hex": entry.name.hex(),
                "upstream": entry.upstream,
                "sinks": sorted(entry.sinks),
                "stale": entry.stale,
            }
