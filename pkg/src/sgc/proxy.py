"""The bridge between a local publish/subscribe bus and the global mesh.

The local bus is an in-process broker plus a TCP endpoint speaking one
UnifiedMessage JSON object per line (UTF-8, LF-terminated), which also
lets non-native software participate. For each configured public topic the
proxy derives the global name from the topic's metadata, announces or
subscribes on the mesh, and converts traffic in both directions: local
messages are wrapped in the unified format, sealed with the topic's
pre-shared key, and signed; mesh packets are verified, opened, and
republished locally. Private topics generate no mesh traffic at all.

Ingress from the bus never blocks on mesh sends: each publishing topic
has a bounded queue (depth 256, drop-oldest) drained by its own task,
and sealing runs on a worker thread in batches so signing stays off the
event loop.
"""

from __future__ import annotations

import asyncio
import base64
import dataclasses
import itertools
import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .configs import ConfigError, Diagnostic, ProxyConfig, TopicConfig, parse_address
from .crypto import (
    ADVERTISE_DOMAIN,
    SUBSCRIBE_DOMAIN,
    Certificate,
    Envelope,
    EnvelopeError,
    KeyPair,
    KeyStore,
    KeyStoreError,
    SymmetricKey,
    make_control_payload,
    open_envelope,
    seal,
)
from .naming import GdpName, TopicMetadata, derive_name
from .packet import (
    BROADCAST,
    DEFAULT_TTL,
    FLAG_SEALED,
    Packet,
    PacketType,
    fresh_nonce64,
)
from .transport import Connection, PeerLink

log = logging.getLogger(__name__)

QUEUE_DEPTH = 256
SEAL_BATCH = 64
BUS_LINE_LIMIT = 64 * 1024 * 1024
CLIENT_BACKLOG_LIMIT = 16 * 1024 * 1024

# Origin marker for messages the proxy itself republishes from the mesh,
# so they never re-enter the publish pipeline.
MESH_ORIGIN = object()


class BusProtocolError(ValueError):
    """A local-bus line does not parse as a valid UnifiedMessage."""


@dataclass(frozen=True)
class UnifiedMessage:
    """Canonical JSON wrapping of one raw message in transit.

    ``data`` is the base64 encoding of the raw message bytes; the JSON
    form uses sorted keys and no insignificant whitespace so independent
    implementations interoperate byte-for-byte.
    """

    topic: str
    type: str
    timestamp_ns: int
    data: str

    def canonical_json(self) -> bytes:
        return json.dumps(
            {"topic": self.topic, "type": self.type,
             "timestamp_ns": self.timestamp_ns, "data": self.data},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")

    def payload(self) -> bytes:
        return base64.b64decode(self.data, validate=True)

    @classmethod
    def wrap(cls, topic: str, type_: str, payload: bytes, timestamp_ns: Optional[int] = None) -> "UnifiedMessage":
        return cls(
            topic=topic,
            type=type_,
            timestamp_ns=time.time_ns() if timestamp_ns is None else timestamp_ns,
            data=base64.b64encode(payload).decode("ascii"),
        )

    @classmethod
    def from_json(cls, raw) -> "UnifiedMessage":
        try:
            doc = json.loads(raw)
            msg = cls(
                topic=doc["topic"],
                type=doc["type"],
                timestamp_ns=doc["timestamp_ns"],
                data=doc["data"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BusProtocolError(f"malformed unified message: {exc}") from exc
        if not isinstance(msg.topic, str) or not isinstance(msg.type, str):
            raise BusProtocolError("topic and type must be strings")
        if not isinstance(msg.timestamp_ns, int):
            raise BusProtocolError("timestamp_ns must be an integer")
        try:
            base64.b64decode(msg.data, validate=True)
        except (TypeError, ValueError) as exc:
            raise BusProtocolError("data is not valid base64") from exc
        return msg


@dataclass
class ProxyCounters:
    published: int = 0
    delivered: int = 0
    dropped_missing_key: int = 0
    dropped_queue_overflow: int = 0
    dropped_type_mismatch: int = 0
    dropped_tamper: int = 0
    dropped_malformed: int = 0
    dropped_disconnected: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class _BatchQueue:
    """Bounded FIFO with drop-oldest overflow and batched async draining."""

    def __init__(self, depth: int = QUEUE_DEPTH):
        self.depth = depth
        self.dropped = 0
        self._items: deque = deque()
        self._wakeup = asyncio.Event()

    def put(self, item) -> None:
        if len(self._items) >= self.depth:
            self._items.popleft()
            self.dropped += 1
        self._items.append(item)
        self._wakeup.set()

    async def get_batch(self, max_items: int) -> list:
        while not self._items:
            self._wakeup.clear()
            await self._wakeup.wait()
        n = min(max_items, len(self._items))
        return [self._items.popleft() for _ in range(n)]


class LocalBus:
    """In-process broker with a newline-delimited JSON TCP endpoint."""

    def __init__(self, listen: str):
        self._listen = listen
        self._server: Optional[asyncio.AbstractServer] = None
        self._clients: Dict[int, asyncio.StreamWriter] = {}
        self._client_ids = itertools.count(1)
        self._local_subscribers: List[Callable[[UnifiedMessage, object], None]] = []
        self.address: Optional[str] = None
        self.malformed_lines = 0

    def subscribe_local(self, fn: Callable[[UnifiedMessage, object], None]) -> None:
        self._local_subscribers.append(fn)

    async def start(self) -> None:
        host, port = parse_address(self._listen)
        self._server = await asyncio.start_server(
            self._client_connected, host, port, limit=BUS_LINE_LIMIT)
        addr = self._server.sockets[0].getsockname()
        self.address = f"{addr[0]}:{addr[1]}"

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for writer in list(self._clients.values()):
            writer.close()
        self._clients.clear()

    async def _client_connected(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        client_id = next(self._client_ids)
        self._clients[client_id] = writer
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                if line.strip() == b"":
                    continue
                try:
                    msg = UnifiedMessage.from_json(line)
                except BusProtocolError as exc:
                    self.malformed_lines += 1
                    log.warning("local bus client %d: %s", client_id, exc)
                    continue
                self.publish(msg, origin=client_id)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._clients.pop(client_id, None)
            writer.close()

    def publish(self, msg: UnifiedMessage, origin=None) -> None:
        """Deliver to every bus participant except the originator."""
        line = None
        for client_id, writer in list(self._clients.items()):
            if client_id == origin:
                continue
            if writer.transport.get_write_buffer_size() > CLIENT_BACKLOG_LIMIT:
                continue  # slow consumer: shed rather than balloon memory
            if line is None:
                line = msg.canonical_json() + b"\n"
            writer.write(line)
        for fn in self._local_subscribers:
            fn(msg, origin)


@dataclass
class _TopicState:
    cfg: TopicConfig
    name: Optional[GdpName] = None
    meta: Optional[TopicMetadata] = None
    psk: Optional[SymmetricKey] = None
    cert: Optional[Certificate] = None
    signer: Optional[KeyPair] = None          # topic key for publishers
    control_blob: Optional[bytes] = None      # cached advertisement/subscribe credential
    queue: _BatchQueue = field(default_factory=_BatchQueue)
    conn: Optional[Connection] = None
    ready: asyncio.Event = field(default_factory=asyncio.Event)

    @property
    def public(self) -> bool:
        return self.cfg.visibility == "public"


def _seal_batch(plaintexts: List[bytes], psk: SymmetricKey, signer: KeyPair, covered: bytes) -> List[bytes]:
    # runs on the worker thread; RSA signing releases the GIL
    return [seal(pt, psk, signer, covered).encode() for pt in plaintexts]


class Proxy:
    def __init__(
        self,
        cfg: ProxyConfig,
        keystore: Optional[KeyStore] = None,
        *,
        seal_data: bool = True,
        label: str = "proxy",
    ):
        """``seal_data=False`` switches the data plane to plain forwarding;
        it exists for the internal baseline benchmarks and is not reachable
        from configuration files."""
        self.cfg = cfg
        self.label = label
        self.seal_data = seal_data
        self.counters = ProxyCounters()
        self.keystore = keystore or KeyStore(cfg.key_dir, cfg.anchor_cert)
        self.bus = LocalBus(cfg.local_bus_listen)
        self._topics: List[_TopicState] = []
        self._publish_by_topic: Dict[str, _TopicState] = {}
        self._subscribe_by_name: Dict[GdpName, _TopicState] = {}
        self._next_id = itertools.count(1)
        self._links: List[PeerLink] = []
        self._conns: Dict[int, Connection] = {}
        self._shared_topics: List[_TopicState] = []  # bound to the shared tunnel
        self._mesh_taps: List[Callable[[Packet], None]] = []
        self._tasks: List[asyncio.Task] = []
        self._executor = ThreadPoolExecutor(max_workers=2, thread_name_prefix=f"{label}-seal")
        self._identity: Optional[KeyPair] = None
        self._identity_cert: Optional[Certificate] = None
        self._build_topics()

    def _alloc_id(self) -> int:
        return next(self._next_id)

    def add_mesh_tap(self, fn: Callable[[Packet], None]) -> None:
        """Observe every packet sent toward the mesh (testing hook)."""
        self._mesh_taps.append(fn)

    # -- setup ------------------------------------------------------------

    def _build_topics(self) -> None:
        diags: List[Diagnostic] = []
        needs_identity = any(
            t.action == "subscribe" and t.visibility == "public" for t in self.cfg.topics)
        if needs_identity:
            if not self.cfg.identity:
                diags.append(Diagnostic("<proxy>", "mesh", "identity",
                                        "required when any public topic subscribes"))
            else:
                try:
                    self._identity = self.keystore.keypair(self.cfg.identity)
                    self._identity_cert = self.keystore.certificate(self.cfg.identity)
                except KeyStoreError as exc:
                    diags.append(Diagnostic("<proxy>", "mesh", "identity", str(exc)))
        seen_names = set()
        for tc in self.cfg.topics:
            if tc.name in seen_names:
                diags.append(Diagnostic("<proxy>", "topic", "name",
                                        f"duplicate topic {tc.name!r}"))
                continue
            seen_names.add(tc.name)
            ts = _TopicState(cfg=tc)
            if tc.visibility == "public":
                try:
                    self._load_public_topic(ts)
                except (KeyStoreError, EnvelopeError) as exc:
                    diags.append(Diagnostic("<proxy>", "topic", "key_ref",
                                            f"topic {tc.name!r}: {exc}"))
                    continue
            self._topics.append(ts)
            if ts.public and tc.action == "publish":
                self._publish_by_topic[tc.name] = ts
            elif ts.public and tc.action == "subscribe":
                self._subscribe_by_name[ts.name] = ts
        if diags:
            raise ConfigError(diags)

    def _load_public_topic(self, ts: _TopicState) -> None:
        tc = ts.cfg
        if not tc.key_ref:
            raise KeyStoreError("public topic needs key_ref")
        ts.psk = self.keystore.psk(tc.key_ref)
        ts.cert = self.keystore.certificate(tc.key_ref)
        ts.meta = TopicMetadata(
            topic_name=tc.name,
            topic_type=tc.type,
            author=tc.author,
            maintainer=tc.maintainer,
            description=tc.description,
            unique_suffix=tc.unique_suffix,
            cert_fingerprint=ts.cert.fingerprint(),
        )
        ts.name = derive_name(ts.meta)
        if tc.action == "publish":
            ts.signer = self.keystore.keypair(tc.key_ref)
            ts.control_blob = make_control_payload(
                ADVERTISE_DOMAIN, bytes(ts.name), ts.cert, ts.signer)
        else:
            if self._identity is None or self._identity_cert is None:
                raise KeyStoreError("subscriber identity credentials unavailable")
            ts.control_blob = make_control_payload(
                SUBSCRIBE_DOMAIN, bytes(ts.name), self._identity_cert, self._identity)

    # -- lifecycle ----------------------------------------------------------

    async def start(self) -> None:
        await self.bus.start()
        self.bus.subscribe_local(self._on_bus_message)
        public = [ts for ts in self._topics if ts.public]
        if self.cfg.mesh.mode == "dedicated":
            for ts in public:
                link = PeerLink(self, self._alloc_id, self.cfg.mesh, tag=ts)
                self._links.append(link)
                link.start()
        else:
            link = PeerLink(self, self._alloc_id, self.cfg.mesh, tag=None)
            self._shared_topics = public
            self._links.append(link)
            link.start()
        loop = asyncio.get_running_loop()
        for ts in public:
            if ts.cfg.action == "publish":
                self._tasks.append(loop.create_task(self._publish_loop(ts)))
        self._tasks.append(loop.create_task(self._announce_periodically()))
        log.info("%s: local bus on %s, %d topic(s)", self.label, self.bus.address, len(self._topics))

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        for link in self._links:
            await link.stop()
        await self.bus.stop()
        self._executor.shutdown(wait=False)
        log.info("%s: stopped", self.label)

    # -- mesh side ------------------------------------------------------------

    def on_connection(self, conn: Connection) -> None:
        self._conns[conn.conn_id] = conn
        for tap in self._mesh_taps:
            conn.add_tap(tap)
        bound = [conn.tag] if conn.tag is not None else self._shared_topics
        for ts in bound:
            ts.conn = conn
            ts.ready.set()
            self._announce(ts)

    def on_disconnect(self, conn: Connection) -> None:
        self._conns.pop(conn.conn_id, None)
        for ts in self._topics:
            if ts.conn is conn:
                ts.conn = None
                ts.ready.clear()

    def on_packet(self, conn: Connection, pkt: Packet) -> None:
        if pkt.ptype == PacketType.DATA:
            self._deliver_from_mesh(pkt)
        # advertisements, subscribes, queries, and responses reaching the
        # proxy carry nothing it needs: certificates come from its own
        # key store

    def _announce(self, ts: _TopicState) -> None:
        if ts.conn is None or not ts.public:
            return
        if ts.cfg.action == "publish":
            pkt = Packet(
                ptype=PacketType.ADVERTISEMENT,
                source=ts.name,
                destination=BROADCAST,
                ttl=DEFAULT_TTL,
                nonce64=fresh_nonce64(),
                payload=ts.control_blob,
            )
        else:
            pkt = Packet(
                ptype=PacketType.SUBSCRIBE,
                source=BROADCAST,
                destination=ts.name,
                ttl=DEFAULT_TTL,
                nonce64=fresh_nonce64(),
                payload=ts.control_blob,
            )
        ts.conn.send(pkt)

    async def _announce_periodically(self) -> None:
        # Re-floods repair routers that restarted or joined after the
        # first announcement; each round uses a fresh dedup nonce.
        while True:
            await asyncio.sleep(self.cfg.advertise_interval)
            for ts in self._topics:
                self._announce(ts)

    # -- local bus -> mesh -------------------------------------------------------

    def _on_bus_message(self, msg: UnifiedMessage, origin) -> None:
        if origin is MESH_ORIGIN:
            return
        ts = self._publish_by_topic.get(msg.topic)
        if ts is None:
            return  # private or unconfigured: never leaves the bus
        if msg.type != ts.cfg.type:
            self.counters.dropped_type_mismatch += 1
            return
        stamped = dataclasses.replace(msg, timestamp_ns=time.time_ns())
        before = ts.queue.dropped
        ts.queue.put(stamped)
        self.counters.dropped_queue_overflow += ts.queue.dropped - before

    async def _publish_loop(self, ts: _TopicState) -> None:
        loop = asyncio.get_running_loop()
        covered = bytes(ts.name) + bytes(ts.name)
        while True:
            await ts.ready.wait()
            batch = await ts.queue.get_batch(SEAL_BATCH)
            if ts.psk is None or ts.signer is None:
                self.counters.dropped_missing_key += len(batch)
                continue  # never sent unencrypted
            plaintexts = [m.canonical_json() for m in batch]
            if self.seal_data:
                payloads = await loop.run_in_executor(
                    self._executor, _seal_batch, plaintexts, ts.psk, ts.signer, covered)
                flags = FLAG_SEALED
            else:
                payloads = plaintexts
                flags = 0
            conn = ts.conn
            if conn is None:
                self.counters.dropped_disconnected += len(payloads)
                continue
            for payload in payloads:
                pkt = Packet(
                    ptype=PacketType.DATA,
                    source=ts.name,
                    destination=ts.name,
                    ttl=DEFAULT_TTL,
                    flags=flags,
                    nonce64=fresh_nonce64(),
                    payload=payload,
                )
                if conn.send(pkt):
                    self.counters.published += 1
                else:
                    self.counters.dropped_disconnected += 1

    # -- mesh -> local bus ------------------------------------------------------

    def _deliver_from_mesh(self, pkt: Packet) -> None:
        ts = self._subscribe_by_name.get(pkt.destination)
        if ts is None:
            return
        covered = bytes(pkt.source) + bytes(pkt.destination)
        if pkt.sealed() != self.seal_data:
            self.counters.dropped_tamper += 1
            return
        if pkt.sealed():
            try:
                env = Envelope.decode(pkt.payload)
                plaintext = open_envelope(env, ts.psk, ts.cert, covered)
            except EnvelopeError:
                self.counters.dropped_tamper += 1
                return
        else:
            plaintext = pkt.payload_bytes()
        try:
            msg = UnifiedMessage.from_json(plaintext)
        except BusProtocolError:
            self.counters.dropped_malformed += 1
            return
        if msg.type != ts.cfg.type:
            self.counters.dropped_type_mismatch += 1
            return
        if msg.topic != ts.cfg.name:
            msg = dataclasses.replace(msg, topic=ts.cfg.name)
        self.counters.delivered += 1
        self.bus.publish(msg, origin=MESH_ORIGIN)

    # -- introspection ------------------------------------------------------------

    @property
    def connection_count(self) -> int:
        return len(self._conns)

    def topic_names(self) -> Dict[str, str]:
        """Local topic -> derived name hex, public topics only."""
        return {ts.cfg.name: ts.name.hex() for ts in self._topics if ts.public}
