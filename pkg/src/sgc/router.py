"""The mesh router: verifies and forwards packets along RIB state.

A router floods verified advertisements (deduped per name and nonce),
walks subscribe requests up the recorded advertisement path while
registering each requester as a data sink, answers RIB queries for names
it knows, and fans Data packets out to sinks. Data payloads are never
decrypted here: routers hold no topic keys, only the trust anchor used to
verify control packets.

The receive path of every connection runs on one event loop; a packet is
handled by exactly one stage at a time, and payload buffers are shared,
not copied, across the forwarding fanout.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

from .configs import RouterConfig, parse_address
from .crypto import (
    ADVERTISE_DOMAIN,
    SUBSCRIBE_DOMAIN,
    AuthenticityError,
    Certificate,
    EnvelopeFormatError,
    KeyStoreError,
    load_certificate,
    verify_control_payload,
)
from .naming import GdpName
from .packet import BROADCAST, Packet, PacketType, fresh_nonce64
from .rib import InsertResult, LruSet, RoutingInformationBase
from .transport import Connection, PeerLink, start_tcp_listener, start_udp_listener

log = logging.getLogger(__name__)

PENDING_SUBSCRIBE_TIMEOUT = 5.0
PENDING_SWEEP_INTERVAL = 0.5
QUERY_DEDUP_CAPACITY = 4096


@dataclass
class RouterStats:
    """Monotonic counters; ``payload_copy_count`` tracks every
    materialization of Data payload bytes (one per ingress read, none for
    fanout)."""

    packets_forwarded: int = 0
    packets_dropped_ttl: int = 0
    packets_dropped_verify: int = 0
    packets_dropped_no_route: int = 0
    packets_dropped_pending: int = 0
    advertisements_fresh: int = 0
    payload_copy_count: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class _PendingSubscribe:
    conn_id: int
    payload: bytes
    ttl: int
    deadline: float


class Router:
    def __init__(self, cfg: RouterConfig, *, anchor: Optional[Certificate] = None, label: str = "router"):
        if anchor is None:
            if cfg.anchor_cert is None:
                raise KeyStoreError("router needs a trust anchor certificate")
            anchor = load_certificate(cfg.anchor_cert)
        self.cfg = cfg
        self.label = label
        self.anchor = anchor
        self.rib = RoutingInformationBase()
        self.stats = RouterStats()
        self._conns: Dict[int, Connection] = {}
        self._next_id = itertools.count(1)
        self._peer_links: List[PeerLink] = []
        self._servers: list = []
        self._udp_listener = None
        self._admin_server = None
        self._pending_subs: Dict[GdpName, List[_PendingSubscribe]] = {}
        self._pending_queries: Dict[GdpName, Dict[int, float]] = {}
        self._query_seen = LruSet(QUERY_DEDUP_CAPACITY)
        self._name_waiters: Dict[GdpName, List[asyncio.Future]] = {}
        self._sink_waiters: Dict[GdpName, List[asyncio.Future]] = {}
        self._sweeper: Optional[asyncio.Task] = None
        self.tcp_address: Optional[str] = None
        self.udp_address: Optional[str] = None
        self.admin_address: Optional[str] = None

    def _alloc_id(self) -> int:
        return next(self._next_id)

    # -- lifecycle -----------------------------------------------------

    async def start(self) -> None:
        if self.cfg.listen_tcp:
            host, port = parse_address(self.cfg.listen_tcp)
            server = await start_tcp_listener(self, self._alloc_id, host, port)
            self._servers.append(server)
            addr = server.sockets[0].getsockname()
            self.tcp_address = f"{addr[0]}:{addr[1]}"
        if self.cfg.listen_udp:
            host, port = parse_address(self.cfg.listen_udp)
            self._udp_listener = await start_udp_listener(self, self._alloc_id, host, port)
            addr = self._udp_listener.transport.get_extra_info("sockname")
            self.udp_address = f"{addr[0]}:{addr[1]}"
        if self.cfg.listen_admin:
            host, port = parse_address(self.cfg.listen_admin)
            self._admin_server = await asyncio.start_server(self._admin_client, host, port)
            addr = self._admin_server.sockets[0].getsockname()
            self.admin_address = f"{addr[0]}:{addr[1]}"
        for peer in self.cfg.peers:
            link = PeerLink(self, self._alloc_id, peer)
            self._peer_links.append(link)
            link.start()
        self._sweeper = asyncio.get_running_loop().create_task(self._sweep_pending())
        log.info("%s: listening tcp=%s udp=%s", self.label, self.tcp_address, self.udp_address)

    async def stop(self) -> None:
        if self._sweeper is not None:
            self._sweeper.cancel()
            try:
                await self._sweeper
            except asyncio.CancelledError:
                pass
        for link in self._peer_links:
            await link.stop()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        if self._admin_server is not None:
            self._admin_server.close()
            await self._admin_server.wait_closed()
        if self._udp_listener is not None:
            self._udp_listener.close()
        for conn in list(self._conns.values()):
            conn.close()
        await asyncio.sleep(0)
        log.info("%s: stopped", self.label)

    # -- connection callbacks -------------------------------------------

    def on_connection(self, conn: Connection) -> None:
        self._conns[conn.conn_id] = conn
        log.debug("%s: connection up %s", self.label, conn)

    def on_disconnect(self, conn: Connection) -> None:
        self._conns.pop(conn.conn_id, None)
        affected = self.rib.remove_connection(conn.conn_id)
        if affected:
            log.info("%s: %s dropped, %d names affected", self.label, conn, len(affected))

    def on_packet(self, conn: Connection, pkt: Packet) -> None:
        if pkt.ptype == PacketType.DATA:
            # the ingress read materialized this payload: the one counted copy
            self.stats.payload_copy_count += 1
            self._handle_data(conn, pkt)
        elif pkt.ptype == PacketType.ADVERTISEMENT:
            self._process_announcement(conn, pkt, flood=True)
        elif pkt.ptype == PacketType.SUBSCRIBE:
            self._handle_subscribe(conn, pkt)
        elif pkt.ptype == PacketType.RIB_QUERY:
            self._handle_query(conn, pkt)
        elif pkt.ptype == PacketType.RIB_RESPONSE:
            self._process_announcement(conn, pkt, flood=False)

    # -- forwarding ------------------------------------------------------

    def _broadcast(self, pkt: Packet, exclude: Optional[int]) -> None:
        for cid, conn in list(self._conns.items()):
            if cid == exclude:
                continue
            if conn.send(pkt):
                self.stats.packets_forwarded += 1

    def _handle_data(self, conn: Connection, pkt: Packet) -> None:
        entry = self.rib.lookup(pkt.destination)
        if entry is None:
            self.stats.packets_dropped_no_route += 1
            return
        if pkt.ttl <= 1:
            self.stats.packets_dropped_ttl += 1
            return
        fwd = pkt.with_ttl(pkt.ttl - 1)  # payload buffer shared across sinks
        delivered = 0
        for cid in entry.sinks:
            if cid == conn.conn_id:
                continue
            sink = self._conns.get(cid)
            if sink is not None and sink.send(fwd):
                delivered += 1
        if delivered:
            self.stats.packets_forwarded += delivered
        else:
            self.stats.packets_dropped_no_route += 1

    def _process_announcement(self, conn: Connection, pkt: Packet, *, flood: bool) -> None:
        name = pkt.source
        if name.is_zero():
            self.stats.packets_dropped_verify += 1
            return
        if self.rib.seen(name, pkt.nonce64):
            return  # duplicate: processed before, drop silently
        try:
            cert = verify_control_payload(ADVERTISE_DOMAIN, bytes(name), pkt.payload, self.anchor)
        except (EnvelopeFormatError, AuthenticityError) as exc:
            log.warning("%s: advertisement for %s rejected: %s", self.label, name.short(), exc)
            self.stats.packets_dropped_verify += 1
            return
        prev = self.rib.get(name)
        prev_upstream = prev.upstream if prev is not None and not prev.stale else None
        blob = pkt.payload_bytes()
        result = self.rib.insert_advertisement(name, conn.conn_id, cert, pkt.nonce64, adv_payload=blob)
        if result is not InsertResult.FRESH:
            return
        self.stats.advertisements_fresh += 1
        entry = self.rib.get(name)
        # Churn repair: if we hold sinks for this name and its upstream
        # moved to a different connection, rebuild our leg of the chain.
        if entry.sinks and entry.subscribe_payload and prev_upstream != conn.conn_id:
            self._subscribe_upstream(name, entry.subscribe_payload)
        self._resolve_waiters(self._name_waiters, name)
        self._release_pending_subscribes(name)
        askers = self._pending_queries.pop(name, {})
        for cid in askers:
            if cid == conn.conn_id:
                continue
            asker = self._conns.get(cid)
            if asker is not None:
                asker.send(self._announcement_packet(name, blob))
        if flood and pkt.ttl > 1:
            self._broadcast(pkt.with_ttl(pkt.ttl - 1), exclude=conn.conn_id)

    def _announcement_packet(self, name: GdpName, blob: bytes) -> Packet:
        return Packet(
            ptype=PacketType.RIB_RESPONSE,
            source=name,
            destination=BROADCAST,
            ttl=self.cfg.ttl_default,
            nonce64=fresh_nonce64(),
            payload=blob,
        )

    def _handle_subscribe(self, conn: Connection, pkt: Packet) -> None:
        name = pkt.destination
        try:
            verify_control_payload(SUBSCRIBE_DOMAIN, bytes(name), pkt.payload, self.anchor)
        except (EnvelopeFormatError, AuthenticityError) as exc:
            log.warning("%s: subscribe for %s rejected: %s", self.label, name.short(), exc)
            self.stats.packets_dropped_verify += 1
            return
        blob = pkt.payload_bytes()
        entry = self.rib.lookup(name)
        if entry is None:
            holds = self._pending_subs.setdefault(name, [])
            holds.append(_PendingSubscribe(conn.conn_id, blob, pkt.ttl,
                                           time.monotonic() + PENDING_SUBSCRIBE_TIMEOUT))
            self._send_query(name)
            return
        self._register_sink(name, conn.conn_id, blob, pkt.ttl)

    def _register_sink(self, name: GdpName, from_cid: int, blob: bytes, ttl: int) -> None:
        entry = self.rib.lookup(name)
        if entry is None:
            return
        if from_cid != entry.upstream:
            self.rib.add_sink(name, from_cid)
            self.rib.set_subscribe_payload(name, blob)
            self._resolve_waiters(self._sink_waiters, name)
            requester = self._conns.get(from_cid)
            if requester is not None and entry.adv_payload:
                # hand the topic's certificate back to the subscriber
                requester.send(self._announcement_packet(name, entry.adv_payload))
        upstream = self._conns.get(entry.upstream)
        if upstream is not None and upstream.conn_id != from_cid:
            if ttl > 1:
                if upstream.send(self._subscribe_packet(name, blob, ttl - 1)):
                    self.stats.packets_forwarded += 1
            else:
                self.stats.packets_dropped_ttl += 1

    def _subscribe_packet(self, name: GdpName, blob: bytes, ttl: int) -> Packet:
        return Packet(
            ptype=PacketType.SUBSCRIBE,
            source=BROADCAST,
            destination=name,
            ttl=ttl,
            nonce64=fresh_nonce64(),
            payload=blob,
        )

    def _subscribe_upstream(self, name: GdpName, blob: bytes) -> None:
        entry = self.rib.lookup(name)
        if entry is None:
            return
        upstream = self._conns.get(entry.upstream)
        if upstream is not None:
            upstream.send(self._subscribe_packet(name, blob, self.cfg.ttl_default))

    def _release_pending_subscribes(self, name: GdpName) -> None:
        holds = self._pending_subs.pop(name, None)
        if not holds:
            return
        for hold in holds:
            if hold.conn_id in self._conns:
                self._register_sink(name, hold.conn_id, hold.payload, hold.ttl)

    def _send_query(self, name: GdpName) -> None:
        nonce = fresh_nonce64()
        self._query_seen.add((name, nonce))
        pkt = Packet(
            ptype=PacketType.RIB_QUERY,
            source=BROADCAST,
            destination=name,
            ttl=self.cfg.ttl_default,
            nonce64=nonce,
        )
        self._broadcast(pkt, exclude=None)

    def _handle_query(self, conn: Connection, pkt: Packet) -> None:
        name = pkt.destination
        if not self._query_seen.add((name, pkt.nonce64)):
            return
        entry = self.rib.lookup(name)
        if entry is not None and entry.adv_payload:
            conn.send(self._announcement_packet(name, entry.adv_payload))
            return
        asked = self._pending_queries.setdefault(name, {})
        asked[conn.conn_id] = time.monotonic() + PENDING_SUBSCRIBE_TIMEOUT
        if pkt.ttl > 1:
            self._broadcast(pkt.with_ttl(pkt.ttl - 1), exclude=conn.conn_id)
        else:
            self.stats.packets_dropped_ttl += 1

    # -- pending state expiry ---------------------------------------------

    async def _sweep_pending(self) -> None:
        while True:
            await asyncio.sleep(PENDING_SWEEP_INTERVAL)
            now = time.monotonic()
            for name in list(self._pending_subs):
                holds = self._pending_subs[name]
                expired = [h for h in holds if h.deadline <= now]
                if expired:
                    self.stats.packets_dropped_pending += len(expired)
                    log.error("%s: %d subscribe(s) for %s timed out unresolved",
                              self.label, len(expired), name.short())
                holds[:] = [h for h in holds if h.deadline > now]
                if not holds:
                    del self._pending_subs[name]
            for name in list(self._pending_queries):
                asked = self._pending_queries[name]
                for cid in [c for c, dl in asked.items() if dl <= now]:
                    del asked[cid]
                if not asked:
                    del self._pending_queries[name]

    # -- instrumentation ---------------------------------------------------

    def _resolve_waiters(self, waiters: Dict[GdpName, List[asyncio.Future]], name: GdpName) -> None:
        for fut in waiters.pop(name, []):
            if not fut.done():
                fut.set_result(None)

    def wait_for_name(self, name: GdpName) -> "asyncio.Future":
        fut = asyncio.get_running_loop().create_future()
        if self.rib.lookup(name) is not None:
            fut.set_result(None)
        else:
            self._name_waiters.setdefault(name, []).append(fut)
        return fut

    def wait_for_sink(self, name: GdpName) -> "asyncio.Future":
        fut = asyncio.get_running_loop().create_future()
        entry = self.rib.lookup(name)
        if entry is not None and entry.sinks:
            fut.set_result(None)
        else:
            self._sink_waiters.setdefault(name, []).append(fut)
        return fut

    @property
    def connection_count(self) -> int:
        return len(self._conns)

    # -- admin endpoint -----------------------------------------------------

    async def _admin_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            line = await reader.readline()
            cmd = line.decode("utf-8", "replace").strip()
            if cmd == "dump":
                for obj in self.rib.dump():
                    writer.write(json.dumps(obj, sort_keys=True).encode() + b"\n")
            elif cmd == "stats":
                writer.write(json.dumps(self.stats.as_dict(), sort_keys=True).encode() + b"\n")
            else:
                writer.write(b'{"error":"unknown command"}\n')
            await writer.drain()
        finally:
            writer.close()
