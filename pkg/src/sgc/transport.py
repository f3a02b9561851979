"""Connection machinery shared by routers and proxies.

A node owns a set of :class:`Connection` objects, each speaking the wire
codec over TCP (length-framed stream) or UDP (one packet per datagram).
Owners implement three callbacks: ``on_connection``, ``on_packet``, and
``on_disconnect``. Sending never copies payload bytes: TCP writes header
and payload as separate buffers, UDP uses scatter-gather ``sendmsg``.
"""

from __future__ import annotations

import asyncio
import logging
import socket
from typing import Callable, List, Optional, Tuple

from . import packet as packet_mod
from .configs import PeerConfig, parse_address
from .packet import CodecError, Packet, decode, encode_parts, peek_total_length

log = logging.getLogger(__name__)

# Datagrams beyond this are rejected at send time; there is no
# fragmentation on the datagram path.
UDP_MAX_DATAGRAM = 60 * 1024

RECONNECT_BASE_DELAY = 0.2
RECONNECT_MAX_DELAY = 10.0


class Framer:
    """Reassembles a byte stream into whole packets.

    Extracting a packet materializes exactly one contiguous buffer per
    packet (the ingress copy); decoding then views into that buffer.
    """

    def __init__(self, on_packet_bytes: Callable[[bytes], None]):
        self._buf = bytearray()
        self._on_packet_bytes = on_packet_bytes

    def feed(self, data: bytes) -> None:
        buf = self._buf
        buf += data
        while True:
            total = peek_total_length(buf)  # raises OversizePayload on bad streams
            if total is None or len(buf) < total:
                return
            view = memoryview(buf)
            raw = bytes(view[:total])
            view.release()
            del buf[:total]
            self._on_packet_bytes(raw)


class Connection:
    """One live link to a peer or proxy."""

    def __init__(self, owner, conn_id: int, kind: str, peername: str):
        self.owner = owner
        self.conn_id = conn_id
        self.kind = kind
        self.peername = peername
        self.tag = None  # set by the creator (e.g. peer config, topic binding)
        self.taps: List[Callable[[Packet], None]] = []
        self._closed = asyncio.get_running_loop().create_future()

    def add_tap(self, fn: Callable[[Packet], None]) -> None:
        self.taps.append(fn)

    @property
    def alive(self) -> bool:
        return not self._closed.done()

    async def wait_closed(self) -> None:
        await asyncio.shield(self._closed)

    def _mark_closed(self) -> None:
        if not self._closed.done():
            self._closed.set_result(None)
            self.owner.on_disconnect(self)

    def _tap(self, pkt: Packet) -> None:
        for fn in self.taps:
            fn(pkt)

    def send(self, pkt: Packet) -> bool:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"<{type(self).__name__} #{self.conn_id} {self.kind} {self.peername}>"


class _PacketDispatch:
    """Decode raw packet bytes and hand them to the owner, never crashing."""

    def __init__(self, conn: Connection):
        self.conn = conn

    def __call__(self, raw: bytes) -> None:
        try:
            pkt = decode(raw)
        except CodecError as exc:
            log.warning("%s: undecodable packet dropped: %s", self.conn, exc)
            return
        try:
            self.conn.owner.on_packet(self.conn, pkt)
        except Exception:
            log.exception("%s: packet handler failed", self.conn)


class TcpConnection(Connection):
    def __init__(self, owner, conn_id: int, transport: asyncio.Transport, peername: str):
        super().__init__(owner, conn_id, "tcp", peername)
        self._transport = transport

    def send(self, pkt: Packet) -> bool:
        if not self.alive:
            return False
        header, payload = encode_parts(pkt)
        self._tap(pkt)
        self._transport.write(header)
        if len(payload):
            self._transport.write(payload)
        return True

    def close(self) -> None:
        self._transport.close()


class _TcpProtocol(asyncio.Protocol):
    def __init__(self, owner, alloc_id: Callable[[], int], tag=None):
        self._owner = owner
        self._alloc_id = alloc_id
        self._tag = tag
        self.conn: Optional[TcpConnection] = None
        self._framer: Optional[Framer] = None

    def connection_made(self, transport: asyncio.Transport) -> None:
        peer = transport.get_extra_info("peername")
        peername = f"{peer[0]}:{peer[1]}" if peer else "?"
        self.conn = TcpConnection(self._owner, self._alloc_id(), transport, peername)
        self.conn.tag = self._tag
        self._framer = Framer(_PacketDispatch(self.conn))
        self._owner.on_connection(self.conn)

    def data_received(self, data: bytes) -> None:
        try:
            self._framer.feed(data)
        except CodecError as exc:
            log.warning("%s: corrupt stream, closing: %s", self.conn, exc)
            self.conn.close()

    def connection_lost(self, exc) -> None:
        if self.conn is not None:
            self.conn._mark_closed()


class UdpConnection(Connection):
    """A logical UDP link: either a connected outbound socket or one
    remote address seen on a listening socket."""

    def __init__(self, owner, conn_id: int, sock: socket.socket, peername: str,
                 remote_addr: Optional[Tuple[str, int]] = None):
        super().__init__(owner, conn_id, "udp", peername)
        self._sock = sock
        self._remote_addr = remote_addr  # None for connected sockets
        self._transport: Optional[asyncio.DatagramTransport] = None

    def send(self, pkt: Packet) -> bool:
        if not self.alive:
            return False
        header, payload = encode_parts(pkt)
        if len(header) + len(payload) > UDP_MAX_DATAGRAM:
            log.warning("%s: datagram of %d bytes exceeds %d, rejected",
                        self, len(header) + len(payload), UDP_MAX_DATAGRAM)
            return False
        self._tap(pkt)
        buffers = [header, payload] if len(payload) else [header]
        try:
            if self._remote_addr is None:
                self._sock.sendmsg(buffers)
            else:
                self._sock.sendmsg(buffers, [], 0, self._remote_addr)
        except (BlockingIOError, InterruptedError):
            return False  # datagram semantics: drop under pressure
        except OSError as exc:
            log.debug("%s: send failed: %s", self, exc)
            return False
        return True

    def close(self) -> None:
        if self._transport is not None:
            self._transport.close()
        self._mark_closed()


class _UdpPeerProtocol(asyncio.DatagramProtocol):
    """Protocol for an outbound, connected UDP socket."""

    def __init__(self, owner, alloc_id: Callable[[], int], peername: str, tag=None):
        self._owner = owner
        self._alloc_id = alloc_id
        self._peername = peername
        self._tag = tag
        self.conn: Optional[UdpConnection] = None
        self._dispatch: Optional[_PacketDispatch] = None

    def connection_made(self, transport) -> None:
        sock = transport.get_extra_info("socket")
        self.conn = UdpConnection(self._owner, self._alloc_id(), sock, self._peername)
        self.conn.tag = self._tag
        self.conn._transport = transport
        self._dispatch = _PacketDispatch(self.conn)
        self._owner.on_connection(self.conn)

    def datagram_received(self, data: bytes, addr) -> None:
        self._dispatch(data)

    def error_received(self, exc) -> None:
        log.debug("%s: ICMP error: %s", self.conn, exc)

    def connection_lost(self, exc) -> None:
        if self.conn is not None:
            self.conn._mark_closed()


class UdpListener(asyncio.DatagramProtocol):
    """Listening UDP socket demultiplexing remote addresses into
    logical connections."""

    def __init__(self, owner, alloc_id: Callable[[], int]):
        self._owner = owner
        self._alloc_id = alloc_id
        self._conns = {}
        self._dispatchers = {}
        self.transport: Optional[asyncio.DatagramTransport] = None

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        dispatch = self._dispatchers.get(addr)
        if dispatch is None:
            sock = self.transport.get_extra_info("socket")
            conn = UdpConnection(self._owner, self._alloc_id(), sock,
                                 f"{addr[0]}:{addr[1]}", remote_addr=addr)
            self._conns[addr] = conn
            dispatch = self._dispatchers[addr] = _PacketDispatch(conn)
            self._owner.on_connection(conn)
        dispatch(data)

    def close(self) -> None:
        if self.transport is not None:
            self.transport.close()
        for conn in self._conns.values():
            conn._mark_closed()
        self._conns.clear()
        self._dispatchers.clear()


async def start_tcp_listener(owner, alloc_id, host: str, port: int) -> asyncio.AbstractServer:
    loop = asyncio.get_running_loop()
    return await loop.create_server(lambda: _TcpProtocol(owner, alloc_id), host, port)


async def start_udp_listener(owner, alloc_id, host: str, port: int) -> UdpListener:
    loop = asyncio.get_running_loop()
    listener = UdpListener(owner, alloc_id)
    await loop.create_datagram_endpoint(lambda: listener, local_addr=(host, port))
    return listener


async def dial(owner, alloc_id, address: str, transport_kind: str, tag=None) -> Connection:
    """One connection attempt; raises OSError on failure."""
    loop = asyncio.get_running_loop()
    host, port = parse_address(address)
    if transport_kind == "tcp":
        _, proto = await loop.create_connection(lambda: _TcpProtocol(owner, alloc_id, tag), host, port)
        return proto.conn
    if transport_kind == "udp":
        proto = _UdpPeerProtocol(owner, alloc_id, address, tag)
        await loop.create_datagram_endpoint(lambda: proto, remote_addr=(host, port))
        return proto.conn
    raise ValueError(f"unknown transport {transport_kind!r}")


class PeerLink:
    """Keeps one outbound peering alive.

    Failed dials back off exponentially from 200 ms up to 10 s; a
    successful connection resets the backoff. The owner's
    ``on_connection`` callback fires on every (re)establishment.
    """

    def __init__(self, owner, alloc_id, cfg: PeerConfig, *, tag=None,
                 base_delay: float = RECONNECT_BASE_DELAY,
                 max_delay: float = RECONNECT_MAX_DELAY):
        self.owner = owner
        self.cfg = cfg
        self.tag = tag
        self._alloc_id = alloc_id
        self._base_delay = base_delay
        self._max_delay = max_delay
        self._task: Optional[asyncio.Task] = None
        self._conn: Optional[Connection] = None
        self._stopped = False

    @property
    def conn(self) -> Optional[Connection]:
        return self._conn

    def start(self) -> None:
        self._task = asyncio.get_running_loop().create_task(self._run())

    async def stop(self) -> None:
        self._stopped = True
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        if self._conn is not None and self._conn.alive:
            self._conn.close()

    async def _run(self) -> None:
        delay = self._base_delay
        while not self._stopped:
            try:
                conn = await dial(self.owner, self._alloc_id, self.cfg.address,
                                  self.cfg.transport, tag=self.tag)
            except OSError as exc:
                log.debug("peer %s unreachable (%s), retrying in %.1fs", self.cfg.address, exc, delay)
                await asyncio.sleep(delay)
                delay = min(delay * 2, self._max_delay)
                continue
            delay = self._base_delay
            self._conn = conn
            await conn.wait_closed()
            self._conn = None
            if not self._stopped:
                log.info("peer %s disconnected, reconnecting", self.cfg.address)
                await asyncio.sleep(self._base_delay)


__all__ = [
    "Connection",
    "Framer",
    "PeerLink",
    "TcpConnection",
    "UdpConnection",
    "UdpListener",
    "UDP_MAX_DATAGRAM",
    "dial",
    "start_tcp_listener",
    "start_udp_listener",
]

assert packet_mod.HEADER_LEN == 82
