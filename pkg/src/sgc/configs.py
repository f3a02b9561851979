"""Config file schemas, TOML loading, and static validation.

Every loader resolves relative paths against the config file's directory
and checks that referenced key material exists before any network activity
begins. Validation failures are reported as diagnostics carrying the file,
table, and key they point at.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TRANSPORTS = ("tcp", "udp")
PEER_MODES = ("dedicated", "shared")
TOPIC_ACTIONS = ("publish", "subscribe")
VISIBILITIES = ("public", "private")


@dataclass
class Diagnostic:
    file: str
    table: str
    key: str
    message: str

    def __str__(self) -> str:
        return f"{self.file}: [{self.table}] {self.key}: {self.message}"


class ConfigError(Exception):
    def __init__(self, diagnostics: List[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics) or "invalid configuration")


def parse_address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address {text!r} is not host:port")
    return host, int(port)


@dataclass
class PeerConfig:
    """One outbound peering: where to dial and how the tunnel is shared."""

    address: str
    transport: str = "tcp"
    mode: str = "shared"
    psk_ref: Optional[str] = None


@dataclass
class RouterConfig:
    listen_tcp: Optional[str] = None
    listen_udp: Optional[str] = None
    listen_admin: Optional[str] = None
    ttl_default: int = 32
    peers: List[PeerConfig] = field(default_factory=list)
    anchor_cert: Optional[Path] = None
    key_dir: Optional[Path] = None


@dataclass
class TopicConfig:
    """One bridged topic.

    ``key_ref`` names the pre-shared key bundle in the key directory; the
    optional metadata fields participate in name derivation and must match
    on every proxy bridging the same topic. Private topics never generate
    mesh traffic.
    """

    name: str
    type: str
    action: str
    visibility: str = "public"
    key_ref: Optional[str] = None
    unique_suffix: str = ""
    author: str = ""
    maintainer: str = ""
    description: str = ""


@dataclass
class ProxyConfig:
    local_bus_listen: str = "127.0.0.1:0"
    mesh: PeerConfig = field(default_factory=lambda: PeerConfig(address="127.0.0.1:9000"))
    identity: Optional[str] = None
    advertise_interval: float = 2.0
    topics: List[TopicConfig] = field(default_factory=list)
    anchor_cert: Optional[Path] = None
    key_dir: Optional[Path] = None


@dataclass
class LinkSpec:
    a: str
    b: str
    transport: str = "tcp"
    loss: float = 0.0
    delay_ms: float = 0.0


@dataclass
class RouterNode:
    name: str
    listen_tcp: Optional[str] = None
    listen_udp: Optional[str] = None
    listen_admin: Optional[str] = None
    ttl_default: int = 32


@dataclass
class ProxyNode:
    name: str
    router: str
    transport: str = "tcp"
    mode: str = "shared"
    identity: Optional[str] = None
    advertise_interval: float = 2.0
    topics: List[TopicConfig] = field(default_factory=list)


@dataclass
class TopologySpec:
    """A multi-node scenario: routers, proxies, and impaired links."""

    routers: List[RouterNode] = field(default_factory=list)
    proxies: List[ProxyNode] = field(default_factory=list)
    links: List[LinkSpec] = field(default_factory=list)
    anchor_cert: Optional[Path] = None
    key_dir: Optional[Path] = None


def _read_toml(path: Path, diags: List[Diagnostic]) -> Optional[dict]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        diags.append(Diagnostic(str(path), "-", "-", f"cannot read file: {exc}"))
    except tomllib.TOMLDecodeError as exc:
        diags.append(Diagnostic(str(path), "-", "-", f"TOML parse error: {exc}"))
    return None


def _check_address(value, file: str, table: str, key: str, diags: List[Diagnostic]) -> None:
    if not isinstance(value, str):
        diags.append(Diagnostic(file, table, key, "must be a host:port string"))
        return
    try:
        parse_address(value)
    except ValueError as exc:
        diags.append(Diagnostic(file, table, key, str(exc)))


def _check_choice(value, choices, file, table, key, diags) -> None:
    if value not in choices:
        diags.append(Diagnostic(file, table, key, f"must be one of {', '.join(choices)}"))


def _parse_peer(doc: dict, file: str, table: str, diags: List[Diagnostic]) -> PeerConfig:
    peer = PeerConfig(
        address=doc.get("address", ""),
        transport=doc.get("transport", "tcp"),
        mode=doc.get("mode", "shared"),
        psk_ref=doc.get("psk_ref"),
    )
    if "address" not in doc:
        diags.append(Diagnostic(file, table, "address", "required"))
    else:
        _check_address(peer.address, file, table, "address", diags)
    _check_choice(peer.transport, TRANSPORTS, file, table, "transport", diags)
    _check_choice(peer.mode, PEER_MODES, file, table, "mode", diags)
    return peer


def _parse_keys(doc: dict, base: Path, file: str, diags: List[Diagnostic], *, require: bool):
    keys = doc.get("keys", {})
    if not isinstance(keys, dict):
        diags.append(Diagnostic(file, "keys", "-", "must be a table"))
        return None, None
    anchor = keys.get("anchor_cert")
    key_dir = keys.get("key_dir")
    if require and anchor is None:
        diags.append(Diagnostic(file, "keys", "anchor_cert", "required"))
    if require and key_dir is None:
        diags.append(Diagnostic(file, "keys", "key_dir", "required"))
    anchor_path = (base / anchor) if isinstance(anchor, str) else None
    key_dir_path = (base / key_dir) if isinstance(key_dir, str) else None
    if anchor_path is not None and not anchor_path.is_file():
        diags.append(Diagnostic(file, "keys", "anchor_cert", f"file not found: {anchor_path}"))
    if key_dir_path is not None and not key_dir_path.is_dir():
        diags.append(Diagnostic(file, "keys", "key_dir", f"directory not found: {key_dir_path}"))
    return anchor_path, key_dir_path


def parse_router_config(doc: dict, path: Path) -> Tuple[Optional[RouterConfig], List[Diagnostic]]:
    diags: List[Diagnostic] = []
    file = str(path)
    base = path.parent
    table = doc.get("router", {})
    if not isinstance(table, dict):
        diags.append(Diagnostic(file, "router", "-", "must be a table"))
        table = {}
    cfg = RouterConfig(
        listen_tcp=table.get("listen_tcp"),
        listen_udp=table.get("listen_udp"),
        listen_admin=table.get("listen_admin"),
        ttl_default=table.get("ttl_default", 32),
    )
    for key in ("listen_tcp", "listen_udp", "listen_admin"):
        if getattr(cfg, key) is not None:
            _check_address(getattr(cfg, key), file, "router", key, diags)
    if cfg.listen_tcp is None and cfg.listen_udp is None:
        diags.append(Diagnostic(file, "router", "listen_tcp", "at least one of listen_tcp/listen_udp is required"))
    if not isinstance(cfg.ttl_default, int) or not 1 <= cfg.ttl_default <= 255:
        diags.append(Diagnostic(file, "router", "ttl_default", "must be an integer in [1, 255]"))
    peers = doc.get("peer", [])
    if not isinstance(peers, list):
        diags.append(Diagnostic(file, "peer", "-", "must be an array of tables"))
        peers = []
    for i, p in enumerate(peers):
        cfg.peers.append(_parse_peer(p, file, f"peer[{i}]", diags))
    cfg.anchor_cert, cfg.key_dir = _parse_keys(doc, base, file, diags, require=True)
    if cfg.key_dir is not None:
        for i, p in enumerate(cfg.peers):
            if p.psk_ref and not (cfg.key_dir / f"{p.psk_ref}.psk").is_file():
                diags.append(Diagnostic(file, f"peer[{i}]", "psk_ref", f"{p.psk_ref}.psk not found in key_dir"))
    return (cfg if not diags else None), diags


def _parse_topic(doc: dict, file: str, table: str, diags: List[Diagnostic]) -> TopicConfig:
    topic = TopicConfig(
        name=doc.get("name", ""),
        type=doc.get("type", ""),
        action=doc.get("action", ""),
        visibility=doc.get("visibility", "public"),
        key_ref=doc.get("key_ref"),
        unique_suffix=doc.get("unique_suffix", ""),
        author=doc.get("author", ""),
        maintainer=doc.get("maintainer", ""),
        description=doc.get("description", ""),
    )
    label = topic.name or table
    if not topic.name:
        diags.append(Diagnostic(file, table, "name", "required and non-empty"))
    if not topic.type:
        diags.append(Diagnostic(file, table, "type", f"required for topic {label!r}"))
    _check_choice(topic.action, TOPIC_ACTIONS, file, table, "action", diags)
    _check_choice(topic.visibility, VISIBILITIES, file, table, "visibility", diags)
    if topic.visibility == "public" and not topic.key_ref:
        diags.append(Diagnostic(file, table, "key_ref", f"required for public topic {label!r}"))
    return topic


def _check_topic_keys(
    topic: TopicConfig,
    key_dir: Optional[Path],
    identity: Optional[str],
    file: str,
    table: str,
    diags: List[Diagnostic],
) -> None:
    if topic.visibility != "public" or key_dir is None or not topic.key_ref:
        return
    ref = topic.key_ref
    if not (key_dir / f"{ref}.psk").is_file():
        diags.append(Diagnostic(file, table, "key_ref", f"{ref}.psk not found in key_dir"))
    if not (key_dir / f"{ref}.cert.json").is_file():
        diags.append(Diagnostic(file, table, "key_ref", f"{ref}.cert.json not found in key_dir"))
    if topic.action == "publish" and not (key_dir / f"{ref}.key.pem").is_file():
        diags.append(Diagnostic(file, table, "key_ref", f"{ref}.key.pem not found in key_dir (publishers sign)"))
    if topic.action == "subscribe" and identity is None:
        diags.append(Diagnostic(file, "mesh", "identity", "required when any public topic subscribes"))


def parse_proxy_config(doc: dict, path: Path) -> Tuple[Optional[ProxyConfig], List[Diagnostic]]:
    diags: List[Diagnostic] = []
    file = str(path)
    base = path.parent
    bus = doc.get("local_bus", {})
    if not isinstance(bus, dict) or "listen" not in bus:
        diags.append(Diagnostic(file, "local_bus", "listen", "required"))
        bus = {"listen": "127.0.0.1:0"}
    _check_address(bus.get("listen"), file, "local_bus", "listen", diags)
    mesh = doc.get("mesh", {})
    if not isinstance(mesh, dict) or "router" not in mesh:
        diags.append(Diagnostic(file, "mesh", "router", "required"))
        mesh = dict(mesh) if isinstance(mesh, dict) else {}
        mesh.setdefault("router", "")
    cfg = ProxyConfig(
        local_bus_listen=bus.get("listen", "127.0.0.1:0"),
        mesh=PeerConfig(
            address=mesh.get("router", ""),
            transport=mesh.get("transport", "tcp"),
            mode=mesh.get("mode", "shared"),
            psk_ref=mesh.get("psk_ref"),
        ),
        identity=mesh.get("identity"),
        advertise_interval=float(mesh.get("advertise_interval", 2.0)),
    )
    if mesh.get("router"):
        _check_address(cfg.mesh.address, file, "mesh", "router", diags)
    _check_choice(cfg.mesh.transport, TRANSPORTS, file, "mesh", "transport", diags)
    _check_choice(cfg.mesh.mode, PEER_MODES, file, "mesh", "mode", diags)
    topics = doc.get("topic", [])
    if not isinstance(topics, list):
        diags.append(Diagnostic(file, "topic", "-", "must be an array of tables"))
        topics = []
    for i, t in enumerate(topics):
        cfg.topics.append(_parse_topic(t, file, f"topic[{i}]", diags))
    if not topics:
        diags.append(Diagnostic(file, "topic", "-", "at least one topic is required"))
    cfg.anchor_cert, cfg.key_dir = _parse_keys(doc, base, file, diags, require=True)
    for i, t in enumerate(cfg.topics):
        _check_topic_keys(t, cfg.key_dir, cfg.identity, file, f"topic[{i}]", diags)
    if cfg.identity and cfg.key_dir is not None:
        for suffix in (".key.pem", ".cert.json"):
            p = cfg.key_dir / f"{cfg.identity}{suffix}"
            if not p.is_file():
                diags.append(Diagnostic(file, "mesh", "identity", f"file not found: {p}"))
    return (cfg if not diags else None), diags


def parse_topology_config(doc: dict, path: Path) -> Tuple[Optional[TopologySpec], List[Diagnostic]]:
    diags: List[Diagnostic] = []
    file = str(path)
    base = path.parent
    spec = TopologySpec()
    routers = doc.get("router", [])
    if not isinstance(routers, list):
        diags.append(Diagnostic(file, "router", "-", "must be an array of tables in a topology"))
        routers = []
    names = set()
    for i, r in enumerate(routers):
        node = RouterNode(
            name=r.get("name", ""),
            listen_tcp=r.get("listen_tcp"),
            listen_udp=r.get("listen_udp"),
            listen_admin=r.get("listen_admin"),
            ttl_default=r.get("ttl_default", 32),
        )
        if not node.name:
            diags.append(Diagnostic(file, f"router[{i}]", "name", "required"))
        elif node.name in names:
            diags.append(Diagnostic(file, f"router[{i}]", "name", f"duplicate node name {node.name!r}"))
        names.add(node.name)
        spec.routers.append(node)
    proxies = doc.get("proxy", [])
    if not isinstance(proxies, list):
        diags.append(Diagnostic(file, "proxy", "-", "must be an array of tables"))
        proxies = []
    router_names = {r.name for r in spec.routers}
    for i, p in enumerate(proxies):
        node = ProxyNode(
            name=p.get("name", ""),
            router=p.get("router", ""),
            transport=p.get("transport", "tcp"),
            mode=p.get("mode", "shared"),
            identity=p.get("identity"),
            advertise_interval=float(p.get("advertise_interval", 2.0)),
        )
        if not node.name:
            diags.append(Diagnostic(file, f"proxy[{i}]", "name", "required"))
        elif node.name in names:
            diags.append(Diagnostic(file, f"proxy[{i}]", "name", f"duplicate node name {node.name!r}"))
        names.add(node.name)
        if node.router not in router_names:
            diags.append(Diagnostic(file, f"proxy[{i}]", "router", f"unknown router {node.router!r}"))
        _check_choice(node.transport, TRANSPORTS, file, f"proxy[{i}]", "transport", diags)
        _check_choice(node.mode, PEER_MODES, file, f"proxy[{i}]", "mode", diags)
        for j, t in enumerate(p.get("topic", [])):
            node.topics.append(_parse_topic(t, file, f"proxy[{i}].topic[{j}]", diags))
        spec.proxies.append(node)
    for i, l in enumerate(doc.get("link", [])):
        link = LinkSpec(
            a=l.get("a", ""),
            b=l.get("b", ""),
            transport=l.get("transport", "tcp"),
            loss=float(l.get("loss", 0.0)),
            delay_ms=float(l.get("delay_ms", 0.0)),
        )
        for end in ("a", "b"):
            if getattr(link, end) not in router_names:
                diags.append(Diagnostic(file, f"link[{i}]", end, f"unknown router {getattr(link, end)!r}"))
        _check_choice(link.transport, TRANSPORTS, file, f"link[{i}]", "transport", diags)
        if not 0.0 <= link.loss <= 1.0:
            diags.append(Diagnostic(file, f"link[{i}]", "loss", "must be in [0, 1]"))
        if link.delay_ms < 0:
            diags.append(Diagnostic(file, f"link[{i}]", "delay_ms", "must be >= 0"))
        spec.links.append(link)
    spec.anchor_cert, spec.key_dir = _parse_keys(doc, base, file, diags, require=False)
    return (spec if not diags else None), diags


def detect_kind(doc: dict) -> Optional[str]:
    if isinstance(doc.get("router"), list) or "link" in doc:
        return "topology"
    if "local_bus" in doc or "topic" in doc:
        return "proxy"
    if isinstance(doc.get("router"), dict):
        return "router"
    return None


_PARSERS = {
    "router": parse_router_config,
    "proxy": parse_proxy_config,
    "topology": parse_topology_config,
}


def validate_file(path: Path, kind: Optional[str] = None) -> Tuple[Optional[object], List[Diagnostic]]:
    """Parse and statically validate one config file of any kind."""
    diags: List[Diagnostic] = []
    doc = _read_toml(path, diags)
    if doc is None:
        return None, diags
    kind = kind or detect_kind(doc)
    if kind not in _PARSERS:
        diags.append(Diagnostic(str(path), "-", "-", "cannot determine config kind (router/proxy/topology)"))
        return None, diags
    return _PARSERS[kind](doc, path)


def load_router_config(path) -> RouterConfig:
    cfg, diags = validate_file(Path(path), "router")
    if cfg is None:
        raise ConfigError(diags)
    return cfg


def load_proxy_config(path) -> ProxyConfig:
    cfg, diags = validate_file(Path(path), "proxy")
    if cfg is None:
        raise ConfigError(diags)
    return cfg


def load_topology_config(path) -> TopologySpec:
    cfg, diags = validate_file(Path(path), "topology")
    if cfg is None:
        raise ConfigError(diags)
    return cfg
