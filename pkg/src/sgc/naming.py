"""Location-independent topic identifiers.

Every topic is identified by a 256-bit name derived by hashing its
metadata. Anyone holding the same metadata derives the same name; nothing
in this package ever maps a name back to metadata.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

FINGERPRINT_LEN = 32
NAME_LEN = 32


class MetadataError(ValueError):
    """Topic metadata violates an invariant and cannot be serialized."""


@dataclass(frozen=True)
class GdpName:
    """A 256-bit, globally unique, location-independent topic identifier."""

    value: bytes

    def __post_init__(self):
        if not isinstance(self.value, bytes) or len(self.value) != NAME_LEN:
            raise MetadataError("a name is exactly 32 bytes")

    @classmethod
    def zero(cls) -> "GdpName":
        return cls(bytes(NAME_LEN))

    @classmethod
    def from_hex(cls, text: str) -> "GdpName":
        return cls(bytes.fromhex(text))

    def hex(self) -> str:
        return self.value.hex()

    def short(self) -> str:
        """Truncated display form, e.g. ``75e...0fc``."""
        h = self.hex()
        return f"{h[:3]}...{h[-3:]}"

    def is_zero(self) -> bool:
        return self.value == bytes(NAME_LEN)

    def __bytes__(self) -> bytes:
        return self.value

    def __repr__(self) -> str:
        return f"GdpName[{self.short()}]"


@dataclass(frozen=True)
class TopicMetadata:
    """The fields that are hashed to derive a topic's global name.

    ``unique_suffix`` disambiguates deployments of the same topic at
    different locations. ``cert_fingerprint`` is the 32-byte digest of the
    topic's certificate, so knowledge of name and type alone is not enough
    to reconstruct the identifier.
    """

    topic_name: str
    topic_type: str
    author: str = ""
    maintainer: str = ""
    description: str = ""
    unique_suffix: str = ""
    cert_fingerprint: bytes = bytes(FINGERPRINT_LEN)

    def validate(self) -> None:
        if not self.topic_name:
            raise MetadataError("topic_name must be non-empty")
        if not self.topic_type:
            raise MetadataError("topic_type must be non-empty")
        if not isinstance(self.cert_fingerprint, bytes) or len(self.cert_fingerprint) != FINGERPRINT_LEN:
            raise MetadataError("cert_fingerprint must be exactly 32 bytes")


# Serialization order is fixed; every field keeps its length prefix even
# when empty so that field boundaries never shift.
_STRING_FIELDS = (
    "topic_name",
    "topic_type",
    "author",
    "maintainer",
    "description",
    "unique_suffix",
)


def canonical_serialize(meta: TopicMetadata) -> bytes:
    """Deterministic, injective byte encoding of topic metadata.

    Each field is encoded as a 4-byte big-endian length followed by its
    raw bytes, in a fixed field order ending with the certificate
    fingerprint.
    """
    meta.validate()
    out = bytearray()
    for field_name in _STRING_FIELDS:
        raw = getattr(meta, field_name).encode("utf-8")
        out += struct.pack(">I", len(raw))
        out += raw
    out += struct.pack(">I", len(meta.cert_fingerprint))
    out += meta.cert_fingerprint
    return bytes(out)


def derive_name(meta: TopicMetadata) -> GdpName:
    """SHA-256 of the canonical metadata serialization."""
    return GdpName(hashlib.sha256(canonical_serialize(meta)).digest())


def metadata_from_doc(doc: dict) -> TopicMetadata:
    """Build metadata from a JSON-style document.

    The document carries the seven metadata fields by name, with
    ``cert_fingerprint`` given as 64 hex characters.
    """
    if not isinstance(doc, dict):
        raise MetadataError("metadata document must be a JSON object")
    known = set(_STRING_FIELDS) | {"cert_fingerprint"}
    unknown = set(doc) - known
    if unknown:
        raise MetadataError(f"unknown metadata fields: {sorted(unknown)}")
    kwargs = {}
    for field_name in _STRING_FIELDS:
        val = doc.get(field_name, "")
        if not isinstance(val, str):
            raise MetadataError(f"{field_name} must be a string")
        kwargs[field_name] = val
    fp_hex = doc.get("cert_fingerprint", "00" * FINGERPRINT_LEN)
    if not isinstance(fp_hex, str):
        raise MetadataError("cert_fingerprint must be a hex string")
    try:
        fp = bytes.fromhex(fp_hex)
    except ValueError as exc:
        raise MetadataError("cert_fingerprint is not valid hex") from exc
    meta = TopicMetadata(cert_fingerprint=fp, **kwargs)
    meta.validate()
    return meta
