"""Per-packet security envelope and key material.

A sealed payload follows the encrypt -> hash -> sign pipeline: the
plaintext is encrypted with AES-256-CTR under a pre-shared topic key, the
covered header bytes plus nonce plus ciphertext are hashed with SHA-256,
and the digest is signed with RSASSA-PSS under the sender's key.
Verification is all-or-nothing; no plaintext is released unless both the
digest and the signature check out.

Certificates are a deliberately small stand-in for X.509: a subject, an
RSA public key, and a trust-anchor signature over both. Their canonical
form is JSON with sorted keys and no insignificant whitespace, and a
certificate's fingerprint is the SHA-256 of those canonical bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

RSA_BITS = 2048
SYMMETRIC_KEY_LEN = 32
NONCE_LEN = 12
DIGEST_LEN = 32

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32)
_SHA256 = hashes.SHA256()

# Domain separation prefixes for the three signature contexts.
_CERT_DOMAIN = b"sgc-cert\x00"
ADVERTISE_DOMAIN = b"sgc-advertise\x00"
SUBSCRIBE_DOMAIN = b"sgc-subscribe\x00"


class EnvelopeError(Exception):
    """Base class for seal/open failures."""


class IntegrityError(EnvelopeError):
    """The recomputed digest does not match; the message was tampered with."""


class AuthenticityError(EnvelopeError):
    """The signature does not verify under the presented certificate."""


class EnvelopeFormatError(EnvelopeError):
    """The byte encoding of an envelope or credential is malformed."""


class KeyStoreError(Exception):
    """Key material is missing or malformed on disk."""


def fresh_nonce() -> bytes:
    """Random 96-bit nonce; one per seal."""
    return os.urandom(NONCE_LEN)


@dataclass(frozen=True)
class KeyPair:
    """An RSA-2048 signing key pair."""

    private_key: rsa.RSAPrivateKey

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(rsa.generate_private_key(public_exponent=65537, key_size=RSA_BITS))

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return self.private_key.public_key()

    def public_der(self) -> bytes:
        return self.public_key.public_bytes(
            serialization.Encoding.DER,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        )

    def sign(self, data: bytes) -> bytes:
        return self.private_key.sign(data, _PSS, _SHA256)

    def private_pem(self) -> bytes:
        return self.private_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    @classmethod
    def from_private_pem(cls, pem: bytes) -> "KeyPair":
        key = serialization.load_pem_private_key(pem, password=None)
        if not isinstance(key, rsa.RSAPrivateKey) or key.key_size < RSA_BITS:
            raise KeyStoreError("expected an RSA private key of at least 2048 bits")
        return cls(key)


def _verify_with_der(public_der: bytes, signature: bytes, data: bytes) -> None:
    try:
        pub = serialization.load_der_public_key(public_der)
        pub.verify(signature, data, _PSS, _SHA256)
    except (InvalidSignature, ValueError, TypeError) as exc:
        raise AuthenticityError("signature verification failed") from exc


def _cert_signing_bytes(subject: str, public_der: bytes) -> bytes:
    raw = subject.encode("utf-8")
    return _CERT_DOMAIN + struct.pack(">I", len(raw)) + raw + public_der


@dataclass(frozen=True)
class Certificate:
    """Simplified signed identity record: subject + public key + anchor signature."""

    subject: str
    public_der: bytes
    issuer_signature: bytes

    def canonical_bytes(self) -> bytes:
        doc = {
            "subject": self.subject,
            "public_key_b64": base64.b64encode(self.public_der).decode("ascii"),
            "issuer_signature_b64": base64.b64encode(self.issuer_signature).decode("ascii"),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical_bytes()).digest()

    def verify_under(self, anchor: "Certificate") -> None:
        """Check the issuer signature against a trust anchor's key."""
        _verify_with_der(
            anchor.public_der,
            self.issuer_signature,
            _cert_signing_bytes(self.subject, self.public_der),
        )

    def verify_signature(self, signature: bytes, data: bytes) -> None:
        """Check a signature made by this certificate's subject over ``data``."""
        _verify_with_der(self.public_der, signature, data)

    @classmethod
    def from_json_bytes(cls, raw: Union[bytes, str]) -> "Certificate":
        try:
            doc = json.loads(raw)
            return cls(
                subject=doc["subject"],
                public_der=base64.b64decode(doc["public_key_b64"], validate=True),
                issuer_signature=base64.b64decode(doc["issuer_signature_b64"], validate=True),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise EnvelopeFormatError(f"malformed certificate: {exc}") from exc


def issue_certificate(subject: str, key: KeyPair, anchor: KeyPair) -> Certificate:
    """Certificate for ``key`` whose issuer signature verifies under ``anchor``."""
    public_der = key.public_der()
    signature = anchor.sign(_cert_signing_bytes(subject, public_der))
    return Certificate(subject=subject, public_der=public_der, issuer_signature=signature)


def self_signed_anchor(subject: str, key: KeyPair) -> Certificate:
    return issue_certificate(subject, key, key)


@dataclass(frozen=True)
class SymmetricKey:
    """32-byte AES-256 key scoped to one topic or tunnel."""

    key: bytes
    scope: str = ""

    def __post_init__(self):
        if len(self.key) != SYMMETRIC_KEY_LEN:
            raise KeyStoreError("symmetric key must be exactly 32 bytes")

    def __repr__(self) -> str:  # never leak key bytes into logs
        return f"SymmetricKey(scope={self.scope!r})"

    @classmethod
    def generate(cls, scope: str = "") -> "SymmetricKey":
        return cls(os.urandom(SYMMETRIC_KEY_LEN), scope)


def _ctr(key: SymmetricKey, nonce: bytes):
    # 16-byte initial counter block: 12-byte nonce, 4-byte counter from 0.
    return Cipher(algorithms.AES(key.key), modes.CTR(nonce + b"\x00" * 4))


@dataclass(frozen=True)
class Envelope:
    """Sealed payload: nonce, ciphertext, digest over the covered bytes, signature."""

    nonce: bytes
    ciphertext: Union[bytes, memoryview]
    digest: bytes
    signature: bytes

    def encode(self) -> bytes:
        return (
            self.nonce
            + self.digest
            + struct.pack(">H", len(self.signature))
            + self.signature
            + bytes(self.ciphertext)
        )

    @classmethod
    def decode(cls, data) -> "Envelope":
        view = data if isinstance(data, memoryview) else memoryview(data)
        fixed = NONCE_LEN + DIGEST_LEN + 2
        if len(view) < fixed:
            raise EnvelopeFormatError("envelope shorter than its fixed fields")
        sig_len = int.from_bytes(bytes(view[NONCE_LEN + DIGEST_LEN:fixed]), "big")
        if len(view) < fixed + sig_len:
            raise EnvelopeFormatError("envelope truncated inside signature")
        return cls(
            nonce=bytes(view[:NONCE_LEN]),
            digest=bytes(view[NONCE_LEN:NONCE_LEN + DIGEST_LEN]),
            signature=bytes(view[fixed:fixed + sig_len]),
            ciphertext=view[fixed + sig_len:],
        )


def _covered_digest(covered_header: bytes, nonce: bytes, ciphertext) -> bytes:
    h = hashlib.sha256()
    h.update(covered_header)
    h.update(nonce)
    h.update(ciphertext)
    return h.digest()


def seal(
    plaintext: bytes,
    key: SymmetricKey,
    signer: KeyPair,
    covered_header: bytes = b"",
    *,
    _nonce: Optional[bytes] = None,
) -> Envelope:
    """Encrypt, hash, and sign a payload.

    ``_nonce`` is a test-only hook for known-answer tests; production
    callers always get a fresh random nonce.
    """
    nonce = fresh_nonce() if _nonce is None else _nonce
    if len(nonce) != NONCE_LEN:
        raise EnvelopeError("nonce must be 12 bytes")
    enc = _ctr(key, nonce).encryptor()
    ciphertext = enc.update(plaintext) + enc.finalize()
    digest = _covered_digest(covered_header, nonce, ciphertext)
    return Envelope(nonce=nonce, ciphertext=ciphertext, digest=digest, signature=signer.sign(digest))


def open_envelope(
    env: Envelope,
    key: SymmetricKey,
    sender_cert: Certificate,
    covered_header: bytes = b"",
) -> bytes:
    """Verify and decrypt an envelope. Verification precedes decryption."""
    recomputed = _covered_digest(covered_header, env.nonce, env.ciphertext)
    if recomputed != env.digest:
        raise IntegrityError("digest mismatch")
    sender_cert.verify_signature(env.signature, env.digest)
    dec = _ctr(key, env.nonce).decryptor()
    return dec.update(bytes(env.ciphertext)) + dec.finalize()


# --- control-packet credentials -------------------------------------------
#
# Advertisements and subscribe requests carry {certificate, signature} as a
# canonical JSON payload. The signature covers a domain prefix, the 32-byte
# topic name, and the certificate's canonical bytes, so a credential is
# bound to one name and one key but is replayable by intermediate routers
# (re-floods and RIB responses reuse the original blob).


def make_control_payload(domain: bytes, name: bytes, cert: Certificate, signer: KeyPair) -> bytes:
    sig = signer.sign(domain + name + cert.canonical_bytes())
    doc = {
        "cert": json.loads(cert.canonical_bytes()),
        "sig_b64": base64.b64encode(sig).decode("ascii"),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def verify_control_payload(
    domain: bytes,
    name: bytes,
    payload,
    anchor: Certificate,
) -> Certificate:
    """Parse and verify a control credential; returns the embedded certificate."""
    try:
        doc = json.loads(bytes(payload))
        cert = Certificate(
            subject=doc["cert"]["subject"],
            public_der=base64.b64decode(doc["cert"]["public_key_b64"], validate=True),
            issuer_signature=base64.b64decode(doc["cert"]["issuer_signature_b64"], validate=True),
        )
        sig = base64.b64decode(doc["sig_b64"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise EnvelopeFormatError(f"malformed control payload: {exc}") from exc
    cert.verify_under(anchor)
    cert.verify_signature(sig, domain + name + cert.canonical_bytes())
    return cert


# --- key material on disk ---------------------------------------------------
#
# <ref>.key.pem    PEM PKCS8 private key
# <ref>.cert.json  certificate, file bytes == canonical JSON bytes
# <ref>.psk        64 hex chars (32-byte symmetric key)


def save_keypair(path: Path, key: KeyPair) -> None:
    path.write_bytes(key.private_pem())


def load_keypair(path: Path) -> KeyPair:
    try:
        return KeyPair.from_private_pem(Path(path).read_bytes())
    except (OSError, ValueError) as exc:
        raise KeyStoreError(f"cannot load private key {path}: {exc}") from exc


def save_certificate(path: Path, cert: Certificate) -> None:
    path.write_bytes(cert.canonical_bytes())


def load_certificate(path: Path) -> Certificate:
    try:
        return Certificate.from_json_bytes(Path(path).read_bytes())
    except (OSError, EnvelopeFormatError) as exc:
        raise KeyStoreError(f"cannot load certificate {path}: {exc}") from exc


def save_psk(path: Path, key: SymmetricKey) -> None:
    path.write_text(key.key.hex() + "\n")


def load_psk(path: Path, scope: str = "") -> SymmetricKey:
    try:
        raw = bytes.fromhex(Path(path).read_text().strip())
        return SymmetricKey(raw, scope or Path(path).stem)
    except (OSError, ValueError) as exc:
        raise KeyStoreError(f"cannot load symmetric key {path}: {exc}") from exc


class KeyStore:
    """Resolves key references against a key directory."""

    def __init__(self, key_dir: Union[str, Path], anchor_cert_path: Union[str, Path, None] = None):
        self.key_dir = Path(key_dir)
        self._anchor: Optional[Certificate] = None
        if anchor_cert_path is not None:
            self._anchor = load_certificate(Path(anchor_cert_path))

    @property
    def anchor(self) -> Certificate:
        if self._anchor is None:
            raise KeyStoreError("no trust anchor configured")
        return self._anchor

    def psk_path(self, ref: str) -> Path:
        return self.key_dir / f"{ref}.psk"

    def cert_path(self, ref: str) -> Path:
        return self.key_dir / f"{ref}.cert.json"

    def key_path(self, ref: str) -> Path:
        return self.key_dir / f"{ref}.key.pem"

    def has_psk(self, ref: str) -> bool:
        return self.psk_path(ref).is_file()

    def has_certificate(self, ref: str) -> bool:
        return self.cert_path(ref).is_file()

    def has_keypair(self, ref: str) -> bool:
        return self.key_path(ref).is_file()

    def psk(self, ref: str) -> SymmetricKey:
        return load_psk(self.psk_path(ref), scope=ref)

    def certificate(self, ref: str) -> Certificate:
        return load_certificate(self.cert_path(ref))

    def keypair(self, ref: str) -> KeyPair:
        return load_keypair(self.key_path(ref))
