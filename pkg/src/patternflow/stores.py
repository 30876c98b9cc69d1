"""Storage patterns: persistent data stores, key/trust/secure stores and the
quorum-replicated redundant store.

Store file layout (``<dir>/<name>.log``), one frame per operation::

    u32 frame length (big-endian)
    u8  opcode        1 = put, 2 = delete
    u16 key length    key bytes
    u32 value length  value bytes
    u32 ttl           ticks, 0 = none
    u8  visibility    0 = global, 1 = local

Local entries store their key as ``owner NUL key``. Frames are replayed on
open, last writer wins; a truncated trailing frame is ignored.
"""

from __future__ import annotations

import base64
import json
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .clock import ManualClock
from .crypto import Certificate, KeyPair
from .errors import (
    Expired,
    ExpiredCredential,
    KeyNotFound,
    PatternError,
    QuorumUnavailable,
    ScopeViolation,
    UnknownAlias,
)

OP_PUT = 1
OP_DELETE = 2
_HEAD = struct.Struct(">I")


class StoreUnavailable(PatternError):
    kind = "store-unavailable"


@dataclass(frozen=True)
class Entry:
    value: bytes
    created_at: int
    ttl: int | None
    owner: str | None  # None = global visibility

    def expired(self, now: int) -> bool:
        return self.ttl is not None and now > self.created_at + self.ttl


@dataclass(frozen=True)
class Receipt:
    key: str
    acks: int = 1


def encode_record(opcode: int, key: str, value: bytes = b"", ttl: int | None = None, owner: str | None = None) -> bytes:
    key_bytes = key.encode("utf-8") if owner is None else owner.encode("utf-8") + b"\x00" + key.encode("utf-8")
    body = (
        struct.pack(">BH", opcode, len(key_bytes))
        + key_bytes
        + struct.pack(">I", len(value))
        + value
        + struct.pack(">IB", ttl or 0, 0 if owner is None else 1)
    )
    return _HEAD.pack(len(body)) + body


def decode_records(data: bytes):
    """Yield ``(opcode, key, value, ttl, owner)`` tuples from a store file."""
    pos = 0
    while pos + 4 <= len(data):
        (length,) = _HEAD.unpack_from(data, pos)
        frame = data[pos + 4 : pos + 4 + length]
        if len(frame) < length:
            return
        pos += 4 + length
        opcode, key_len = struct.unpack_from(">BH", frame, 0)
        key_bytes = frame[3 : 3 + key_len]
        (value_len,) = struct.unpack_from(">I", frame, 3 + key_len)
        value_start = 7 + key_len
        value = frame[value_start : value_start + value_len]
        ttl, visibility = struct.unpack_from(">IB", frame, value_start + value_len)
        owner = None
        if visibility == 1:
            owner_bytes, _, key_bytes = key_bytes.partition(b"\x00")
            owner = owner_bytes.decode("utf-8")
        yield opcode, key_bytes.decode("utf-8"), value, ttl or None, owner


class DataStore:
    """Keyed store, persistent when given a data directory.

    ``visibility="local"`` entries belong to the flow that wrote them
    (``scope``); reads from any other scope raise ScopeViolation. TTLs are
    in clock ticks and checked lazily on access. After a reopen, TTLs count
    from the replay time since the file records durations, not deadlines.
    """

    def __init__(self, name: str, data_dir: str | os.PathLike | None = None, clock=None):
        self.name = name
        self.clock = clock or ManualClock()
        self.path = Path(data_dir) / f"{name}.log" if data_dir is not None else None
        self.alive = True
        self._entries: dict[str, Entry] = {}
        self._lock = threading.RLock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._replay()

    def _replay(self) -> None:
        if not self.path.exists():
            return
        now = self.clock.now()
        for opcode, key, value, ttl, owner in decode_records(self.path.read_bytes()):
            if opcode == OP_PUT:
                self._entries[key] = Entry(value, now, ttl, owner)
            else:
                self._entries.pop(key, None)

    def _append(self, frame: bytes) -> None:
        if self.path is None:
            return
        with open(self.path, "ab") as fh:
            fh.write(frame)
            fh.flush()

    def _check_alive(self) -> None:
        if not self.alive:
            raise StoreUnavailable(f"store {self.name!r} is down")

    def put(self, key: str, value: bytes, ttl: int | None = None, visibility: str = "global", scope: str | None = None) -> Receipt:
        self._check_alive()
        if visibility not in ("global", "local"):
            raise ValueError(f"unknown visibility {visibility!r}")
        owner = None
        if visibility == "local":
            if not scope:
                raise ValueError("local visibility needs the owning scope")
            owner = scope
        with self._lock:
            existing = self._entries.get(key)
            if existing is not None and existing.owner is not None and existing.owner != scope:
                raise ScopeViolation(f"{key!r} is local to another flow")
            self._entries[key] = Entry(bytes(value), self.clock.now(), ttl, owner)
            self._append(encode_record(OP_PUT, key, bytes(value), ttl, owner))
        return Receipt(key)

    def _live(self, key: str) -> Entry:
        entry = self._entries.get(key)
        if entry is None:
            raise KeyNotFound(f"{key!r} not in store {self.name!r}")
        if entry.expired(self.clock.now()):
            del self._entries[key]
            self._append(encode_record(OP_DELETE, key))
            raise Expired(f"{key!r} expired in store {self.name!r}")
        return entry

    def get(self, key: str, scope: str | None = None) -> bytes:
        self._check_alive()
        with self._lock:
            entry = self._live(key)
            if entry.owner is not None and entry.owner != scope:
                raise ScopeViolation(f"{key!r} is local to another flow")
            return entry.value

    def contains(self, key: str, scope: str | None = None) -> bool:
        try:
            self.get(key, scope)
        except KeyNotFound:
            return False
        return True

    def delete(self, key: str) -> bool:
        self._check_alive()
        with self._lock:
            entry = self._entries.pop(key, None)
            if entry is None:
                return False
            self._append(encode_record(OP_DELETE, key))
            return not entry.expired(self.clock.now())

    def query(self, prefix: str = "", scope: str | None = None) -> list[str]:
        self._check_alive()
        with self._lock:
            now = self.clock.now()
            return sorted(
                k
                for k, e in self._entries.items()
                if k.startswith(prefix) and not e.expired(now) and (e.owner is None or e.owner == scope)
            )

    def __len__(self) -> int:
        return len(self.query())

    def __repr__(self) -> str:
        return f"DataStore({self.name!r}, entries={len(self._entries)}, path={self.path})"


# Key material


class KeyStore:
    """Private keys with their certificates. Each lookup is audited."""

    def __init__(self, audit=None):
        self.audit = audit
        self._pairs: dict[str, KeyPair] = {}
        self._lock = threading.Lock()

    def add(self, alias: str, pair: KeyPair) -> None:
        with self._lock:
            self._pairs[alias] = pair
        self._audit("keystore-config", alias, "add")

    def generate(self, alias: str, rng=None) -> KeyPair:
        pair = KeyPair.generate(alias, rng)
        self.add(alias, pair)
        return pair

    def aliases(self) -> list[str]:
        return sorted(self._pairs)

    def _audit(self, kind: str, alias: str, detail: str) -> None:
        if self.audit is not None:
            self.audit.append(kind, "keystore", f"{detail}:{alias}")

    def get(self, alias: str) -> KeyPair:
        try:
            pair = self._pairs[alias]
        except KeyError:
            raise UnknownAlias(f"no key pair {alias!r}") from None
        self._audit("key-access", alias, "get")
        return pair

    def get_private(self, alias: str) -> bytes:
        return self.get(alias).private_key

    def __repr__(self) -> str:
        return f"KeyStore(aliases={self.aliases()})"


class TrustStore:
    """Certificates of other parties; never holds private keys."""

    def __init__(self, audit=None):
        self.audit = audit
        self._certs: dict[str, Certificate] = {}

    def add(self, alias: str, cert: Certificate) -> None:
        if not isinstance(cert, Certificate):
            raise TypeError("trust store only accepts certificates")
        self._certs[alias] = cert
        if self.audit is not None:
            self.audit.append("truststore-config", "truststore", f"add:{alias}")

    def get_cert(self, alias: str) -> Certificate:
        try:
            cert = self._certs[alias]
        except KeyError:
            raise UnknownAlias(f"no certificate {alias!r}") from None
        if self.audit is not None:
            self.audit.append("key-access", "truststore", f"get:{alias}")
        return cert

    def aliases(self) -> list[str]:
        return sorted(self._certs)


@dataclass(frozen=True)
class Credential:
    id: str
    kind: str  # userPassword | token
    secret: bytes
    expiry: int | None = None

    def __repr__(self) -> str:
        return f"Credential(id={self.id!r}, kind={self.kind!r}, expiry={self.expiry})"


class SecureStore:
    """Users/passwords and tokens.

    With a ``backing`` store (normally an encrypting store) every change is
    written through, so secrets only reach disk in encrypted form.
    """

    KINDS = ("userPassword", "token")

    def __init__(self, clock=None, audit=None, backing=None):
        self.clock = clock or ManualClock()
        self.audit = audit
        self.backing = backing
        self._creds: dict[str, Credential] = {}
        self._lock = threading.Lock()
        if backing is not None:
            for key in backing.query():
                raw = json.loads(backing.get(key))
                self._creds[key] = Credential(key, raw["kind"], base64.b64decode(raw["secret"]), raw["expiry"])

    def put(self, cred_id: str, kind: str, secret: bytes, expiry: int | None = None) -> None:
        if kind not in self.KINDS:
            raise ValueError(f"unknown credential kind {kind!r}")
        cred = Credential(cred_id, kind, bytes(secret), expiry)
        with self._lock:
            self._creds[cred_id] = cred
            if self.backing is not None:
                payload = {"kind": kind, "secret": base64.b64encode(cred.secret).decode(), "expiry": expiry}
                self.backing.put(cred_id, json.dumps(payload).encode())

    def record(self, cred_id: str) -> Credential:
        try:
            cred = self._creds[cred_id]
        except KeyError:
            raise UnknownAlias(f"no credential {cred_id!r}") from None
        if cred.expiry is not None and self.clock.now() > cred.expiry:
            raise ExpiredCredential(f"credential {cred_id!r} expired at {cred.expiry}")
        return cred

    def get(self, cred_id: str) -> bytes:
        cred = self.record(cred_id)
        if self.audit is not None:
            self.audit.append("key-access", "securestore", f"get:{cred_id}")
        return cred.secret

    def remove(self, cred_id: str) -> bool:
        with self._lock:
            found = self._creds.pop(cred_id, None) is not None
            if found and self.backing is not None:
                self.backing.delete(cred_id)
            return found

    def __contains__(self, cred_id: str) -> bool:
        return cred_id in self._creds

    def list(self) -> list[tuple[str, str]]:
        return sorted((c.id, c.kind) for c in self._creds.values())


class RedundantStore:
    """Writes go to every live replica and need ``write_quorum`` acks; reads
    take the first live replica holding the key."""

    def __init__(self, replicas: Iterable[DataStore], write_quorum: int):
        self.replicas = list(replicas)
        if len(self.replicas) < 2:
            raise ValueError("a redundant store needs at least two replicas")
        if not 1 <= write_quorum <= len(self.replicas):
            raise ValueError("write quorum must be between 1 and the replica count")
        self.write_quorum = write_quorum
        self._lock = threading.Lock()

    def alive(self) -> list[DataStore]:
        return [r for r in self.replicas if r.alive]

    def put(self, key: str, value: bytes, ttl: int | None = None) -> Receipt:
        with self._lock:
            live = self.alive()
            if len(live) < self.write_quorum:
                raise QuorumUnavailable(f"{len(live)} live replicas, quorum is {self.write_quorum}")
            acks = 0
            for replica in live:
                try:
                    replica.put(key, value, ttl=ttl)
                    acks += 1
                except StoreUnavailable:
                    continue
            if acks < self.write_quorum:
                raise QuorumUnavailable(f"only {acks} replicas acknowledged")
            return Receipt(key, acks)

    def get(self, key: str) -> bytes:
        for replica in self.replicas:
            if not replica.alive:
                continue
            try:
                return replica.get(key)
            except (KeyNotFound, StoreUnavailable):
                continue
        raise KeyNotFound(f"{key!r} not on any live replica")

    def delete(self, key: str) -> bool:
        found = False
        for replica in self.alive():
            found = replica.delete(key) or found
        return found


def redundant_put(rs: RedundantStore, key: str, value: bytes) -> Receipt:
    return rs.put(key, value)


def redundant_get(rs: RedundantStore, key: str) -> bytes:
    return rs.get(key)
