"""Confidentiality, integrity, authorization and audit patterns."""

from __future__ import annotations

import base64
import hashlib
import json
import secrets
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .clock import ManualClock
from .core import Channel, Exchange, Message
from .crypto import REFERENCE
from .errors import (
    AuthenticationFailed,
    AuthorizationDenied,
    ChainBroken,
    IntegrityViolation,
    MissingSignature,
    NoPrincipal,
    NotEncrypted,
    NotRefreshable,
    TokenExpired,
    TokenUnknown,
    UnknownAlias,
    VerificationFailed,
)

PARTS = frozenset({"body", "headers", "attachments"})
GENESIS = "0" * 64


# Audit log


def _escape(field_: str) -> str:
    return field_.replace("\\", "\\\\").replace("|", "\\|").replace("\n", "\\n")


def _split_escaped(line: str) -> list[str]:
    fields, current, i = [], [], 0
    while i < len(line):
        ch = line[i]
        if ch == "\\" and i + 1 < len(line):
            nxt = line[i + 1]
            current.append("\n" if nxt == "n" else nxt)
            i += 2
            continue
        if ch == "|":
            fields.append("".join(current))
            current = []
        else:
            current.append(ch)
        i += 1
    fields.append("".join(current))
    return fields


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    timestamp: int
    kind: str
    actor: str
    details: str
    chain_hash: str

    def canonical(self) -> bytes:
        return "|".join([str(self.seq), str(self.timestamp), self.kind, self.actor, self.details]).encode("utf-8")

    def to_line(self) -> str:
        fields = [str(self.seq), str(self.timestamp), self.kind, self.actor, self.details, self.chain_hash]
        return "|".join(_escape(f) for f in fields)


def chain_hash(prev: str, record: AuditRecord) -> str:
    return hashlib.sha256(prev.encode("ascii") + record.canonical()).hexdigest()


def parse_audit_line(line: str, position: int) -> AuditRecord:
    fields = _split_escaped(line)
    if len(fields) != 6:
        raise ChainBroken(position)
    try:
        record = AuditRecord(int(fields[0]), int(fields[1]), *fields[2:])
    except ValueError:
        raise ChainBroken(position) from None
    if record.to_line() != line:  # non-canonical spellings such as "007" count as tampering
        raise ChainBroken(position)
    return record


def first_broken(records: Iterable[AuditRecord]) -> int | None:
    prev = GENESIS
    for expected_seq, record in enumerate(records):
        if record.seq != expected_seq or record.chain_hash != chain_hash(prev, record):
            return expected_seq
        prev = record.chain_hash
    return None


class AuditLog:
    """Append-only, hash-chained event log.

    Each record's hash is ``sha256(previous hash || seq|timestamp|kind|actor|details)``
    over the unescaped fields, starting from 64 zeros. With a ``path`` every
    record is appended to a line-oriented file as it is written.
    """

    def __init__(self, path: str | Path | None = None, clock=None):
        self.path = Path(path) if path is not None else None
        self.clock = clock or ManualClock()
        self._records: list[AuditRecord] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            lines = self.path.read_text(encoding="utf-8").splitlines()
            self._records = [parse_audit_line(line, i) for i, line in enumerate(lines)]

    @property
    def records(self) -> tuple[AuditRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def append(self, kind: str, actor: str = "", details: str = "") -> AuditRecord:
        with self._lock:
            prev = self._records[-1].chain_hash if self._records else GENESIS
            draft = AuditRecord(len(self._records), self.clock.now(), kind, actor, details, "")
            record = replace(draft, chain_hash=chain_hash(prev, draft))
            self._records.append(record)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(record.to_line() + "\n")
            return record

    def of_kind(self, kind: str) -> list[AuditRecord]:
        return [r for r in self._records if r.kind == kind]

    def verify_chain(self) -> bool:
        broken = first_broken(self._records)
        if broken is not None:
            raise ChainBroken(broken)
        return True

    @staticmethod
    def verify_file(path: str | Path) -> bool:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        records = [parse_audit_line(line, i) for i, line in enumerate(lines)]
        broken = first_broken(records)
        if broken is not None:
            raise ChainBroken(broken)
        return True


def audit_append(log: AuditLog, kind: str, actor: str = "", details: str = "") -> AuditRecord:
    return log.append(kind, actor, details)


def audit_verify_chain(log: AuditLog) -> bool:
    return log.verify_chain()


# Message-level encryption and signatures


class MessageSecurity:
    """Encryptor/decryptor and signer/verifier bound to key material.

    Encrypted header values are collected into one JSON document, encrypted
    and carried base64-encoded in ``sec.hdr``. ``sec.*`` headers themselves
    are never encrypted.
    """

    def __init__(self, keystore, truststore, provider=REFERENCE, audit: AuditLog | None = None):
        self.keystore = keystore
        self.truststore = truststore
        self.provider = provider
        self.audit = audit

    def _audit(self, kind: str, actor: str, details: str) -> None:
        if self.audit is not None:
            self.audit.append(kind, actor, details)

    def encrypt_message(self, msg: Message, key_alias: str, parts: Iterable[str] = ("body",)) -> Message:
        parts = frozenset(parts)
        if not parts or not parts <= PARTS:
            raise ValueError(f"parts must be a non-empty subset of {sorted(PARTS)}")
        if "sec.encrypted" in msg.headers:
            raise ValueError("message is already encrypted")
        key = self.keystore.get_private(key_alias)
        out = msg
        if "body" in parts:
            out = out.with_body(self.provider.encrypt(key, msg.body))
        if "attachments" in parts:
            out = out.with_attachments({k: self.provider.encrypt(key, v) for k, v in msg.attachments.items()})
        headers = dict(out.headers)
        if "headers" in parts:
            plain = {k: v for k, v in headers.items() if not k.startswith("sec.")}
            blob = self.provider.encrypt(key, json.dumps(plain, separators=(",", ":")).encode("utf-8"))
            headers = {k: v for k, v in headers.items() if k.startswith("sec.")}
            headers["sec.hdr"] = base64.b64encode(blob).decode("ascii")
        headers["sec.encrypted"] = self.provider.scheme
        headers["sec.parts"] = ",".join(sorted(parts))
        return replace(out, headers=headers)

    def decrypt_message(self, msg: Message, key_alias: str) -> Message:
        if "sec.encrypted" not in msg.headers:
            raise NotEncrypted(f"message {msg.id} carries no sec.encrypted header")
        parts = set(msg.headers.get("sec.parts", "body").split(","))
        key = self.keystore.get_private(key_alias)
        out = msg
        if "body" in parts:
            out = out.with_body(self.provider.decrypt(key, msg.body))
        if "attachments" in parts:
            out = out.with_attachments({k: self.provider.decrypt(key, v) for k, v in msg.attachments.items()})
        headers = {k: v for k, v in out.headers.items() if k not in ("sec.encrypted", "sec.parts", "sec.hdr")}
        if "headers" in parts:
            blob = base64.b64decode(msg.headers.get("sec.hdr", ""))
            restored = json.loads(self.provider.decrypt(key, blob))
            restored.update(headers)
            headers = restored
        return replace(out, headers=headers)

    def sign_message(self, msg: Message, key_alias: str) -> Message:
        signature = self.provider.sign(self.keystore.get_private(key_alias), msg.body)
        return msg.with_headers({"sec.signature": signature.hex(), "sec.signer": key_alias})

    def verify_message(self, msg: Message, trust_alias: str) -> Message:
        """Check the body signature. Read-only: returns ``msg`` itself."""
        signature = msg.headers.get("sec.signature")
        if signature is None:
            raise MissingSignature(f"message {msg.id} is not signed")
        cert = self.truststore.get_cert(trust_alias)
        try:
            raw = bytes.fromhex(signature)
        except ValueError:
            raw = b""
        if not self.provider.verify(cert, msg.body, raw):
            self._audit("verify-failure", trust_alias, f"message:{msg.id}")
            raise VerificationFailed(f"signature on {msg.id} does not verify against {trust_alias!r}")
        return msg


# Tokens


@dataclass(frozen=True)
class AuthToken:
    token_id: str
    subject: str
    roles: frozenset = field(default_factory=frozenset)
    issued_at: int = 0
    expires_at: int | None = None
    refreshable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "roles", frozenset(self.roles))
        if self.expires_at is not None and self.expires_at <= self.issued_at:
            raise ValueError("expires_at must be after issued_at")

    def to_json(self) -> bytes:
        return json.dumps(
            {
                "tokenId": self.token_id,
                "subject": self.subject,
                "roles": sorted(self.roles),
                "issuedAt": self.issued_at,
                "expiresAt": self.expires_at,
                "refreshable": self.refreshable,
            }
        ).encode()

    @classmethod
    def from_json(cls, raw: bytes) -> "AuthToken":
        d = json.loads(raw)
        return cls(d["tokenId"], d["subject"], frozenset(d["roles"]), d["issuedAt"], d["expiresAt"], d["refreshable"])


class TokenService:
    """Issues, validates and refreshes tokens kept in a SecureStore.

    A refreshable token can be refreshed while live or up to ``grace`` ticks
    after expiry; refresh retires the old id.
    """

    def __init__(self, securestore, clock=None, audit: AuditLog | None = None, rng=None, grace: int = 30):
        self.securestore = securestore
        self.clock = clock or ManualClock()
        self.audit = audit
        self.grace = grace
        self._rng = rng
        self._lock = threading.Lock()

    def _new_id(self) -> str:
        bits = self._rng.getrandbits(128) if self._rng is not None else secrets.randbits(128)
        return f"tok-{bits:032x}"

    def issue(self, subject: str, roles: Iterable[str] = (), ttl: int | None = None, refreshable: bool = False) -> AuthToken:
        if ttl is not None and ttl <= 0:
            raise ValueError("ttl must be positive")
        with self._lock:
            now = self.clock.now()
            token = AuthToken(self._new_id(), subject, frozenset(roles), now, None if ttl is None else now + ttl, refreshable)
            self.securestore.put(token.token_id, "token", token.to_json())
            if self.audit is not None:
                self.audit.append("token-issue", subject, token.token_id)
            return token

    def lookup(self, token_id: str) -> AuthToken:
        try:
            return AuthToken.from_json(self.securestore.record(token_id).secret)
        except UnknownAlias:
            raise TokenUnknown(f"unknown token {token_id!r}") from None

    def validate(self, token_id: str) -> AuthToken:
        token = self.lookup(token_id)
        if token.expires_at is not None and self.clock.now() > token.expires_at:
            raise TokenExpired(f"token {token_id} expired at {token.expires_at}")
        return token

    def refresh(self, token_id: str) -> AuthToken:
        with self._lock:
            old = self.lookup(token_id)
            if not old.refreshable:
                raise NotRefreshable(f"token {token_id} is not refreshable")
            now = self.clock.now()
            if old.expires_at is not None and now > old.expires_at + self.grace:
                raise TokenExpired(f"token {token_id} is past its refresh grace window")
            ttl = None if old.expires_at is None else old.expires_at - old.issued_at
            new = AuthToken(self._new_id(), old.subject, old.roles, now, None if ttl is None else now + ttl, True)
            self.securestore.put(new.token_id, "token", new.to_json())
            self.securestore.remove(token_id)
            if self.audit is not None:
                self.audit.append("token-refresh", old.subject, f"{token_id}->{new.token_id}")
            return new


def authorize(exchange: Exchange, required_roles: Iterable[str], tokens: TokenService, audit: AuditLog | None = None) -> AuthToken:
    """Pass iff the ``sec.token`` header names a valid token holding every
    required role. On pass the subject becomes the exchange principal."""
    required = frozenset(required_roles)

    def deny(reason: str) -> None:
        if audit is not None:
            audit.append("deny", exchange.flow or "-", reason)

    token_id = exchange.message.headers.get("sec.token")
    if token_id is None:
        deny(f"no token; required {','.join(sorted(required))}")
        raise AuthorizationDenied(required)
    try:
        token = tokens.validate(token_id)
    except (TokenExpired, TokenUnknown) as exc:
        deny(f"{exc.kind}:{token_id}")
        raise
    missing = required - token.roles
    if missing:
        deny(f"{token.subject} missing {','.join(sorted(missing))}")
        raise AuthorizationDenied(missing)
    exchange.properties["sec.principal"] = token.subject
    exchange.message = exchange.message.with_header("sec.principal", token.subject)
    return token


def propagate_principal(exchange: Exchange) -> Exchange:
    """Mark the principal for forwarding across the next delegate boundary."""
    principal = exchange.properties.get("sec.principal")
    if principal is None or "sec.token" not in exchange.message.headers:
        raise NoPrincipal("no authorized principal to propagate")
    exchange.properties["sec.propagate"] = "true"
    exchange.message = exchange.message.with_header("sec.principal", principal)
    return exchange


# Transport and storage wrappers


def message_checksum(msg: Message) -> str:
    headers = {k: v for k, v in msg.headers.items() if k != "sec.checksum"}
    canonical = json.dumps(headers, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(canonical + b"\x00" + msg.body).hexdigest()


class SecureChannel:
    """Channel wrapper adding any of ``encrypted``, ``authenticated`` and
    ``integrity`` transport guarantees. With no modes it is the raw channel."""

    MODES = frozenset({"encrypted", "authenticated", "integrity"})

    def __init__(self, inner: Channel, modes: Iterable[str] = (), security: MessageSecurity | None = None,
                 key_alias: str | None = None, tokens: TokenService | None = None, audit: AuditLog | None = None):
        self.inner = inner
        self.modes = frozenset(modes)
        if not self.modes <= self.MODES:
            raise ValueError(f"unknown channel modes {sorted(self.modes - self.MODES)}")
        if "encrypted" in self.modes and (security is None or key_alias is None):
            raise ValueError("encrypted channel needs key material")
        if "authenticated" in self.modes and tokens is None:
            raise ValueError("authenticated channel needs a token service")
        self.security = security
        self.key_alias = key_alias
        self.tokens = tokens
        self.audit = audit
        self.name = inner.name

    @property
    def message_count(self) -> int:
        return self.inner.message_count

    def send(self, message: Message, credential: str | None = None) -> bool:
        if "authenticated" in self.modes:
            try:
                if credential is None:
                    raise TokenUnknown("no credential presented")
                self.tokens.validate(credential)
            except (TokenExpired, TokenUnknown) as exc:
                if self.audit is not None:
                    self.audit.append("deny", self.name, f"channel auth: {exc.kind}")
                raise AuthenticationFailed(f"channel {self.name!r}: {exc}") from None
        if "encrypted" in self.modes:
            message = self.security.encrypt_message(message, self.key_alias, parts=("body", "headers", "attachments"))
        if "integrity" in self.modes:
            message = message.with_header("sec.checksum", message_checksum(message))
        return self.inner.send(message)

    def receive(self) -> Message | None:
        message = self.inner.receive()
        if message is None:
            return None
        if "integrity" in self.modes:
            if message.headers.get("sec.checksum") != message_checksum(message):
                if self.audit is not None:
                    self.audit.append("verify-failure", self.name, f"checksum:{message.id}")
                raise IntegrityViolation(f"checksum mismatch on channel {self.name!r}")
            message = message.without_headers("sec.checksum")
        if "encrypted" in self.modes:
            message = self.security.decrypt_message(message, self.key_alias)
        return message


def secure_channel(channel: Channel, modes: Iterable[str], **material) -> SecureChannel:
    return SecureChannel(channel, modes, **material)


class EncryptingStore:
    """DataStore wrapper: values are encrypted (``encrypt``) and/or prefixed
    with a SHA-256 checksum (``safe``) at rest. Same accessor API."""

    def __init__(self, inner, keystore=None, key_alias: str | None = None, provider=REFERENCE,
                 encrypt: bool = True, safe: bool = False):
        if not (encrypt or safe):
            raise ValueError("nothing to do: enable encrypt or safe")
        self.inner = inner
        self.provider = provider
        self.encrypt = encrypt
        self.safe = safe
        self.name = inner.name
        self._key = keystore.get_private(key_alias) if encrypt else None

    def _seal(self, value: bytes) -> bytes:
        if self.encrypt:
            value = self.provider.encrypt(self._key, value)
        if self.safe:
            value = self.provider.digest(value) + value
        return value

    def _open(self, key: str, raw: bytes) -> bytes:
        if self.safe:
            digest, raw = raw[:32], raw[32:]
            if digest != self.provider.digest(raw):
                raise IntegrityViolation(f"stored value {key!r} failed its checksum")
        if self.encrypt:
            raw = self.provider.decrypt(self._key, raw)
        return raw

    def put(self, key: str, value: bytes, ttl: int | None = None, visibility: str = "global", scope: str | None = None):
        return self.inner.put(key, self._seal(bytes(value)), ttl=ttl, visibility=visibility, scope=scope)

    def get(self, key: str, scope: str | None = None) -> bytes:
        return self._open(key, self.inner.get(key, scope))

    def delete(self, key: str) -> bool:
        return self.inner.delete(key)

    def query(self, prefix: str = "", scope: str | None = None) -> list[str]:
        return self.inner.query(prefix, scope)


def encrypting_store(inner, keystore, key_alias: str, safe: bool = False, encrypt: bool = True) -> EncryptingStore:
    return EncryptingStore(inner, keystore, key_alias, encrypt=encrypt, safe=safe)
