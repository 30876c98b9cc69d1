"""Pluggable crypto provider plus a deterministic reference implementation.

The reference provider is for tests and fixtures only. It is NOT secure:
a certificate embeds the signer's secret, so anyone holding the
certificate can forge signatures.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from typing import Protocol

from .errors import DecryptFailure

TAG_SIZE = 32


@dataclass(frozen=True)
class Certificate:
    subject: str
    secret: bytes = field(repr=False)


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes = field(repr=False)
    certificate: Certificate

    @classmethod
    def generate(cls, subject: str, rng: random.Random | None = None) -> "KeyPair":
        rng = rng or random.SystemRandom()
        secret = rng.getrandbits(256).to_bytes(32, "big")
        return cls(secret, Certificate(subject, secret))


class CryptoProvider(Protocol):
    scheme: str

    def encrypt(self, key: bytes, plain: bytes) -> bytes: ...

    def decrypt(self, key: bytes, cipher: bytes) -> bytes: ...

    def sign(self, private_key: bytes, data: bytes) -> bytes: ...

    def verify(self, certificate: Certificate, data: bytes, signature: bytes) -> bool: ...

    def digest(self, data: bytes) -> bytes: ...


class ReferenceCryptoProvider:
    """SHA-256 keystream XOR cipher and keyed-digest signatures.

    Ciphertext layout: ``tag(32) || plain XOR keystream`` where
    ``tag = sha256(key || plain)`` lets decrypt detect a wrong key or a
    corrupted payload. Keystream block ``i`` is
    ``sha256(key || i as 8-byte big-endian)``.
    """

    scheme = "ref-sha256-xor"

    def digest(self, data: bytes) -> bytes:
        return hashlib.sha256(data).digest()

    def keystream(self, key: bytes, length: int) -> bytes:
        blocks = []
        for counter in range((length + 31) // 32):
            blocks.append(hashlib.sha256(key + counter.to_bytes(8, "big")).digest())
        return b"".join(blocks)[:length]

    def _xor(self, key: bytes, data: bytes) -> bytes:
        stream = self.keystream(key, len(data))
        return (int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")).to_bytes(len(data), "big")

    def encrypt(self, key: bytes, plain: bytes) -> bytes:
        return self.digest(key + plain) + self._xor(key, plain)

    def decrypt(self, key: bytes, cipher: bytes) -> bytes:
        if len(cipher) < TAG_SIZE:
            raise DecryptFailure("ciphertext shorter than its tag")
        tag, body = cipher[:TAG_SIZE], cipher[TAG_SIZE:]
        plain = self._xor(key, body)
        if not hmac.compare_digest(tag, self.digest(key + plain)):
            raise DecryptFailure("wrong key or corrupted ciphertext")
        return plain

    def sign(self, private_key: bytes, data: bytes) -> bytes:
        return self.digest(private_key + data)

    def verify(self, certificate: Certificate, data: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.digest(certificate.secret + data), signature)


REFERENCE = ReferenceCryptoProvider()
