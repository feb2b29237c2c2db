"""SRAM-PUF emulation and PUF-based authentication.

Device side: an :class:`SramDevice` returns its power-up pattern with i.i.d.
per-cell noise.  Enrollment turns a window of that pattern into helper data
using a repetition code (one ``r``-bit block per key bit); recovery XORs a
fresh read with the helper data and majority-decodes each block.

Verifier side: a :class:`PufRegistry` keeps enrollment records (helper data
plus a digest of the enrolled key, never the key itself), issues
single-use nonces and checks proofs.  :func:`mutual_authenticate` runs the
check in both directions for an Alice/Bob device pair.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .topology import LinkId

DIGEST_SIZE = 32
NONCE_SIZE = 16
REGISTRY_FORMAT = "switchqkd.puf-registry"
REGISTRY_VERSION = 1

DEFAULT_CELL_COUNT = 32_768
DEFAULT_FLIP_PROBABILITY = 0.02


class PufError(Exception):
    pass


class BoundsError(PufError, IndexError):
    pass


class ParameterError(PufError, ValueError):
    pass


class KeyMaterialError(PufError):
    """Raised when a derivation is asked for without both direction keys."""


def digest(*parts: bytes) -> bytes:
    # length-prefix every part so concatenation boundaries are unambiguous
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return h.digest()


@dataclass(frozen=True)
class CodeParams:
    block_size: int = 5
    key_bits: int = 256

    def __post_init__(self) -> None:
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ParameterError(f"block size must be odd and positive, got {self.block_size}")
        if self.key_bits < 1:
            raise ParameterError(f"key_bits must be positive, got {self.key_bits}")

    @property
    def length(self) -> int:
        return self.block_size * self.key_bits


@dataclass
class SramDevice:
    device_id: str
    cell_count: int
    reference_bits: np.ndarray
    flip_probability: float = DEFAULT_FLIP_PROBABILITY
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.reference_bits = np.asarray(self.reference_bits, dtype=np.uint8)
        if self.cell_count < 1:
            raise ParameterError("cell_count must be positive")
        if self.reference_bits.shape != (self.cell_count,):
            raise ParameterError(
                f"reference_bits has shape {self.reference_bits.shape}, expected ({self.cell_count},)"
            )
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ParameterError(f"flip_probability out of [0, 1]: {self.flip_probability}")

    @classmethod
    def manufacture(
        cls,
        device_id: str,
        rng_seed: int,
        cell_count: int = DEFAULT_CELL_COUNT,
        flip_probability: float = DEFAULT_FLIP_PROBABILITY,
    ) -> "SramDevice":
        """Create a device whose ideal power-up state is drawn from ``rng_seed``."""
        bits = np.random.default_rng(rng_seed).integers(0, 2, cell_count, dtype=np.uint8)
        return cls(device_id, cell_count, bits, flip_probability, rng_seed)


@dataclass(frozen=True)
class Challenge:
    offset: int
    length: int
    nonce: bytes


@dataclass(frozen=True)
class EnrollmentRecord:
    device_id: str
    offset: int
    length: int
    helper_data: np.ndarray = field(compare=False)
    key_digest: bytes
    code_params: CodeParams

    def to_json(self) -> dict:
        return {
            "device_id": self.device_id,
            "window": [self.offset, self.length],
            "helper_data": np.packbits(self.helper_data).tobytes().hex(),
            "key_digest": self.key_digest.hex(),
            "code_params": {
                "block_size": self.code_params.block_size,
                "key_bits": self.code_params.key_bits,
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EnrollmentRecord":
        offset, length = obj["window"]
        packed = np.frombuffer(bytes.fromhex(obj["helper_data"]), dtype=np.uint8)
        helper = np.unpackbits(packed)[:length]
        params = CodeParams(**obj["code_params"])
        if params.length != length:
            raise ParameterError(f"{obj['device_id']}: window length {length} != r*key_bits")
        return cls(obj["device_id"], offset, length, helper, bytes.fromhex(obj["key_digest"]), params)


class Outcome(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


@dataclass(frozen=True)
class PufTimingProfile:
    """Average per-step durations of one PUF controller, in seconds."""

    https_request: float = 12.9
    device_interaction: float = 7.0
    hashing: float = 0.002
    ssh_processes: float = 7.1
    verification_total: float = 27.0

    def __post_init__(self) -> None:
        for name, value in self.as_dict().items():
            if value < 0:
                raise ParameterError(f"timing {name} must be >= 0, got {value}")
        if self.verification_total < self.hashing:
            raise ParameterError("verification_total must be >= hashing")

    def as_dict(self) -> dict[str, float]:
        return {
            "https_request": self.https_request,
            "device_interaction": self.device_interaction,
            "hashing": self.hashing,
            "ssh_processes": self.ssh_processes,
            "verification_total": self.verification_total,
        }


# Per-authenticator averages as measured on the testbed; the Bob-side
# controllers are provers and report no request/hash/verification time.
MEASURED_PROFILES = {
    "A1": PufTimingProfile(12.9, 7.0, 0.002, 7.1, 27.0),
    "A2": PufTimingProfile(12.9, 6.7, 0.002, 7.1, 26.7),
    "B1": PufTimingProfile(0.0, 6.8, 0.0, 6.1, 0.0),
    "B2": PufTimingProfile(0.0, 6.7, 0.0, 6.1, 0.0),
}


@dataclass
class AuthResult:
    outcome: Outcome
    session_key: bytes | None
    elapsed_model_time: float
    component_times: dict[str, float]
    direction_keys: tuple[bytes, bytes] | None = None
    failed_direction: str | None = None

    @property
    def accepted(self) -> bool:
        return self.outcome is Outcome.ACCEPTED


# -- device side -------------------------------------------------------------


def _check_window(device: SramDevice, offset: int, length: int) -> None:
    if offset < 0 or length < 1 or offset + length > device.cell_count:
        raise BoundsError(
            f"window [{offset}, {offset + length}) outside {device.device_id} ({device.cell_count} cells)"
        )


def power_up_read(device: SramDevice, challenge: Challenge, rng: np.random.Generator) -> np.ndarray:
    """One noisy read of the challenged window."""
    _check_window(device, challenge.offset, challenge.length)
    ref = device.reference_bits[challenge.offset : challenge.offset + challenge.length]
    flips = rng.random(challenge.length) < device.flip_probability
    return ref ^ flips.astype(np.uint8)


def encode(key_bits: np.ndarray, params: CodeParams) -> np.ndarray:
    return np.repeat(np.asarray(key_bits, dtype=np.uint8), params.block_size)


def decode(words: np.ndarray, params: CodeParams) -> np.ndarray:
    """Majority-decode repetition codewords; works on a single word or a stack."""
    words = np.asarray(words, dtype=np.uint8)
    blocks = words.reshape(words.shape[:-1] + (params.key_bits, params.block_size))
    return (blocks.sum(axis=-1) > params.block_size // 2).astype(np.uint8)


def enroll(
    device: SramDevice,
    window: tuple[int, int],
    params: CodeParams,
    rng: np.random.Generator,
) -> tuple[EnrollmentRecord, bytes]:
    offset, length = window
    if length != params.length:
        raise ParameterError(
            f"window length {length} does not match r*key_bits = {params.length}"
        )
    _check_window(device, offset, length)
    secret = rng.integers(0, 2, params.key_bits, dtype=np.uint8)
    # trusted phase: noiseless reference read
    reference = device.reference_bits[offset : offset + length]
    helper = encode(secret, params) ^ reference
    key = np.packbits(secret).tobytes()
    record = EnrollmentRecord(device.device_id, offset, length, helper, key_fingerprint(key), params)
    return record, key


def recover_many(responses: np.ndarray, record: EnrollmentRecord) -> np.ndarray:
    """Recover keys from a stack of responses; returns packed key bytes per row."""
    responses = np.asarray(responses, dtype=np.uint8)
    if responses.shape[-1] != record.helper_data.shape[0]:
        raise ParameterError(
            f"response length {responses.shape[-1]} != helper length {record.helper_data.shape[0]}"
        )
    bits = decode(responses ^ record.helper_data, record.code_params)
    return np.packbits(bits, axis=-1)


def recover(noisy_response: np.ndarray, record: EnrollmentRecord) -> bytes:
    return recover_many(noisy_response, record).tobytes()


def key_fingerprint(key: bytes) -> bytes:
    return digest(b"enroll", key)


def proof_digest(fingerprint: bytes, nonce: bytes) -> bytes:
    return digest(b"proof", fingerprint, nonce)


def session_key(fingerprint: bytes, nonce: bytes) -> bytes:
    return digest(b"session", fingerprint, nonce)


def prove(
    device: SramDevice,
    challenge: Challenge,
    helper: EnrollmentRecord,
    rng: np.random.Generator,
) -> bytes:
    """Prover side: read, recover and answer with a nonce-bound digest.

    ``helper`` supplies the public part of the enrollment (window, helper
    data, code parameters); the key digest it carries is not used.
    """
    response = power_up_read(device, challenge, rng)
    key = recover(response, helper)
    return proof_digest(key_fingerprint(key), challenge.nonce)


# -- verifier side -----------------------------------------------------------


class PufRegistry:
    """Enrollment records plus nonce bookkeeping for the verifiers."""

    def __init__(self, records: Iterable[EnrollmentRecord] = ()) -> None:
        self.records: dict[str, EnrollmentRecord] = {}
        self._issued: dict[str, set[bytes]] = {}
        self._spent: dict[str, set[bytes]] = {}
        for r in records:
            self.add(r)

    def add(self, record: EnrollmentRecord) -> None:
        self.records[record.device_id] = record
        self._issued[record.device_id] = set()
        self._spent[record.device_id] = set()

    def __getitem__(self, device_id: str) -> EnrollmentRecord:
        return self.records[device_id]

    def __contains__(self, device_id: str) -> bool:
        return device_id in self.records

    def nonces_used(self, device_id: str) -> int:
        return len(self._issued[device_id]) + len(self._spent[device_id])

    def issue_challenge(self, device_id: str, rng: np.random.Generator) -> Challenge:
        record = self.records[device_id]
        issued, spent = self._issued[device_id], self._spent[device_id]
        while True:
            nonce = rng.bytes(NONCE_SIZE)
            if nonce not in issued and nonce not in spent:
                break
        issued.add(nonce)
        return Challenge(record.offset, record.length, nonce)

    def verify(self, device_id: str, challenge: Challenge, proof: bytes) -> bool:
        """Check a proof; each issued nonce can be checked exactly once."""
        issued = self._issued[device_id]
        if challenge.nonce not in issued:
            return False
        issued.discard(challenge.nonce)
        self._spent[device_id].add(challenge.nonce)
        record = self.records[device_id]
        return proof == proof_digest(record.key_digest, challenge.nonce)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": REGISTRY_FORMAT, "version": REGISTRY_VERSION}) + "\n")
            for device_id in sorted(self.records):
                fh.write(json.dumps(self.records[device_id].to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PufRegistry":
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines:
            raise ParameterError(f"{path}: empty registry file")
        header = json.loads(lines[0])
        if header.get("format") != REGISTRY_FORMAT:
            raise ParameterError(f"{path}: not a PUF registry file")
        if header.get("version") != REGISTRY_VERSION:
            raise ParameterError(f"{path}: unsupported registry version {header.get('version')}")
        return cls(EnrollmentRecord.from_json(json.loads(ln)) for ln in lines[1:])


def _one_direction(
    registry: PufRegistry, prover: SramDevice, rng: np.random.Generator
) -> bytes | None:
    record = registry[prover.device_id]
    challenge = registry.issue_challenge(prover.device_id, rng)
    proof = prove(prover, challenge, record, rng)
    if not registry.verify(prover.device_id, challenge, proof):
        return None
    return session_key(record.key_digest, challenge.nonce)


def mutual_authenticate(
    registry: PufRegistry,
    a_device: SramDevice,
    b_device: SramDevice,
    rng: np.random.Generator,
    timing: PufTimingProfile = PufTimingProfile(),
    mutual: bool = True,
) -> AuthResult:
    """Authenticate an Alice/Bob authenticator pair.

    The Alice side verifies the Bob device first; with ``mutual`` the Bob
    side then verifies the Alice device under its own nonce.  Elapsed model
    time is the profile's verification total regardless of outcome.
    """
    times = timing.as_dict()
    elapsed = timing.verification_total

    k_a = _one_direction(registry, b_device, rng)
    if k_a is None:
        return AuthResult(Outcome.REJECTED, None, elapsed, times, failed_direction="A-verifies-B")
    if mutual:
        k_b = _one_direction(registry, a_device, rng)
        if k_b is None:
            return AuthResult(Outcome.REJECTED, None, elapsed, times, failed_direction="B-verifies-A")
    else:
        # one-way comparison mode: the single session key stands in for both
        k_b = k_a
    return AuthResult(Outcome.ACCEPTED, digest(k_a, k_b), elapsed, times, (k_a, k_b))


def derive_link_auth_key(
    k_a: bytes | None, k_b: bytes | None, link: LinkId, switch_epoch: int, key_len: int = 32
) -> bytes:
    """Per-link, per-epoch authentication key from both direction keys."""
    if not k_a or not k_b:
        raise KeyMaterialError("both direction keys are required")
    if key_len < 1:
        raise ParameterError("key_len must be positive")
    seed = digest(b"link-auth", k_a, k_b, link.name.encode(), switch_epoch.to_bytes(8, "big"))
    out = b""
    counter = 0
    while len(out) < key_len:
        out += digest(seed, counter.to_bytes(4, "big"))
        counter += 1
    return out[:key_len]


def pba_key_generation_time(timing: PufTimingProfile) -> float:
    return timing.device_interaction
