"""Per-link key buffers and the key-delivery operations (ETSI GS QKD 014 subset).

Every link has a master-side buffer (at the Alice KME) and a slave-side
buffer (at the Bob KME) holding the same keys in the same order.  An
``enc_keys`` call hands keys out from the master side and parks their
slave-side copies until the peer SAE collects them with ``dec_keys``.

All public methods of :class:`KeyManagementSystem` run under one lock, so
commands against a buffer execute in a total order even when the HTTP
front-end serves requests concurrently.
"""

from __future__ import annotations

import base64
import enum
import threading
import uuid
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Callable, Iterable

from .topology import LinkId

DEFAULT_KEY_SIZE = 32
DEFAULT_MAX_KEY_PER_REQUEST = 128


class BufferStatus(enum.Enum):
    ACTIVE = "ACTIVE"
    PASSIVE = "PASSIVE"


class KmsError(Exception):
    status_code = 500

    def __init__(self, message: str, details: list | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.details = details or []

    def to_json(self) -> dict:
        return {"message": self.message, "details": self.details}


class BadRequestError(KmsError):
    status_code = 400


class NotFoundError(KmsError):
    status_code = 404


class UnavailableError(KmsError):
    status_code = 503


class KmsStateError(KmsError):
    status_code = 500


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    key_material: bytes


@dataclass(frozen=True)
class SaeBinding:
    link: LinkId
    master_sae_id: str
    slave_sae_id: str
    source_kme_id: str
    target_kme_id: str


class KeyBuffer:
    def __init__(self, link: LinkId, capacity_bytes: int, key_size: int, side: str) -> None:
        if capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")
        self.link = link
        self.side = side
        self.capacity_bytes = capacity_bytes
        self.key_size = key_size
        self.status = BufferStatus.PASSIVE
        self.queue: deque[KeyRecord] = deque()
        self.keys_formed = 0
        self.keys_delivered = 0
        self.keys_discarded = 0

    @property
    def level_bytes(self) -> int:
        return self.key_size * len(self.queue)

    @property
    def stored_key_count(self) -> int:
        return len(self.queue)

    def has_room(self) -> bool:
        return self.level_bytes + self.key_size <= self.capacity_bytes

    def conserved(self) -> bool:
        return self.keys_formed - self.keys_delivered - self.keys_discarded == len(self.queue)


class LinkKeyStore:
    def __init__(self, binding: SaeBinding, capacity_bytes: int, key_size: int) -> None:
        self.binding = binding
        self.key_size = key_size
        self.master = KeyBuffer(binding.link, capacity_bytes, key_size, "master")
        self.slave = KeyBuffer(binding.link, capacity_bytes, key_size, "slave")
        self.pending = bytearray()
        # slave-side copies of keys already handed to the master SAE
        self.retained: OrderedDict[str, KeyRecord] = OrderedDict()
        self.dec_delivered = 0


def _uuid_from_counter(link: LinkId) -> Callable[[], str]:
    n = 0

    def make() -> str:
        nonlocal n
        n += 1
        return str(uuid.uuid5(uuid.NAMESPACE_OID, f"{link.name}/{n}"))

    return make


class KeyManagementSystem:
    def __init__(
        self,
        bindings: Iterable[SaeBinding],
        capacities: dict[LinkId, int],
        key_size: int = DEFAULT_KEY_SIZE,
        max_key_per_request: int = DEFAULT_MAX_KEY_PER_REQUEST,
        id_factories: dict[LinkId, Callable[[], str]] | None = None,
    ) -> None:
        if key_size <= 0:
            raise ValueError("key_size must be positive")
        self.key_size = key_size
        self.max_key_per_request = max_key_per_request
        self.lock = threading.RLock()
        self.stores: dict[LinkId, LinkKeyStore] = {}
        self._by_slave: dict[str, LinkKeyStore] = {}
        self._by_master: dict[str, LinkKeyStore] = {}
        self._new_id: dict[LinkId, Callable[[], str]] = {}
        seen: set[str] = set()
        for b in bindings:
            if b.link in self.stores:
                raise ValueError(f"duplicate binding for {b.link}")
            for sae in (b.master_sae_id, b.slave_sae_id):
                if sae in seen:
                    raise ValueError(f"SAE id {sae!r} bound twice")
                seen.add(sae)
            store = LinkKeyStore(b, capacities[b.link], key_size)
            self.stores[b.link] = store
            self._by_slave[b.slave_sae_id] = store
            self._by_master[b.master_sae_id] = store
            self._new_id[b.link] = (id_factories or {}).get(b.link) or _uuid_from_counter(b.link)

    # -- internal commands -------------------------------------------------

    def _store(self, link: LinkId) -> LinkKeyStore:
        try:
            return self.stores[link]
        except KeyError:
            raise KmsStateError(f"no key store bound to link {link}") from None

    def push_material(self, link: LinkId, material: bytes) -> int:
        """Append key material; returns the number of whole keys formed."""
        with self.lock:
            store = self._store(link)
            store.pending.extend(material)
            formed = 0
            while len(store.pending) >= self.key_size:
                chunk = bytes(store.pending[: self.key_size])
                del store.pending[: self.key_size]
                formed += 1
                for buf in (store.master, store.slave):
                    buf.keys_formed += 1
                if store.master.has_room() and store.slave.has_room():
                    rec = KeyRecord(self._new_id[link](), chunk)
                    store.master.queue.append(rec)
                    store.slave.queue.append(rec)
                else:
                    store.master.keys_discarded += 1
                    store.slave.keys_discarded += 1
            return formed

    def set_buffer_status(self, link: LinkId, status: BufferStatus) -> None:
        with self.lock:
            store = self._store(link)
            store.master.status = status
            store.slave.status = status

    def status_of(self, link: LinkId) -> BufferStatus:
        return self._store(link).master.status

    def level(self, link: LinkId) -> int:
        with self.lock:
            return self._store(link).master.level_bytes

    def levels(self) -> dict[LinkId, int]:
        with self.lock:
            return {link: s.master.level_bytes for link, s in self.stores.items()}

    def statuses(self) -> dict[LinkId, BufferStatus]:
        with self.lock:
            return {link: s.master.status for link, s in self.stores.items()}

    def counters(self, link: LinkId) -> dict[str, dict[str, int]]:
        with self.lock:
            s = self._store(link)
            return {
                buf.side: {
                    "formed": buf.keys_formed,
                    "delivered": buf.keys_delivered,
                    "discarded": buf.keys_discarded,
                    "stored": buf.stored_key_count,
                }
                for buf in (s.master, s.slave)
            }

    def conserved(self) -> bool:
        with self.lock:
            return all(s.master.conserved() and s.slave.conserved() for s in self.stores.values())

    # -- key delivery API ----------------------------------------------------

    def binding_for_slave(self, slave_sae_id: str, kme_id: str | None = None) -> SaeBinding:
        store = self._by_slave.get(slave_sae_id)
        if store is None or (kme_id is not None and store.binding.source_kme_id != kme_id):
            raise NotFoundError(f"unknown slave SAE {slave_sae_id!r}", [{"slave_SAE_ID": slave_sae_id}])
        return store.binding

    def binding_for_master(self, master_sae_id: str, kme_id: str | None = None) -> SaeBinding:
        store = self._by_master.get(master_sae_id)
        if store is None or (kme_id is not None and store.binding.target_kme_id != kme_id):
            raise NotFoundError(f"unknown master SAE {master_sae_id!r}", [{"master_SAE_ID": master_sae_id}])
        return store.binding

    def get_status(self, slave_sae_id: str, kme_id: str | None = None) -> dict:
        with self.lock:
            b = self.binding_for_slave(slave_sae_id, kme_id)
            store = self.stores[b.link]
            return {
                "source_KME_ID": b.source_kme_id,
                "target_KME_ID": b.target_kme_id,
                "master_SAE_ID": b.master_sae_id,
                "slave_SAE_ID": b.slave_sae_id,
                "key_size": self.key_size * 8,
                "stored_key_count": store.master.stored_key_count,
                "max_key_count": store.master.capacity_bytes // self.key_size,
                "max_key_per_request": self.max_key_per_request,
                "max_key_size": self.key_size * 8,
                "min_key_size": self.key_size * 8,
                "max_SAE_ID_count": 0,
            }

    def get_enc_keys(
        self, slave_sae_id: str, number: int = 1, size: int | None = None, kme_id: str | None = None
    ) -> dict:
        with self.lock:
            b = self.binding_for_slave(slave_sae_id, kme_id)
            store = self.stores[b.link]
            if size is None:
                size = self.key_size * 8
            if not isinstance(number, int) or isinstance(number, bool) or number < 1:
                raise BadRequestError("number must be a positive integer", [{"number": number}])
            if number > self.max_key_per_request:
                raise BadRequestError(
                    f"number exceeds max_key_per_request ({self.max_key_per_request})", [{"number": number}]
                )
            if size != self.key_size * 8:
                raise BadRequestError(
                    f"unsupported key size {size}; this KME serves {self.key_size * 8}-bit keys",
                    [{"size": size}],
                )
            if store.master.stored_key_count < number:
                raise UnavailableError(
                    "insufficient keys available",
                    [{"requested": number, "stored_key_count": store.master.stored_key_count}],
                )
            keys = []
            for _ in range(number):
                rec = store.master.queue.popleft()
                mirror = store.slave.queue.popleft()
                if mirror.key_id != rec.key_id:
                    raise KmsStateError(f"{b.link}: master/slave queues out of step")
                store.master.keys_delivered += 1
                store.slave.keys_delivered += 1
                store.retained[rec.key_id] = mirror
                keys.append({"key_ID": rec.key_id, "key": base64.b64encode(rec.key_material).decode()})
            return {"keys": keys}

    def get_dec_keys(self, master_sae_id: str, key_ids: list[str], kme_id: str | None = None) -> dict:
        with self.lock:
            b = self.binding_for_master(master_sae_id, kme_id)
            store = self.stores[b.link]
            if not key_ids:
                raise BadRequestError("key_IDs must not be empty")
            missing = [k for k in key_ids if k not in store.retained]
            if len(set(key_ids)) != len(key_ids):
                missing += sorted({k for k in key_ids if key_ids.count(k) > 1} - set(missing))
            if missing:
                raise NotFoundError("unknown or already consumed key_IDs", [{"key_ID": k} for k in missing])
            keys = []
            for k in key_ids:
                rec = store.retained.pop(k)
                store.dec_delivered += 1
                keys.append({"key_ID": rec.key_id, "key": base64.b64encode(rec.key_material).decode()})
            return {"keys": keys}
