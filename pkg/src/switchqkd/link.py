"""Per-link QKD lifecycle and the stochastic key-rate model."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .topology import LinkId


class LinkPhase(enum.Enum):
    INACTIVE = "Inactive"
    AUTHENTICATING = "Authenticating"
    BASE_AGREEMENT = "BaseAgreement"
    KEY_GENERATION = "KeyGeneration"


_ALLOWED = {
    LinkPhase.INACTIVE: {LinkPhase.AUTHENTICATING, LinkPhase.BASE_AGREEMENT},
    LinkPhase.AUTHENTICATING: {LinkPhase.BASE_AGREEMENT},
    LinkPhase.BASE_AGREEMENT: {LinkPhase.KEY_GENERATION},
    LinkPhase.KEY_GENERATION: set(),
}


class LinkStateError(RuntimeError):
    pass


class AuthenticationMissing(LinkStateError):
    pass


class StaleKeyError(LinkStateError):
    pass


@dataclass(frozen=True)
class RateModel:
    mean_skr: float
    skr_rel_jitter: float = 0.05
    mean_qber: float = 0.02
    qber_rel_jitter: float = 0.1
    rkr_factor: float = 10.0
    snr_mean: float = 20.0
    snr_jitter: float = 0.2

    def __post_init__(self) -> None:
        if not self.mean_skr > 0:
            raise ValueError(f"mean_skr must be > 0, got {self.mean_skr}")
        if not 0 <= self.mean_qber < 0.5:
            raise ValueError(f"mean_qber must be in [0, 0.5), got {self.mean_qber}")
        if self.rkr_factor < 1:
            raise ValueError(f"rkr_factor must be >= 1, got {self.rkr_factor}")
        if not 0 <= self.skr_rel_jitter < 1:
            raise ValueError(f"skr_rel_jitter must be in [0, 1), got {self.skr_rel_jitter}")


@dataclass(frozen=True)
class KpiSample:
    time: float
    skr: float
    rkr: float
    qber: float
    snr: float
    phase: LinkPhase
    produced_bytes: int = 0
    dt: float = 0.0


@dataclass(frozen=True)
class KpiSummary:
    mean_skr: float
    mean_qber: float
    mean_rkr: float
    samples: int


class LinkEngine:
    """State machine and key source for one link.

    ``activate`` moves an inactive link into base agreement; the link starts
    producing once ``base_agreement_duration`` seconds of steps have elapsed.
    Each activation must carry a strictly newer switch epoch than the last.
    """

    def __init__(self, link: LinkId, model: RateModel, base_agreement_duration: float = 20.0) -> None:
        if base_agreement_duration < 0:
            raise ValueError("base_agreement_duration must be >= 0")
        self.link = link
        self.model = model
        self.base_agreement_duration = base_agreement_duration
        self.phase = LinkPhase.INACTIVE
        self.fractional_bits = 0.0
        self.auth_key: bytes | None = None
        self.auth_epoch: int | None = None
        self.last_epoch = -1
        self.discarded_carry_bits = 0.0
        self._ba_remaining = 0.0
        self.activated_at: float | None = None

    def _move(self, new: LinkPhase) -> None:
        if new is not LinkPhase.INACTIVE and new not in _ALLOWED[self.phase]:
            raise LinkStateError(f"{self.link}: illegal transition {self.phase.value} -> {new.value}")
        self.phase = new

    def begin_authentication(self) -> None:
        self._move(LinkPhase.AUTHENTICATING)

    def activate(self, pba_key: bytes, now: float, epoch: int) -> None:
        if self.phase not in (LinkPhase.INACTIVE, LinkPhase.AUTHENTICATING):
            raise LinkStateError(f"{self.link}: cannot activate while {self.phase.value}")
        if not pba_key:
            raise AuthenticationMissing(f"{self.link}: activation without an authentication key")
        if epoch <= self.last_epoch:
            raise StaleKeyError(f"{self.link}: epoch {epoch} is not newer than {self.last_epoch}")
        self._move(LinkPhase.BASE_AGREEMENT)
        self.auth_key = bytes(pba_key)
        self.auth_epoch = epoch
        self.last_epoch = epoch
        self.activated_at = now
        self._ba_remaining = self.base_agreement_duration

    def deactivate(self) -> float:
        """Stop the link.  Returns the carried fraction of a byte that was dropped."""
        dropped = self.fractional_bits
        self.discarded_carry_bits += dropped
        self.phase = LinkPhase.INACTIVE
        self.auth_key = None
        self.auth_epoch = None
        self.fractional_bits = 0.0
        self._ba_remaining = 0.0
        return dropped

    def step(self, dt: float, rng: np.random.Generator, now: float = 0.0) -> tuple[int, KpiSample]:
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        if self.phase is LinkPhase.BASE_AGREEMENT:
            if self._ba_remaining <= 0:
                self._move(LinkPhase.KEY_GENERATION)
            else:
                self._ba_remaining -= dt

        m = self.model
        if self.phase is not LinkPhase.KEY_GENERATION:
            return 0, KpiSample(now, 0.0, 0.0, 0.0, m.snr_mean, self.phase, 0, dt)

        skr = m.mean_skr * (1.0 + rng.uniform(-m.skr_rel_jitter, m.skr_rel_jitter))
        qber = min(max(m.mean_qber * (1.0 + rng.uniform(-m.qber_rel_jitter, m.qber_rel_jitter)), 0.0), 0.5)
        snr = m.snr_mean + rng.uniform(-m.snr_jitter, m.snr_jitter)
        bits = skr * dt + self.fractional_bits
        produced = int(math.floor(bits / 8.0))
        self.fractional_bits = bits - 8.0 * produced
        return produced, KpiSample(now, skr, skr * m.rkr_factor, qber, snr, self.phase, produced, dt)


def mean_kpis(samples) -> KpiSummary | None:
    """Means over KeyGeneration samples only; ``None`` when there are none."""
    live = [s for s in samples if s.phase is LinkPhase.KEY_GENERATION]
    if not live:
        return None
    n = len(live)
    return KpiSummary(
        mean_skr=math.fsum(s.skr for s in live) / n,
        mean_qber=math.fsum(s.qber for s in live) / n,
        mean_rkr=math.fsum(s.rkr for s in live) / n,
        samples=n,
    )
