"""Central network controller: buffer monitoring, switch decisions, switch orchestration."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .events import EventLog
from .kms import BufferStatus, KeyManagementSystem, KmsError
from .link import LinkEngine, LinkPhase
from .puf import (
    AuthResult,
    PufRegistry,
    PufTimingProfile,
    SramDevice,
    derive_link_auth_key,
    mutual_authenticate,
)
from .scheduler import Process, VirtualClock
from .topology import (
    BAR,
    FabricState,
    LinkId,
    Stable,
    SwitchConfiguration,
    SwitchFabric,
    link_ids_for,
)

# "either" (any buffer below threshold) is the same rule as "min"
AGGREGATES = ("min", "max", "either", "designated")


@dataclass(frozen=True)
class SwitchPolicy:
    bar_threshold: int
    cross_threshold: int
    priority: SwitchConfiguration = BAR
    poll_interval: float = 10.0
    min_dwell: float = 60.0
    aggregate: str = "min"

    def __post_init__(self) -> None:
        if self.bar_threshold <= 0 or self.cross_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.poll_interval <= 0:
            raise ValueError("poll_interval must be positive")
        if self.min_dwell < 0:
            raise ValueError("min_dwell must be >= 0")
        if self.aggregate not in AGGREGATES:
            raise ValueError(f"aggregate must be one of {AGGREGATES}")

    def threshold(self, config: SwitchConfiguration) -> int:
        return self.bar_threshold if config is BAR else self.cross_threshold


@dataclass(frozen=True)
class SwitchDecision:
    target: SwitchConfiguration | None
    reason: str

    @property
    def stay(self) -> bool:
        return self.target is None

    @property
    def action(self) -> str:
        return "Stay" if self.target is None else f"SwitchTo({self.target.value})"


PHASES = ("deactivate", "fabric_reconfigure", "pba", "key_install", "reactivate")


@dataclass(frozen=True)
class SwitchProcedureTiming:
    total_duration: float = 123.5
    deactivate: float = 10.0
    fabric_reconfigure: float = 40.0
    pba: float = 27.0
    key_install: float = 7.0
    reactivate: float = 39.5

    def __post_init__(self) -> None:
        for name in ("total_duration",) + PHASES:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def phases(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in PHASES}

    def normalized(self, pba: float | None = None) -> "SwitchProcedureTiming":
        """Pin the PBA phase and rescale the others so the phases sum to the total."""
        pba = self.pba if pba is None else pba
        if pba > self.total_duration:
            raise ValueError(f"pba phase {pba} s exceeds total switch duration {self.total_duration} s")
        others = [n for n in PHASES if n != "pba"]
        rest = math.fsum(getattr(self, n) for n in others)
        budget = self.total_duration - pba
        if rest == budget and pba == self.pba:
            return self
        if rest == 0:
            scaled = {n: budget / len(others) for n in others}
        else:
            scaled = {n: getattr(self, n) * budget / rest for n in others}
        # absorb rounding in the last phase
        scaled["reactivate"] = budget - math.fsum(scaled[n] for n in others if n != "reactivate")
        return replace(self, pba=pba, **scaled)


@dataclass(frozen=True)
class Snapshot:
    time: float
    levels: Mapping[LinkId, int]
    statuses: Mapping[LinkId, BufferStatus]
    fabric: FabricState
    epoch: int
    since_last_switch: float

    def to_json(self) -> dict:
        fabric = (
            {"state": "stable", "config": self.fabric.config.value}
            if isinstance(self.fabric, Stable)
            else {"state": "switching", "from": self.fabric.source.value, "to": self.fabric.target.value}
        )
        return {
            "levels": {l.name: v for l, v in sorted(self.levels.items())},
            "statuses": {l.name: s.value for l, s in sorted(self.statuses.items())},
            "fabric": fabric,
            "epoch": self.epoch,
        }


def _aggregate(levels: Mapping[LinkId, int], links: tuple[LinkId, ...], how: str) -> tuple[int, LinkId]:
    pairs = [(levels[l], l) for l in links]
    if how == "designated":
        return pairs[0]
    if how == "max":
        return max(pairs)
    return min(pairs)


def decide(snapshot: Snapshot, policy: SwitchPolicy) -> SwitchDecision:
    """Threshold rule; the priority configuration's condition is checked first."""
    if not isinstance(snapshot.fabric, Stable):
        return SwitchDecision(None, "switch in progress")
    if snapshot.since_last_switch < policy.min_dwell:
        return SwitchDecision(None, f"dwell {snapshot.since_last_switch:g} s < {policy.min_dwell:g} s")
    current = snapshot.fabric.config
    for candidate in (policy.priority, policy.priority.other):
        if candidate is current:
            continue
        level, link = _aggregate(snapshot.levels, link_ids_for(candidate), policy.aggregate)
        threshold = policy.threshold(candidate)
        if level < threshold:
            return SwitchDecision(
                candidate, f"{link.name} level {level} B < {candidate.value} threshold {threshold} B"
            )
    return SwitchDecision(None, "all thresholds met")


class SwitchAborted(RuntimeError):
    pass


def key_fingerprint(key: bytes) -> str:
    return hashlib.sha256(key).hexdigest()[:16]


@dataclass
class SwitchReport:
    source: SwitchConfiguration
    target: SwitchConfiguration
    start: float
    end: float | None = None
    epoch: int | None = None
    outcome: str = "in_progress"
    phase_times: dict[str, float] = field(default_factory=dict)
    auth: dict[str, AuthResult] = field(default_factory=dict)

    @property
    def duration(self) -> float | None:
        return None if self.end is None else self.end - self.start


class Controller:
    """Single logical actor driving the fabric, engines, buffers and PBA.

    ``devices`` maps node names ("A1", "B2", ...) to the PUF device that
    currently answers for that node; swapping an entry simulates a
    substituted authenticator.
    """

    def __init__(
        self,
        clock: VirtualClock,
        log: EventLog,
        fabric: SwitchFabric,
        engines: dict[LinkId, LinkEngine],
        kms: KeyManagementSystem,
        registry: PufRegistry,
        devices: dict[str, SramDevice],
        policy: SwitchPolicy,
        timing: SwitchProcedureTiming = SwitchProcedureTiming(),
        puf_timing: PufTimingProfile = PufTimingProfile(),
        rng: np.random.Generator | None = None,
        mutual: bool = True,
        auth_key_len: int = 32,
    ) -> None:
        self.clock = clock
        self.log = log
        self.fabric = fabric
        self.engines = engines
        self.kms = kms
        self.registry = registry
        self.devices = devices
        self.policy = policy
        self.timing = timing
        self.puf_timing = puf_timing
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.mutual = mutual
        self.auth_key_len = auth_key_len
        self.epoch = -1
        self.last_switch_end = 0.0
        self.switching = False
        self.reports: list[SwitchReport] = []
        self.bring_up_report: SwitchReport | None = None
        self.n = int(round(math.sqrt(len(engines)))) or 2

    # -- observation -------------------------------------------------------

    def poll(self) -> Snapshot:
        return Snapshot(
            time=self.clock.now,
            levels=self.kms.levels(),
            statuses=self.kms.statuses(),
            fabric=self.fabric.state,
            epoch=self.epoch,
            since_last_switch=self.clock.now - self.last_switch_end,
        )

    def _observe(self) -> dict:
        return self.poll().to_json()

    # -- authentication ------------------------------------------------------

    def _authenticate(self, link: LinkId) -> AuthResult:
        return mutual_authenticate(
            self.registry,
            self.devices[str(link.alice)],
            self.devices[str(link.bob)],
            self.rng,
            self.puf_timing,
            mutual=self.mutual,
        )

    def _pba(self, links: tuple[LinkId, ...], report: SwitchReport, label: str) -> dict[LinkId, AuthResult]:
        results = {}
        for link in links:
            self.engines[link].begin_authentication()
            results[link] = self._authenticate(link)
            report.auth[f"{label}:{link.name}"] = results[link]
        return results

    def _activate(self, link: LinkId, result: AuthResult, epoch: int) -> None:
        k_a, k_b = result.direction_keys
        key = derive_link_auth_key(k_a, k_b, link, epoch, self.auth_key_len)
        self.engines[link].activate(key, self.clock.now, epoch)
        self.log.emit(
            self.clock.now,
            "activation",
            {"link": link.name, "epoch": epoch, "key_fp": key_fingerprint(key)},
        )

    def _deactivate(self, link: LinkId) -> None:
        engine = self.engines[link]
        if engine.phase is LinkPhase.INACTIVE:
            return
        dropped = engine.deactivate()
        self.log.emit(self.clock.now, "deactivation", {"link": link.name, "discarded_carry_bits": dropped})

    def _phase(self, report: SwitchReport, name: str, duration: float) -> None:
        report.phase_times[name] = duration
        payload = {"phase": name, "duration_s": duration}
        payload.update(self._observe())
        self.log.emit(self.clock.now, "switch_phase", payload)

    # -- procedures ----------------------------------------------------------

    def bring_up(self) -> Process:
        """Initial authentication and activation of the starting configuration.

        Runs the same authenticate/install/reactivate steps as a switch, at
        epoch 0 and without model-time cost (the network is up at t=0).
        """
        config = self.fabric.config
        links = link_ids_for(config, self.n)
        report = SwitchReport(config, config, self.clock.now)
        self.bring_up_report = report
        results = self._pba(links, report, "bringup")
        failed = [l for l, r in results.items() if not r.accepted]
        self.epoch = 0
        for link in links:
            self.kms.set_buffer_status(link, BufferStatus.ACTIVE)
            if link in failed:
                self.engines[link].deactivate()
                self.log.emit(self.clock.now, "alarm", {"link": link.name, "reason": "bring-up authentication failed"})
            else:
                self._activate(link, results[link], 0)
        self.last_switch_end = self.clock.now
        return
        yield  # pragma: no cover - makes this a generator

    def execute_switch(self, target: SwitchConfiguration) -> Process:
        """Generator process for one bar/cross switch; yields phase durations."""
        if not isinstance(self.fabric.state, Stable):
            raise SwitchAborted("fabric is already switching")
        source = self.fabric.state.config
        if source is target:
            raise SwitchAborted(f"already in {target.value}")
        self.switching = True
        t = self.timing
        clock = self.clock
        report = SwitchReport(source, target, clock.now)
        self.reports.append(report)
        new_epoch = self.epoch + 1

        # (1) everything passive, live links stopped, fabric leaves the stable state
        for link in self.kms.stores:
            self.kms.set_buffer_status(link, BufferStatus.PASSIVE)
        self.fabric.begin(target, clock.now)
        self.log.emit(
            clock.now,
            "switch_start",
            {"from": source.value, "to": target.value, "epoch": new_epoch, **self._observe()},
        )
        for link in link_ids_for(source, self.n):
            self._deactivate(link)
        yield t.deactivate
        self._phase(report, "deactivate", t.deactivate)

        # (2) optical remap
        yield t.fabric_reconfigure
        self._phase(report, "fabric_reconfigure", t.fabric_reconfigure)

        # (3) PBA on both new links, run in parallel
        target_links = link_ids_for(target, self.n)
        results = self._pba(target_links, report, "switch")
        pba_cost = max(r.elapsed_model_time for r in results.values())
        yield pba_cost
        self._phase(report, "pba", pba_cost)

        failed = {l: r for l, r in results.items() if not r.accepted}
        if failed:
            yield from self._abort(report, source, target_links, failed, new_epoch)
            return

        # (4) install derived keys
        yield t.key_install
        self._phase(report, "key_install", t.key_install)

        # (5) reactivate the new configuration
        yield t.reactivate
        for link in target_links:
            self.kms.set_buffer_status(link, BufferStatus.ACTIVE)
            self._activate(link, results[link], new_epoch)
        self.fabric.complete()
        self.epoch = new_epoch
        self.last_switch_end = clock.now
        self.switching = False
        report.end = clock.now
        report.epoch = new_epoch
        report.outcome = "completed"
        report.phase_times["reactivate"] = t.reactivate
        self._end(report)

    def _abort(
        self,
        report: SwitchReport,
        source: SwitchConfiguration,
        target_links: tuple[LinkId, ...],
        failed: dict[LinkId, AuthResult],
        new_epoch: int,
    ) -> Process:
        clock = self.clock
        t = self.timing
        self.log.emit(
            clock.now,
            "abort",
            {
                "from": source.value,
                "to": report.target.value,
                "failed": {l.name: r.failed_direction for l, r in sorted(failed.items())},
            },
        )
        for link in target_links:
            self.engines[link].deactivate()
        # restore the previous topology, then re-authenticate its links
        yield t.fabric_reconfigure
        self._phase(report, "restore_fabric", t.fabric_reconfigure)
        source_links = link_ids_for(source, self.n)
        results = self._pba(source_links, report, "recovery")
        pba_cost = max(r.elapsed_model_time for r in results.values())
        yield pba_cost
        self._phase(report, "recovery_pba", pba_cost)
        yield t.key_install
        self._phase(report, "key_install", t.key_install)
        yield t.reactivate
        for link in source_links:
            self.kms.set_buffer_status(link, BufferStatus.ACTIVE)
            if results[link].accepted:
                self._activate(link, results[link], new_epoch)
            else:
                self.engines[link].deactivate()
                self.log.emit(
                    clock.now,
                    "alarm",
                    {"link": link.name, "reason": "recovery authentication failed; link stays down"},
                )
        self.fabric.revert()
        self.epoch = new_epoch
        self.last_switch_end = clock.now
        self.switching = False
        report.end = clock.now
        report.epoch = new_epoch
        report.outcome = "aborted"
        report.phase_times["reactivate"] = t.reactivate
        self._end(report)

    def _end(self, report: SwitchReport) -> None:
        payload = {
            "from": report.source.value,
            "to": report.target.value,
            "outcome": report.outcome,
            "epoch": report.epoch,
            "start_s": report.start,
            "duration_s": report.duration,
            "phase_times": dict(report.phase_times),
            "auth": {
                k: {"outcome": r.outcome.value, "elapsed_s": r.elapsed_model_time, "failed_direction": r.failed_direction}
                for k, r in report.auth.items()
            },
        }
        payload.update(self._observe())
        self.log.emit(self.clock.now, "switch_end", payload)

    # -- monitoring loop -----------------------------------------------------

    def control_process(self, stop_condition: Callable[[Snapshot], bool] | None = None) -> Process:
        while True:
            try:
                snap = self.poll()
            except KmsError as exc:
                self.log.emit(self.clock.now, "poll", {"error": exc.message})
                yield self.policy.poll_interval
                continue
            deferred = self.switching or not isinstance(snap.fabric, Stable)
            self.log.emit(self.clock.now, "poll", {**snap.to_json(), "deferred": deferred})
            if stop_condition is not None and stop_condition(snap):
                return
            if not deferred:
                decision = decide(snap, self.policy)
                self.log.emit(self.clock.now, "decision", {"action": decision.action, "reason": decision.reason})
                if decision.target is not None:
                    self.clock.spawn(self.execute_switch(decision.target))
            yield self.policy.poll_interval

    def run_control_loop(
        self,
        until: float,
        stop_condition: Callable[[Snapshot], bool] | None = None,
        bring_up: bool = True,
    ) -> EventLog:
        """Bring the network up, then poll/decide/switch until ``until``."""
        if bring_up:
            self.clock.spawn(self.bring_up())
        self.clock.spawn(self.control_process(stop_condition))
        self.clock.run(until)
        return self.log
