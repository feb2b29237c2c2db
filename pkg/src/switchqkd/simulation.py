"""Assemble a network from a scenario and run it on the virtual clock."""

from __future__ import annotations

import uuid
import zlib
from dataclasses import dataclass, field

import numpy as np

from .api import LocalKmsClient
from .consumers import Consumer, InvariantViolation
from .controller import Controller
from .events import EventLog
from .kms import KeyManagementSystem, SaeBinding
from .link import LinkEngine
from .puf import PufRegistry, SramDevice, enroll
from .report import RunReport, build_report
from .scenario import ScenarioConfig
from .scheduler import Process, VirtualClock
from .topology import LinkId, SwitchConfiguration, SwitchFabric, link_ids_for


def stream(seed: int, *tags: str) -> np.random.Generator:
    """Independent, reproducible random stream for a named component."""
    key = tuple(zlib.crc32(t.encode()) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _id_factory(rng: np.random.Generator):
    def make() -> str:
        return str(uuid.UUID(bytes=rng.bytes(16), version=4))

    return make


@dataclass
class Network:
    config: ScenarioConfig
    clock: VirtualClock
    log: EventLog
    fabric: SwitchFabric
    engines: dict[LinkId, LinkEngine]
    kms: KeyManagementSystem
    registry: PufRegistry
    devices: dict[str, SramDevice]
    enrolled_keys: dict[str, bytes]
    controller: Controller
    consumers: list[Consumer] = field(default_factory=list)

    def binding(self, link: LinkId) -> SaeBinding:
        return self.kms.stores[link].binding


def build_network(config: ScenarioConfig, log: EventLog | None = None, client=None) -> Network:
    clock = VirtualClock()
    log = log if log is not None else EventLog()
    seed = config.seed

    bindings = []
    for lc in config.links:
        bindings.append(
            SaeBinding(
                lc.link,
                lc.master_sae_id,
                lc.slave_sae_id,
                config.kme_ids[str(lc.link.alice)],
                config.kme_ids[str(lc.link.bob)],
            )
        )
    kms = KeyManagementSystem(
        bindings,
        {lc.link: lc.capacity_bytes for lc in config.links},
        key_size=config.key_size,
        id_factories={lc.link: _id_factory(stream(seed, "key-id", lc.link.name)) for lc in config.links},
    )
    engines = {
        lc.link: LinkEngine(lc.link, lc.rate, lc.base_agreement_s) for lc in config.links
    }

    puf = config.puf
    registry = PufRegistry()
    devices: dict[str, SramDevice] = {}
    enrolled_keys: dict[str, bytes] = {}
    enroll_rng = stream(puf.enrollment_seed, "enroll")
    for dc in puf.devices:
        genuine = SramDevice.manufacture(dc.node, dc.seed, puf.cell_count, puf.flip_probability)
        record, key = enroll(genuine, (puf.window_offset, puf.code.length), puf.code, enroll_rng)
        registry.add(record)
        enrolled_keys[dc.node] = key
        if dc.impostor:
            devices[dc.node] = SramDevice.manufacture(dc.node, dc.impostor_seed, puf.cell_count, puf.flip_probability)
        else:
            devices[dc.node] = genuine

    fabric = SwitchFabric(config.initial_config)
    controller = Controller(
        clock,
        log,
        fabric,
        engines,
        kms,
        registry,
        devices,
        config.policy,
        config.switch_timing,
        config.puf_timing,
        rng=stream(seed, "pba"),
        mutual=config.mutual_authentication,
        auth_key_len=32,
    )
    net = Network(config, clock, log, fabric, engines, kms, registry, devices, enrolled_keys, controller)

    client = client if client is not None else LocalKmsClient(kms)
    by_slave = {b.slave_sae_id: b for b in bindings}
    for spec in config.consumers:
        b = by_slave[spec.sae_id]
        net.consumers.append(
            Consumer(spec, client, log, clock, stream(seed, "consumer", spec.name), b.link.name, b.master_sae_id)
        )
    return net


def _initial_fill(net: Network) -> None:
    material_rng = {lc.link: stream(net.config.seed, "initial", lc.link.name) for lc in net.config.links}
    for lc in net.config.links:
        n_keys = lc.initial_level_bytes // net.config.key_size
        formed = net.kms.push_material(lc.link, material_rng[lc.link].bytes(n_keys * net.config.key_size))
        counters = net.kms.counters(lc.link)["master"]
        net.log.emit(
            net.clock.now,
            "buffer_init",
            {"link": lc.link.name, "keys_formed": formed, "keys_discarded": counters["discarded"],
             "level_bytes": net.kms.level(lc.link)},
        )


def link_process(net: Network, link: LinkId) -> Process:
    engine = net.engines[link]
    tick = net.config.tick_s
    rng = stream(net.config.seed, "link", link.name)
    material = stream(net.config.seed, "material", link.name)
    kms, log, clock = net.kms, net.log, net.clock
    while True:
        produced, sample = engine.step(tick, rng, clock.now)
        formed = discarded = 0
        if produced:
            before = kms.counters(link)["master"]["discarded"]
            formed = kms.push_material(link, material.bytes(produced))
            discarded = kms.counters(link)["master"]["discarded"] - before
        log.emit(
            clock.now,
            "kpi",
            {
                "link": link.name,
                "phase": sample.phase.value,
                "skr_bps": sample.skr,
                "rkr_bps": sample.rkr,
                "qber": sample.qber,
                "snr_db": sample.snr,
                "produced_bytes": produced,
                "dt_s": tick,
                "carry_bits": engine.fractional_bits,
                "keys_formed": formed,
                "keys_discarded": discarded,
            },
        )
        yield tick


def schedule(net: Network) -> None:
    """Queue every process of a run at t=0 (or the consumer's start time)."""
    clock = net.clock

    def setup() -> Process:
        _initial_fill(net)
        yield from net.controller.bring_up()

    clock.spawn(setup())
    for link in sorted(net.engines):
        clock.spawn(link_process(net, link))
    for consumer in net.consumers:
        clock.spawn(consumer.process(), consumer.spec.start_s)
    clock.spawn(net.controller.control_process())


def check_invariants(net: Network, records: list[dict]) -> None:
    """Raise :class:`InvariantViolation` naming the first broken invariant."""
    n = net.controller.n
    for r in records:
        p = r["payload"]
        if "statuses" not in p or "fabric" not in p:
            continue
        active = {name for name, s in p["statuses"].items() if s == "ACTIVE"}
        fab = p["fabric"]
        if fab["state"] == "switching":
            if active:
                raise InvariantViolation(
                    f"safety: buffers {sorted(active)} ACTIVE during a switch at t={r['time_s']}"
                )
        else:
            expected = {l.name for l in link_ids_for(SwitchConfiguration(fab["config"]), n)}
            if active != expected:
                raise InvariantViolation(
                    f"safety: ACTIVE={sorted(active)} but fabric is {fab['config']} at t={r['time_s']}"
                )
    if not net.kms.conserved():
        raise InvariantViolation("conservation: keys_formed - delivered - discarded != stored")
    for link, engine in net.engines.items():
        if not 0.0 <= engine.fractional_bits < 8.0:
            raise InvariantViolation(f"carry out of range on {link}")


def run_simulation(config: ScenarioConfig, check: bool = True) -> tuple[EventLog, RunReport]:
    net = build_network(config)
    schedule(net)
    net.clock.run(config.duration_s)
    if check:
        check_invariants(net, net.log.records)
    return net.log, build_report(net.log.records, config)


def simulate(config: ScenarioConfig) -> Network:
    """Run a scenario and return the whole network for inspection."""
    net = build_network(config)
    schedule(net)
    net.clock.run(config.duration_s)
    return net

