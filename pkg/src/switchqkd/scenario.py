"""Scenario files: YAML with a versioned header, validated into :class:`ScenarioConfig`.

Byte quantities accept an integer (bytes) or a string such as ``"8 kB"``
(kB = 1,000 bytes, KiB = 1,024).  Rates accept a number (per second) or a
string such as ``"0.5/min"``.  Every validation error carries the line of
the offending YAML node.
"""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .controller import SwitchPolicy, SwitchProcedureTiming
from .link import RateModel
from .puf import CodeParams, PufTimingProfile
from .topology import LinkId, SwitchConfiguration

SCENARIO_VERSION = 1

UNITS = {"B": 1, "kB": 1_000, "KB": 1_000, "MB": 1_000_000, "KiB": 1_024, "MiB": 1_048_576}
PER = {"s": 1.0, "sec": 1.0, "min": 60.0, "minute": 60.0, "h": 3600.0, "hour": 3600.0}


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None) -> None:
        where = ""
        if source:
            where = f"{source}:{line}: " if line else f"{source}: "
        elif line:
            where = f"line {line}: "
        super().__init__(where + message)
        self.line = line
        self.source = source


@dataclass(frozen=True)
class DelayModel:
    mean_s: float = 0.1147
    jitter_s: float = 0.0186


@dataclass(frozen=True)
class ConsumerSpec:
    name: str
    sae_id: str
    rate: float
    mode: str = "enc"
    group: str = ""
    start_s: float = 0.0
    arrival: str = "fixed"
    delay: DelayModel = DelayModel()

    def __post_init__(self) -> None:
        if not self.rate > 0:
            raise ValueError(f"consumer {self.name}: rate must be > 0")
        if self.mode not in ("enc", "enc_then_dec"):
            raise ValueError(f"consumer {self.name}: mode must be enc or enc_then_dec")
        if self.arrival not in ("fixed", "poisson"):
            raise ValueError(f"consumer {self.name}: arrival must be fixed or poisson")


@dataclass(frozen=True)
class LinkConfig:
    link: LinkId
    master_sae_id: str
    slave_sae_id: str
    rate: RateModel
    capacity_bytes: int
    initial_level_bytes: int = 0
    base_agreement_s: float = 20.0


@dataclass(frozen=True)
class DeviceConfig:
    node: str
    seed: int
    impostor: bool = False
    impostor_seed: int | None = None


@dataclass(frozen=True)
class PufConfig:
    cell_count: int = 32_768
    code: CodeParams = CodeParams()
    flip_probability: float = 0.02
    window_offset: int = 0
    devices: tuple[DeviceConfig, ...] = ()
    enrollment_seed: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    duration_s: float
    tick_s: float
    key_size: int
    initial_config: SwitchConfiguration
    kme_ids: dict[str, str]
    links: tuple[LinkConfig, ...]
    policy: SwitchPolicy
    switch_timing: SwitchProcedureTiming
    puf_timing: PufTimingProfile
    puf: PufConfig
    consumers: tuple[ConsumerSpec, ...]
    mutual_authentication: bool = True
    source: str | None = field(default=None, compare=False)

    def link_config(self, link: LinkId) -> LinkConfig:
        for lc in self.links:
            if lc.link == link:
                return lc
        raise KeyError(link)

    def to_json(self) -> dict:
        def conv(o: Any) -> Any:
            if isinstance(o, dict):
                return {str(k): conv(v) for k, v in o.items()}
            if isinstance(o, (list, tuple)):
                return [conv(v) for v in o]
            if isinstance(o, LinkId):
                return o.name
            if isinstance(o, SwitchConfiguration):
                return o.value
            return o

        d = asdict(self)
        d.pop("source", None)
        d["initial_config"] = self.initial_config.value
        d["policy"]["priority"] = self.policy.priority.value
        for lc, raw in zip(self.links, d["links"]):
            raw["link"] = lc.link.name
        return conv(d)


# -- parsing helpers ------------------------------------------------------


class _Doc:
    """Plain data plus a (path -> line) index built from the YAML node tree."""

    def __init__(self, text: str, source: str | None) -> None:
        self.source = source
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ScenarioError(f"YAML parse error: {getattr(exc, 'problem', exc)}", line, source) from None
        if node is not None:
            self._index(node, ())

    def _index(self, node: yaml.Node, path: tuple) -> None:
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = k.value
                self.lines[path + (key,)] = k.start_mark.line + 1
                self._index(v, path + (key,))
                self.lines[path + (key,)] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._index(v, path + (i,))

    def error(self, path: tuple, message: str) -> ScenarioError:
        p = path
        while p and p not in self.lines:
            p = p[:-1]
        label = ".".join(str(x) for x in path)
        return ScenarioError(f"{label}: {message}" if label else message, self.lines.get(p), self.source)


class _Section:
    def __init__(self, doc: _Doc, path: tuple, data: Any) -> None:
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise doc.error(path, "expected a mapping")
        self.doc, self.path, self.data = doc, path, data
        self.used: set[str] = set()

    def error(self, key: str | None, message: str) -> ScenarioError:
        return self.doc.error(self.path + ((key,) if key is not None else ()), message)

    def has(self, key: str) -> bool:
        return key in self.data

    def raw(self, key: str, default: Any = ...) -> Any:
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise self.error(None, f"missing required key {key!r}")
            return default
        return self.data[key]

    def section(self, key: str, required: bool = False) -> "_Section":
        if required and key not in self.data:
            raise self.error(None, f"missing required section {key!r}")
        return _Section(self.doc, self.path + (key,), self.raw(key, {}))

    def number(self, key: str, default: Any = ..., minimum: float | None = None, positive: bool = False) -> float:
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.error(key, f"expected a number, got {v!r}")
        if positive and not v > 0:
            raise self.error(key, f"must be > 0, got {v}")
        if minimum is not None and v < minimum:
            raise self.error(key, f"must be >= {minimum}, got {v}")
        return float(v)

    def integer(self, key: str, default: Any = ..., minimum: int | None = None) -> int:
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            raise self.error(key, f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise self.error(key, f"must be >= {minimum}, got {v}")
        return v

    def string(self, key: str, default: Any = ..., choices: tuple[str, ...] | None = None) -> str:
        v = self.raw(key, default)
        if not isinstance(v, str):
            raise self.error(key, f"expected a string, got {v!r}")
        if choices and v not in choices:
            raise self.error(key, f"must be one of {', '.join(choices)}, got {v!r}")
        return v

    def boolean(self, key: str, default: Any = ...) -> bool:
        v = self.raw(key, default)
        if not isinstance(v, bool):
            raise self.error(key, f"expected true/false, got {v!r}")
        return v

    def size(self, key: str, default: Any = ...) -> int:
        v = self.raw(key, default)
        try:
            return parse_size(v)
        except ValueError as exc:
            raise self.error(key, str(exc)) from None

    def rate(self, key: str, default: Any = ...) -> float:
        v = self.raw(key, default)
        try:
            return parse_rate(v)
        except ValueError as exc:
            raise self.error(key, str(exc)) from None

    def finish(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise self.error(extra[0], f"unknown key {extra[0]!r}")


def parse_size(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError(f"not a byte size: {value!r}")
    if isinstance(value, int):
        n = value
    elif isinstance(value, str):
        m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([A-Za-z]+)?\s*", value)
        if not m:
            raise ValueError(f"not a byte size: {value!r}")
        unit = m.group(2) or "B"
        if unit not in UNITS:
            raise ValueError(f"unknown unit {unit!r} (use {', '.join(UNITS)})")
        n = float(m.group(1)) * UNITS[unit]
        if n != int(n):
            raise ValueError(f"{value!r} is not a whole number of bytes")
        n = int(n)
    else:
        raise ValueError(f"not a byte size: {value!r}")
    if n < 0:
        raise ValueError(f"byte size must be >= 0, got {n}")
    return n


def parse_rate(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError(f"not a rate: {value!r}")
    if isinstance(value, (int, float)):
        r = float(value)
    elif isinstance(value, str):
        m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*/\s*([a-z]+)\s*", value)
        if not m or m.group(2) not in PER:
            raise ValueError(f"not a rate: {value!r} (expected e.g. '1/s' or '0.5/min')")
        r = float(m.group(1)) / PER[m.group(2)]
    else:
        raise ValueError(f"not a rate: {value!r}")
    if not r > 0:
        raise ValueError(f"rate must be > 0, got {value!r}")
    return r


# -- loading ----------------------------------------------------------------


def bundled_scenarios() -> list[str]:
    return sorted(
        p.name[: -len(".yaml")]
        for p in resources.files("switchqkd.scenarios").iterdir()
        if p.name.endswith(".yaml")
    )


def resolve_scenario_path(name_or_path: str | os.PathLike) -> Path | None:
    p = Path(name_or_path)
    if p.exists():
        return p
    candidate = resources.files("switchqkd.scenarios") / f"{name_or_path}.yaml"
    if candidate.is_file():
        return Path(str(candidate))
    return None


def load_scenario(path: str | os.PathLike) -> ScenarioConfig:
    """Load a scenario file, or a bundled scenario by name."""
    resolved = resolve_scenario_path(path)
    if resolved is None:
        raise ScenarioError(f"no such scenario file or bundled scenario: {path}")
    return parse_scenario(resolved.read_text(encoding="utf-8"), str(resolved))


def parse_scenario(text: str, source: str | None = None) -> ScenarioConfig:
    doc = _Doc(text, source)
    root = _Section(doc, (), doc.data)
    version = root.integer("version")
    if version != SCENARIO_VERSION:
        raise root.error("version", f"unsupported scenario version {version} (expected {SCENARIO_VERSION})")

    name = root.string("name", "unnamed")
    seed = root.integer("seed", 0)
    duration = root.number("duration_s", minimum=0.0)
    tick = root.number("tick_s", 1.0, positive=True)
    key_size = root.integer("key_size_bytes", 32, minimum=1)

    topo = root.section("topology", required=True)
    initial = SwitchConfiguration(topo.string("initial_config", "bar", choices=("bar", "cross")))
    kme_sec = topo.section("kme_ids")
    kme_ids = {}
    for node in ("A1", "A2", "B1", "B2"):
        kme_ids[node] = kme_sec.string(node, f"KME-{node}")
    kme_sec.finish()

    defaults = root.section("link_defaults")
    d_jitter = defaults.number("skr_rel_jitter", 0.05, minimum=0.0)
    d_qber = defaults.number("mean_qber", 0.02, minimum=0.0)
    d_qjit = defaults.number("qber_rel_jitter", 0.1, minimum=0.0)
    d_rkr = defaults.number("rkr_factor", 10.0, minimum=1.0)
    d_snr = defaults.number("snr_mean_db", 20.0)
    d_snrj = defaults.number("snr_jitter_db", 0.2, minimum=0.0)
    d_ba = defaults.number("base_agreement_s", 20.0, minimum=0.0)
    d_cap = defaults.size("capacity", 16_000)
    d_init = defaults.size("initial_level", 0)
    defaults.finish()

    links_sec = topo.section("links", required=True)
    links = []
    sae_seen: dict[str, tuple] = {}
    for name_ in ("L1", "L2", "L3", "L4"):
        if not links_sec.has(name_):
            raise links_sec.error(None, f"link {name_} is not configured")
        ls = links_sec.section(name_)
        if not ls.has("mean_skr_bps"):
            raise ls.error(None, f"link {name_} has no rate model (mean_skr_bps)")
        link = LinkId.parse(name_)
        try:
            rate = RateModel(
                mean_skr=ls.number("mean_skr_bps", positive=True),
                skr_rel_jitter=ls.number("skr_rel_jitter", d_jitter, minimum=0.0),
                mean_qber=ls.number("mean_qber", d_qber, minimum=0.0),
                qber_rel_jitter=ls.number("qber_rel_jitter", d_qjit, minimum=0.0),
                rkr_factor=ls.number("rkr_factor", d_rkr),
                snr_mean=ls.number("snr_mean_db", d_snr),
                snr_jitter=ls.number("snr_jitter_db", d_snrj, minimum=0.0),
            )
        except ValueError as exc:
            raise ls.error(None, str(exc)) from None
        master = ls.string("master_sae", f"SAE-{link.alice}-{name_}")
        slave = ls.string("slave_sae", f"SAE-{link.bob}-{name_}")
        for key, sae in (("master_sae", master), ("slave_sae", slave)):
            if sae in sae_seen:
                raise ls.error(key, f"duplicate SAE id {sae!r} (already bound at {'.'.join(map(str, sae_seen[sae]))})")
            sae_seen[sae] = ls.path + (key,)
        cap = ls.size("capacity", d_cap)
        init = ls.size("initial_level", d_init)
        if cap < key_size:
            raise ls.error("capacity", f"capacity {cap} B is smaller than one key ({key_size} B)")
        if init > cap:
            raise ls.error("initial_level", f"initial level {init} B exceeds capacity {cap} B")
        ba = ls.number("base_agreement_s", d_ba, minimum=0.0)
        ls.finish()
        links.append(LinkConfig(link, master, slave, rate, cap, init, ba))
    links_sec.finish()
    topo.finish()

    ctl = root.section("controller", required=True)
    try:
        policy = SwitchPolicy(
            bar_threshold=ctl.size("bar_threshold"),
            cross_threshold=ctl.size("cross_threshold"),
            priority=SwitchConfiguration(ctl.string("priority", "bar", choices=("bar", "cross"))),
            poll_interval=ctl.number("poll_interval_s", 10.0, positive=True),
            min_dwell=ctl.number("min_dwell_s", 60.0, minimum=0.0),
            aggregate=ctl.string("aggregate", "min", choices=("min", "max", "either", "designated")),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ctl.error(None, str(exc)) from None
    mutual = ctl.boolean("mutual_authentication", True)
    ctl.finish()

    pt = root.section("puf_timing")
    try:
        puf_timing = PufTimingProfile(
            https_request=pt.number("https_request_s", 12.9),
            device_interaction=pt.number("device_interaction_s", 7.0),
            hashing=pt.number("hashing_s", 0.002),
            ssh_processes=pt.number("ssh_processes_s", 7.1),
            verification_total=pt.number("verification_total_s", 27.0),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise pt.error(None, str(exc)) from None
    pt.finish()

    st = root.section("switch_timing")
    try:
        raw_timing = SwitchProcedureTiming(
            total_duration=st.number("total_s", 123.5, minimum=0.0),
            deactivate=st.number("deactivate_s", 10.0, minimum=0.0),
            fabric_reconfigure=st.number("fabric_reconfigure_s", 40.0, minimum=0.0),
            pba=puf_timing.verification_total,
            key_install=st.number("key_install_s", 7.0, minimum=0.0),
            reactivate=st.number("reactivate_s", 39.5, minimum=0.0),
        )
        switch_timing = raw_timing.normalized()
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise st.error(None, str(exc)) from None
    st.finish()

    ps = root.section("puf")
    try:
        code = CodeParams(ps.integer("block_size", 5, minimum=1), ps.integer("key_bits", 256, minimum=1))
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ps.error("block_size", str(exc)) from None
    cell_count = ps.integer("cell_count", 32_768, minimum=1)
    flip = ps.number("flip_probability", 0.02, minimum=0.0)
    if flip > 1:
        raise ps.error("flip_probability", f"must be <= 1, got {flip}")
    offset = ps.integer("window_offset", 0, minimum=0)
    if offset + code.length > cell_count:
        raise ps.error("window_offset", f"window [{offset}, {offset + code.length}) exceeds {cell_count} cells")
    enroll_seed = ps.integer("enrollment_seed", seed)
    dev_sec = ps.section("devices")
    devices = []
    for i, node in enumerate(("A1", "A2", "B1", "B2")):
        ds = dev_sec.section(node)
        dseed = ds.integer("seed", 1000 + i)
        imp = ds.boolean("impostor", False)
        imp_seed = ds.integer("impostor_seed", dseed + 7_919) if imp else None
        ds.finish()
        devices.append(DeviceConfig(node, dseed, imp, imp_seed))
    dev_sec.finish()
    ps.finish()
    puf = PufConfig(cell_count, code, flip, offset, tuple(devices), enroll_seed)

    consumers = []
    raw_consumers = root.raw("consumers", [])
    if not isinstance(raw_consumers, list):
        raise doc.error(("consumers",), "expected a list")
    names: set[str] = set()
    bound = {lc.slave_sae_id for lc in links}
    for i, raw in enumerate(raw_consumers):
        cs = _Section(doc, ("consumers", i), raw)
        cname = cs.string("name")
        if cname in names:
            raise cs.error("name", f"duplicate consumer name {cname!r}")
        names.add(cname)
        sae = cs.string("sae_id")
        if sae not in bound:
            raise cs.error("sae_id", f"consumer {cname!r} targets unbound slave SAE {sae!r}")
        delay_sec = cs.section("delay")
        delay = DelayModel(
            delay_sec.number("mean_ms", 114.7, minimum=0.0) / 1000.0,
            delay_sec.number("jitter_ms", 18.6, minimum=0.0) / 1000.0,
        )
        delay_sec.finish()
        consumers.append(
            ConsumerSpec(
                name=cname,
                sae_id=sae,
                rate=cs.rate("rate"),
                mode=cs.string("mode", "enc", choices=("enc", "enc_then_dec")),
                group=cs.string("group", ""),
                start_s=cs.number("start_s", 0.0, minimum=0.0),
                arrival=cs.string("arrival", "fixed", choices=("fixed", "poisson")),
                delay=delay,
            )
        )
        cs.finish()
    root.finish()

    return ScenarioConfig(
        name=name,
        seed=seed,
        duration_s=duration,
        tick_s=tick,
        key_size=key_size,
        initial_config=initial,
        kme_ids=kme_ids,
        links=tuple(links),
        policy=policy,
        switch_timing=switch_timing,
        puf_timing=puf_timing,
        puf=puf,
        consumers=tuple(consumers),
        mutual_authentication=mutual,
        source=source,
    )
