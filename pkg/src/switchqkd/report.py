"""Run reports and the CSV bundle, computed purely from the event log."""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

LINKS = ("L1", "L2", "L3", "L4")

KPI_COLUMNS = ("time_s", "phase", "skr_bps", "rkr_bps", "qber", "snr_db", "produced_bytes")
LEVEL_COLUMNS = (
    ("time_s",)
    + tuple(f"{l}_bytes" for l in LINKS)
    + tuple(f"{l}_status" for l in LINKS)
    + ("fabric", "epoch")
)
SWITCH_COLUMNS = ("index", "from", "to", "outcome", "epoch", "start_s", "end_s", "duration_s", "pba_s")
LATENCY_COLUMNS = ("time_s", "consumer", "group", "link", "outcome", "latency_s")

LATENCY_NOTE = (
    "Consumer latency and jitter come from the configured delay model (simulation) "
    "or wall-clock timing of local HTTP calls (service mode). They are not "
    "measurements of a deployed network and are not reproduction targets."
)


@dataclass
class LinkStats:
    mean_skr: float | None = None
    mean_qber: float | None = None
    mean_rkr: float | None = None
    keygen_samples: int = 0
    keygen_seconds: float = 0.0
    keys_formed: int = 0
    keys_delivered: int = 0
    keys_discarded: int = 0
    stored_key_count: int = 0
    sampled_bits: float = 0.0
    produced_bits: float = 0.0
    final_carry_bits: float = 0.0
    discarded_carry_bits: float = 0.0
    bit_residual: float = 0.0


@dataclass
class ConsumerStats:
    group: str = ""
    link: str = ""
    requests: int = 0
    successes: int = 0
    unavailable: int = 0
    mean_latency_s: float | None = None
    jitter_s: float | None = None


@dataclass
class RunReport:
    links: dict[str, LinkStats] = field(default_factory=dict)
    switch_count: int = 0
    abort_count: int = 0
    switch_durations: list[float] = field(default_factory=list)
    pba_durations: list[float] = field(default_factory=list)
    switch_starts: list[float] = field(default_factory=list)
    consumers: dict[str, ConsumerStats] = field(default_factory=dict)
    latency_source: str = LATENCY_NOTE
    scenario: dict[str, Any] | None = None

    def to_json(self) -> dict:
        return asdict(self)


def _mean(xs: list[float]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


def build_report(records: Iterable[dict], config=None) -> RunReport:
    """Fold an event log into a :class:`RunReport`."""
    links = {name: LinkStats() for name in LINKS}
    skr: dict[str, list[float]] = defaultdict(list)
    qber: dict[str, list[float]] = defaultdict(list)
    rkr: dict[str, list[float]] = defaultdict(list)
    sampled: dict[str, list[float]] = defaultdict(list)
    latencies: dict[str, list[float]] = defaultdict(list)
    consumers: dict[str, ConsumerStats] = {}
    report = RunReport()

    for r in records:
        kind, p = r["kind"], r["payload"]
        if kind == "kpi":
            st = links.setdefault(p["link"], LinkStats())
            name = p["link"]
            if p["phase"] == "KeyGeneration":
                skr[name].append(p["skr_bps"])
                qber[name].append(p["qber"])
                rkr[name].append(p["rkr_bps"])
                st.keygen_seconds += p["dt_s"]
            sampled[name].append(p["skr_bps"] * p["dt_s"])
            st.produced_bits += 8 * p["produced_bytes"]
            st.final_carry_bits = p["carry_bits"]
            st.keys_formed += p["keys_formed"]
            st.keys_discarded += p["keys_discarded"]
        elif kind == "buffer_init":
            st = links.setdefault(p["link"], LinkStats())
            st.keys_formed += p["keys_formed"]
            st.keys_discarded += p["keys_discarded"]
        elif kind == "deactivation":
            st = links.setdefault(p["link"], LinkStats())
            # the carry of the last tick is what got dropped; do not count it twice
            st.discarded_carry_bits += p["discarded_carry_bits"]
            st.final_carry_bits = 0.0
        elif kind == "request":
            cs = consumers.setdefault(p["consumer"], ConsumerStats(group=p.get("group", ""), link=p["link"]))
            cs.requests += 1
            if p["outcome"] == "ok":
                cs.successes += 1
                links.setdefault(p["link"], LinkStats()).keys_delivered += p["keys"]
            elif p["outcome"] == "unavailable":
                cs.unavailable += 1
            latencies[p["consumer"]].append(p["latency_s"])
        elif kind == "switch_start":
            report.switch_starts.append(r["time_s"])
        elif kind == "switch_end":
            if p["outcome"] == "completed":
                report.switch_count += 1
            else:
                report.abort_count += 1
            report.switch_durations.append(p["duration_s"])
            report.pba_durations.append(p["phase_times"].get("pba"))

    for name, st in links.items():
        st.mean_skr = _mean(skr[name])
        st.mean_qber = _mean(qber[name])
        st.mean_rkr = _mean(rkr[name])
        st.keygen_samples = len(skr[name])
        st.stored_key_count = st.keys_formed - st.keys_delivered - st.keys_discarded
        st.sampled_bits = math.fsum(sampled[name])
        balance = st.produced_bits + st.final_carry_bits + st.discarded_carry_bits
        st.bit_residual = abs(balance - st.sampled_bits) / st.sampled_bits if st.sampled_bits else 0.0

    for name, cs in consumers.items():
        lat = latencies[name]
        cs.mean_latency_s = _mean(lat)
        if lat:
            cs.jitter_s = math.fsum(abs(x - cs.mean_latency_s) for x in lat) / len(lat)

    report.links = links
    report.consumers = consumers
    if config is not None:
        report.scenario = config.to_json()
    return report


def _fmt(v: Any) -> Any:
    return "" if v is None else v


def emit_report(records: list[dict], out_dir: str | os.PathLike, config=None) -> RunReport:
    """Write the CSV bundle plus ``summary.txt``/``summary.json``; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(records, config)

    kpi_writers = {}
    files = []
    try:
        for name in LINKS:
            fh = open(out / f"kpi_{name}.csv", "w", newline="", encoding="utf-8")
            files.append(fh)
            w = csv.writer(fh)
            w.writerow(KPI_COLUMNS)
            kpi_writers[name] = w
        fh = open(out / "buffer_levels.csv", "w", newline="", encoding="utf-8")
        files.append(fh)
        levels = csv.writer(fh)
        levels.writerow(LEVEL_COLUMNS)
        fh = open(out / "switches.csv", "w", newline="", encoding="utf-8")
        files.append(fh)
        switches = csv.writer(fh)
        switches.writerow(SWITCH_COLUMNS)
        fh = open(out / "consumer_latency.csv", "w", newline="", encoding="utf-8")
        files.append(fh)
        latency = csv.writer(fh)
        latency.writerow(LATENCY_COLUMNS)

        index = 0
        for r in records:
            kind, p, t = r["kind"], r["payload"], r["time_s"]
            if kind == "kpi" and p["link"] in kpi_writers:
                kpi_writers[p["link"]].writerow(
                    [t, p["phase"], p["skr_bps"], p["rkr_bps"], p["qber"], p["snr_db"], p["produced_bytes"]]
                )
            elif kind == "poll" and "levels" in p:
                fab = p["fabric"]
                fabric = fab["config"] if fab["state"] == "stable" else f"switching:{fab['from']}->{fab['to']}"
                levels.writerow(
                    [t]
                    + [p["levels"].get(l, "") for l in LINKS]
                    + [p["statuses"].get(l, "") for l in LINKS]
                    + [fabric, p["epoch"]]
                )
            elif kind == "switch_end":
                index += 1
                switches.writerow(
                    [index, p["from"], p["to"], p["outcome"], p["epoch"], p["start_s"], t,
                     p["duration_s"], _fmt(p["phase_times"].get("pba"))]
                )
            elif kind == "request":
                latency.writerow([t, p["consumer"], p.get("group", ""), p["link"], p["outcome"], p["latency_s"]])
    finally:
        for fh in files:
            fh.close()

    (out / "summary.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(format_summary(report))
    return report


def format_summary(report: RunReport) -> str:
    lines = ["Run summary", "===========", ""]
    lines.append("Links (KeyGeneration samples only):")
    for name, st in sorted(report.links.items()):
        skr = "n/a" if st.mean_skr is None else f"{st.mean_skr:.1f} bps"
        q = "n/a" if st.mean_qber is None else f"{st.mean_qber:.4f}"
        lines.append(
            f"  {name}: mean SKR {skr}, mean QBER {q}, keys formed {st.keys_formed}, "
            f"delivered {st.keys_delivered}, discarded {st.keys_discarded}, stored {st.stored_key_count}"
        )
    lines.append("")
    lines.append(f"Switches completed: {report.switch_count}; aborted: {report.abort_count}")
    for i, (start, d) in enumerate(zip(report.switch_starts, report.switch_durations), 1):
        lines.append(f"  #{i}: start {start:g} s, duration {d:g} s")
    lines.append("")
    lines.append("Consumers:")
    for name, cs in sorted(report.consumers.items()):
        lat = "n/a" if cs.mean_latency_s is None else f"{cs.mean_latency_s * 1000:.1f} ms"
        jit = "n/a" if cs.jitter_s is None else f"{cs.jitter_s * 1000:.1f} ms"
        lines.append(
            f"  {name} ({cs.link}): {cs.successes}/{cs.requests} ok, {cs.unavailable} unavailable, "
            f"latency {lat}, jitter {jit}"
        )
    lines.append("")
    lines.append("Note: " + report.latency_source)
    return "\n".join(lines) + "\n"
