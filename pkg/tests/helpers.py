"""Scenario tweaks shared by the tests."""

from __future__ import annotations

import copy
import dataclasses

from switchqkd.kms import KeyManagementSystem, SaeBinding
from switchqkd.scenario import DeviceConfig
from switchqkd.topology import L1, L2, L3, L4


def variant(config, **changes):
    return dataclasses.replace(config, **changes)


def with_policy(config, **changes):
    return variant(config, policy=dataclasses.replace(config.policy, **changes))


def with_impostor(config, node: str, seed: int = 999):
    devices = tuple(
        DeviceConfig(d.node, d.seed, True, seed) if d.node == node else d for d in config.puf.devices
    )
    return variant(config, puf=dataclasses.replace(config.puf, devices=devices))


def with_links(config, **changes):
    return variant(config, links=tuple(dataclasses.replace(lc, **changes) for lc in config.links))


def with_puf(config, **changes):
    return variant(config, puf=dataclasses.replace(config.puf, **changes))


BINDINGS = [
    SaeBinding(L1, "SAE-A1-L1", "SAE-B1-L1", "KME-A1", "KME-B1"),
    SaeBinding(L2, "SAE-A2-L2", "SAE-B2-L2", "KME-A2", "KME-B2"),
    SaeBinding(L3, "SAE-A1-L3", "SAE-B2-L3", "KME-A1", "KME-B2"),
    SaeBinding(L4, "SAE-A2-L4", "SAE-B1-L4", "KME-A2", "KME-B1"),
]


def make_kms(capacity=16_000, key_size=32):
    return KeyManagementSystem(BINDINGS, {b.link: capacity for b in BINDINGS}, key_size=key_size)


def state_of(kms):
    """Everything a request could touch, in comparable form."""
    out = {}
    for link, s in kms.stores.items():
        out[link] = (
            [(r.key_id, r.key_material) for r in s.master.queue],
            [(r.key_id, r.key_material) for r in s.slave.queue],
            bytes(s.pending),
            list(s.retained.items()),
            s.dec_delivered,
            copy.deepcopy(kms.counters(link)),
            s.master.status,
            s.slave.status,
        )
    return out


def material(n, start=0):
    return bytes((start + i) % 256 for i in range(n))


# acceptance verdict lines, printed again in the terminal summary
VERDICTS: list[str] = []


def verdict(number: int, title: str, checks: dict[str, bool], detail: str = "") -> None:
    ok = all(checks.values())
    failed = [name for name, passed in checks.items() if not passed]
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}"
    if detail:
        line += f" [{detail}]"
    if failed:
        line += f" failed: {', '.join(failed)}"
    print(line)
    VERDICTS.append(line)
    assert ok, line
