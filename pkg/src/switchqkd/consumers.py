"""Key consumers: SAEs fetching keys at a configured rate."""

from __future__ import annotations

import base64
import math
import time
from dataclasses import dataclass

import numpy as np

from .events import EventLog
from .kms import KmsError, UnavailableError
from .scenario import ConsumerSpec
from .scheduler import Process, VirtualClock


class InvariantViolation(AssertionError):
    pass


def fixed_interval(rate: float) -> float:
    # rates like 0.5/min do not invert exactly; keep arrival times on a clean grid
    return round(1.0 / rate, 9)


def sample_latency(spec: ConsumerSpec, rng: np.random.Generator) -> float:
    """Modeled request latency: normal around the mean, scaled so the mean
    absolute deviation equals the configured jitter, clipped at zero."""
    sigma = spec.delay.jitter_s * math.sqrt(math.pi / 2.0)
    return max(0.0, spec.delay.mean_s + sigma * rng.standard_normal())


@dataclass
class Consumer:
    spec: ConsumerSpec
    client: object
    log: EventLog
    clock: VirtualClock
    rng: np.random.Generator
    link_name: str
    master_sae_id: str
    measure_wall_time: bool = False
    retries: int = 1

    def __post_init__(self) -> None:
        self.requests = 0
        self.successes = 0
        self.records: list[dict] = []

    def _call(self, fn, *args):
        attempt = 0
        while True:
            try:
                return fn(*args)
            except KmsError:
                raise
            except Exception:
                # transport failure (service mode only): one retry, then give up
                if attempt >= self.retries:
                    raise
                attempt += 1

    def request_once(self) -> dict:
        spec = self.spec
        self.requests += 1
        payload = {
            "consumer": spec.name,
            "group": spec.group,
            "sae_id": spec.sae_id,
            "link": self.link_name,
            "mode": spec.mode,
        }
        t0 = time.perf_counter()
        try:
            enc = self._call(self.client.enc_keys, spec.sae_id, 1)
            keys = enc["keys"]
            if spec.mode == "enc_then_dec":
                dec = self._call(self.client.dec_keys, self.master_sae_id, [k["key_ID"] for k in keys])
                if [(k["key_ID"], k["key"]) for k in dec["keys"]] != [(k["key_ID"], k["key"]) for k in keys]:
                    raise InvariantViolation(f"{spec.name}: dec material differs from enc material")
                payload["dec_match"] = True
            payload.update(outcome="ok", keys=len(keys),
                           key_bytes=sum(len(base64.b64decode(k["key"])) for k in keys))
            self.successes += 1
        except UnavailableError:
            payload.update(outcome="unavailable", keys=0)
        except KmsError as exc:
            payload.update(outcome="error", keys=0, error=exc.message)
        except InvariantViolation:
            raise
        except Exception as exc:  # transport failure after retry
            payload.update(outcome="transport_error", keys=0, error=type(exc).__name__)
        if self.measure_wall_time:
            payload["latency_s"] = time.perf_counter() - t0
        else:
            payload["latency_s"] = sample_latency(spec, self.rng)
        record = self.log.emit(self.clock.now, "request", payload)
        self.records.append(record)
        return record

    def process(self) -> Process:
        spec = self.spec
        if spec.arrival == "fixed":
            interval = fixed_interval(spec.rate)
            k = 0
            while True:
                self.request_once()
                k += 1
                yield max(0.0, spec.start_s + k * interval - self.clock.now)
        else:
            while True:
                self.request_once()
                yield float(self.rng.exponential(1.0 / spec.rate))


def run_consumer(
    spec: ConsumerSpec,
    clock: VirtualClock,
    kms_client,
    until: float,
    log: EventLog | None = None,
    rng: np.random.Generator | None = None,
    link_name: str = "",
    master_sae_id: str = "",
) -> list[dict]:
    """Drive one consumer alone on ``clock`` until ``until``; returns its request records."""
    consumer = Consumer(
        spec,
        kms_client,
        log if log is not None else EventLog(),
        clock,
        rng if rng is not None else np.random.default_rng(0),
        link_name,
        master_sae_id,
    )
    clock.spawn(consumer.process(), spec.start_s - clock.now if spec.start_s > clock.now else 0.0)
    clock.run(until)
    return consumer.records
