"""Per-client byte accounting for every protocol exchange."""

from __future__ import annotations

import json
from collections import defaultdict

FENS_PHASES = ("phase0_down", "phase1_up", "phase1_down", "static_up", "phase2_up", "phase2_down")


class CommLedger:
    """Counters ``client -> phase -> bytes``.

    Phases ending in ``_up`` are client-to-server, ``_down`` server-to-client.
    Counters only ever grow.
    """

    def __init__(self, num_clients: int):
        self.num_clients = num_clients
        self._bytes = [defaultdict(int) for _ in range(num_clients)]

    def record(self, client_id: int, phase: str, nbytes: int) -> None:
        if nbytes < 0:
            raise ValueError("byte counts are non-negative")
        self._bytes[client_id][phase] += int(nbytes)

    def get(self, client_id: int, phase: str) -> int:
        return self._bytes[client_id].get(phase, 0)

    def phases(self) -> list[str]:
        seen = {p for c in self._bytes for p in c}
        order = [p for p in FENS_PHASES if p in seen]
        return order + sorted(seen - set(order))

    def client_total(self, client_id: int) -> int:
        return sum(self._bytes[client_id].values())

    def client_up(self, client_id: int) -> int:
        return sum(v for p, v in self._bytes[client_id].items() if p.endswith("_up"))

    def client_down(self, client_id: int) -> int:
        return sum(v for p, v in self._bytes[client_id].items() if p.endswith("_down"))

    def phase_total(self, phase: str) -> int:
        return sum(c.get(phase, 0) for c in self._bytes)

    def total(self) -> int:
        return sum(self.client_total(i) for i in range(self.num_clients))

    def total_up(self) -> int:
        return sum(self.client_up(i) for i in range(self.num_clients))

    def total_down(self) -> int:
        return sum(self.client_down(i) for i in range(self.num_clients))

    def mean_client_total(self) -> float:
        return self.total() / self.num_clients

    def to_dict(self) -> dict:
        phases = self.phases()
        return {str(i): {p: self.get(i, p) for p in phases} for i in range(self.num_clients)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CommLedger":
        led = cls(len(d))
        for cid, phases in d.items():
            for p, v in phases.items():
                led.record(int(cid), p, v)
        return led
