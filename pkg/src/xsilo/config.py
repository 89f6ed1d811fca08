"""Experiment configuration: party roster, protocol, training and I/O settings.

Configs are JSON documents. A minimal example::

    {
      "seed": 7,
      "parties": {"count": 10, "samples_per_party": 200},
      "protocol": {"kind": "pairwise"},
      "train": {"regime": "dp_smc", "steps": 100, "batch_size": 200,
                "noise_multiplier": 5.0},
      "dataset": {"kind": "gaussian_mixture", "n_features": 20, "n_classes": 2},
      "output": "results/run1"
    }

``parties`` may instead be an explicit list of ``{"party_id", "role",
"n_i", "capabilities"}`` objects. See ``README.md`` for every field.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .fixedpoint import FixedPointCodec
from .learner import ConfigError, TrainConfig
from .projection import solve_sensitivity

SCHEMA_VERSION = 1


class Role(str, enum.Enum):
    HONEST_TEE = "honest_tee"
    HBC = "hbc"
    MALICIOUS = "malicious"


CAPABILITIES = {"client", "compute_node", "aggregator", "master"}


@dataclass
class PartySpec:
    party_id: int
    role: Role = Role.HBC
    n_i: int = 0
    capabilities: tuple[str, ...] = ("client",)

    def __post_init__(self):
        self.role = Role(self.role)
        self.capabilities = tuple(self.capabilities)
        unknown = set(self.capabilities) - CAPABILITIES
        if unknown:
            raise ConfigError(f"party {self.party_id}: unknown capabilities {sorted(unknown)}")


@dataclass
class ProtocolConfig:
    kind: str = "pairwise"
    compute_nodes: int = 2
    group_size: int | None = None
    node_assignment: dict[int, list[int]] | None = None
    transport: str = "memory"
    timeout: float = 10.0


@dataclass
class AdversarySpec:
    behavior: str
    targets: list[int]
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    parties: list[PartySpec]
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    codec: FixedPointCodec = field(default_factory=FixedPointCodec)
    dataset: dict[str, Any] = field(default_factory=lambda: {"kind": "gaussian_mixture"})
    model: dict[str, Any] = field(default_factory=dict)
    mixnet: dict[str, Any] = field(default_factory=dict)
    token_list: str | None = None
    seed: int = 0
    output: str | None = None
    adversaries: list[AdversarySpec] = field(default_factory=list)

    def __post_init__(self):
        # one seed drives every named stream
        self.train.seed = self.seed

    @property
    def clients(self) -> list[PartySpec]:
        return [p for p in self.parties if "client" in p.capabilities]

    @property
    def n_total(self) -> int:
        return sum(p.n_i for p in self.clients)

    def validate(self) -> None:
        ids = [p.party_id for p in self.parties]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate party ids")
        masters = [p for p in self.parties if "master" in p.capabilities]
        if len(masters) != 1:
            raise ConfigError(f"need exactly one master, found {len(masters)}")
        if not self.clients:
            raise ConfigError("no client parties")
        if any(p.n_i < 0 for p in self.clients):
            raise ConfigError("n_i must be non-negative")
        kind = self.protocol.kind
        if kind == "pairwise":
            if not any("aggregator" in p.capabilities for p in self.parties):
                raise ConfigError("pairwise protocol needs an aggregator")
        elif kind == "dca":
            if self.protocol.compute_nodes < 1:
                raise ConfigError("DCA needs at least one compute node")
        else:
            raise ConfigError(f"unknown protocol {kind!r}")
        if self.protocol.transport not in ("memory", "socket"):
            raise ConfigError(f"unknown transport {self.protocol.transport!r}")
        self.train.validate(self.n_total, len(self.clients))
        if self.train.regime == "dp_smc":
            bound = self._aggregate_bound()
            try:
                self.codec.check_sum_capacity(1, bound)
            except OverflowError as exc:
                raise ConfigError(f"fixed-point codec too small: {exc}") from exc
        known = {p.party_id for p in self.parties}
        for adv in self.adversaries:
            if not set(adv.targets) <= known:
                raise ConfigError(f"adversary targets unknown parties {adv.targets}")

    def _aggregate_bound(self) -> float:
        """Generous bound on the decoded aggregate: full batch at the clip norm plus 10 noise std."""
        t = self.train
        sens = solve_sensitivity(t.projection_k, t.clip_norm, t.delta_prime) if t.projection_k else t.clip_norm
        n_batch = t.batch_size if t.sampling == "swor" else self.n_total
        n = len(self.clients)
        std = t.noise_multiplier * sens * max(1.0, (n / max(1, n - t.colluders - 1)) ** 0.5)
        return n_batch * t.clip_norm + 10 * std

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["parties"] = [
            {"party_id": p.party_id, "role": p.role.value, "n_i": p.n_i, "capabilities": list(p.capabilities)}
            for p in self.parties
        ]
        d["codec"] = {"frac_bits": self.codec.frac_bits, "modulus_bits": self.codec.modulus_bits}
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("schema_version", None)
        parties = d.pop("parties")
        if isinstance(parties, dict):
            parties = default_roster(parties["count"], parties.get("samples_per_party", 100), parties.get("role", "hbc"))
        else:
            parties = [PartySpec(**p) for p in parties]
        proto = d.pop("protocol", {})
        if proto.get("node_assignment"):
            proto["node_assignment"] = {int(k): list(v) for k, v in proto["node_assignment"].items()}
        train = TrainConfig(**d.pop("train", {}))
        codec = FixedPointCodec(**d.pop("codec", {}))
        advs = [AdversarySpec(**a) for a in d.pop("adversaries", [])]
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(parties, ProtocolConfig(**proto), train, codec, adversaries=advs, **d)


def default_roster(count: int, samples_per_party: int | list[int], role: str = "hbc") -> list[PartySpec]:
    """``count`` clients; party 0 also acts as master and aggregator."""
    sizes = samples_per_party if isinstance(samples_per_party, list) else [samples_per_party] * count
    out = []
    for i in range(count):
        caps = ("client", "master", "aggregator") if i == 0 else ("client",)
        out.append(PartySpec(i, Role(role), sizes[i], caps))
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
