import json

import pytest

from xsilo.config import (
    AdversarySpec,
    ExperimentConfig,
    PartySpec,
    ProtocolConfig,
    Role,
    default_roster,
    load_config,
)
from xsilo.fixedpoint import FixedPointCodec
from xsilo.learner import ConfigError, TrainConfig


def cfg(**kw):
    base = dict(parties=default_roster(4, 50), train=TrainConfig(regime="dp_smc", batch_size=20, steps=2))
    base.update(kw)
    return ExperimentConfig(**base)


def test_default_roster_roles():
    r = default_roster(3, [1, 2, 3])
    assert [p.n_i for p in r] == [1, 2, 3]
    assert set(r[0].capabilities) == {"client", "master", "aggregator"}
    assert all(p.role is Role.HBC for p in r)


def test_valid_config_passes():
    cfg().validate()
    cfg(protocol=ProtocolConfig(kind="dca", compute_nodes=3)).validate()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: c.parties.append(PartySpec(9, capabilities=("master",))),
        lambda c: setattr(c.parties[0], "capabilities", ("client",)),
        lambda c: c.parties.append(PartySpec(0)),
        lambda c: setattr(c.protocol, "kind", "magic"),
        lambda c: setattr(c.protocol, "transport", "udp"),
        lambda c: setattr(c, "codec", FixedPointCodec(frac_bits=16, modulus_bits=20)),
        lambda c: c.adversaries.append(AdversarySpec("observe_all", [42])),
        lambda c: setattr(c.train, "batch_size", 10_000),
    ],
)
def test_invalid_configs(mutate):
    c = cfg()
    mutate(c)
    with pytest.raises(ConfigError):
        c.validate()


def test_dca_needs_a_node():
    c = cfg(protocol=ProtocolConfig(kind="dca", compute_nodes=0))
    with pytest.raises(ConfigError):
        c.validate()


def test_pairwise_needs_aggregator():
    c = cfg()
    c.parties[0].capabilities = ("client", "master")
    with pytest.raises(ConfigError, match="aggregator"):
        c.validate()


def test_unknown_capability():
    with pytest.raises(ConfigError):
        PartySpec(0, capabilities=("client", "oracle"))


def test_dict_roundtrip(tmp_path):
    c = cfg(protocol=ProtocolConfig(kind="dca", compute_nodes=2, node_assignment={0: [0], 1: [0, 1]}), seed=3)
    d = c.to_dict()
    assert d["schema_version"] == 1
    path = tmp_path / "c.json"
    path.write_text(json.dumps(d))
    back = load_config(path)
    assert back.to_dict() == d
    assert back.protocol.node_assignment == {0: [0], 1: [0, 1]}
    assert back.train.seed == 3


def test_shorthand_and_unknown_keys():
    c = ExperimentConfig.from_dict({"parties": {"count": 3, "samples_per_party": 10}, "seed": 4})
    assert len(c.parties) == 3 and c.n_total == 30
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"parties": {"count": 3}, "colour": "blue"})
