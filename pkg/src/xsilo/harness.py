"""Experiment orchestration, adversary injection and measurement helpers."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import AdversarySpec, ExperimentConfig, Role
from .dpnoise import NoiseMode, NoisePlan, sample_noise_share
from .fixedpoint import FixedPointCodec, FixedVector, add_mod, decode, encode
from .learner import (
    Dataset,
    FrozenFeatures,
    Model,
    TokenAssignment,
    TrainReport,
    gaussian_mixture,
    linearly_separable,
    load_csv,
    load_images,
    range_partition,
    run_training,
)
from .mixnet import (
    KeyPair,
    MixResult,
    SimulationSealedBox,
    X25519SealedBox,
    drop_entry,
    make_tokens,
    read_token_list,
    run_mixnet,
    substitute_entry,
    write_token_list,
)
from .prg import derive_seed, named_rng
from .securesum import IncompleteRound, WireMessage, dca_make_shares
from .transport import SecureSum, Transcript, make_transport

log = logging.getLogger(__name__)

BEHAVIORS = ("reveal_noise_share", "drop_token", "substitute_message", "observe_all")


class UnknownBehavior(ValueError):
    pass


def inject_adversary(
    config: ExperimentConfig, behavior: str, targets: Sequence[int], **params
) -> ExperimentConfig:
    """Copy of ``config`` with ``targets`` marked malicious and running ``behavior``."""
    if behavior not in BEHAVIORS:
        raise UnknownBehavior(behavior)
    cfg = copy.deepcopy(config)
    for p in cfg.parties:
        if p.party_id in targets:
            p.role = Role.MALICIOUS
    cfg.adversaries.append(AdversarySpec(behavior, list(targets), dict(params)))
    return cfg


def substitution_interceptor(delta: np.ndarray | int | float):
    """Replace a client's outgoing message ``m`` with ``m + delta`` (raw words mod R)."""

    def intercept(sender: int, msg: WireMessage) -> WireMessage:
        codec = msg.payload.codec
        d = np.broadcast_to(np.asarray(delta, dtype=np.uint64), (len(msg.payload),))
        shifted = add_mod(msg.payload, FixedVector(codec.reduce(d), codec))
        return WireMessage(msg.protocol, msg.round, msg.sender, shifted, msg.node)

    return intercept


def build_secure_sum(cfg: ExperimentConfig, transcript: Transcript | None = None) -> SecureSum:
    interceptors = {}
    for adv in cfg.adversaries:
        if adv.behavior == "substitute_message":
            for t in adv.targets:
                interceptors[t] = substitution_interceptor(adv.params.get("delta", 1))
    proto = cfg.protocol
    return SecureSum(
        proto.kind,
        [p.party_id for p in cfg.clients],
        cfg.codec,
        seed=cfg.seed,
        transport=make_transport(proto.transport, transcript),
        compute_nodes=proto.compute_nodes,
        group_size=proto.group_size,
        node_assignment=proto.node_assignment,
        timeout=proto.timeout,
        interceptors=interceptors,
    )


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = dict(cfg.dataset)
    kind = spec.pop("kind", "gaussian_mixture")
    clients = cfg.clients
    rng = named_rng(cfg.seed, "data")
    n = cfg.n_total
    if kind == "gaussian_mixture":
        data = gaussian_mixture(
            n,
            spec.get("n_features", 20),
            spec.get("n_classes", 2),
            len(clients),
            rng,
            separation=spec.get("separation", 3.0),
            n_test=spec.get("n_test", 1000),
        )
    elif kind == "linearly_separable":
        data = linearly_separable(n, spec.get("n_features", 10), len(clients), rng, spec.get("margin", 0.5))
    elif kind == "csv":
        data = load_csv(spec["path"], len(clients), spec.get("label_column", -1))
    elif kind == "images":
        data = load_images(spec["path"], len(clients))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if kind in ("csv", "images") and data.n != n:
        raise ValueError(f"dataset has {data.n} examples but the roster holds {n}")
    bounds = np.cumsum([0] + [p.n_i for p in clients])
    data.partition = range_partition({p.party_id: (bounds[k], bounds[k + 1]) for k, p in enumerate(clients)})
    return data


def build_model(cfg: ExperimentConfig, data: Dataset) -> Model:
    spec = cfg.model
    rng = named_rng(cfg.seed, "model")
    n_classes = cfg.dataset.get("n_classes") or data.n_classes
    frozen = None
    if spec.get("frozen_features"):
        frozen = FrozenFeatures.random(data.X.shape[1], int(spec["frozen_features"]), rng)
    model = Model(data.X.shape[1], n_classes, tuple(spec.get("hidden", ())), frozen_features=frozen)
    if model.hidden:
        model.init_random(rng)
    return model


# ---------------------------------------------------------------------------
# Token list
# ---------------------------------------------------------------------------


def _pke(name: str):
    if name == "x25519":
        return X25519SealedBox()
    if name == "simulation":
        return SimulationSealedBox()
    raise ValueError(f"unknown pke {name!r}")


def party_keypairs(party_ids: Sequence[int], seed: int, pke) -> list[KeyPair]:
    return [pke.generate(i, named_rng(seed, "pke", i)) for i in party_ids]


def generate_token_list(
    sizes: Mapping[int, int],
    seed: int,
    pke_name: str = "x25519",
    tamper: Mapping[int, str] | None = None,
) -> tuple[MixResult, dict[int, list[bytes]], list[KeyPair]]:
    pke = _pke(pke_name)
    ids = sorted(sizes)
    keypairs = party_keypairs(ids, seed, pke)
    tokens = {i: make_tokens(sizes[i], named_rng(seed, "tokens", i)) for i in ids}
    rngs = {i: named_rng(seed, "mix", i) for i in ids}
    behaviours = {"drop_token": drop_entry, "substitute_token": substitute_entry}
    hooks = {pid: behaviours[b] for pid, b in (tamper or {}).items()}
    result = run_mixnet(tokens, keypairs, rngs, pke, hooks)
    return result, tokens, keypairs


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    result: dict
    report: TrainReport | None
    paths: dict[str, Path]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, bytes):
        return obj.hex()
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Validate, set up, train and persist one experiment.

    Everything except wall-clock timings is a deterministic function of the
    config and its seed; timings are kept under the ``timings`` key.
    """
    cfg.validate()
    cfg.train.seed = cfg.seed
    out = Path(out_dir or cfg.output or "results")
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    result: dict = {"schema_version": 1, "config": cfg.to_dict(), "status": "ok"}
    t0 = time.perf_counter()

    data = build_dataset(cfg)
    model = build_model(cfg, data)
    timings["setup"] = time.perf_counter() - t0

    tokens = None
    behaviors = {adv.behavior: adv for adv in cfg.adversaries}
    use_list = cfg.train.sampling == "swor" and cfg.mixnet.get("enabled", True)
    if use_list:
        t0 = time.perf_counter()
        sizes = {p.party_id: p.n_i for p in cfg.clients}
        tamper = {}
        if "drop_token" in behaviors:
            tamper = {t: "drop_token" for t in behaviors["drop_token"].targets}
        path = Path(cfg.token_list) if cfg.token_list else None
        pke_name = cfg.mixnet.get("pke", "x25519")
        keypairs = party_keypairs(sorted(sizes), cfg.seed, _pke(pke_name))
        own = {i: make_tokens(sizes[i], named_rng(cfg.seed, "tokens", i)) for i in sorted(sizes)}
        if path is not None and path.exists() and not tamper:
            token_list = read_token_list(path, [kp.public_key for kp in keypairs])
            result["mixnet"] = {"source": "file"}
        else:
            mix, own, keypairs = generate_token_list(sizes, cfg.seed, pke_name, tamper)
            verdicts = {str(pid): [v.verdict.value for v in vs] for pid, vs in mix.verdicts.items()}
            result["mixnet"] = {
                "source": "generated",
                "tampering_detected": mix.tampering_detected,
                "verdicts": verdicts,
            }
            if mix.tampering_detected or mix.final is None:
                result["status"] = "aborted"
                result["abort"] = {"phase": "token_list", "round": len(mix.permutations)}
                timings["token_list"] = time.perf_counter() - t0
                return _persist(result, timings, None, out)
            token_list = mix.final
            if path is not None:
                write_token_list(path, token_list, [kp.public_key for kp in keypairs])
        tokens = TokenAssignment(token_list, own)
        timings["token_list"] = time.perf_counter() - t0

    secure_sum = build_secure_sum(cfg)
    report = None
    try:
        report = run_training(cfg.train, data, model, secure_sum=secure_sum, codec=cfg.codec, tokens=tokens)
    except IncompleteRound as exc:
        result["status"] = "aborted"
        result["abort"] = {"phase": "training", "reason": str(exc)}
    finally:
        secure_sum.transport.close()

    transcript = secure_sum.transcript
    result["transcript"] = {
        "messages": len(transcript.entries),
        "client_bytes": secure_sum.client_bytes(),
        "chain_head": transcript.entries[-1].chain if transcript.entries else "",
    }
    if "observe_all" in behaviors:
        result["transcript"]["entries"] = [
            {"round": e.round, "sender": e.sender, "receiver": e.receiver, "nbytes": e.nbytes, "digest": e.digest}
            for e in transcript.entries
        ]
    timings.update({f"protocol_{k}": v for k, v in transcript.timings.items()})
    if report is not None:
        rep = report.to_dict()
        timings.update({f"train_{k}": v for k, v in rep.pop("timings").items()})
        result["report"] = rep
        result["privacy"] = {"epsilon": report.epsilon, "delta": report.delta}
        if report.noise:
            result["noise"] = {**report.noise, "epsilon": report.epsilon, "delta": report.delta, "steps": report.steps}
        if report.projection:
            result["projection"] = report.projection
            # unprojected uploads would carry model.dim values per party and step
            full = len(cfg.clients) * report.steps * model.dim
            result["upload_reduction"] = full / report.uploaded_values if report.uploaded_values else None
    if "reveal_noise_share" in behaviors and report is not None and report.noise:
        adv = behaviors["reveal_noise_share"]
        plan = NoisePlan(
            report.noise["sigma"], report.noise["N"], report.noise["T"], report.noise["sigma_i"], NoiseMode(report.noise["mode"])
        )
        result["adversary"] = {
            "revealed_parties": adv.targets,
            "residual_variance_predicted": plan.residual_variance(len(adv.targets)),
        }
    return _persist(result, timings, report, out)


def _persist(result: dict, timings: dict, report: TrainReport | None, out: Path) -> ExperimentResult:
    paths = {"result": out / "result.json", "timings": out / "timings.json"}
    paths["result"].write_text(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    paths["timings"].write_text(json.dumps(timings, indent=2, sort_keys=True))
    if report is not None:
        paths["curve"] = out / "curve.csv"
        acc = dict(report.accuracies)
        lines = ["step,loss,accuracy"] + [f"{s},{l!r},{acc[s]!r}" for s, l in report.losses]
        paths["curve"].write_text("\n".join(lines) + "\n")
    result = dict(result, timings=timings)
    return ExperimentResult(result, report, paths)


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------


def residual_noise_variance(
    plan: NoisePlan,
    revealed: Sequence[int],
    samples: int,
    seed: int = 0,
    codec: FixedPointCodec | None = None,
    protocol: str = "pairwise",
) -> float:
    """Empirical aggregate noise variance left once ``revealed`` parties' shares leak.

    Noise-only payloads go through the secure-sum pipeline; the attacker
    subtracts the revealed shares from the decoded aggregate.
    """
    codec = codec or FixedPointCodec()
    ids = list(range(plan.N))
    ss = SecureSum(protocol, ids, codec, seed)
    shares = {i: sample_noise_share(plan, samples, named_rng(seed, "noise", i)) for i in ids}
    payloads = {i: encode(shares[i], codec, clip=True) for i in ids}
    aggregate = decode(ss(payloads, 0))
    known = sum((decode(payloads[i]) for i in revealed), np.zeros(samples))
    return float(np.var(aggregate - known))


def _guess_sorted(before: Sequence[bytes], after: Sequence[bytes]) -> np.ndarray:
    # pair the k-th smallest input ciphertext with the k-th smallest output
    guess = np.empty(len(after), dtype=int)
    guess[np.argsort(np.array(after, dtype=object), kind="stable")] = np.argsort(
        np.array(before, dtype=object), kind="stable"
    )
    return guess


def _guess_nearest(before: Sequence[bytes], after: Sequence[bytes]) -> np.ndarray:
    # greedy matching on the number of equal bytes in the common prefix length
    width = min(len(before[0]), len(after[0]))
    a = np.frombuffer(b"".join(x[:width] for x in before), dtype=np.uint8).reshape(len(before), width)
    b = np.frombuffer(b"".join(x[:width] for x in after), dtype=np.uint8).reshape(len(after), width)
    score = (b[:, None, :] == a[None, :, :]).sum(axis=2)
    guess = np.full(len(after), -1)
    free = set(range(len(before)))
    for k in np.argsort(-score.max(axis=1), kind="stable"):
        j = max(free, key=lambda c: (score[k, c], -c))
        guess[k] = j
        free.remove(j)
    return guess


LINKING_STRATEGIES = {"sorted": _guess_sorted, "nearest": _guess_nearest}


def _final_position(perms: Sequence[np.ndarray], entry: int) -> int:
    position = np.arange(len(perms[0]))
    for p in perms:
        position = position[p]
    return int(np.flatnonzero(position == entry)[0])


def linking_attack(
    n: int,
    n_parties: int,
    trials: int,
    hidden_step: int = 0,
    seed: int = 0,
    pke_name: str = "x25519",
    strategies: Sequence[str] = ("sorted", "nearest"),
) -> dict[str, np.ndarray]:
    """Per strategy and trial: did the observer link initial entry 0 to its final position?

    The observer sees every published list and knows every mixer's
    permutation except ``hidden_step``, which it guesses from ciphertext
    bytes alone. Use the real PKE here: the simulation scheme lets public-key
    holders decrypt, which would make linking trivial.
    """
    pke = _pke(pke_name)
    split = np.array_split(np.arange(n), n_parties)
    hits = {s: np.zeros(trials, dtype=bool) for s in strategies}
    for t in range(trials):
        keypairs = party_keypairs(range(n_parties), derive_seed(seed, "link-keys", t), pke)
        tokens = {i: make_tokens(len(split[i]), named_rng(seed, "link-tokens", t, i)) for i in range(n_parties)}
        rngs = {i: named_rng(seed, "link-mix", t, i) for i in range(n_parties)}
        mix = run_mixnet(tokens, keypairs, rngs, pke)
        truth = _final_position(mix.permutations, 0)
        before, after = mix.lists[hidden_step].entries, mix.lists[hidden_step + 1].entries
        for s in strategies:
            guessed = list(mix.permutations)
            guessed[hidden_step] = LINKING_STRATEGIES[s](before, after)
            hits[s][t] = _final_position(guessed, 0) == truth
    return hits


def time_dca(n_clients: int, node_counts: Sequence[int], dim: int, repeats: int = 3, seed: int = 0) -> dict[int, float]:
    """Fastest wall-clock seconds for one DCA round per compute-node count.

    Node counts are interleaved within each repeat so background load hits
    all of them alike; the minimum over repeats is the least noisy estimate.
    """
    codec = FixedPointCodec()
    rng = np.random.default_rng(seed)
    payloads = {i: encode(rng.uniform(-1, 1, dim), codec) for i in range(n_clients)}
    sums = {M: SecureSum("dca", range(n_clients), codec, seed, compute_nodes=M) for M in node_counts}
    runs: dict[int, list[float]] = {M: [] for M in node_counts}
    for r in range(repeats):
        for M, ss in sums.items():
            t0 = time.perf_counter()
            ss(payloads, r)
            runs[M].append(time.perf_counter() - t0)
    return {M: min(v) for M, v in runs.items()}


def time_pairwise_masks(
    client_counts: Sequence[int], group_size: int | None, dim: int, repeats: int = 3, seed: int = 0
) -> dict[int, float]:
    """Fastest per-client mask-generation seconds for pairwise rounds of growing size.

    Client counts are interleaved within each repeat, as in :func:`time_dca`.
    """
    codec = FixedPointCodec()
    rng = np.random.default_rng(seed)
    setups = {}
    for N in client_counts:
        payloads = {i: encode(rng.uniform(-1, 1, dim), codec) for i in range(N)}
        setups[N] = (payloads, SecureSum("pairwise", range(N), codec, seed, group_size=group_size))
    runs: dict[int, list[float]] = {N: [] for N in client_counts}
    for r in range(repeats):
        for N, (payloads, ss) in setups.items():
            before = ss.transcript.timings.get("mask", 0.0)
            ss(payloads, r)
            runs[N].append((ss.transcript.timings["mask"] - before) / N)
    return {N: min(v) for N, v in runs.items()}


def share_marginals(y: FixedVector, M: int, trials: int, seed: int = 0) -> np.ndarray:
    """First share of ``trials`` independent DCA splittings of ``y`` (rows)."""
    rng = np.random.default_rng(seed)
    return np.stack([dca_make_shares(y, M, rng).shares[0].values for _ in range(trials)])


__all__ = [
    "BEHAVIORS",
    "ExperimentResult",
    "UnknownBehavior",
    "build_dataset",
    "build_model",
    "build_secure_sum",
    "generate_token_list",
    "inject_adversary",
    "LINKING_STRATEGIES",
    "linking_attack",
    "residual_noise_variance",
    "run_experiment",
    "share_marginals",
    "time_dca",
    "time_pairwise_masks",
]
