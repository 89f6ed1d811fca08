"""Models and the distributed DP-SGD loop.

Each step every party sums the clipped per-example gradients of its part of
the batch, the noisy sum is aggregated under the configured regime, and the
master applies ``theta -= lr * noisy_sum / b``:

``nonprivate``  plain gradients, no clipping or noise
``trusted``     clipped sums added in the clear, full noise added once centrally
``dp_smc``      each party adds its noise share and the sum goes through secure summation
``ldp``         each party adds the full noise itself, plain aggregation
"""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dpnoise import MechanismParams, NoiseMode, UnachievableBudget, account_privacy, plan_noise
from .fixedpoint import FixedPointCodec, FixedVector, decode, encode
from .mixnet import TokenList
from .prg import derive_seed, named_rng
from .projection import ProjectionSpec, generate_projection, project_and_sum, reconstruct
from .sampling import BatchSpec, Swor, local_batch, select_batch_poisson, select_batch_swor

log = logging.getLogger(__name__)

REGIMES = ("nonprivate", "trusted", "dp_smc", "ldp")


class NonFiniteGradient(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrozenFeatures:
    """Fixed random ReLU feature map, standing in for pretrained layers."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def random(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "FrozenFeatures":
        return cls(rng.normal(0, 1 / math.sqrt(n_in), (n_in, n_out)), rng.normal(0, 0.1, n_out))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.maximum(X @ self.weights + self.bias, 0.0)

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Model:
    """Softmax regression (``hidden=()``) or a tanh MLP over a flat parameter vector."""

    n_features: int
    n_classes: int
    hidden: tuple[int, ...] = ()
    theta: np.ndarray | None = None
    frozen_features: FrozenFeatures | None = None

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.theta is None:
            self.theta = np.zeros(self.dim)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.dim,):
            raise ValueError(f"theta has shape {self.theta.shape}, model needs ({self.dim},)")

    @property
    def kind(self) -> str:
        return "mlp" if self.hidden else "logistic_regression"

    @property
    def input_dim(self) -> int:
        return self.frozen_features.n_out if self.frozen_features is not None else self.n_features

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.n_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def dim(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)

    def init_random(self, rng: np.random.Generator) -> "Model":
        parts = []
        for i, o in self.layer_sizes:
            lim = math.sqrt(6 / (i + o))
            parts += [rng.uniform(-lim, lim, i * o), np.zeros(o)]
        self.theta = np.concatenate(parts)
        return self

    def with_theta(self, theta: np.ndarray) -> "Model":
        return dataclasses.replace(self, theta=np.array(theta, dtype=np.float64))

    def layers(self, theta: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for i, o in self.layer_sizes:
            W = theta[pos : pos + i * o].reshape(i, o)
            pos += i * o
            out.append((W, theta[pos : pos + o]))
            pos += o
        return out

    def _inputs(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.frozen_features(X) if self.frozen_features is not None else X

    def _forward(self, X: np.ndarray, theta: np.ndarray | None = None):
        acts = [self._inputs(X)]
        layers = self.layers(theta)
        for W, b in layers[:-1]:
            acts.append(np.tanh(acts[-1] @ W + b))
        W, b = layers[-1]
        return acts, acts[-1] @ W + b

    def logits(self, X: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        return self._forward(X, theta)[1]

    def example_losses(self, X: np.ndarray, y: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        z = self.logits(X, theta)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(y)), y]

    def loss(self, X: np.ndarray, y: np.ndarray, theta: np.ndarray | None = None) -> float:
        return float(self.example_losses(X, y, theta).mean())

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.logits(X).argmax(axis=1)

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(X) == y).mean())

    def per_example_grads(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Unclipped gradients of each example's loss, shape ``(B, dim)``."""
        acts, z = self._forward(X)
        B = acts[0].shape[0]
        delta = _softmax(z)
        delta[np.arange(B), y] -= 1.0
        layers = self.layers()
        grads = []
        for li in range(len(layers) - 1, -1, -1):
            a = acts[li]
            grads.append(delta)  # bias
            grads.append((a[:, :, None] * delta[:, None, :]).reshape(B, -1))
            if li > 0:
                delta = (delta @ layers[li][0].T) * (1.0 - a**2)
        G = np.concatenate(grads[::-1], axis=1)
        if not np.all(np.isfinite(G)):
            raise NonFiniteGradient("per-example gradient contains non-finite values")
        return G


def clip_rows(G: np.ndarray, bound: float) -> np.ndarray:
    """Scale rows with norm above ``bound`` down to exactly ``bound``."""
    norms = np.linalg.norm(G, axis=1, keepdims=True)
    factor = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
    return G * factor


def per_example_clipped_grads(model: Model, X: np.ndarray, y: np.ndarray, bound: float) -> np.ndarray:
    if len(y) == 0:
        raise ValueError("empty batch; noise-only participation is handled by the caller")
    G = clip_rows(model.per_example_grads(X, y), bound)
    assert np.all(np.linalg.norm(G, axis=1) <= bound * (1 + 1e-9)), "clipping invariant violated"
    return G


def dp_sgd_step(model: Model, noisy_sum: np.ndarray, batch_size: float, lr: float) -> Model:
    if batch_size <= 0:
        return model.with_theta(model.theta)
    return model.with_theta(model.theta - lr * np.asarray(noisy_sum) / batch_size)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    partition: dict[int, np.ndarray]
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    def __post_init__(self):
        idx = np.concatenate([np.asarray(v) for v in self.partition.values()]) if self.partition else np.array([])
        if len(idx) != len(self.y) or len(np.unique(idx)) != len(self.y):
            raise ValueError("partition must be disjoint and cover every example")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return int(max(self.y.max(), -1 if self.y_test is None else self.y_test.max())) + 1

    def party_ids(self) -> list[int]:
        return sorted(self.partition)

    def local(self, party: int) -> tuple[np.ndarray, np.ndarray]:
        ix = self.partition[party]
        return self.X[ix], self.y[ix]


def uniform_partition(n: int, n_parties: int) -> dict[int, np.ndarray]:
    return {i: chunk for i, chunk in enumerate(np.array_split(np.arange(n), n_parties))}


def range_partition(ranges: Mapping[int, Sequence[int]]) -> dict[int, np.ndarray]:
    return {int(p): np.arange(lo, hi) for p, (lo, hi) in ranges.items()}


def gaussian_mixture(
    n: int,
    n_features: int,
    n_classes: int,
    n_parties: int,
    rng: np.random.Generator,
    separation: float = 3.0,
    n_test: int = 1000,
) -> Dataset:
    """Isotropic Gaussian classes with means at distance ~``separation`` apart."""
    means = rng.normal(0, 1, (n_classes, n_features))
    means *= separation / np.sqrt(2 * n_features)
    means -= means.mean(axis=0)

    def draw(m):
        y = rng.integers(0, n_classes, m)
        return means[y] + rng.normal(0, 1, (m, n_features)), y

    X, y = draw(n)
    Xt, yt = draw(n_test)
    return Dataset(X, y, uniform_partition(n, n_parties), Xt, yt)


def linearly_separable(n: int, n_features: int, n_parties: int, rng: np.random.Generator, margin: float = 0.5) -> Dataset:
    w = rng.normal(size=n_features)
    w /= np.linalg.norm(w)
    X = np.empty((0, n_features))
    while len(X) < n:
        cand = rng.normal(size=(2 * n, n_features))
        X = np.vstack([X, cand[np.abs(cand @ w) > margin]])
    X = X[:n]
    y = (X @ w > 0).astype(int)
    return Dataset(X, y, uniform_partition(n, n_parties), X.copy(), y.copy())


def load_csv(path: str | Path, n_parties: int, label_column: int = -1) -> Dataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    y = data[:, label_column].astype(int)
    X = np.delete(data, label_column % data.shape[1], axis=1)
    return Dataset(X, y, uniform_partition(len(y), n_parties))


_IMAGE_HEADER = struct.Struct("<4sIIII")


def save_images(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """Raw image format: ``b"XIMG"``, count, height, width, channels (u32 LE), labels (u8), pixels (u8)."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 3:
        images = images[..., None]
    count, h, w, c = images.shape
    Path(path).write_bytes(
        _IMAGE_HEADER.pack(b"XIMG", count, h, w, c) + np.asarray(labels, np.uint8).tobytes() + images.tobytes()
    )


def load_images(path: str | Path, n_parties: int) -> Dataset:
    data = Path(path).read_bytes()
    magic, count, h, w, c = _IMAGE_HEADER.unpack_from(data, 0)
    if magic != b"XIMG":
        raise ValueError("not an XIMG file")
    off = _IMAGE_HEADER.size
    labels = np.frombuffer(data, np.uint8, count, off).astype(int)
    pixels = np.frombuffer(data, np.uint8, count * h * w * c, off + count)
    X = pixels.reshape(count, h * w * c).astype(np.float64) / 255.0
    return Dataset(X, labels, uniform_partition(count, n_parties))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    regime: str = "dp_smc"
    steps: int = 100
    lr: float = 0.1
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5
    sampling: str = "swor"
    batch_size: int = 100
    gamma: float | None = None
    noise_mode: str = "tee"
    colluders: int = 0
    neighbour: str = "remove_add"
    projection_k: int | None = None
    delta_prime: float = 1e-6
    resample_projection: bool = True
    seed: int = 0
    eval_every: int = 10
    record_theta: bool = False
    delta_slack: float = 0.0

    def validate(self, n: int, n_parties: int) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.steps < 0 or self.lr <= 0:
            raise ConfigError("steps must be >= 0 and lr > 0")
        if self.sampling == "swor":
            if not 0 <= self.batch_size <= n:
                raise ConfigError(f"batch_size {self.batch_size} outside [0, {n}]")
        elif self.sampling == "poisson":
            if self.gamma is None or not 0 < self.gamma < 1:
                raise ConfigError("poisson sampling needs gamma in (0, 1)")
        else:
            raise ConfigError(f"unknown sampling scheme {self.sampling!r}")
        if self.neighbour not in ("remove_add", "substitution"):
            raise ConfigError(f"unknown neighbour relation {self.neighbour!r}")
        if self.regime != "nonprivate":
            if self.clip_norm <= 0 or self.noise_multiplier <= 0:
                raise ConfigError("private regimes need positive clip_norm and noise_multiplier")
            NoiseMode(self.noise_mode)
            if self.noise_mode == "collusion_robust" and n_parties - self.colluders - 1 < 1:
                raise ConfigError("collusion_robust noise needs N - T - 1 >= 1")
        if self.projection_k is not None and self.regime == "nonprivate":
            raise ConfigError("projection is only defined for private regimes")

    @property
    def grad_bound(self) -> float:
        """Per-example clip bound; half the sensitivity under substitution."""
        return self.clip_norm / 2 if self.neighbour == "substitution" else self.clip_norm

    def expected_batch(self, n: int) -> float:
        return float(self.batch_size) if self.sampling == "swor" else self.gamma * n


@dataclass
class TrainReport:
    regime: str
    steps: int
    losses: list[tuple[int, float]] = field(default_factory=list)
    accuracies: list[tuple[int, float]] = field(default_factory=list)
    test_accuracy: float | None = None
    epsilon: float = 0.0
    delta: float = 0.0
    noise: dict | None = None
    projection: dict | None = None
    timings: dict[str, float] = field(default_factory=dict)
    uploaded_values: int = 0
    uploaded_bytes: int = 0
    batch_sizes: list[int] = field(default_factory=list)
    theta_history: list[np.ndarray] = field(default_factory=list)
    final_theta: np.ndarray | None = None
    aborted: str | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("theta_history")
        d["final_theta"] = None if self.final_theta is None else [float(v) for v in self.final_theta]
        return d


@dataclass
class TokenAssignment:
    """Shared plaintext token list plus each party's own tokens, aligned with its local examples."""

    token_list: TokenList
    own: dict[int, list[bytes]]


SecureSumFn = Callable[[Mapping[int, FixedVector], int], FixedVector]


class _Clock:
    def __init__(self):
        self.spans: dict[str, float] = {}

    def add(self, phase: str, t0: float) -> float:
        t1 = time.perf_counter()
        self.spans[phase] = self.spans.get(phase, 0.0) + t1 - t0
        return t1


def _evaluate(model: Model, data: Dataset, report: TrainReport, step: int) -> None:
    report.losses.append((step, model.loss(data.X, data.y)))
    report.accuracies.append((step, model.accuracy(data.X, data.y)))


def run_training(
    config: TrainConfig,
    data: Dataset,
    model: Model,
    secure_sum: SecureSumFn | None = None,
    codec: FixedPointCodec | None = None,
    tokens: TokenAssignment | None = None,
    accountant=None,
) -> TrainReport:
    """Run ``config.steps`` DP-SGD steps under ``config.regime``.

    ``secure_sum`` is required for ``dp_smc`` and optional for ``nonprivate``;
    it receives the encoded per-party payloads and returns their modular sum. SWOR batches are drawn from
    ``tokens`` when given, otherwise from a shared seeded shuffle of global
    example indices, which selects the same batches a token list would.
    """
    parties = data.party_ids()
    N = len(parties)
    config.validate(data.n, N)
    if config.regime == "dp_smc" and secure_sum is None:
        raise ConfigError("dp_smc needs a secure_sum")
    codec = codec or FixedPointCodec()
    private = config.regime != "nonprivate"
    report = TrainReport(config.regime, config.steps)
    clock = _Clock()

    batch_seed = derive_seed(config.seed, "batch")
    swor_spec = BatchSpec(Swor(config.batch_size), batch_seed) if config.sampling == "swor" else None
    batch_rngs = {i: named_rng(config.seed, "batch", i) for i in parties}
    noise_rngs = {i: named_rng(config.seed, "noise", i) for i in parties}
    if tokens is None and swor_spec is not None:
        # stand-in list: token of global example j is its index; same shuffle as a real list
        ids = [j.to_bytes(16, "little") for j in range(data.n)]
        tokens = TokenAssignment(
            TokenList(tuple(ids), 0, data.n),
            {i: [ids[j] for j in data.partition[i]] for i in parties},
        )

    proj_spec = None
    sensitivity = config.clip_norm
    if config.projection_k is not None:
        proj_spec = ProjectionSpec(
            model.dim, config.projection_k, derive_seed(config.seed, "projection"), config.clip_norm, config.delta_prime
        )
        sensitivity = proj_spec.proj_sensitivity
        report.projection = proj_spec.to_dict()
    sigma = config.noise_multiplier * sensitivity
    plan = None
    if private:
        mode = NoiseMode(config.noise_mode) if config.regime == "dp_smc" else NoiseMode.TEE
        plan = plan_noise(sigma, N, config.colluders if mode is NoiseMode.COLLUSION_ROBUST else 0, mode)
        tee_plan = plan_noise(sigma, N, 0, NoiseMode.TEE)
        report.noise = {**plan.to_dict(), "regime_total_std": _regime_std(config.regime, plan, N)}
    upload_dim = config.projection_k or model.dim
    b_norm = config.expected_batch(data.n)

    if config.record_theta:
        report.theta_history.append(model.theta.copy())
    _evaluate(model, data, report, 0)

    for step in range(config.steps):
        t0 = time.perf_counter()
        P = None
        if proj_spec is not None:
            P = generate_projection(proj_spec, step if config.resample_projection else 0)
            t0 = clock.add("projection", t0)
        if swor_spec is not None:
            batch = select_batch_swor(tokens.token_list, swor_spec.for_round(step))
            local_ix = {i: local_batch(batch, tokens.own[i]) for i in parties}
        else:
            local_ix = {i: select_batch_poisson(len(data.partition[i]), config.gamma, batch_rngs[i]) for i in parties}
        report.batch_sizes.append(sum(len(v) for v in local_ix.values()))
        t0 = clock.add("batch", t0)

        sums = {}
        for i in parties:
            ix = np.asarray(local_ix[i], dtype=int)
            if len(ix) == 0:
                s = np.zeros(model.dim)
            else:
                Xi, yi = data.local(i)
                if private:
                    G = per_example_clipped_grads(model, Xi[ix], yi[ix], config.grad_bound)
                else:
                    G = model.per_example_grads(Xi[ix], yi[ix])
                s = G.sum(axis=0)
            if P is not None:
                s = project_and_sum(s[None, :], P)
            sums[i] = s
        t0 = clock.add("gradient", t0)

        if config.regime == "nonprivate" and secure_sum is not None:
            # secure aggregation without DP; raw sums must fit the codec
            total = decode(secure_sum({i: encode(sums[i], codec) for i in parties}, step))
        elif config.regime == "nonprivate":
            total = np.sum([sums[i] for i in parties], axis=0)
        elif config.regime == "trusted":
            # the central noise is the sum of the per-party streams: one N(0, sigma^2) draw
            noise = np.sum([rng.normal(0.0, tee_plan.per_party_sigma, upload_dim) for rng in noise_rngs.values()], axis=0)
            total = np.sum([sums[i] for i in parties], axis=0) + noise
        elif config.regime == "ldp":
            total = np.sum([sums[i] + noise_rngs[i].normal(0.0, sigma, upload_dim) for i in parties], axis=0)
        else:
            payloads = {}
            for i in parties:
                noisy = sums[i] + noise_rngs[i].normal(0.0, plan.per_party_sigma, upload_dim)
                payloads[i] = encode(noisy, codec, clip=True)
            t0 = clock.add("encode", t0)
            total = decode(secure_sum(payloads, step))
        t0 = clock.add("aggregate", t0)
        report.uploaded_values += N * upload_dim

        if P is not None:
            total = reconstruct(total, P)
            t0 = clock.add("projection", t0)
        model = dp_sgd_step(model, total, b_norm, config.lr)
        if config.record_theta:
            report.theta_history.append(model.theta.copy())
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            _evaluate(model, data, report, step + 1)
        clock.add("update", t0)

    if private and config.steps > 0:
        params = MechanismParams(
            config.clip_norm, config.noise_multiplier, config.delta, config.steps, b_norm / data.n
        )
        try:
            report.epsilon = account_privacy(params, accountant)
        except UnachievableBudget as exc:
            log.warning("privacy budget unbounded: %s", exc)
            report.epsilon = math.inf
        report.delta = config.delta + (config.delta_prime if proj_spec is not None else 0.0) + config.delta_slack
    if data.X_test is not None:
        report.test_accuracy = model.accuracy(data.X_test, data.y_test)
    report.final_theta = model.theta
    report.timings = clock.spans
    report.uploaded_bytes = report.uploaded_values * codec.word_bytes
    return report


def _regime_std(regime: str, plan, N: int) -> float:
    if regime == "ldp":
        return math.sqrt(N) * plan.total_sigma
    if regime == "dp_smc":
        return math.sqrt(plan.aggregate_variance)
    return plan.total_sigma
