"""Generator/discriminator pairs and their training loops.

The generator maps Gaussian noise through leaky-ReLU dense layers to a tanh
output sized like the feature vector; the discriminator mirrors it down to a
single sigmoid unit (identity unit for the Wasserstein critic).  Real rows are
mapped {0,1} -> {-1,+1} before the discriminator sees them so both inputs
share the tanh range; generated rows are binarized at the tanh midpoint 0.

Training follows the 2:1 schedule: every iteration performs
d_steps_per_g_step discriminator updates on fresh minibatches, then one
generator update.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import PatientMatrix, binarize
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .rng import ROLE_GENERATE, ROLE_MODEL, derive_seed, stream

LOSS_KINDS = ("vanilla", "wgan_gp")

# Sigmoid outputs are clamped to this range before logs to keep losses finite.
_PROB_EPS = 1e-7

_GEN_SEED_TAG = 1
_DISC_SEED_TAG = 2


@dataclass(frozen=True)
class GanConfig:
    feature_dim: int
    noise_dim: int = 128
    g_hidden: tuple[int, ...] = (128, 256, 512)
    d_hidden: tuple[int, ...] = (512, 256, 128)
    learning_rate: float = 0.0002
    batch_size: int = 1500
    d_steps_per_g_step: int = 2
    loss_kind: str = "vanilla"
    gp_lambda: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "g_hidden", tuple(int(d) for d in self.g_hidden))
        object.__setattr__(self, "d_hidden", tuple(int(d) for d in self.d_hidden))
        dims = (self.feature_dim, self.noise_dim, self.batch_size,
                *self.g_hidden, *self.d_hidden)
        if any(d < 1 for d in dims):
            raise ConfigError("dimensions and batch size must be >= 1")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.learning_rate < 0.0 or self.gp_lambda < 0.0:
            raise ConfigError("learning_rate and gp_lambda must be >= 0")

    def canonical_text(self) -> str:
        fields = [
            ("feature_dim", self.feature_dim),
            ("noise_dim", self.noise_dim),
            ("g_hidden", ",".join(str(d) for d in self.g_hidden)),
            ("d_hidden", ",".join(str(d) for d in self.d_hidden)),
            ("learning_rate", repr(self.learning_rate)),
            ("batch_size", self.batch_size),
            ("d_steps_per_g_step", self.d_steps_per_g_step),
            ("loss_kind", self.loss_kind),
            ("gp_lambda", repr(self.gp_lambda)),
            ("seed", self.seed),
        ]
        return "\n".join(f"{k}={v}" for k, v in fields)

    def digest(self) -> bytes:
        """32-byte hash used to verify config compatibility across nodes."""
        return hashlib.sha256(self.canonical_text().encode()).digest()


@dataclass
class StepRecord:
    step: int
    kind: str  # "d" or "g"
    loss: float
    gp: float | None
    elapsed_ms: float


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    round_index: int | None = None
    node_index: int | None = None

    @property
    def n_d_updates(self) -> int:
        return sum(1 for r in self.records if r.kind == "d")

    @property
    def n_g_updates(self) -> int:
        return sum(1 for r in self.records if r.kind == "g")

    def losses(self, kind: str) -> list[float]:
        return [r.loss for r in self.records if r.kind == kind]

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,d_loss,g_loss,gp,elapsed_ms\n")
            for r in self.records:
                d = f"{r.loss:.10g}" if r.kind == "d" else ""
                g = f"{r.loss:.10g}" if r.kind == "g" else ""
                gp = f"{r.gp:.10g}" if r.gp is not None else ""
                fh.write(f"{r.step},{d},{g},{gp},{r.elapsed_ms:.3f}\n")


@dataclass
class GanModel:
    generator: nn.Network
    discriminator: nn.Network
    g_state: nn.AdamState
    d_state: nn.AdamState
    config: GanConfig
    rng: np.random.Generator
    update_count: int = 0


def build_gan(config: GanConfig, stream_index: int = 0) -> GanModel:
    """Build generator and discriminator from the config, deterministically.

    stream_index selects the model's noise/shuffle stream; federation gives
    each (round, node) its own index so local runs are reproducible in any
    process placement.
    """
    g_dims = (config.noise_dim, *config.g_hidden, config.feature_dim)
    d_dims = (config.feature_dim, *config.d_hidden, 1)
    d_head = "identity" if config.loss_kind == "wgan_gp" else "sigmoid"
    g_specs = [
        nn.LayerSpec(g_dims[i], g_dims[i + 1],
                     "tanh" if i == len(g_dims) - 2 else "leaky_relu")
        for i in range(len(g_dims) - 1)
    ]
    d_specs = [
        nn.LayerSpec(d_dims[i], d_dims[i + 1],
                     d_head if i == len(d_dims) - 2 else "leaky_relu")
        for i in range(len(d_dims) - 1)
    ]
    gen = nn.init_network(g_specs, derive_seed(config.seed, _GEN_SEED_TAG))
    disc = nn.init_network(d_specs, derive_seed(config.seed, _DISC_SEED_TAG))
    return GanModel(
        generator=gen,
        discriminator=disc,
        g_state=nn.AdamState.for_network(gen, config.learning_rate),
        d_state=nn.AdamState.for_network(disc, config.learning_rate),
        config=config,
        rng=stream(config.seed, ROLE_MODEL, stream_index),
    )


def param_count(net: nn.Network) -> int:
    return sum(p.weights.size + p.biases.size for p in net.params)


def weight_arrays(model: GanModel) -> list[np.ndarray]:
    """All trainable arrays, generator layers first, weights before biases."""
    arrays = []
    for net in (model.generator, model.discriminator):
        for p in net.params:
            arrays.append(p.weights)
            arrays.append(p.biases)
    return arrays


def load_weight_arrays(model: GanModel, arrays) -> None:
    """Copy a weight_arrays()-ordered list back into the model."""
    targets = weight_arrays(model)
    if len(arrays) != len(targets):
        raise ShapeError(
            f"expected {len(targets)} weight arrays, got {len(arrays)}"
        )
    for target, src in zip(targets, arrays):
        src = np.asarray(src, dtype=np.float64)
        if src.shape != target.shape:
            raise ShapeError(
                f"weight array shape {src.shape} != expected {target.shape}"
            )
        np.copyto(target, src)


def _fresh_noise(model: GanModel, n: int) -> np.ndarray:
    return model.rng.standard_normal((n, model.config.noise_dim))


def d_train_step(model: GanModel, real_batch: np.ndarray) -> float:
    """One discriminator/critic update on a +-1-encoded real minibatch."""
    real_batch = np.asarray(real_batch, dtype=np.float64)
    if real_batch.ndim != 2 or real_batch.shape[1] != model.config.feature_dim:
        raise ShapeError(
            f"real batch shape {real_batch.shape} incompatible with feature "
            f"dim {model.config.feature_dim}"
        )
    if model.config.loss_kind == "wgan_gp":
        loss, _ = _critic_step(model, real_batch)
        return loss
    b = real_batch.shape[0]
    fake, _ = nn.forward(model.generator, _fresh_noise(model, b))
    both = np.vstack([real_batch, fake])
    out, cache = nn.forward(model.discriminator, both)
    o_real = np.clip(out[:b], _PROB_EPS, 1.0 - _PROB_EPS)
    o_fake = np.clip(out[b:], _PROB_EPS, 1.0 - _PROB_EPS)
    loss = float(-np.mean(np.log(o_real)) - np.mean(np.log(1.0 - o_fake)))
    _check_loss(model, loss, "d")
    gout = np.vstack([-1.0 / (b * o_real), 1.0 / (b * (1.0 - o_fake))])
    grads, _ = nn.backward(model.discriminator, cache, gout)
    nn.adam_step(model.discriminator.params, grads, model.d_state)
    model.update_count += 1
    return loss


def _critic_step(model: GanModel, real_batch: np.ndarray):
    """Wasserstein critic update with gradient penalty; returns (loss, gp)."""
    b = real_batch.shape[0]
    fake, _ = nn.forward(model.generator, _fresh_noise(model, b))
    both = np.vstack([real_batch, fake])
    out, cache = nn.forward(model.discriminator, both)
    base = float(np.mean(out[b:]) - np.mean(out[:b]))
    gout = np.vstack([np.full((b, 1), -1.0 / b), np.full((b, 1), 1.0 / b)])
    grads, _ = nn.backward(model.discriminator, cache, gout)
    penalty, pen_grads = gradient_penalty(
        model.discriminator, real_batch, fake, model.config.gp_lambda, model.rng
    )
    loss = base + penalty
    _check_loss(model, loss, "critic")
    total = [(gw + pw, gb + pb) for (gw, gb), (pw, pb) in zip(grads, pen_grads)]
    nn.adam_step(model.discriminator.params, total, model.d_state)
    model.update_count += 1
    return loss, penalty


def g_train_step(model: GanModel, batch_size: int | None = None) -> float:
    """One generator update; the discriminator is left untouched."""
    n = model.config.batch_size if batch_size is None else batch_size
    noise = _fresh_noise(model, n)
    fake, g_cache = nn.forward(model.generator, noise)
    out, d_cache = nn.forward(model.discriminator, fake)
    if model.config.loss_kind == "wgan_gp":
        loss = float(-np.mean(out))
        gout = np.full_like(out, -1.0 / n)
    else:
        o = np.clip(out, _PROB_EPS, 1.0 - _PROB_EPS)
        loss = float(-np.mean(np.log(o)))
        gout = -1.0 / (n * o)
    _check_loss(model, loss, "g")
    into_fake = nn.backward_input_only(model.discriminator, d_cache, gout)
    grads, _ = nn.backward(model.generator, g_cache, into_fake)
    nn.adam_step(model.generator.params, grads, model.g_state)
    model.update_count += 1
    return loss


def _check_loss(model: GanModel, loss: float, kind: str) -> None:
    if not np.isfinite(loss):
        raise NumericError(f"non-finite {kind} loss at step {model.update_count}")


class _Batcher:
    """Without-replacement minibatches; reshuffles when the epoch runs dry."""

    def __init__(self, matrix: PatientMatrix, batch_size: int,
                 rng: np.random.Generator):
        self.bits = matrix.bits
        self.batch_size = batch_size
        self.rng = rng
        self.order = rng.permutation(matrix.rows)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.order.size:
            self.order = self.rng.permutation(self.order.size)
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return self.bits[idx].astype(np.float64) * 2.0 - 1.0


def train(model: GanModel, matrix: PatientMatrix, epochs: int) -> TrainLog:
    """Run the scheduled loop: per epoch, d_steps_per_g_step D updates on
    fresh real minibatches, then one G update.  Returns the step log."""
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if matrix.rows < 1:
        raise ConfigError("training data must have at least one row")
    if matrix.cols != model.config.feature_dim:
        raise ShapeError(
            f"data has {matrix.cols} features, model expects "
            f"{model.config.feature_dim}"
        )
    log = TrainLog()
    batch = model.config.batch_size
    if batch > matrix.rows:
        batch = matrix.rows
        log.warnings.append(
            f"batch_size {model.config.batch_size} clamped to dataset size "
            f"{matrix.rows}"
        )
    if epochs == 0:
        return log
    wgan = model.config.loss_kind == "wgan_gp"
    batcher = _Batcher(matrix, batch, model.rng)
    start = time.perf_counter()
    for _ in range(epochs):
        for _ in range(model.config.d_steps_per_g_step):
            real = batcher.next()
            if wgan:
                loss, gp = _critic_step(model, real)
            else:
                loss, gp = d_train_step(model, real), None
            log.records.append(StepRecord(
                model.update_count, "d", loss, gp,
                (time.perf_counter() - start) * 1e3))
        loss = g_train_step(model, batch_size=batch)
        log.records.append(StepRecord(
            model.update_count, "g", loss, None,
            (time.perf_counter() - start) * 1e3))
    return log


def wgan_train(model: GanModel, matrix: PatientMatrix, epochs: int) -> TrainLog:
    """train() restricted to models built with the wgan_gp loss."""
    if model.config.loss_kind != "wgan_gp":
        raise ConfigError("wgan_train requires loss_kind='wgan_gp'")
    return train(model, matrix, epochs)


def generate(model: GanModel, n: int, seed: int) -> PatientMatrix:
    """Sample n synthetic patients; tanh outputs binarized at threshold 0."""
    if n < 0:
        raise ConfigError("sample count must be >= 0")
    rng = stream(seed, ROLE_GENERATE)
    noise = rng.standard_normal((n, model.config.noise_dim))
    out, _ = nn.forward(model.generator, noise)
    return binarize(out)


def gradient_penalty(critic: nn.Network, real_batch, fake_batch,
                     gp_lambda: float, rng: np.random.Generator):
    """Penalty lambda * mean((||d C/d xhat||_2 - 1)^2) on random interpolates.

    xhat mixes each real row with its fake counterpart by a per-row uniform
    weight.  Returns (penalty value, per-layer parameter gradients of the
    penalty) so the caller can fold it into the critic update.
    """
    real_batch = np.asarray(real_batch, dtype=np.float64)
    fake_batch = np.asarray(fake_batch, dtype=np.float64)
    if real_batch.shape != fake_batch.shape:
        raise ShapeError("real and fake batches must share a shape")
    if real_batch.shape[0] == 0:
        raise UsageError("gradient penalty needs at least one row")
    b = real_batch.shape[0]
    u = rng.random((b, 1))
    xhat = u * real_batch + (1.0 - u) * fake_batch
    _, gin = nn.input_gradients(critic, xhat)
    norms = np.sqrt(np.sum(gin * gin, axis=1))
    penalty = float(gp_lambda * np.mean((norms - 1.0) ** 2))
    safe = np.where(norms > 0.0, norms, 1.0)
    coeff = np.where(norms > 0.0,
                     2.0 * gp_lambda * (norms - 1.0) / (safe * b), 0.0)
    tangents = coeff[:, None] * gin
    pen_grads = nn.double_backward(critic, xhat, tangents)
    return penalty, pen_grads
