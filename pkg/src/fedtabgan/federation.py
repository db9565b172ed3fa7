"""Sequential weight-hand-off federation over partitioned patient data.

The protocol is cyclic hand-off, not weight averaging: within a round, each
node in turn copies the global weights into a fresh local model, trains on
its own silo for its epoch budget, and writes its weights back as the new
global.  Node i therefore continues exactly where node i-1 stopped, and the
final global equals the last node's weights.

Weights cross the global-to-local edge in 32-bit float form, matching the
wire format used when nodes run in separate processes, so an in-process round
and a networked round produce bit-identical results.  The local-to-global
install keeps full precision, which makes the single-node, single-round case
coincide bitwise with plain training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PatientMatrix
from .errors import ConfigError, ParseError, ShapeError
from .gan import GanConfig, GanModel, TrainLog, build_gan, load_weight_arrays, train, weight_arrays
from .rng import ROLE_PARTITION, model_stream_index, stream


@dataclass(frozen=True)
class FederationPlan:
    silo_count: int
    silo_row_ranges: tuple[tuple[int, int], ...]
    epochs_per_node: tuple[int, ...]
    rounds: int
    shuffle_seed: int

    def __post_init__(self):
        object.__setattr__(self, "silo_row_ranges",
                           tuple((int(a), int(b)) for a, b in self.silo_row_ranges))
        object.__setattr__(self, "epochs_per_node",
                           tuple(int(e) for e in self.epochs_per_node))
        if self.silo_count < 1 or self.rounds < 1:
            raise ConfigError("silo_count and rounds must be >= 1")
        if len(self.silo_row_ranges) != self.silo_count:
            raise ConfigError("need one row range per silo")
        if len(self.epochs_per_node) != self.silo_count:
            raise ConfigError("need one epoch budget per silo")
        if any(e < 0 for e in self.epochs_per_node):
            raise ConfigError("epoch budgets cannot be negative")
        spans = sorted(self.silo_row_ranges)
        for start, end in spans:
            if not (0 <= start < end):
                raise ConfigError(f"bad row range ({start}, {end})")
        for (_, prev_end), (start, _) in zip(spans, spans[1:]):
            if start < prev_end:
                raise ConfigError("silo row ranges overlap")

    def total_epochs(self) -> int:
        return self.rounds * sum(self.epochs_per_node)

    def to_text(self) -> str:
        ranges = ",".join(f"{a}:{b}" for a, b in self.silo_row_ranges)
        epochs = ",".join(str(e) for e in self.epochs_per_node)
        return (
            f"silo_count={self.silo_count}\n"
            f"rounds={self.rounds}\n"
            f"shuffle_seed={self.shuffle_seed}\n"
            f"epochs_per_node={epochs}\n"
            f"silo_row_ranges={ranges}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "FederationPlan":
        fields = {}
        for i, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"plan line {i}: expected key=value, got {raw!r}")
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        required = ("silo_count", "rounds", "shuffle_seed",
                    "epochs_per_node", "silo_row_ranges")
        missing = [k for k in required if k not in fields]
        if missing:
            raise ParseError(f"plan missing keys: {', '.join(missing)}")
        try:
            ranges = tuple(
                (int(part.split(":")[0]), int(part.split(":")[1]))
                for part in fields["silo_row_ranges"].split(",")
            )
            return cls(
                silo_count=int(fields["silo_count"]),
                rounds=int(fields["rounds"]),
                shuffle_seed=int(fields["shuffle_seed"]),
                epochs_per_node=tuple(
                    int(e) for e in fields["epochs_per_node"].split(",")),
                silo_row_ranges=ranges,
            )
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed plan value: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "FederationPlan":
        with open(path, "r") as fh:
            return cls.from_text(fh.read())


def epoch_budget(total_epochs: int, k: int) -> list[int]:
    """Split a total epoch count over k nodes: floor each, remainder to the
    first total mod k nodes.  Sums exactly to the total."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if total_epochs < k:
        raise ConfigError(f"cannot split {total_epochs} epochs over {k} nodes")
    base, extra = divmod(total_epochs, k)
    return [base + 1 if i < extra else base for i in range(k)]


def partition(data: PatientMatrix, k: int, seed: int,
              remainder_to_last: bool = False):
    """Shuffle rows by seed and split into k equal silos.

    Returns (silos, dropped_count).  The n mod k leftover rows are dropped
    unless remainder_to_last is set, in which case the last silo absorbs
    them.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if data.rows < k:
        raise ConfigError(f"cannot split {data.rows} rows into {k} silos")
    order = stream(seed, ROLE_PARTITION).permutation(data.rows)
    per = data.rows // k
    dropped = data.rows - per * k
    silos = []
    for i in range(k):
        end = data.rows if (remainder_to_last and i == k - 1) else (i + 1) * per
        silos.append(data.take_rows(order[i * per:end]))
    if remainder_to_last:
        dropped = 0
    return silos, dropped


def make_plan(n_rows: int, k: int, total_epochs: int, rounds: int = 1,
              shuffle_seed: int = 0,
              remainder_to_last: bool = False) -> FederationPlan:
    """Build the explicit schedule for a federation run over n_rows."""
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if total_epochs % rounds != 0:
        raise ConfigError(
            f"total_epochs {total_epochs} must divide evenly over "
            f"{rounds} rounds for a fixed plan"
        )
    if n_rows < k:
        raise ConfigError(f"cannot split {n_rows} rows into {k} silos")
    per = n_rows // k
    ranges = []
    for i in range(k):
        end = n_rows if (remainder_to_last and i == k - 1) else (i + 1) * per
        ranges.append((i * per, end))
    return FederationPlan(
        silo_count=k,
        silo_row_ranges=tuple(ranges),
        epochs_per_node=tuple(epoch_budget(total_epochs // rounds, k)),
        rounds=rounds,
        shuffle_seed=shuffle_seed,
    )


def plan_silos(data: PatientMatrix, plan: FederationPlan) -> list[PatientMatrix]:
    """Materialize the plan's silos from the full dataset."""
    top = max(end for _, end in plan.silo_row_ranges)
    if top > data.rows:
        raise ConfigError(
            f"plan expects at least {top} rows, data has {data.rows}"
        )
    order = stream(plan.shuffle_seed, ROLE_PARTITION).permutation(data.rows)
    return [data.take_rows(order[a:b]) for a, b in plan.silo_row_ranges]


def round_trip_f32(arrays) -> list[np.ndarray]:
    """Arrays as they survive the 32-bit hand-off representation."""
    return [np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)
            for a in arrays]


def local_model(config: GanConfig, round_index: int, node_index: int,
                global_arrays) -> GanModel:
    """Fresh per-node model seeded for (round, node), loaded with the global
    weights as they cross the 32-bit hand-off edge."""
    model = build_gan(config, stream_index=model_stream_index(round_index,
                                                              node_index))
    load_weight_arrays(model, round_trip_f32(global_arrays))
    return model


def run_round(global_model: GanModel, silos, budgets,
              round_index: int = 0):
    """One full hand-off cycle over the silos.  Mutates and returns the
    global model, plus one TrainLog per node."""
    silos = list(silos)
    budgets = list(budgets)
    if not silos:
        raise ConfigError("need at least one silo")
    if len(budgets) != len(silos):
        raise ConfigError("budgets must align with silos")
    feature_dim = global_model.config.feature_dim
    for silo in silos:
        if silo.cols != feature_dim:
            raise ConfigError(
                f"silo has {silo.cols} features, model expects {feature_dim}"
            )
    logs = []
    for node, (silo, budget) in enumerate(zip(silos, budgets)):
        local = local_model(global_model.config, round_index, node,
                            weight_arrays(global_model))
        log = train(local, silo, budget)
        log.round_index = round_index
        log.node_index = node
        logs.append(log)
        load_weight_arrays(global_model,
                           [a.copy() for a in weight_arrays(local)])
    return global_model, logs


def run_federation(config: GanConfig, data: PatientMatrix, k: int,
                   rounds: int = 1, total_epochs: int | None = None,
                   shuffle_seed: int | None = None,
                   remainder_to_last: bool = False):
    """Partition, schedule, and run the full multi-round hand-off protocol.

    The total budget is split evenly over rounds (remainder to the earliest
    rounds), then over nodes within each round.  Returns the final global
    model and all per-node logs in execution order.
    """
    if shuffle_seed is None:
        shuffle_seed = config.seed
    silos, _ = partition(data, k, shuffle_seed,
                         remainder_to_last=remainder_to_last)
    return run_rounds(config, silos, rounds, total_epochs)


def run_rounds(config: GanConfig, silos: list[PatientMatrix], rounds: int = 1,
               total_epochs: int | None = None, on_round=None):
    """Run the hand-off protocol on already-partitioned silos.

    on_round, if given, receives (round_index, round_logs) after each round;
    it is for progress reporting and must not touch the model.
    """
    if total_epochs is None:
        raise ConfigError("total_epochs is required")
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    global_model = build_gan(config)
    logs: list[TrainLog] = []
    for round_index, round_total in enumerate(epoch_budget(total_epochs, rounds)):
        budgets = epoch_budget(round_total, len(silos))
        _, round_logs = run_round(global_model, silos, budgets, round_index)
        logs.extend(round_logs)
        if on_round is not None:
            on_round(round_index, round_logs)
    return global_model, logs
