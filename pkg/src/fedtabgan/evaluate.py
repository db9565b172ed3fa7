"""Fidelity metrics, privacy checks, and the clinician plausibility survey.

Fidelity compares per-feature empirical probabilities between a real and a
synthetic cohort (RMSE plus squared Pearson correlation, with scatter and
histogram exports for plotting).  Privacy counts exact row duplicates and
measures, for every real patient, the cosine distance to the nearest
synthetic patient, flagging any pair closer than the 0.1 distance threshold
(similarity above 0.9).  The survey tools build a blinded rating pack mixing
real and synthetic patients and tabulate the returned ratings per origin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import CodeDictionary, PatientMatrix, describe_patient
from .errors import NumericError, ShapeError, UsageError, ValidationError
from .rng import ROLE_SURVEY, stream

log = logging.getLogger(__name__)

DISTANCE_THRESHOLD = 0.1

CATEGORIES = (
    "Highly Plausible",
    "Plausible",
    "Slightly Plausible",
    "Slightly Implausible",
    "Implausible",
    "Highly Implausible",
)

ORIGINS = ("real", "single_gan", "federated_gan")

SURVEY_GUIDELINES = (
    '"Please rate these {total} patients in terms of how plausible you '
    "consider them to be as ICU patients that you might encounter on a given "
    "day in your ICU or any ICU. Please try not to take into account how "
    "likely or unlikely it may be to encounter one of these patients, as "
    "rarity should not be a factor.\n"
    "\n"
    "* Please note that this list is a mixture of real patients (from an ICU "
    'in the United States) and generated synthetic patients."'
)


def feature_probabilities(matrix: PatientMatrix) -> np.ndarray:
    """Per-feature empirical probability of value 1."""
    if matrix.rows < 1:
        raise UsageError("feature probabilities need at least one row")
    return matrix.bits.mean(axis=0, dtype=np.float64)


def _aligned(p, q):
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.size != q.size:
        raise ShapeError(f"vector lengths differ: {p.size} vs {q.size}")
    if p.size == 0:
        raise UsageError("vectors must be non-empty")
    return p, q


def rmse(p, q) -> float:
    p, q = _aligned(p, q)
    return float(np.sqrt(np.mean((p - q) ** 2)))


def r_squared(p, q) -> float:
    """Squared Pearson correlation between the two probability vectors."""
    p, q = _aligned(p, q)
    dp = p - p.mean()
    dq = q - q.mean()
    sp = float(np.sqrt(np.sum(dp * dp)))
    sq = float(np.sqrt(np.sum(dq * dq)))
    if sp == 0.0 or sq == 0.0:
        raise NumericError("correlation undefined: a vector has zero variance")
    r = float(np.sum(dp * dq)) / (sp * sq)
    return r * r


def scatter_export(p_real, p_synth, path, feature_labels=None) -> None:
    """CSV of per-feature probability pairs: feature,real_prob,synth_prob."""
    p_real, p_synth = _aligned(p_real, p_synth)
    if feature_labels is None:
        feature_labels = [f"f{j}" for j in range(p_real.size)]
    if len(feature_labels) != p_real.size:
        raise ShapeError("feature label count does not match vector length")
    with open(path, "w") as fh:
        fh.write("feature,real_prob,synth_prob\n")
        for name, a, b in zip(feature_labels, p_real, p_synth):
            fh.write(f"{name},{a:.10g},{b:.10g}\n")


def histogram(values, bin_count: int):
    """Equal-width bins over [min, max], final bin right-closed.

    Returns (edges, counts) with len(edges) = bin_count + 1 and counts
    summing to the number of values.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise UsageError("histogram needs at least one value")
    if bin_count < 1:
        raise UsageError("bin_count must be >= 1")
    if not np.all(np.isfinite(values)):
        raise NumericError("histogram values must be finite")
    counts, edges = np.histogram(values, bins=bin_count)
    return edges, counts


def histogram_export(edges, counts, path) -> None:
    """CSV of histogram bins: bin_start,bin_end,count."""
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.asarray(counts)
    if edges.size != counts.size + 1:
        raise ShapeError("edges must have one more entry than counts")
    with open(path, "w") as fh:
        fh.write("bin_start,bin_end,count\n")
        for i in range(counts.size):
            fh.write(f"{edges[i]:.10g},{edges[i + 1]:.10g},{int(counts[i])}\n")


def exact_duplicates(real: PatientMatrix, synth: PatientMatrix) -> int:
    """Count of real rows that appear bitwise-identically among synth rows.

    Row bytes are hashed into a set; membership tests compare full contents,
    so the count is exact.
    """
    if real.cols != synth.cols:
        raise ShapeError(
            f"feature counts differ: {real.cols} vs {synth.cols}"
        )
    synth_rows = {row.tobytes() for row in synth.bits}
    return sum(1 for row in real.bits if row.tobytes() in synth_rows)


def min_cosine_distances(real: PatientMatrix, synth: PatientMatrix,
                         chunk: int = 512) -> np.ndarray:
    """For each real row, 1 minus its best cosine similarity over synth rows.

    All-zero rows have no direction; by convention they sit at distance 0
    from another all-zero row and distance 1 from any nonzero row.  A warning
    is logged when that convention is exercised.
    """
    if real.cols != synth.cols:
        raise ShapeError(
            f"feature counts differ: {real.cols} vs {synth.cols}"
        )
    if synth.rows < 1:
        raise UsageError("need at least one synthetic row")
    if real.rows < 1:
        return np.zeros(0)
    s = synth.bits.astype(np.float64)
    s_norm = np.sqrt(np.sum(s * s, axis=1))
    s_zero = s_norm == 0.0
    synth_has_zero = bool(np.any(s_zero))
    s_safe = np.where(s_zero, 1.0, s_norm)
    warned = synth_has_zero
    out = np.empty(real.rows)
    for lo in range(0, real.rows, chunk):
        r = real.bits[lo:lo + chunk].astype(np.float64)
        r_norm = np.sqrt(np.sum(r * r, axis=1))
        r_zero = r_norm == 0.0
        warned = warned or bool(np.any(r_zero))
        r_safe = np.where(r_zero, 1.0, r_norm)
        sims = (r @ s.T) / (r_safe[:, None] * s_safe[None, :])
        best = sims.max(axis=1)
        if synth_has_zero:
            # a zero synth row matches a zero real row exactly
            best = np.where(r_zero, 1.0, best)
        out[lo:lo + r.shape[0]] = 1.0 - best
    if warned:
        log.warning(
            "all-zero patient rows present; using the fixed convention "
            "(distance 0 between two empty rows, 1 to any nonzero row)"
        )
    return out


def threshold_violations(distances,
                         distance_threshold: float = DISTANCE_THRESHOLD) -> int:
    """Count of distances strictly below the threshold (similarity > 0.9)."""
    distances = np.asarray(distances, dtype=np.float64).ravel()
    if not np.all(np.isfinite(distances)):
        raise UsageError("distances must be finite")
    return int(np.sum(distances < distance_threshold))


@dataclass
class EvalReport:
    r_squared: float
    rmse: float
    duplicate_count: int
    min_cos_distance_mean: float
    min_cos_distance_std: float
    threshold_violation_count: int
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray

    def to_text(self) -> str:
        lines = [
            f"R Squared: {self.r_squared:.4f}",
            f"RMSE: {self.rmse:.4f}",
            f"Duplicates: {self.duplicate_count}",
            f"Mean Min Cos. Distance: {self.min_cos_distance_mean:.4f}",
            f"Standard Dev.: {self.min_cos_distance_std:.4f}",
            f"Threshold Violations (distance < {DISTANCE_THRESHOLD}): "
            f"{self.threshold_violation_count}",
            "",
            "Min cosine distance histogram:",
            "bin_start,bin_end,count",
        ]
        for i in range(self.histogram_counts.size):
            lines.append(
                f"{self.histogram_edges[i]:.10g},"
                f"{self.histogram_edges[i + 1]:.10g},"
                f"{int(self.histogram_counts[i])}"
            )
        return "\n".join(lines) + "\n"


def evaluate(real: PatientMatrix, synth: PatientMatrix,
             bin_count: int = 20) -> EvalReport:
    """Full fidelity-plus-privacy comparison of a synthetic cohort."""
    p_real = feature_probabilities(real)
    p_synth = feature_probabilities(synth)
    distances = min_cosine_distances(real, synth)
    edges, counts = histogram(distances, bin_count)
    return EvalReport(
        r_squared=r_squared(p_real, p_synth),
        rmse=rmse(p_real, p_synth),
        duplicate_count=exact_duplicates(real, synth),
        min_cos_distance_mean=float(np.mean(distances)),
        min_cos_distance_std=float(np.std(distances)),
        threshold_violation_count=threshold_violations(distances),
        histogram_edges=edges,
        histogram_counts=counts,
    )


@dataclass
class SurveyItem:
    item_id: str
    lines: tuple[str, ...]  # diagnosis descriptions, schema-identical per item


@dataclass
class SurveyPack:
    items: list[SurveyItem]
    key: dict[str, str] = field(repr=False)  # item_id -> origin, never shown
    n_per_group: int

    def visible_text(self) -> str:
        parts = [SURVEY_GUIDELINES.format(total=len(self.items)), ""]
        parts.append("Categories: " + ", ".join(CATEGORIES))
        parts.append("")
        for item in self.items:
            parts.append(f"Patient {item.item_id}:")
            if item.lines:
                parts.extend(f"  - {line}" for line in item.lines)
            else:
                parts.append("  (no recorded diagnoses)")
            parts.append("")
        return "\n".join(parts)

    def write_pack(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.visible_text())

    def write_key(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("id,origin\n")
            for item in self.items:
                fh.write(f"{item.item_id},{self.key[item.item_id]}\n")


def make_survey_pack(real: PatientMatrix, single_synth: PatientMatrix,
                     fed_synth: PatientMatrix,
                     code_dict: CodeDictionary | None = None,
                     n_per_group: int = 20, seed: int = 0) -> SurveyPack:
    """Blinded rating pack: n patients per origin, shuffled, opaque IDs.

    IDs are assigned after shuffling so position and ID carry no origin
    information; the mapping back to origins lives only in the key.
    """
    sources = (("real", real), ("single_gan", single_synth),
               ("federated_gan", fed_synth))
    labels = real.labels_or_default()
    for origin, matrix in sources:
        if matrix.rows < n_per_group:
            raise UsageError(
                f"{origin} source has {matrix.rows} rows, need {n_per_group}"
            )
        if matrix.cols != real.cols or matrix.labels_or_default() != labels:
            raise UsageError("survey sources must share feature labels")
    rng = stream(seed, ROLE_SURVEY)
    drawn: list[tuple[str, tuple[str, ...]]] = []
    for origin, matrix in sources:
        picks = rng.choice(matrix.rows, size=n_per_group, replace=False)
        for row in picks:
            lines = tuple(describe_patient(matrix, int(row), code_dict))
            drawn.append((origin, lines))
    order = rng.permutation(len(drawn))
    width = max(3, len(str(len(drawn))))
    items = []
    key = {}
    for pos, src_idx in enumerate(order):
        origin, lines = drawn[src_idx]
        item_id = f"P{pos + 1:0{width}d}"
        items.append(SurveyItem(item_id, lines))
        key[item_id] = origin
    return SurveyPack(items=items, key=key, n_per_group=n_per_group)


def _load_two_column_csv(path, header: tuple[str, str]) -> dict[str, str]:
    import csv

    out: dict[str, str] = {}
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if i == 1 and tuple(c.strip().lower() for c in row) == header:
                continue
            if len(row) != 2:
                raise ValidationError(f"row {i}: expected {','.join(header)}")
            out[row[0].strip()] = row[1].strip()
    return out


def load_responses(path) -> dict[str, str]:
    """Read one rater's CSV (id,category) into a response mapping."""
    return _load_two_column_csv(path, ("id", "category"))


def load_key(path) -> dict[str, str]:
    """Read a blinding key CSV (id,origin) back into a mapping."""
    return _load_two_column_csv(path, ("id", "origin"))


@dataclass
class SurveyTable:
    per_rater: list[np.ndarray]  # each len(ORIGINS) x len(CATEGORIES)
    pooled: np.ndarray

    def write_csv(self, path) -> None:
        header = "rater,origin," + ",".join(CATEGORIES)
        with open(path, "w") as fh:
            fh.write(header + "\n")
            tables = [(str(i + 1), t) for i, t in enumerate(self.per_rater)]
            tables.append(("pooled", self.pooled))
            for name, table in tables:
                for oi, origin in enumerate(ORIGINS):
                    cells = ",".join(str(int(c)) for c in table[oi])
                    fh.write(f"{name},{origin},{cells}\n")


def tabulate_survey(responses, key: dict[str, str]) -> SurveyTable:
    """Count ratings per origin and category, per rater and pooled."""
    cat_index = {c: i for i, c in enumerate(CATEGORIES)}
    origin_index = {o: i for i, o in enumerate(ORIGINS)}
    per_rater = []
    for rater, response in enumerate(responses, start=1):
        table = np.zeros((len(ORIGINS), len(CATEGORIES)), dtype=np.int64)
        for item_id, category in response.items():
            if item_id not in key:
                raise ValidationError(
                    f"rater {rater}: unknown patient id {item_id!r}"
                )
            if category not in cat_index:
                raise ValidationError(
                    f"rater {rater}: unknown category {category!r}"
                )
            origin = key[item_id]
            if origin not in origin_index:
                raise ValidationError(f"key has unknown origin {origin!r}")
            table[origin_index[origin], cat_index[category]] += 1
        per_rater.append(table)
    if per_rater:
        pooled = np.sum(per_rater, axis=0)
    else:
        pooled = np.zeros((len(ORIGINS), len(CATEGORIES)), dtype=np.int64)
    return SurveyTable(per_rater=per_rater, pooled=pooled)
