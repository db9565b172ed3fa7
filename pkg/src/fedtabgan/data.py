"""Binary patient-by-feature matrices: storage, CSV I/O, synthetic sources.

A patient matrix is a dense 0/1 matrix whose rows are patients and whose
columns are diagnosis features, optionally labelled with code strings.  The
synthetic source is a latent-topic Bernoulli model that stands in for
credentialed clinical datasets; see README for importing real data instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, UsageError
from .rng import ROLE_SYNTH, stream

log = logging.getLogger(__name__)


class PatientMatrix:
    """Immutable dense binary matrix with optional per-column code labels."""

    def __init__(self, bits, feature_labels=None):
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise ConfigError(f"patient matrix must be 2-D, got {bits.ndim}-D")
        if bits.size and not np.all((bits == 0) | (bits == 1)):
            raise ConfigError("patient matrix entries must be 0 or 1")
        if feature_labels is not None:
            feature_labels = tuple(str(c) for c in feature_labels)
            if len(feature_labels) != bits.shape[1]:
                raise ConfigError(
                    f"{len(feature_labels)} labels for {bits.shape[1]} columns"
                )
        bits.flags.writeable = False
        self.bits = bits
        self.feature_labels = feature_labels

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def labels_or_default(self) -> tuple[str, ...]:
        if self.feature_labels is not None:
            return self.feature_labels
        return tuple(f"f{j}" for j in range(self.cols))

    def take_rows(self, index) -> "PatientMatrix":
        return PatientMatrix(self.bits[index], self.feature_labels)

    def __eq__(self, other):
        return (
            isinstance(other, PatientMatrix)
            and self.feature_labels == other.feature_labels
            and np.array_equal(self.bits, other.bits)
        )

    def __repr__(self):
        return f"PatientMatrix({self.rows}x{self.cols})"


def save_matrix(matrix: PatientMatrix, path) -> None:
    """Write a matrix as CSV: header of feature codes, then 0/1 rows."""
    labels = matrix.labels_or_default()
    for c in labels:
        if "," in c or "\n" in c or "\r" in c:
            raise UsageError(f"feature code {c!r} cannot contain commas or newlines")
    digits = matrix.bits + np.uint8(ord("0"))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(labels) + "\n")
        for row in digits:
            fh.write(",".join(row.tobytes().decode("ascii")) + "\n")


def _parse_row(line: str, n_cols: int, row_num: int) -> np.ndarray:
    cells = line.split(",")
    if len(cells) != n_cols:
        raise ParseError(
            f"row {row_num}: expected {n_cols} values, found {len(cells)}"
        )
    joined = "".join(cells)
    if len(joined) == n_cols:
        vals = np.frombuffer(joined.encode("ascii", "replace"), dtype=np.uint8)
        vals = vals - np.uint8(ord("0"))
        bad = np.nonzero(vals > 1)[0]
        if not bad.size:
            return vals
        col = int(bad[0])
    else:
        col = next(i for i, c in enumerate(cells) if c not in ("0", "1"))
    raise ParseError(
        f"non-binary cell {cells[col]!r} at row {row_num}, column {col + 1}"
    )


def load_matrix(path) -> PatientMatrix:
    """Load a matrix CSV written by save_matrix (round-trip lossless)."""
    with open(path, "r", newline="") as fh:
        text = fh.read()
    lines = text.replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file")
    labels = tuple(lines[0].split(","))
    if any(c == "" for c in labels):
        raise ParseError(f"{path}: empty feature code in header")
    n_cols = len(labels)
    rows = [_parse_row(line, n_cols, i + 1) for i, line in enumerate(lines[1:])]
    bits = np.vstack(rows) if rows else np.zeros((0, n_cols), dtype=np.uint8)
    return PatientMatrix(bits, labels)


def encode_pm1(matrix: PatientMatrix) -> np.ndarray:
    """Map {0,1} to {-1,+1} so real rows share the tanh output range."""
    return matrix.bits.astype(np.float64) * 2.0 - 1.0


def binarize(values: np.ndarray, threshold: float = 0.0,
             feature_labels=None) -> PatientMatrix:
    """Threshold real values back to a binary matrix (> threshold -> 1)."""
    values = np.asarray(values, dtype=np.float64)
    return PatientMatrix((values > threshold).astype(np.uint8), feature_labels)


@dataclass(frozen=True)
class SourceParams:
    """Knobs of the synthetic latent-topic source."""

    n_patients: int
    n_features: int
    n_latent: int = 8
    sparsity_target: float = 0.03
    silo_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or self.n_features < 1 or self.n_latent < 1:
            raise ConfigError("patient, feature, and latent counts must be >= 1")
        if not (0.0 < self.sparsity_target < 1.0):
            raise ConfigError("sparsity_target must lie in (0, 1)")
        if self.silo_shift < 0.0:
            raise ConfigError("silo_shift must be >= 0")


_CALIBRATION_ITERS = 200


def _calibrate_intercept(logits: np.ndarray, target: float) -> float:
    """Bisect the intercept c so that mean(sigmoid(c + logits)) == target."""
    lo, hi = -60.0, 60.0

    def mean_prob(c):
        return float(np.mean(1.0 / (1.0 + np.exp(-(c + logits))))) - target

    if mean_prob(lo) > 0 or mean_prob(hi) < 0:
        raise ConfigError("sparsity calibration target unreachable")
    for _ in range(_CALIBRATION_ITERS):
        mid = 0.5 * (lo + hi)
        if mean_prob(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            return 0.5 * (lo + hi)
    raise ConfigError("sparsity calibration did not converge")


def synth_source(params: SourceParams, silo_index: int = 0) -> PatientMatrix:
    """Generate one silo's matrix from the latent-topic Bernoulli model.

    Feature-level structure (per-feature offsets, topic loadings, drift
    directions) is drawn once from params.seed and shared by every silo;
    patients are drawn from a per-silo stream.  silo_shift scales a per-silo
    systematic tilt of the feature logits.  The intercept is calibrated per
    silo so the mean cell probability hits sparsity_target.
    """
    if silo_index < 0:
        raise ConfigError("silo_index must be >= 0")
    feat_rng = stream(params.seed, ROLE_SYNTH, 0)
    base = feat_rng.normal(0.0, 1.0, size=params.n_features)
    loadings = feat_rng.normal(0.0, 2.0, size=(params.n_latent, params.n_features))
    drift = feat_rng.normal(0.0, 1.0, size=params.n_features)

    pat_rng = stream(params.seed, ROLE_SYNTH, 1 + silo_index)
    mixtures = pat_rng.dirichlet(np.full(params.n_latent, 0.4),
                                 size=params.n_patients)
    logits = base + mixtures @ loadings + silo_index * params.silo_shift * drift
    c = _calibrate_intercept(logits, params.sparsity_target)
    probs = 1.0 / (1.0 + np.exp(-(c + logits)))
    bits = (pat_rng.random(size=logits.shape) < probs).astype(np.uint8)
    labels = tuple(f"d{j:04d}" for j in range(params.n_features))
    return PatientMatrix(bits, labels)


@dataclass
class CodeDictionary:
    """Mapping from diagnosis code strings to human-readable descriptions."""

    mapping: dict[str, str]

    @classmethod
    def load(cls, path) -> "CodeDictionary":
        import csv

        mapping: dict[str, str] = {}
        with open(path, "r", newline="") as fh:
            for i, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) != 2:
                    raise ParseError(f"{path}: row {i} needs exactly 2 columns")
                code, description = row
                if code in mapping:
                    raise ParseError(f"{path}: duplicate code {code!r} at row {i}")
                mapping[code] = description
        return cls(mapping)

    def describe(self, code: str) -> str:
        return self.mapping.get(code, code)


def describe_patient(matrix: PatientMatrix, row: int,
                     code_dict: CodeDictionary | None = None) -> list[str]:
    """Descriptions of every feature set to 1 in the row, in feature order."""
    if not (0 <= row < matrix.rows):
        raise UsageError(f"row {row} out of range for {matrix.rows} patients")
    labels = matrix.labels_or_default()
    present = np.nonzero(matrix.bits[row])[0]
    if code_dict is None:
        return [labels[j] for j in present]
    return [code_dict.describe(labels[j]) for j in present]
