"""Disease-label taxonomy: 14 diseases, each in one of 4 states.

A label set is stored as 14 integer state codes. Its one-hot form is a
56-vector, disease ``g`` occupying indices ``[4g, 4g + 4)``.
"""

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .exceptions import LabelParseError, NumericalError, RejectedInputError

__all__ = [
    "DISEASES",
    "NUM_DISEASES",
    "NUM_STATES",
    "LABEL_WIDTH",
    "Disease",
    "DiseaseState",
    "DiseaseLabelSet",
    "CeMetrics",
    "parse_label",
    "parse_label_text",
    "format_label_text",
    "encode_onehot",
    "decode_onehot",
    "ce_metrics",
    "read_label_csv",
    "write_label_csv",
]

DISEASES = (
    "enlarged cardiomediastinum",
    "cardiomegaly",
    "lung opacity",
    "lung lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural other",
    "fracture",
    "support devices",
    "no finding",
)
NUM_DISEASES = len(DISEASES)
NUM_STATES = 4
LABEL_WIDTH = NUM_DISEASES * NUM_STATES


class Disease(enum.IntEnum):
    ENLARGED_CARDIOMEDIASTINUM = 0
    CARDIOMEGALY = 1
    LUNG_OPACITY = 2
    LUNG_LESION = 3
    EDEMA = 4
    CONSOLIDATION = 5
    PNEUMONIA = 6
    ATELECTASIS = 7
    PNEUMOTHORAX = 8
    PLEURAL_EFFUSION = 9
    PLEURAL_OTHER = 10
    FRACTURE = 11
    SUPPORT_DEVICES = 12
    NO_FINDING = 13

    @property
    def canonical_name(self):
        return DISEASES[self.value]


class DiseaseState(enum.IntEnum):
    UNMENTIONED = 0
    POSITIVE = 1
    NEGATIVE = 2
    UNCLEAR = 3


_DISEASE_BY_NAME = {name: Disease(i) for i, name in enumerate(DISEASES)}
_STATE_BY_NAME = {s.name.lower(): s for s in DiseaseState}


@dataclass(frozen=True)
class DiseaseLabelSet:
    """State codes for all 14 diseases of one report / image."""

    states: tuple

    def __post_init__(self):
        states = tuple(DiseaseState(int(s)) for s in self.states)
        if len(states) != NUM_DISEASES:
            raise RejectedInputError(
                f"label set needs {NUM_DISEASES} states, got {len(states)}"
            )
        object.__setattr__(self, "states", states)

    @classmethod
    def unmentioned(cls):
        return cls((DiseaseState.UNMENTIONED,) * NUM_DISEASES)

    @classmethod
    def from_mapping(cls, mapping):
        """Build from ``{disease: state}``; unlisted diseases are unmentioned."""
        states = [DiseaseState.UNMENTIONED] * NUM_DISEASES
        for disease, state in mapping.items():
            states[int(disease)] = DiseaseState(int(state))
        return cls(tuple(states))

    def positives(self):
        """Indices of diseases in the positive state."""
        return [i for i, s in enumerate(self.states) if s == DiseaseState.POSITIVE]

    def codes(self):
        return np.array([int(s) for s in self.states], dtype=np.int64)

    def __getitem__(self, disease):
        return self.states[int(disease)]

    def __len__(self):
        return NUM_DISEASES


@dataclass(frozen=True)
class CeMetrics:
    precision: float
    recall: float
    f1: float


def parse_label(text):
    """Parse one ``disease: state`` line into ``(Disease, DiseaseState)``.

    Matching is case-insensitive and ignores surrounding whitespace.

    >>> parse_label("No Finding: unmentioned")
    (<Disease.NO_FINDING: 13>, <DiseaseState.UNMENTIONED: 0>)
    """
    if not text or not text.strip():
        raise LabelParseError("empty label line", token=text)
    name, sep, state = text.partition(":")
    if not sep:
        raise LabelParseError(f"missing ':' in label line {text!r}", token=text)
    name = " ".join(name.strip().lower().split())
    state = state.strip().lower()
    if name not in _DISEASE_BY_NAME:
        raise LabelParseError(f"unknown disease {name!r}", token=name)
    if state not in _STATE_BY_NAME:
        raise LabelParseError(f"unknown state {state!r}", token=state)
    return _DISEASE_BY_NAME[name], _STATE_BY_NAME[state]


def parse_label_text(text):
    """Parse a label text file: blank lines separate samples."""
    samples, current = [], {}
    for line in text.splitlines():
        if not line.strip():
            if current:
                samples.append(DiseaseLabelSet.from_mapping(current))
                current = {}
            continue
        disease, state = parse_label(line)
        current[disease] = state
    if current:
        samples.append(DiseaseLabelSet.from_mapping(current))
    return samples


def format_label_text(label_sets):
    blocks = []
    for ls in label_sets:
        lines = [f"{DISEASES[i]}: {s.name.lower()}" for i, s in enumerate(ls.states)]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def encode_onehot(labels):
    """56-long one-hot vector; group ``g`` has its 1 at ``4g + state``."""
    out = np.zeros(LABEL_WIDTH)
    out[np.arange(NUM_DISEASES) * NUM_STATES + labels.codes()] = 1.0
    return out


def decode_onehot(probs):
    """Per-group argmax back to a label set. Ties go to the lowest state code."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (LABEL_WIDTH,):
        raise RejectedInputError(f"expected length {LABEL_WIDTH}, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise NumericalError("label vector contains non-finite entries")
    # np.argmax returns the first maximum, which is the lowest code
    codes = np.argmax(probs.reshape(NUM_DISEASES, NUM_STATES), axis=1)
    return DiseaseLabelSet(tuple(int(c) for c in codes))


def _ratio(num, den, vacuous):
    if den == 0:
        return 1.0 if vacuous else 0.0
    return num / den


def ce_metrics(pred, truth, positive_states=(DiseaseState.POSITIVE,)):
    """Micro-averaged precision / recall / F1 over the event "state is positive".

    Counts are pooled over all samples and diseases. ``positive_states``
    selects which states count as a positive finding; pass
    ``(POSITIVE, UNCLEAR)`` for an uncertain-as-positive policy.

    When neither side has any positive the result is P = R = F1 = 1;
    otherwise a metric whose denominator is zero is 0.
    """
    if len(pred) != len(truth):
        raise RejectedInputError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if len(pred) == 0:
        raise RejectedInputError("ce_metrics needs at least one sample")
    pos = np.array([int(s) for s in positive_states])
    p = np.isin(np.stack([ls.codes() for ls in pred]), pos)
    t = np.isin(np.stack([ls.codes() for ls in truth]), pos)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    vacuous = not p.any() and not t.any()
    precision = _ratio(tp, tp + fp, vacuous)
    recall = _ratio(tp, tp + fn, vacuous)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return CeMetrics(precision, recall, f1)


def read_label_csv(path):
    """Read ``id,d0,...,d13`` rows. Returns ``(ids, label_sets)``."""
    ids, sets = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["id"] + [f"d{i}" for i in range(NUM_DISEASES)]
        if header != expected:
            raise RejectedInputError(f"{path}: bad label CSV header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != NUM_DISEASES + 1:
                raise RejectedInputError(f"{path}:{lineno}: expected {NUM_DISEASES + 1} cells")
            try:
                codes = [int(c) for c in row[1:]]
                sets.append(DiseaseLabelSet(tuple(codes)))
            except ValueError as exc:
                raise RejectedInputError(f"{path}:{lineno}: {exc}") from None
            ids.append(row[0])
    return ids, sets


def write_label_csv(path, ids, label_sets):
    if len(ids) != len(label_sets):
        raise RejectedInputError("ids and label_sets differ in length")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"d{i}" for i in range(NUM_DISEASES)])
        for i, ls in zip(ids, label_sets):
            writer.writerow([i] + [int(s) for s in ls.states])
