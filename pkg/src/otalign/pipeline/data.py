"""Seeded synthetic stand-in for (image, labels, report) triples.

Each active disease gets a Gaussian cluster centre in image space and an
anchor in label space. A sample picks one or two positive diseases; its
image patches scatter around the centres of those diseases, its label rows
sit near their anchors, and its "report" is a templated token sequence.

Every image also carries a per-image nuisance offset (think scanner or
patient effects) along directions orthogonal to the disease centres. It
dominates raw patch distances without carrying any label information.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..exceptions import RejectedInputError
from ..labels import (
    DISEASES,
    NUM_DISEASES,
    DiseaseLabelSet,
    DiseaseState,
    format_label_text,
    read_label_csv,
    write_label_csv,
)
from ..numerics import SeededRng
from ..ot import export_plan, read_plan

__all__ = [
    "BOS", "EOS", "PERIOD", "VOCAB", "VOCAB_SIZE",
    "disease_token", "state_token",
    "SyntheticDatasetConfig",
    "Dataset",
    "gen_synthetic",
    "split_indices",
    "save_dataset",
    "load_dataset",
    "nearest_centroid_accuracy",
]

BOS, EOS, PERIOD = 0, 1, 2
_STATE_BASE = 3
_DISEASE_BASE = _STATE_BASE + len(DiseaseState)
VOCAB = (
    ["<bos>", "<eos>", "."]
    + [s.name.lower() for s in DiseaseState]
    + list(DISEASES)
)
VOCAB_SIZE = len(VOCAB)


def disease_token(d):
    return _DISEASE_BASE + int(d)


def state_token(s):
    return _STATE_BASE + int(s)


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_samples: int = 400
    diseases_active: tuple = (1, 2, 4, 5, 6, 9)
    image_dim: int = 16
    label_dim: int = 16
    cluster_spread: float = 1.0
    cluster_separation: float = 10.0
    patches_per_image: int = 4
    multi_label_prob: float = 0.3
    label_spread: float = 0.1
    nuisance_dims: int = 4
    nuisance_scale: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "diseases_active", tuple(int(d) for d in self.diseases_active))
        if not self.diseases_active:
            raise RejectedInputError("diseases_active must not be empty")
        if len(set(self.diseases_active)) != len(self.diseases_active):
            raise RejectedInputError("diseases_active has duplicates")
        if any(not 0 <= d < NUM_DISEASES for d in self.diseases_active):
            raise RejectedInputError(f"disease indices must lie in [0, {NUM_DISEASES})")
        if self.num_samples < 1:
            raise RejectedInputError("num_samples must be >= 1")
        if self.image_dim < 2 or self.label_dim < 2:
            raise RejectedInputError("image_dim and label_dim must be >= 2")
        if self.patches_per_image < 1:
            raise RejectedInputError("patches_per_image must be >= 1")
        if not self.cluster_spread > 0 or not self.cluster_separation > 0:
            raise RejectedInputError("cluster_spread and cluster_separation must be positive")
        if not 0 <= self.multi_label_prob <= 1:
            raise RejectedInputError("multi_label_prob must lie in [0, 1]")
        if self.label_spread < 0 or self.nuisance_scale < 0:
            raise RejectedInputError("label_spread and nuisance_scale must be nonnegative")
        if self.nuisance_dims < 0:
            raise RejectedInputError("nuisance_dims must be nonnegative")

    @property
    def separable(self):
        return self.cluster_spread < self.cluster_separation


@dataclass
class Dataset:
    """Arrays for ``n`` samples with ``P`` patches each.

    Attributes
    ----------
    image_rows : (n, P, image_dim) simulated patch embeddings
    patch_disease : (n, P) disease that generated each patch
    labels : list of DiseaseLabelSet
    label_rows : list of (k_i, label_dim) arrays, one row per positive label
    label_row_disease : list of (k_i,) int arrays
    tokens : list of int arrays, ``<bos> ... <eos>``
    """

    config: SyntheticDatasetConfig
    image_rows: np.ndarray
    patch_disease: np.ndarray
    labels: list
    label_rows: list
    label_row_disease: list
    tokens: list
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"s{i:05d}" for i in range(len(self.labels))]

    def __len__(self):
        return len(self.labels)

    @property
    def max_target_len(self):
        return max(len(t) - 1 for t in self.tokens)

    def dominant_disease(self):
        """First positive disease of each sample."""
        return np.array([ls.positives()[0] if ls.positives() else -1 for ls in self.labels])


def _directions(rng, k, dim):
    """``k`` unit vectors, mutually orthogonal when ``dim >= k``."""
    if dim >= k:
        q, _ = np.linalg.qr(rng.normal(size=(dim, k)))
        return q.T
    pts = rng.normal(size=(k, dim))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _centres(rng, k, dim, separation):
    """``k`` points with pairwise distance ``separation`` when ``dim >= k``."""
    return separation / np.sqrt(2.0) * _directions(rng, k, dim)


def gen_synthetic(cfg):
    """Build a :class:`Dataset`; fully determined by ``cfg.seed``."""
    root = SeededRng(cfg.seed)
    active = cfg.diseases_active
    k = len(active)
    # centre directions and nuisance directions come from one orthogonal frame
    frame = _directions(root.child("image-centres"), k + cfg.nuisance_dims, cfg.image_dim)
    centres = cfg.cluster_separation / np.sqrt(2.0) * frame[:k]
    nuisance_axes = frame[k:]
    anchors = _centres(root.child("label-anchors"), k, cfg.label_dim, cfg.cluster_separation)
    pick = root.child("labels")
    img_noise = root.child("image-noise")
    lbl_noise = root.child("label-noise")
    nuisance = root.child("nuisance")

    n, P = cfg.num_samples, cfg.patches_per_image
    image_rows = np.empty((n, P, cfg.image_dim))
    patch_disease = np.empty((n, P), dtype=np.int64)
    labels, label_rows, label_row_disease, tokens = [], [], [], []
    for i in range(n):
        n_pos = 2 if (k >= 2 and pick.random() < cfg.multi_label_prob) else 1
        slots = [int(s) for s in pick.generator.choice(k, size=n_pos, replace=False)]
        diseases = [active[s] for s in slots]
        labels.append(DiseaseLabelSet.from_mapping({d: DiseaseState.POSITIVE for d in diseases}))

        offset = (cfg.nuisance_scale * nuisance.normal(size=cfg.nuisance_dims)) @ nuisance_axes
        for j in range(P):
            s = slots[j % n_pos]
            patch_disease[i, j] = active[s]
            image_rows[i, j] = centres[s] + offset + cfg.cluster_spread * img_noise.normal(size=cfg.image_dim)

        label_rows.append(np.stack([
            anchors[s] + cfg.label_spread * lbl_noise.normal(size=cfg.label_dim) for s in slots
        ]))
        label_row_disease.append(np.array(diseases, dtype=np.int64))

        seq = [BOS]
        for d in diseases:
            seq += [disease_token(d), state_token(DiseaseState.POSITIVE), PERIOD]
        seq.append(EOS)
        tokens.append(np.array(seq, dtype=np.int64))

    return Dataset(cfg, image_rows, patch_disease, labels, label_rows, label_row_disease, tokens)


def split_indices(n, seed, fractions=(0.8, 0.1, 0.1)):
    """Seeded shuffle into train / validation / test index arrays."""
    perm = SeededRng(seed).child("split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def nearest_centroid_accuracy(data):
    """Classify every patch by its nearest per-disease centroid.

    Centroids are estimated from the patches themselves; accuracy is the
    fraction assigned to the disease that generated them.
    """
    X = data.image_rows.reshape(-1, data.image_rows.shape[-1])
    y = data.patch_disease.reshape(-1)
    classes = np.unique(y)
    cents = np.stack([X[y == c].mean(axis=0) for c in classes])
    d2 = ((X[:, None, :] - cents[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(classes[np.argmin(d2, axis=1)] == y))


# -- on-disk archive ----------------------------------------------------------------

def save_dataset(data, directory):
    """Write the dataset as CSV grids, label files and a token file.

    Files: ``labels.csv``, ``labels.txt``, ``image_features.csv``,
    ``label_features.csv``, ``reports.txt`` and ``dataset.json``.
    """
    os.makedirs(directory, exist_ok=True)
    cfg = data.config
    write_label_csv(os.path.join(directory, "labels.csv"), data.ids, data.labels)
    with open(os.path.join(directory, "labels.txt"), "w") as fh:
        fh.write(format_label_text(data.labels))

    n, P, D = data.image_rows.shape
    row_ids = [f"{sid}:p{j}" for sid in data.ids for j in range(P)]
    export_plan(data.image_rows.reshape(n * P, D), row_ids,
                [f"x{c}" for c in range(D)], os.path.join(directory, "image_features.csv"))
    lbl_ids = [f"{sid}:l{j}" for sid, rows in zip(data.ids, data.label_rows) for j in range(len(rows))]
    export_plan(np.vstack(data.label_rows), lbl_ids,
                [f"y{c}" for c in range(cfg.label_dim)], os.path.join(directory, "label_features.csv"))

    with open(os.path.join(directory, "reports.txt"), "w") as fh:
        for seq in data.tokens:
            fh.write(" ".join(str(int(t)) for t in seq) + "\n")

    meta = {
        "config": asdict(cfg),
        "vocab": VOCAB,
        "patch_disease": data.patch_disease.tolist(),
        "label_row_disease": [r.tolist() for r in data.label_row_disease],
    }
    meta["config"]["diseases_active"] = list(cfg.diseases_active)
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def load_dataset(directory):
    with open(os.path.join(directory, "dataset.json")) as fh:
        meta = json.load(fh)
    cfg = SyntheticDatasetConfig(**meta["config"])
    ids, labels = read_label_csv(os.path.join(directory, "labels.csv"))
    img, _, _ = read_plan(os.path.join(directory, "image_features.csv"))
    lbl, _, _ = read_plan(os.path.join(directory, "label_features.csv"))
    patch_disease = np.array(meta["patch_disease"], dtype=np.int64)
    n, P = patch_disease.shape
    label_row_disease = [np.array(r, dtype=np.int64) for r in meta["label_row_disease"]]
    bounds = np.cumsum([0] + [len(r) for r in label_row_disease])
    label_rows = [lbl[bounds[i]:bounds[i + 1]] for i in range(n)]
    with open(os.path.join(directory, "reports.txt")) as fh:
        tokens = [np.array([int(t) for t in line.split()], dtype=np.int64) for line in fh if line.strip()]
    return Dataset(cfg, img.reshape(n, P, -1), patch_disease, labels, label_rows,
                   label_row_disease, tokens, ids)
