"""Trainable pieces: projection heads, LoRA adapters, the label classifier,
prompt fusion and a toy next-token generator.

Forward functions are pure; each has a ``*_backward`` companion returning a
dict of gradients keyed like the parameters it touches, plus ``'input'``
for the gradient flowing further down.
"""

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import RejectedInputError
from .labels import LABEL_WIDTH
from .losses import group_softmax
from .numerics import as_matrix

__all__ = [
    "INIT_STD",
    "ProjectionHead",
    "LoraAdapter",
    "LabelClassifier",
    "ToyGenerator",
    "project",
    "project_backward",
    "lora_forward",
    "lora_backward",
    "classifier_logits",
    "classifier_backward",
    "classify",
    "init_sentinels",
    "fuse_prompt",
    "fuse_backward",
    "generator_logits",
    "generator_backward",
    "generator_step_distributions",
    "save_checkpoint",
    "load_checkpoint",
]

INIT_STD = 0.02
CHECKPOINT_FORMAT = "otalign-params"
CHECKPOINT_VERSION = 1


def _normal(rng, shape, std=INIT_STD):
    return std * rng.normal(size=shape)


# -- projection heads -------------------------------------------------------------

@dataclass
class ProjectionHead:
    """Affine map ``x -> W x + b``; ``weight`` is (d_out, d_in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (self.weight.shape[0],):
            raise RejectedInputError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @classmethod
    def init(cls, d_in, d_out, rng):
        return cls(_normal(rng, (d_out, d_in)), np.zeros(d_out))

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]


def _check_cols(X, d, what):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d:
        raise RejectedInputError(f"{what}: expected (n, {d}) input, got {X.shape}")
    return X


def project(head, X):
    """Map every row of ``X`` to ``W x + b``."""
    X = _check_cols(X, head.d_in, "project")
    return X @ head.weight.T + head.bias


def project_backward(head, X, grad_out):
    X = np.asarray(X, dtype=np.float64)
    return {
        "weight": grad_out.T @ X,
        "bias": grad_out.sum(axis=0),
        "input": grad_out @ head.weight,
    }


# -- LoRA -------------------------------------------------------------------------

class LoraAdapter:
    """Frozen ``base_weight`` plus a trainable rank-``r`` update ``a @ b``.

    ``a`` is (d_out, r) and starts at zero, ``b`` is (r, d_in), so a fresh
    adapter reproduces the base map exactly. ``base_weight`` is stored as a
    read-only array.
    """

    def __init__(self, base_weight, a, b):
        base = np.array(base_weight, dtype=np.float64)
        a = np.array(a, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        d_out, d_in = base.shape
        r = a.shape[1] if a.ndim == 2 else 0
        if not 1 <= r <= min(d_out, d_in):
            raise RejectedInputError(f"rank {r} outside [1, {min(d_out, d_in)}]")
        if a.shape != (d_out, r) or b.shape != (r, d_in):
            raise RejectedInputError(
                f"LoRA factors {a.shape} x {b.shape} do not fit base {base.shape}"
            )
        base.flags.writeable = False
        self.base_weight = base
        self.a = a
        self.b = b

    @classmethod
    def init(cls, base_weight, rank, rng):
        d_out, d_in = np.shape(base_weight)
        if not 1 <= rank <= min(d_out, d_in):
            raise RejectedInputError(f"rank {rank} outside [1, {min(d_out, d_in)}]")
        return cls(base_weight, np.zeros((d_out, rank)), rng.normal(size=(rank, d_in)) / np.sqrt(d_in))

    @property
    def rank(self):
        return self.a.shape[1]

    def delta(self):
        """Materialised update ``a @ b`` (for inspection only)."""
        return self.a @ self.b


def lora_forward(adapter, x):
    """``(W + a b) x`` for a vector, or row-wise for a batch, without forming ``W + a b``."""
    x = np.asarray(x, dtype=np.float64)
    d_in = adapter.base_weight.shape[1]
    if x.shape[-1] != d_in:
        raise RejectedInputError(f"lora_forward: input dim {x.shape[-1]} != {d_in}")
    if x.ndim == 1:
        return adapter.base_weight @ x + adapter.a @ (adapter.b @ x)
    return x @ adapter.base_weight.T + (x @ adapter.b.T) @ adapter.a.T


def lora_backward(adapter, X, grad_out):
    """Gradients w.r.t. ``a``, ``b`` and the input. ``base_weight`` gets none."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    G = np.atleast_2d(grad_out)
    Xb = X @ adapter.b.T
    Ga = G @ adapter.a
    return {
        "a": G.T @ Xb,
        "b": Ga.T @ X,
        "input": G @ adapter.base_weight + Ga @ adapter.b,
    }


# -- label classifier -------------------------------------------------------------------

@dataclass
class LabelClassifier:
    """One affine map, or two with a tanh in between, ending in 56 logits.

    ``layers`` is a list of :class:`ProjectionHead`.
    """

    layers: list

    def __post_init__(self):
        if not 1 <= len(self.layers) <= 2:
            raise RejectedInputError("classifier needs one or two layers")
        if self.layers[-1].d_out != LABEL_WIDTH:
            raise RejectedInputError(f"classifier must end in {LABEL_WIDTH} outputs")
        if len(self.layers) == 2 and self.layers[0].d_out != self.layers[1].d_in:
            raise RejectedInputError("classifier layer shapes do not chain")

    @classmethod
    def init(cls, d_in, rng, hidden=None):
        if hidden:
            return cls([ProjectionHead.init(d_in, hidden, rng.child("l0")),
                        ProjectionHead.init(hidden, LABEL_WIDTH, rng.child("l1"))])
        return cls([ProjectionHead.init(d_in, LABEL_WIDTH, rng.child("l0"))])

    @property
    def d_in(self):
        return self.layers[0].d_in


def classifier_logits(clf, features):
    """Return ``(logits, cache)``; ``cache`` feeds :func:`classifier_backward`."""
    X = _check_cols(np.atleast_2d(features), clf.d_in, "classify")
    if len(clf.layers) == 1:
        return project(clf.layers[0], X), (X,)
    H = np.tanh(project(clf.layers[0], X))
    return project(clf.layers[1], H), (X, H)


def classifier_backward(clf, cache, grad_logits):
    if len(clf.layers) == 1:
        g = project_backward(clf.layers[0], cache[0], grad_logits)
        return {"l0.weight": g["weight"], "l0.bias": g["bias"], "input": g["input"]}
    X, H = cache
    g1 = project_backward(clf.layers[1], H, grad_logits)
    gh = g1["input"] * (1.0 - H * H)
    g0 = project_backward(clf.layers[0], X, gh)
    return {
        "l0.weight": g0["weight"], "l0.bias": g0["bias"],
        "l1.weight": g1["weight"], "l1.bias": g1["bias"],
        "input": g0["input"],
    }


def classify(clf, image_features):
    """Per-disease 4-way probabilities; shape (56,) for one feature vector, (n, 56) for a batch."""
    single = np.ndim(image_features) == 1
    logits, _ = classifier_logits(clf, image_features)
    probs = group_softmax(logits)
    return probs[0] if single else probs


# -- prompt fusion --------------------------------------------------------------------------

def init_sentinels(dim, rng):
    """Three learned marker rows: start, junction, end."""
    return _normal(rng, (3, dim))


def fuse_prompt(img, lbl, sentinels):
    """Stack ``[start, img rows, junction, label rows, end]``."""
    img = np.asarray(img, dtype=np.float64)
    sentinels = np.asarray(sentinels, dtype=np.float64)
    d = sentinels.shape[1]
    img = _check_cols(img.reshape(-1, d) if img.size == 0 else img, d, "fuse_prompt image rows")
    lbl = np.asarray(lbl, dtype=np.float64)
    lbl = _check_cols(lbl.reshape(-1, d) if lbl.size == 0 else lbl, d, "fuse_prompt label rows")
    return np.vstack([sentinels[0:1], img, sentinels[1:2], lbl, sentinels[2:3]])


def fuse_backward(n_img, grad_fused):
    """Split a gradient on the fused sequence back to (img, lbl, sentinels)."""
    g_img = grad_fused[1:1 + n_img]
    g_lbl = grad_fused[2 + n_img:-1]
    g_sent = grad_fused[[0, 1 + n_img, -1]]
    return g_img, g_lbl, g_sent


# -- toy generator -----------------------------------------------------------------------------

class ToyGenerator:
    """Next-token model conditioned on the mean-pooled fused prompt.

    Step ``t`` sees ``z_t = [mean(fused); onehot(t)]`` and emits logits
    ``(W + a b) z_t + c``. Only the LoRA factors are trainable; ``W`` and
    ``c`` stay frozen.
    """

    def __init__(self, adapter, bias, dim, max_len):
        self.adapter = adapter
        self.bias = np.array(bias, dtype=np.float64)
        self.bias.flags.writeable = False
        self.dim = int(dim)
        self.max_len = int(max_len)
        if adapter.base_weight.shape != (self.bias.size, self.dim + self.max_len):
            raise RejectedInputError("generator weight shape does not match vocab/dim/max_len")

    @classmethod
    def init(cls, vocab, dim, max_len, rank, rng, zero=False):
        shape = (vocab, dim + max_len)
        base = np.zeros(shape) if zero else _normal(rng.child("base"), shape)
        adapter = LoraAdapter.init(base, rank, rng.child("lora"))
        return cls(adapter, np.zeros(vocab), dim, max_len)

    @property
    def vocab(self):
        return self.bias.size


def _generator_inputs(gen, fused, steps):
    fused = _check_cols(fused, gen.dim, "generator")
    if not 1 <= steps <= gen.max_len:
        raise RejectedInputError(f"target length {steps} outside [1, {gen.max_len}]")
    Z = np.zeros((steps, gen.dim + gen.max_len))
    Z[:, :gen.dim] = fused.mean(axis=0)
    Z[np.arange(steps), gen.dim + np.arange(steps)] = 1.0
    return Z


def generator_logits(gen, fused, steps):
    """Return ``(logits, Z)`` for ``steps`` teacher-forced positions."""
    Z = _generator_inputs(gen, fused, steps)
    return lora_forward(gen.adapter, Z) + gen.bias, Z


def generator_backward(gen, fused, Z, grad_logits):
    """Gradients w.r.t. LoRA factors and the fused sequence rows."""
    g = lora_backward(gen.adapter, Z, grad_logits)
    g_pool = g["input"][:, :gen.dim].sum(axis=0)
    n_rows = np.shape(fused)[0]
    return {"a": g["a"], "b": g["b"], "input": np.tile(g_pool / n_rows, (n_rows, 1))}


def generator_step_distributions(gen, fused, target_len):
    """``target_len`` probability vectors over the vocabulary."""
    logits, _ = generator_logits(gen, fused, target_len)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- checkpoints ---------------------------------------------------------------------------------

def save_checkpoint(path, groups):
    """Write ``{name: array}`` as JSON. Floats use ``repr`` and round-trip exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "groups": {
            name: {"shape": list(np.shape(arr)),
                   "values": [float(x) for x in np.asarray(arr, dtype=np.float64).reshape(-1)]}
            for name, arr in groups.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise RejectedInputError(f"{path}: not an otalign checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise RejectedInputError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return {
        name: np.array(g["values"], dtype=np.float64).reshape(g["shape"])
        for name, g in payload["groups"].items()
    }
