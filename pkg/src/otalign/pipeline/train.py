"""Training loops: contrastive encoder pretraining, OT alignment with report
generation, and focal-loss label classification.

All loops use plain gradient descent with a fixed step and a batch order
fixed once per run, so a run with ``lr=0`` has a constant loss trace.
"""

import csv
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..exceptions import NumericalError, RejectedInputError, SolverError, TrainingError
from ..labels import ce_metrics, decode_onehot, encode_onehot
from ..losses import (
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA,
    DEFAULT_SIGMA,
    DEFAULT_TAU,
    cross_entropy_logits,
    focal_loss_logits,
    infonce_ircp,
    report_nll_logits,
    total_loss,
)
from ..model import (
    LabelClassifier,
    ProjectionHead,
    ToyGenerator,
    classifier_backward,
    classifier_logits,
    classify,
    fuse_backward,
    fuse_prompt,
    generator_backward,
    generator_logits,
    init_sentinels,
    project,
    project_backward,
)
from ..numerics import SeededRng, pairwise_euclidean
from ..ot import DEFAULT_EPSILON, DEFAULT_ITERS, DEFAULT_TOL, OtProblem, sinkhorn
from .data import VOCAB_SIZE, split_indices
from .metrics import silhouette

__all__ = [
    "DEFAULT_LR",
    "HISTORY_COLUMNS",
    "IrcpResult",
    "AlignmentConfig",
    "ClassifierConfig",
    "TrainState",
    "TrainHistory",
    "ClassifierHistory",
    "pretrain_ircp",
    "train_alignment",
    "train_classifier",
    "image_features",
    "projected_image_features",
    "pooled_features",
    "projected_silhouette",
    "probe_ce_f1",
    "predict_labels",
]

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-2
HISTORY_COLUMNS = ("epoch", "total", "l_rg", "d_ot", "marginal_violation", "ce_f1", "silhouette")


def _batches(indices, batch_size, rng):
    order = np.asarray(indices)[rng.permutation(len(indices))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _check_finite(value, epoch, what):
    if not np.isfinite(value):
        raise TrainingError(f"{what} diverged (value {value}) at epoch {epoch}", epoch=epoch)


@contextmanager
def _diverges(epoch, what):
    # non-finite intermediates inside a step mean the run blew up
    try:
        yield
    except (NumericalError, SolverError) as exc:
        raise TrainingError(f"{what} diverged at epoch {epoch}: {exc}", epoch=epoch) from exc


# -- IRCP pretraining -----------------------------------------------------------------

@dataclass
class IrcpResult:
    encoder: ProjectionHead
    losses: list


def pretrain_ircp(data, sigma=DEFAULT_SIGMA, tau=DEFAULT_TAU, epochs=20, lr=DEFAULT_LR, seed=0,
                  batch_size=32, enc_dim=None, sim="neg_euclidean", line_search=False):
    """Train an affine encoder over raw patch rows with InfoNCE.

    The positive for patch ``x`` is ``enc(x + noise)`` with
    ``noise ~ N(0, sigma^2 I)`` drawn once per patch; the negatives are the
    other patches of the batch. With ``line_search`` each step is halved
    until the batch loss does not increase.

    Returns
    -------
    IrcpResult
        ``losses`` holds the mean batch loss of every epoch.
    """
    if sigma < 0:
        raise RejectedInputError(f"sigma must be nonnegative, got {sigma}")
    if not tau > 0:
        raise RejectedInputError(f"tau must be positive, got {tau}")
    rng = SeededRng(seed)
    n, P, D = data.image_rows.shape
    encoder = ProjectionHead.init(D, enc_dim or D, rng.child("encoder"))
    noise = sigma * rng.child("ircp-noise").normal(size=(n, P, D))
    batches = _batches(np.arange(n), batch_size, rng.child("ircp-batches"))

    def batch_loss(W, b, X, Xp):
        return infonce_ircp(X @ W.T + b, Xp @ W.T + b, tau, sim)

    losses = []
    for epoch in range(1, epochs + 1):
        epoch_vals = []
        for idx in batches:
            X = data.image_rows[idx].reshape(-1, D)
            Xp = X + noise[idx].reshape(-1, D)
            with _diverges(epoch, "IRCP loss"):
                lv = batch_loss(encoder.weight, encoder.bias, X, Xp)
            _check_finite(lv.value, epoch, "IRCP loss")
            epoch_vals.append(lv.value)
            ga = project_backward(encoder, X, lv.gradients["anchors"])
            gp = project_backward(encoder, Xp, lv.gradients["positives"])
            gW = ga["weight"] + gp["weight"]
            gb = ga["bias"] + gp["bias"]
            step = lr
            if line_search and lr > 0:
                for _ in range(30):
                    try:
                        trial = batch_loss(encoder.weight - step * gW, encoder.bias - step * gb, X, Xp)
                    except NumericalError:
                        trial = None
                    if trial is not None and trial.value <= lv.value:
                        break
                    step *= 0.5
                else:
                    step = 0.0
            encoder.weight = encoder.weight - step * gW
            encoder.bias = encoder.bias - step * gb
        losses.append(float(np.mean(epoch_vals)))
        log.debug("ircp epoch %d loss %.6f", epoch, losses[-1])
    return IrcpResult(encoder, losses)


# -- alignment ----------------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    gamma: float = DEFAULT_GAMMA
    lr: float = 0.5
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    hidden: Optional[int] = None
    loss: str = "focal"
    standardize: str = "global"

    def __post_init__(self):
        if self.gamma < 0:
            raise RejectedInputError("gamma must be nonnegative")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise RejectedInputError("lr, epochs must be >= 0 and batch_size >= 1")
        if self.loss not in ("focal", "ce"):
            raise RejectedInputError(f"unknown classifier loss {self.loss!r}")
        if self.standardize not in ("global", "per_dim", "none"):
            raise RejectedInputError(f"unknown standardize mode {self.standardize!r}")


@dataclass
class AlignmentConfig:
    """Hyper-parameters of :func:`train_alignment`.

    ``ot_scope`` is ``'batch'`` (all patches of a batch against all its
    label rows) or ``'sample'`` (one problem per sample). ``ot_term``
    selects the full entropic distance or only its linear part as the
    training signal. ``ot_label_grad`` lets the OT gradient reach the
    label head too; off by default, since pulling both modalities toward
    each other collapses them onto a single point.

    ``ot_marginals`` is ``'uniform'`` (every row and column weighs the same)
    or ``'sample'`` (every sample carries ``1/B`` on each side, split evenly
    over its own rows). With multi-label samples only the latter gives each
    disease equal mass on both sides of a batch problem.
    """

    epsilon: float = DEFAULT_EPSILON
    ot_iters: int = DEFAULT_ITERS
    ot_tol: float = DEFAULT_TOL
    lam: float = DEFAULT_LAMBDA
    lr: float = DEFAULT_LR
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    embed_dim: int = 64
    lora_rank: int = 4
    ot_scope: str = "batch"
    ot_term: str = "full"
    ot_label_grad: bool = False
    ot_marginals: str = "uniform"
    eval_every: int = 1
    probe: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if isinstance(self.probe, dict):
            self.probe = ClassifierConfig(**self.probe)
        if not self.epsilon > 0:
            raise RejectedInputError("epsilon must be positive")
        if self.ot_iters < 0 or self.ot_tol < 0:
            raise RejectedInputError("ot_iters and ot_tol must be nonnegative")
        if self.lam < 0 or self.lr < 0 or self.epochs < 0:
            raise RejectedInputError("lambda, lr and epochs must be nonnegative")
        if self.batch_size < 1 or self.embed_dim < 1 or self.lora_rank < 1:
            raise RejectedInputError("batch_size, embed_dim and lora_rank must be positive")
        if self.ot_scope not in ("batch", "sample"):
            raise RejectedInputError(f"unknown ot_scope {self.ot_scope!r}")
        if self.ot_term not in ("full", "linear"):
            raise RejectedInputError(f"unknown ot_term {self.ot_term!r}")
        if self.ot_marginals not in ("uniform", "sample"):
            raise RejectedInputError(f"unknown ot_marginals {self.ot_marginals!r}")


@dataclass
class TrainState:
    img_head: ProjectionHead
    lbl_head: ProjectionHead
    sentinels: np.ndarray
    generator: ToyGenerator
    encoder: Optional[ProjectionHead] = None

    @classmethod
    def init(cls, data, cfg, encoder=None):
        rng = SeededRng(cfg.seed).child("init")
        d_img = encoder.d_out if encoder is not None else data.config.image_dim
        return cls(
            img_head=ProjectionHead.init(d_img, cfg.embed_dim, rng.child("img-head")),
            lbl_head=ProjectionHead.init(data.config.label_dim, cfg.embed_dim, rng.child("lbl-head")),
            sentinels=init_sentinels(cfg.embed_dim, rng.child("sentinels")),
            generator=ToyGenerator.init(VOCAB_SIZE, cfg.embed_dim, data.max_target_len,
                                        cfg.lora_rank, rng.child("generator")),
            encoder=encoder,
        )

    def groups(self):
        """Parameter arrays keyed by name, for checkpointing."""
        g = {
            "img_head.weight": self.img_head.weight, "img_head.bias": self.img_head.bias,
            "lbl_head.weight": self.lbl_head.weight, "lbl_head.bias": self.lbl_head.bias,
            "sentinels": self.sentinels,
            "generator.base_weight": self.generator.adapter.base_weight,
            "generator.bias": self.generator.bias,
            "generator.lora_a": self.generator.adapter.a,
            "generator.lora_b": self.generator.adapter.b,
        }
        if self.encoder is not None:
            g["encoder.weight"] = self.encoder.weight
            g["encoder.bias"] = self.encoder.bias
        return g

    @classmethod
    def from_groups(cls, g):
        from ..model import LoraAdapter

        adapter = LoraAdapter(g["generator.base_weight"], g["generator.lora_a"], g["generator.lora_b"])
        dim = g["sentinels"].shape[1]
        gen = ToyGenerator(adapter, g["generator.bias"], dim, adapter.base_weight.shape[1] - dim)
        enc = None
        if "encoder.weight" in g:
            enc = ProjectionHead(g["encoder.weight"], g["encoder.bias"])
        return cls(ProjectionHead(g["img_head.weight"], g["img_head.bias"]),
                   ProjectionHead(g["lbl_head.weight"], g["lbl_head.bias"]),
                   np.array(g["sentinels"]), gen, enc)


@dataclass
class TrainHistory:
    """Per-epoch records; ``initial`` holds metrics measured before training."""

    epoch: list = field(default_factory=list)
    total: list = field(default_factory=list)
    l_rg: list = field(default_factory=list)
    d_ot: list = field(default_factory=list)
    linear_term: list = field(default_factory=list)
    marginal_violation: list = field(default_factory=list)
    ce_f1: list = field(default_factory=list)
    silhouette: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return [{c: getattr(self, c)[i] for c in HISTORY_COLUMNS} for i in range(len(self))]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for row in self.rows():
                writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def image_features(data, encoder=None):
    """Raw patch rows, passed through ``encoder`` when given. Shape (n, P, d)."""
    if encoder is None:
        return data.image_rows
    n, P, D = data.image_rows.shape
    return project(encoder, data.image_rows.reshape(-1, D)).reshape(n, P, -1)


def projected_image_features(state, data):
    X = image_features(data, state.encoder)
    n, P, D = X.shape
    return project(state.img_head, X.reshape(-1, D)).reshape(n, P, -1)


def pooled_features(state, data):
    """Mean of the projected patch rows of every sample. Shape (n, embed_dim)."""
    return projected_image_features(state, data).mean(axis=1)


def projected_silhouette(state, data, indices=None):
    """Silhouette of projected patch rows, clustered by the disease behind each patch."""
    feats = projected_image_features(state, data)
    dis = data.patch_disease
    if indices is not None:
        feats, dis = feats[indices], dis[indices]
    return silhouette(feats.reshape(-1, feats.shape[-1]), dis.reshape(-1))


def _cost_grads(PX, PY, plan, C):
    """Gradient of ``<plan, C>`` w.r.t. both point sets, plan held fixed."""
    W = np.divide(plan, C, out=np.zeros_like(plan), where=C > 0)
    gX = W.sum(axis=1)[:, None] * PX - W @ PY
    gY = W.sum(axis=0)[:, None] * PY - W.T @ PX
    return gX, gY


def _solve(C, cfg, u=None, v=None):
    res = sinkhorn(OtProblem(C, u, v, epsilon=cfg.epsilon, max_iters=cfg.ot_iters, tol=cfg.ot_tol))
    value = res.distance if cfg.ot_term == "full" else res.linear_term
    return res, value


def _alignment_step(state, X_all, data, idx, cfg):
    """Loss terms and gradients for one batch. Returns ``(stats, grads)``."""
    B = len(idx)
    P, D = X_all.shape[1], X_all.shape[2]
    X = X_all[idx].reshape(-1, D)
    Y = np.vstack([data.label_rows[i] for i in idx])
    counts = [len(data.label_rows[i]) for i in idx]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    PX = project(state.img_head, X)
    PY = project(state.lbl_head, Y)

    gPX_ot = np.zeros_like(PX)
    gPY_ot = np.zeros_like(PY)
    if cfg.ot_scope == "batch":
        C = pairwise_euclidean(PX, PY)
        u = v = None
        if cfg.ot_marginals == "sample":
            u = np.full(B * P, 1.0 / (B * P))
            v = np.concatenate([np.full(k, 1.0 / (B * k)) for k in counts])
            v /= v.sum()
        res, d_ot = _solve(C, cfg, u, v)
        gPX_ot, gPY_ot = _cost_grads(PX, PY, res.plan, C)
        viol, linear = res.marginal_violation, res.linear_term
    else:
        d_ot = linear = viol = 0.0
        for s in range(B):
            xs = slice(s * P, (s + 1) * P)
            ys = slice(offsets[s], offsets[s + 1])
            C = pairwise_euclidean(PX[xs], PY[ys])
            res, val = _solve(C, cfg)
            gx, gy = _cost_grads(PX[xs], PY[ys], res.plan, C)
            gPX_ot[xs] += gx / B
            gPY_ot[ys] += gy / B
            d_ot += val / B
            linear += res.linear_term / B
            viol = max(viol, res.marginal_violation)

    gen = state.generator
    gPX_rg = np.zeros_like(PX)
    gPY_rg = np.zeros_like(PY)
    g_sent = np.zeros_like(state.sentinels)
    g_a = np.zeros_like(gen.adapter.a)
    g_b = np.zeros_like(gen.adapter.b)
    l_rg = 0.0
    for s, i in enumerate(idx):
        xs = slice(s * P, (s + 1) * P)
        ys = slice(offsets[s], offsets[s + 1])
        fused = fuse_prompt(PX[xs], PY[ys], state.sentinels)
        target = data.tokens[i][1:]
        logits, Z = generator_logits(gen, fused, len(target))
        nll = report_nll_logits(logits, target)
        g = generator_backward(gen, fused, Z, nll.gradients["logits"])
        gi, gl, gs = fuse_backward(P, g["input"])
        gPX_rg[xs] += gi / B
        gPY_rg[ys] += gl / B
        g_sent += gs / B
        g_a += g["a"] / B
        g_b += g["b"] / B
        l_rg += nll.value / B

    gi = project_backward(state.img_head, X, gPX_rg + cfg.lam * gPX_ot)
    gl = project_backward(state.lbl_head, Y, gPY_rg + cfg.lam * gPY_ot if cfg.ot_label_grad else gPY_rg)
    grads = {
        "img_head.weight": gi["weight"], "img_head.bias": gi["bias"],
        "lbl_head.weight": gl["weight"], "lbl_head.bias": gl["bias"],
        "sentinels": g_sent, "lora_a": g_a, "lora_b": g_b,
    }
    stats = {"total": total_loss(l_rg, d_ot, cfg.lam), "l_rg": l_rg, "d_ot": d_ot,
             "linear_term": linear, "marginal_violation": viol}
    return stats, grads


def _apply(state, grads, lr):
    state.img_head.weight = state.img_head.weight - lr * grads["img_head.weight"]
    state.img_head.bias = state.img_head.bias - lr * grads["img_head.bias"]
    state.lbl_head.weight = state.lbl_head.weight - lr * grads["lbl_head.weight"]
    state.lbl_head.bias = state.lbl_head.bias - lr * grads["lbl_head.bias"]
    state.sentinels = state.sentinels - lr * grads["sentinels"]
    state.generator.adapter.a = state.generator.adapter.a - lr * grads["lora_a"]
    state.generator.adapter.b = state.generator.adapter.b - lr * grads["lora_b"]


def train_alignment(data, cfg=None, encoder=None, splits=None):
    """Jointly train projection heads, sentinels and the generator's LoRA
    factors on ``L_RG + lam * d_OT``.

    ``d_OT`` is solved per batch by Sinkhorn; its gradient reaches the heads
    through the cost matrix only, the plan being held fixed (at the optimum
    this is the exact gradient of the entropic OT value).

    Returns
    -------
    (TrainState, TrainHistory)
        ``history.ce_f1`` is the validation CE F1 of a classifier probe
        trained on the pooled projected features of the training split.
    """
    cfg = cfg or AlignmentConfig()
    rng = SeededRng(cfg.seed)
    train_idx, val_idx, _ = splits or split_indices(len(data), cfg.seed)
    state = TrainState.init(data, cfg, encoder)
    X_all = image_features(data, encoder)
    batches = _batches(train_idx, cfg.batch_size, rng.child("align-batches"))

    def evaluate():
        feats = pooled_features(state, data)
        return {
            "silhouette": projected_silhouette(state, data),
            "ce_f1": probe_ce_f1(feats, data, train_idx, val_idx, cfg.probe),
        }

    history = TrainHistory(initial=evaluate())
    last_eval = history.initial
    for epoch in range(1, cfg.epochs + 1):
        acc = {k: [] for k in ("total", "l_rg", "d_ot", "linear_term", "marginal_violation")}
        for b, idx in enumerate(batches):
            with _diverges(epoch, f"alignment loss (batch {b})"):
                stats, grads = _alignment_step(state, X_all, data, idx, cfg)
            _check_finite(stats["total"], epoch, f"alignment loss (batch {b})")
            for k in acc:
                acc[k].append(stats[k])
            _apply(state, grads, cfg.lr)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            last_eval = evaluate()
        history.epoch.append(epoch)
        for k in ("total", "l_rg", "d_ot", "linear_term"):
            getattr(history, k).append(float(np.mean(acc[k])))
        history.marginal_violation.append(float(np.max(acc["marginal_violation"])))
        history.ce_f1.append(last_eval["ce_f1"])
        history.silhouette.append(last_eval["silhouette"])
        log.debug("align epoch %d total %.5f d_ot %.5f sil %.4f f1 %.4f", epoch,
                  history.total[-1], history.d_ot[-1], history.silhouette[-1], history.ce_f1[-1])
    return state, history


# -- label classifier ----------------------------------------------------------------------

@dataclass
class ClassifierHistory:
    loss: list = field(default_factory=list)
    ce_f1: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)


def _onehots(labels):
    return np.stack([encode_onehot(ls) for ls in labels])


def _standardizer(X, mode):
    """Centre and scale for classifier inputs.

    ``'global'`` divides by one RMS scale so relative geometry is kept;
    ``'per_dim'`` z-scores every column.
    """
    d = X.shape[1]
    if mode == "none":
        return np.zeros(d), np.ones(d)
    mean = X.mean(axis=0)
    if mode == "global":
        rms = float(np.sqrt(np.mean((X - mean) ** 2)))
        return mean, np.full(d, rms if rms > 0 else 1.0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _fold_standardizer(clf, mean, std):
    """Rewrite the first layer so the classifier accepts unstandardised input."""
    first = clf.layers[0]
    w = first.weight / std
    first.weight = w
    first.bias = first.bias - w @ mean


def predict_labels(clf, features):
    """Decode classifier outputs into label sets."""
    probs = classify(clf, np.atleast_2d(features))
    return [decode_onehot(p) for p in probs]


def train_classifier(data, cfg=None, features=None, train_idx=None, eval_idx=None):
    """Fit a :class:`LabelClassifier` from sample features to one-hot labels.

    Parameters
    ----------
    data : Dataset
    cfg : ClassifierConfig
        ``loss='focal'`` uses focal loss with ``cfg.gamma``; ``'ce'`` uses
        plain grouped cross-entropy (identical arithmetic to ``gamma=0``).
    features : array, shape (n, d), optional
        Defaults to the mean raw patch row of each sample.
    train_idx, eval_idx : index arrays, optional
        Default to the seeded train / validation split.

    Returns
    -------
    (LabelClassifier, ClassifierHistory)
    """
    cfg = cfg or ClassifierConfig()
    if features is None:
        features = data.image_rows.mean(axis=1)
    features = np.asarray(features, dtype=np.float64)
    if train_idx is None or eval_idx is None:
        tr, va, _ = split_indices(len(data), cfg.seed)
        train_idx = tr if train_idx is None else train_idx
        eval_idx = va if eval_idx is None else eval_idx
    rng = SeededRng(cfg.seed)
    X = features[train_idx]
    mean, std = _standardizer(X, cfg.standardize)
    X = (X - mean) / std
    targets = _onehots([data.labels[i] for i in train_idx])
    clf = LabelClassifier.init(features.shape[1], rng.child("classifier"), hidden=cfg.hidden)
    batches = _batches(np.arange(len(train_idx)), cfg.batch_size, rng.child("classifier-batches"))
    loss_fn = (lambda z, t: focal_loss_logits(z, t, cfg.gamma)) if cfg.loss == "focal" else cross_entropy_logits

    history = ClassifierHistory()
    eval_truth = [data.labels[i] for i in eval_idx]
    for epoch in range(1, cfg.epochs + 1):
        vals = []
        for rows in batches:
            logits, cache = classifier_logits(clf, X[rows])
            with _diverges(epoch, "classifier loss"):
                lv = loss_fn(logits, targets[rows])
            _check_finite(lv.value, epoch, "classifier loss")
            vals.append(lv.value)
            g = classifier_backward(clf, cache, lv.gradients["logits"])
            for li, layer in enumerate(clf.layers):
                layer.weight = layer.weight - cfg.lr * g[f"l{li}.weight"]
                layer.bias = layer.bias - cfg.lr * g[f"l{li}.bias"]
        history.loss.append(float(np.mean(vals)))
        if len(eval_idx):
            Xe = (features[eval_idx] - mean) / std
            pred = [decode_onehot(p) for p in classify(clf, Xe)]
            history.ce_f1.append(ce_metrics(pred, eval_truth).f1)
    if cfg.standardize != "none":
        _fold_standardizer(clf, mean, std)
    return clf, history


def probe_ce_f1(features, data, train_idx, eval_idx, cfg=None):
    """Held-out CE F1 of a classifier trained on ``features[train_idx]``."""
    cfg = cfg or ClassifierConfig()
    clf, _ = train_classifier(data, cfg, features, train_idx, eval_idx[:0])
    pred = predict_labels(clf, features[eval_idx])
    return ce_metrics(pred, [data.labels[i] for i in eval_idx]).f1
