"""Command-line front end: ``otalign <command> [flags]``.

Commands write machine-readable JSON/CSV into ``--out`` and a short summary
to stderr. Every run records its fully resolved parameters in ``run.json``;
``--from-config run.json`` replays it, with any explicit flag taking
precedence. ``--config FILE`` reads ``key=value`` lines the same way.

Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid input.
"""

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import __version__
from .exceptions import OtAlignError, RejectedInputError
from .labels import ce_metrics, read_label_csv, write_label_csv
from .losses import DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_SIGMA, DEFAULT_TAU
from .model import load_checkpoint, save_checkpoint
from .ot import DEFAULT_EPSILON, DEFAULT_ITERS, DEFAULT_TOL, OtProblem, export_plan, read_cost_csv, sinkhorn
from .pipeline import (
    AlignmentConfig,
    ClassifierConfig,
    SyntheticDatasetConfig,
    TrainState,
    gen_synthetic,
    load_dataset,
    nearest_centroid_accuracy,
    pooled_features,
    pretrain_ircp,
    projected_silhouette,
    save_dataset,
    split_indices,
    sweep_epsilon,
    sweep_iters,
    train_alignment,
    train_classifier,
)
from .pipeline.train import DEFAULT_LR, predict_labels

log = logging.getLogger("otalign")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
RUN_FILE = "run.json"


class _UsageError(Exception):
    pass


# -- argument parsing ----------------------------------------------------------------

def _csv_ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _csv_floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _opt_int(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return int(text)


def _opt_str(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return str(text)


# (flag, dest, type, default, help); a default of ``...`` marks a required value
_TRAIN_FLAGS = [
    ("--seed", "seed", int, 0, "run seed"),
    ("--lambda", "lam", float, DEFAULT_LAMBDA, "weight of the OT term"),
    ("--lr", "lr", float, DEFAULT_LR, "gradient-descent step"),
    ("--epochs", "epochs", int, 30, "alignment epochs"),
    ("--batch-size", "batch_size", int, 32, "samples per batch"),
    ("--embed-dim", "embed_dim", int, 64, "shared embedding width"),
    ("--lora-rank", "lora_rank", int, 4, "rank of the generator adapter"),
    ("--ot-scope", "ot_scope", str, "batch", "batch | sample"),
    ("--ot-term", "ot_term", str, "full", "full | linear"),
    ("--ot-marginals", "ot_marginals", str, "uniform", "uniform | sample"),
    ("--ot-label-grad", "ot_label_grad", _bool, False, "let the OT gradient reach the label head"),
    ("--eval-every", "eval_every", int, 1, "epochs between probe evaluations"),
    ("--gamma", "gamma", float, DEFAULT_GAMMA, "focal exponent of the probe"),
    ("--pretrain-epochs", "pretrain_epochs", int, 0, "contrastive encoder epochs before alignment"),
    ("--tau", "tau", float, DEFAULT_TAU, "contrastive temperature"),
    ("--sigma", "sigma", float, DEFAULT_SIGMA, "std of the positive-pair noise"),
]
_SOLVER_FLAGS = [
    ("--epsilon", "epsilon", float, DEFAULT_EPSILON, "entropic weight"),
    ("--iters", "iters", int, DEFAULT_ITERS, "Sinkhorn iterations t"),
    ("--tol", "tol", float, DEFAULT_TOL, "marginal-violation stopping tolerance"),
]
_CLASSIFIER_FLAGS = [
    ("--seed", "seed", int, 0, "run seed"),
    ("--gamma", "gamma", float, DEFAULT_GAMMA, "focal exponent"),
    ("--lr", "lr", float, 0.5, "gradient-descent step"),
    ("--epochs", "epochs", int, 100, "training epochs"),
    ("--batch-size", "batch_size", int, 32, "samples per batch"),
    ("--hidden", "hidden", _opt_int, None, "hidden width; omit for a linear classifier"),
    ("--loss", "loss", str, "focal", "focal | ce"),
    ("--standardize", "standardize", str, "global", "global | per_dim | none"),
]

COMMANDS = {
    "gen-data": ("Generate a synthetic dataset archive.", [
        ("--out", "out", str, ..., "output directory"),
        ("--samples", "samples", int, 400, "number of samples"),
        ("--seed", "seed", int, 0, "dataset seed"),
        ("--separation", "separation", float, 10.0, "distance between disease centres"),
        ("--spread", "spread", float, 1.0, "patch noise std"),
        ("--image-dim", "image_dim", int, 16, "image feature width"),
        ("--label-dim", "label_dim", int, 16, "label feature width"),
        ("--diseases", "diseases", _csv_ints, [1, 2, 4, 5, 6, 9], "comma-separated disease indices"),
        ("--patches", "patches", int, 4, "patches per image"),
        ("--multi-label-prob", "multi_label_prob", float, 0.3, "chance of a second positive"),
        ("--label-spread", "label_spread", float, 0.1, "label feature noise std"),
        ("--nuisance-dims", "nuisance_dims", int, 4, "directions of per-image nuisance"),
        ("--nuisance-scale", "nuisance_scale", float, 5.0, "std of the nuisance offset"),
    ]),
    "sinkhorn": ("Solve one entropic OT problem from a cost CSV.", [
        ("--cost", "cost", str, ..., "header-less cost grid"),
        ("--out", "out", str, ..., "output directory"),
        *_SOLVER_FLAGS,
        ("--mode", "mode", str, "auto", "auto | kernel | log"),
    ]),
    "train": ("Run OT alignment with report generation.", [
        ("--data", "data", str, ..., "dataset directory"),
        ("--out", "out", str, ..., "output directory"),
        *_SOLVER_FLAGS,
        *_TRAIN_FLAGS,
    ]),
    "classify": ("Train the label classifier on image features.", [
        ("--data", "data", str, ..., "dataset directory"),
        ("--out", "out", str, ..., "output directory"),
        ("--checkpoint", "checkpoint", _opt_str, None, "alignment checkpoint; raw features when omitted"),
        *_CLASSIFIER_FLAGS,
    ]),
    "sweep": ("Train once per Sinkhorn iteration count or entropic weight.", [
        ("--data", "data", str, ..., "dataset directory"),
        ("--out", "out", str, ..., "output directory"),
        ("--iters", "iters", _csv_ints, None, "comma-separated iteration counts"),
        ("--epsilon", "epsilon", _csv_floats, None, "comma-separated entropic weights"),
        ("--tol", "tol", float, DEFAULT_TOL, "stopping tolerance for the epsilon sweep"),
        *_TRAIN_FLAGS,
    ]),
    "eval": ("Score predictions, or probe the features of a trained run.", [
        ("--out", "out", str, ..., "output directory"),
        ("--pred", "pred", _opt_str, None, "predicted labels CSV"),
        ("--truth", "truth", _opt_str, None, "reference labels CSV"),
        ("--data", "data", _opt_str, None, "dataset directory (probe mode)"),
        ("--checkpoint", "checkpoint", _opt_str, None, "alignment checkpoint (probe mode)"),
        ("--split", "split", str, "test", "train | val | test | all"),
        *_CLASSIFIER_FLAGS,
    ]),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="otalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    parser.command_parsers = {}
    for name, (help_text, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           argument_default=argparse.SUPPRESS)
        for flag, dest, typ, default, text in flags:
            shown = "required" if default is ... else f"default {default}"
            p.add_argument(flag, dest=dest, type=typ, help=f"{text} ({shown})")
        p.add_argument("--config", help="key=value file of defaults")
        p.add_argument("--from-config", help=f"replay the parameters of a {RUN_FILE}")
        p.add_argument("-q", "--quiet", action="store_true", help="no summary on stderr")
        parser.command_parsers[name] = p
    return parser


def _read_kv(path, types):
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise RejectedInputError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.lstrip("-").replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in types:
                raise RejectedInputError(f"{path}:{n}: unknown key {key!r}")
            try:
                out[key] = types[key](value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise RejectedInputError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def _read_run(path, command, types):
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RejectedInputError(f"{path}: not JSON ({exc})") from None
    if payload.get("command") != command:
        raise RejectedInputError(f"{path} records command {payload.get('command')!r}, not {command!r}")
    params = payload.get("params", {})
    unknown = set(params) - set(types)
    if unknown:
        raise RejectedInputError(f"{path}: unknown parameters {sorted(unknown)}")
    return dict(params)


def resolve_params(command, ns):
    """Merge defaults, ``--config``, ``--from-config`` and explicit flags."""
    flags = COMMANDS[command][1]
    types = {dest: typ for _, dest, typ, _, _ in flags}
    params = {dest: default for _, dest, _, default, _ in flags}
    given = vars(ns)
    if given.get("config"):
        params.update(_read_kv(given["config"], types))
    if given.get("from_config"):
        params.update(_read_run(given["from_config"], command, types))
    params.update({k: v for k, v in given.items() if k in types})
    missing = [flag for flag, dest, _, _, _ in flags if params[dest] is ...]
    if missing:
        raise _UsageError(f"missing required option(s): {', '.join(missing)}")
    return params


# -- output staging -----------------------------------------------------------------

class _Staging:
    """Collect outputs in a scratch directory and move them into place on success."""

    def __init__(self, out):
        self.out = os.path.abspath(out)
        self.tmp = None

    def __enter__(self):
        parent = os.path.dirname(self.out) or "."
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".otalign-", dir=parent)
        return self

    def path(self, name):
        return os.path.join(self.tmp, name)

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                os.makedirs(self.out, exist_ok=True)
                for name in sorted(os.listdir(self.tmp)):
                    dst = os.path.join(self.out, name)
                    if os.path.isdir(dst):
                        shutil.rmtree(dst)
                    os.replace(os.path.join(self.tmp, name), dst)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _json_params(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(params.items())}


# -- commands -------------------------------------------------------------------------

def _dataset_config(p):
    return SyntheticDatasetConfig(
        num_samples=p["samples"], diseases_active=tuple(p["diseases"]), image_dim=p["image_dim"],
        label_dim=p["label_dim"], cluster_spread=p["spread"], cluster_separation=p["separation"],
        patches_per_image=p["patches"], multi_label_prob=p["multi_label_prob"],
        label_spread=p["label_spread"], nuisance_dims=p["nuisance_dims"],
        nuisance_scale=p["nuisance_scale"], seed=p["seed"],
    )


def _probe_config(p):
    return ClassifierConfig(gamma=p["gamma"], seed=p["seed"], **{
        k: p[k] for k in ("lr", "epochs", "batch_size", "hidden", "loss", "standardize") if k in p
    })


def _alignment_config(p, iters=None, epsilon=None):
    if p["pretrain_epochs"] < 0:
        raise RejectedInputError("pretrain-epochs must be nonnegative")
    if p["sigma"] < 0 or not p["tau"] > 0:
        raise RejectedInputError("sigma must be nonnegative and tau positive")
    if p["eval_every"] < 1:
        raise RejectedInputError("eval-every must be >= 1")
    return AlignmentConfig(
        epsilon=p["epsilon"] if epsilon is None else epsilon,
        ot_iters=p["iters"] if iters is None else iters,
        ot_tol=p["tol"], lam=p["lam"], lr=p["lr"], epochs=p["epochs"],
        batch_size=p["batch_size"], seed=p["seed"], embed_dim=p["embed_dim"],
        lora_rank=p["lora_rank"], ot_scope=p["ot_scope"], ot_term=p["ot_term"],
        ot_marginals=p["ot_marginals"], ot_label_grad=p["ot_label_grad"],
        eval_every=p["eval_every"],
        probe=ClassifierConfig(gamma=p["gamma"], seed=p["seed"]),
    )


def _encoder(data, p):
    if p["pretrain_epochs"] == 0:
        return None
    return pretrain_ircp(data, sigma=p["sigma"], tau=p["tau"], epochs=p["pretrain_epochs"],
                         lr=p["lr"], seed=p["seed"]).encoder


def cmd_gen_data(p, stage):
    cfg = _dataset_config(p)
    data = gen_synthetic(cfg)
    save_dataset(data, stage.tmp)
    acc = nearest_centroid_accuracy(data)
    log.info("gen-data: %d samples, %d patches each, nearest-centroid accuracy %.4f",
             len(data), cfg.patches_per_image, acc)


def cmd_sinkhorn(p, stage):
    if not p["epsilon"] > 0:
        raise RejectedInputError("epsilon must be positive")
    if p["iters"] < 0 or p["tol"] < 0:
        raise RejectedInputError("iters and tol must be nonnegative")
    if p["mode"] not in ("auto", "kernel", "log"):
        raise RejectedInputError(f"unknown mode {p['mode']!r}")
    cost = read_cost_csv(p["cost"])
    res = sinkhorn(OtProblem(cost, epsilon=p["epsilon"], max_iters=p["iters"], tol=p["tol"]),
                   mode=p["mode"])
    n, m = cost.shape
    export_plan(res.plan, [f"r{i}" for i in range(n)], [f"c{j}" for j in range(m)],
                stage.path("plan.csv"))
    _write_json(stage.path("result.json"), {
        "distance": res.distance, "linear_term": res.linear_term,
        "iterations_run": res.iterations_run, "marginal_violation": res.marginal_violation,
        "mode": res.mode,
    })
    log.info("sinkhorn: %dx%d, %s mode, %d iterations, d=%.6g, <T,C>=%.6g, violation %.3g",
             n, m, res.mode, res.iterations_run, res.distance, res.linear_term,
             res.marginal_violation)


def cmd_train(p, stage):
    cfg = _alignment_config(p)
    data = load_dataset(p["data"])
    state, history = train_alignment(data, cfg, encoder=_encoder(data, p))
    history.to_csv(stage.path("history.csv"))
    save_checkpoint(stage.path("checkpoint.json"), state.groups())
    summary = {
        "initial": history.initial,
        "final": history.rows()[-1] if len(history) else {},
        "first_epoch_d_ot": history.d_ot[0] if len(history) else None,
    }
    _write_json(stage.path("metrics.json"), summary)
    if len(history):
        log.info("train: %d epochs, d_OT %.4f -> %.4f, silhouette %.4f -> %.4f, CE F1 %.4f",
                 len(history), history.d_ot[0], history.d_ot[-1],
                 history.initial["silhouette"], history.silhouette[-1], history.ce_f1[-1])


def _features(data, checkpoint):
    if checkpoint is None:
        return data.image_rows.mean(axis=1)
    state = TrainState.from_groups(load_checkpoint(checkpoint))
    return pooled_features(state, data)


def _split(data, seed, name):
    tr, va, te = split_indices(len(data), seed)
    return {"train": tr, "val": va, "test": te, "all": np.arange(len(data))}[name]


def cmd_classify(p, stage):
    cfg = _probe_config(p)
    data = load_dataset(p["data"])
    feats = _features(data, p["checkpoint"])
    tr, va, te = split_indices(len(data), p["seed"])
    clf, hist = train_classifier(data, cfg, feats, tr, va)
    pred = predict_labels(clf, feats)
    write_label_csv(stage.path("predictions.csv"), data.ids, pred)
    save_checkpoint(stage.path("classifier.json"),
                    {f"l{i}.{k}": getattr(layer, k) for i, layer in enumerate(clf.layers)
                     for k in ("weight", "bias")})
    with open(stage.path("history.csv"), "w") as fh:
        fh.write("epoch,loss,ce_f1\n")
        for e, (loss, f1) in enumerate(zip(hist.loss, hist.ce_f1), 1):
            fh.write(f"{e},{loss!r},{f1!r}\n")
    m = ce_metrics([pred[i] for i in te], [data.labels[i] for i in te])
    _write_json(stage.path("metrics.json"), {"split": "test", "precision": m.precision,
                                             "recall": m.recall, "f1": m.f1, "n": int(len(te))})
    log.info("classify: test P=%.4f R=%.4f F1=%.4f over %d samples", m.precision, m.recall, m.f1, len(te))


def cmd_sweep(p, stage):
    if (p["iters"] is None) == (p["epsilon"] is None):
        raise RejectedInputError("give exactly one of --iters and --epsilon")
    values = p["iters"] if p["iters"] is not None else p["epsilon"]
    if not values:
        raise RejectedInputError("the swept list must not be empty")
    run = sweep_iters if p["iters"] is not None else sweep_epsilon
    base = _alignment_config(p, iters=DEFAULT_ITERS, epsilon=DEFAULT_EPSILON)
    table = run(load_dataset(p["data"]), values, base)
    table.to_csv(stage.path("sweep.csv"))
    for row in table.rows:
        log.info("sweep %s=%s: d_OT %.4f, violation %.3g, silhouette %.4f, CE F1 %.4f",
                 table.param, row[table.param], row["d_ot"], row["marginal_violation"],
                 row["silhouette"], row["ce_f1"])


def cmd_eval(p, stage):
    if p["split"] not in ("train", "val", "test", "all"):
        raise RejectedInputError(f"unknown split {p['split']!r}")
    if p["pred"] is not None:
        if p["truth"] is None:
            raise RejectedInputError("--pred needs --truth")
        pid, pred = read_label_csv(p["pred"])
        tid, truth = read_label_csv(p["truth"])
        if pid != tid:
            raise RejectedInputError("prediction and reference ids differ")
        m = ce_metrics(pred, truth)
        out = {"mode": "labels", "precision": m.precision, "recall": m.recall, "f1": m.f1, "n": len(pid)}
    elif p["data"] is not None:
        cfg = _probe_config(p)
        data = load_dataset(p["data"])
        feats = _features(data, p["checkpoint"])
        tr, _, _ = split_indices(len(data), p["seed"])
        idx = _split(data, p["seed"], p["split"])
        clf, _ = train_classifier(data, cfg, feats, tr, idx[:0])
        pred = predict_labels(clf, feats[idx])
        m = ce_metrics(pred, [data.labels[i] for i in idx])
        out = {"mode": "probe", "split": p["split"], "precision": m.precision, "recall": m.recall,
               "f1": m.f1, "n": int(len(idx))}
        if p["checkpoint"] is not None:
            state = TrainState.from_groups(load_checkpoint(p["checkpoint"]))
            out["silhouette"] = projected_silhouette(state, data)
    else:
        raise RejectedInputError("eval needs --pred/--truth or --data")
    _write_json(stage.path("metrics.json"), out)
    log.info("eval: P=%.4f R=%.4f F1=%.4f over %d samples", out["precision"], out["recall"],
             out["f1"], out["n"])


HANDLERS = {
    "gen-data": cmd_gen_data, "sinkhorn": cmd_sinkhorn, "train": cmd_train,
    "classify": cmd_classify, "sweep": cmd_sweep, "eval": cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    del ns.command
    quiet = getattr(ns, "quiet", False)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False
    try:
        params = resolve_params(command, ns)
    except _UsageError as exc:
        parser.command_parsers[command].error(str(exc))
    except RejectedInputError as exc:
        log.error("otalign %s: invalid input: %s", command, exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("otalign %s: %s", command, exc)
        return EXIT_RUNTIME
    try:
        with _Staging(params["out"]) as stage:
            HANDLERS[command](params, stage)
            _write_json(stage.path(RUN_FILE), {"command": command, "version": __version__,
                                               "params": _json_params(params)})
    except RejectedInputError as exc:
        log.error("otalign %s: invalid input: %s", command, exc)
        return EXIT_INVALID
    except (OtAlignError, OSError, ValueError) as exc:
        log.error("otalign %s: %s", command, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
