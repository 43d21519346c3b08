"""``embedlab`` command-line interface.

Every subcommand writes one JSON report (to ``--out`` or stdout) holding the
tool version, an echo of the configuration, the seed, the bootstrap replicate
count and the results. Exit status is 0 on success, 1 on a domain or I/O
error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import concepts as cpt
from . import metrics
from . import objectives as obj
from . import probe as prb
from . import retrieval as ret
from . import sae as sae_mod
from . import store
from . import survival as surv
from . import zeroshot as zs
from ._validation import resolve_threads
from .exceptions import DataError, EmbedlabError, FormatError, ManifestError, ShapeError

# Config keys that never influence results and so stay out of the echo.
_NOT_ECHOED = {"func", "threads", "out", "no_timestamp"}


# --------------------------------------------------------------------------
# Report plumbing


def _plain(x):
    """Convert numpy scalars/arrays and non-finite floats into JSON values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, Path):
        return str(x)
    return x


def load_report_schema() -> dict:
    """The JSON schema every report conforms to."""
    text = resources.files("embedlab").joinpath("schemas/report.schema.json").read_text("utf-8")
    return json.loads(text)


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_ECHOED}


def build_report(args, results, wall_time):
    report = {
        "tool": "embedlab",
        "version": __version__,
        "command": args.command_path,
        "config": _config_echo(args),
        "seed": args.seed,
        "n_boot": args.bootstrap,
        "results": results,
    }
    if not args.no_timestamp:
        report["wall_time_s"] = wall_time
        report["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return _plain(report)


def write_report(report, out):
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def write_curve(path, rows):
    """Tidy curve CSV with columns ``series,x,y,lo,hi``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "x", "y", "lo", "hi"])
        for series, x, y, lo, hi in rows:
            w.writerow([series, repr(float(x)), repr(float(y)), _cell(lo), _cell(hi)])


def _cell(v):
    return "" if v is None else repr(float(v))


# --------------------------------------------------------------------------
# Argument helpers


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _c_value(text):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("C must be 'auto' or a positive number") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("C must be positive")
    return v


def _common(bootstrap=True):
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--out", default=None, help="report path (default: stdout)")
    g.add_argument("--seed", type=int, default=42, help="master seed (default 42)")
    if bootstrap:
        g.add_argument("--bootstrap", type=int, default=1000, metavar="N",
                       help="bootstrap replicates (default 1000, 0 disables CIs)")
    g.add_argument("--threads", type=int, default=None,
                   help="worker threads (default $EMBEDLAB_THREADS or all cores)")
    g.add_argument("--no-timestamp", action="store_true",
                   help="omit wall time and timestamp for byte-stable reports")
    if not bootstrap:
        p.set_defaults(bootstrap=0)
    return p


def _threads(args):
    return resolve_threads(args.threads)


def _entry(fn, *arrays, args):
    """Point estimate with a bootstrap CI, or the bare point when disabled."""
    if args.bootstrap <= 0:
        return {"point": float(fn(*arrays))}
    return metrics.bootstrap_ci(
        fn, *arrays, n_boot=args.bootstrap, seed=args.seed, threads=_threads(args)
    ).to_dict()


# --------------------------------------------------------------------------
# Classification metric battery shared by zeroshot, probe, stats, concepts


def _classification_battery(y_true, y_pred, probs, args, wanted=None):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    binary = probs is not None and probs.shape[1] == 2
    names = wanted or (["bacc", "wf1", "mf1", "auroc", "sens"] if binary else ["bacc", "wf1", "mf1", "auroc"])
    idx = np.arange(y_true.size)
    out = {}
    for name in names:
        if name == "bacc":
            fn = lambda i: metrics.balanced_accuracy(y_true[i], y_pred[i])
        elif name == "acc":
            fn = lambda i: float(np.mean(y_true[i] == y_pred[i]))
        elif name == "wf1":
            fn = lambda i: metrics.f1_scores(y_true[i], y_pred[i])[0]
        elif name == "mf1":
            fn = lambda i: metrics.f1_scores(y_true[i], y_pred[i])[1]
        elif name == "sens":
            fn = lambda i: metrics.sensitivity(y_true[i], y_pred[i], positive=1)
        elif name == "auroc":
            if probs is None:
                raise DataError("auroc needs probability or score columns")
            if binary:
                fn = lambda i: metrics.auroc(probs[i, 1], y_true[i] == 1)
            else:
                fn = lambda i: metrics.multiclass_auroc(probs[i], y_true[i])
        else:
            raise DataError(f"unknown metric {name!r}")
        out[name] = _entry(fn, idx, args=args)
    return out


# --------------------------------------------------------------------------
# store: convert / validate


def cmd_convert(args):
    src, dst = Path(args.input), Path(args.output)
    if src.suffix.lower() == ".csv":
        ids, m = store.load_embeddings_csv(src)
    else:
        m = store.load_embeddings(src)
        ids = None
    if dst.suffix.lower() == ".csv":
        store.save_embeddings_csv(dst, m, ids)
    else:
        store.save_embeddings(dst, m)
    return {"rows": m.rows, "dim": m.dim, "output": str(dst)}


def cmd_validate(args):
    m = store.read_matrix(args.input)
    data = m.data.astype(np.float64)
    finite = bool(np.all(np.isfinite(data)))
    res = {"rows": m.rows, "dim": m.dim, "finite": finite}
    if finite and m.rows:
        dev = np.abs(np.linalg.norm(data, axis=1) - 1.0)
        res["max_norm_deviation"] = float(dev.max())
        res["unit_norm"] = bool(dev.max() <= store.UNIT_TOL)
    if not finite:
        raise DataError(f"{args.input}: matrix contains NaN or infinite values")
    if args.normalized and not res["unit_norm"]:
        raise DataError(f"{args.input}: rows are not unit-norm within {store.UNIT_TOL}")
    if args.manifest:
        man = store.load_manifest(args.manifest)
        if len(man.ids) != m.rows:
            raise ManifestError(f"manifest has {len(man.ids)} ids for {m.rows} rows")
        res["manifest_rows"] = len(man.ids)
        res["n_classes"] = man.n_classes
    return res


# --------------------------------------------------------------------------
# zeroshot


def _class_embedding_file(directory, name, index):
    for stem in (name, str(index)):
        for ext in (".emb", ".csv"):
            p = Path(directory) / f"{stem}{ext}"
            if p.exists():
                return p
    raise FileNotFoundError(f"no embedding file for class {name!r} in {directory}")


def cmd_zeroshot(args):
    man = store.load_manifest(args.manifest)
    if not man.class_names:
        raise ManifestError("manifest needs class_names")
    images = store.read_matrix(args.images)
    if images.rows != len(man.ids):
        raise ManifestError(f"manifest has {len(man.ids)} ids for {images.rows} image rows")
    per_class = [
        store.read_matrix(_class_embedding_file(args.class_emb_dir, n, i))
        for i, n in enumerate(man.class_names)
    ]
    protos = zs.build_prototypes(per_class, man.class_names, renorm=args.renorm_proto)
    rows = np.arange(images.rows) if args.split is None else man.rows_in_split(args.split)
    X = images.data[rows]
    probs, pred = zs.classify(X, protos, zs.ZeroShotConfig(args.tau), threads=_threads(args))
    res = {
        "n": int(rows.size),
        "class_names": list(man.class_names),
        "templates_per_class": [m.rows for m in per_class],
    }
    if man.labels is not None:
        y = man.label_array()[rows]
        res["metrics"] = _classification_battery(y, pred, probs, args)
    if args.pred_out:
        _write_predictions(args.pred_out, [man.ids[i] for i in rows], pred, probs,
                           None if man.labels is None else man.label_array()[rows])
    return res


def _write_predictions(path, ids, pred, probs, y_true=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["id"] + (["y_true"] if y_true is not None else []) + ["y_pred"]
        head += [f"prob_{c}" for c in range(probs.shape[1])]
        w.writerow(head)
        for r, i in enumerate(ids):
            row = [i] + ([int(y_true[r])] if y_true is not None else []) + [int(pred[r])]
            w.writerow(row + [repr(float(p)) for p in probs[r]])


# --------------------------------------------------------------------------
# retrieve


def cmd_retrieve(args):
    Q = store.read_matrix(args.queries)
    C = store.read_matrix(args.candidates)
    man = store.load_manifest(args.pairs)
    if len(man.ids) != Q.rows:
        raise ManifestError(f"manifest has {len(man.ids)} ids for {Q.rows} query rows")
    matches = man.pairing(C.rows)
    ks = sorted(set(args.k))
    results = ret.retrieve(Q, C, max(ks), matches=matches, threads=_threads(args))
    ranks = ret.match_ranks(results)
    idx = np.arange(ranks.size)
    recall = {
        f"R@{k}": _entry(lambda i, k=k: ret.recall_at_k(ranks[i], k), idx, args=args) for k in ks
    }
    return {
        "n_queries": Q.rows,
        "n_candidates": C.rows,
        "recall": recall,
        "mean_recall": ret.mean_recall(ranks, ks),
        "median_rank": float(np.median(ranks)),
        "mean_rank": float(np.mean(ranks)),
    }


# --------------------------------------------------------------------------
# probe


def _probe_data(args, man):
    labels = man.label_array()
    tr = store.read_matrix(args.train).data
    if args.test:
        te = store.read_matrix(args.test).data
        if labels.size != tr.shape[0] + te.shape[0]:
            raise ManifestError(
                f"manifest has {labels.size} labels; expected {tr.shape[0]} train + {te.shape[0]} test rows"
            )
        return tr, labels[: tr.shape[0]], te, labels[tr.shape[0]:]
    if labels.size != tr.shape[0]:
        raise ManifestError(f"manifest has {labels.size} labels for {tr.shape[0]} rows")
    a, b = man.rows_in_split("train"), man.rows_in_split("test")
    if a.size == 0 or b.size == 0:
        raise ManifestError("split tags must mark both train and test rows")
    return tr[a], labels[a], tr[b], labels[b]


def cmd_probe(args):
    man = store.load_manifest(args.manifest)
    Xtr, ytr, Xte, yte = _probe_data(args, man)
    C = max(man.n_classes, int(max(ytr.max(), yte.max())) + 1)
    runs = {}
    for frac in args.fractions:
        keep = prb.stratified_subsample(ytr, frac, seed=args.seed)
        model = prb.LinearProbe(args.C, max_iter=args.max_iter, normalize=args.normalize)
        model.fit(Xtr[keep], ytr[keep])
        P = np.zeros((Xte.shape[0], C))
        P[:, model.classes_] = model.predict_proba(Xte)
        pred = model.predict(Xte)
        runs[f"{frac:g}"] = {
            "n_train": int(keep.size),
            "l2_strength": float(model.model_.l2_strength),
            "metrics": _classification_battery(yte, pred, P if C > 1 else None, args),
        }
    return {"n_test": int(yte.size), "n_classes": C, "fractions": runs}


# --------------------------------------------------------------------------
# objectives


def _fd_check(f, arrays, grads, h=1e-6):
    """Max relative error between analytic and central-difference gradients."""
    worst = 0.0
    for a, g in zip(arrays, grads):
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(num - g[idx]) / max(1.0, abs(num), abs(g[idx])))
    return worst


def _load_batch(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def _arr(raw, key, path):
    if key not in raw:
        raise FormatError(f"{path}: batch is missing {key!r}")
    a = np.asarray(raw[key], dtype=np.float64)
    return a.reshape(0, 0) if a.size == 0 else a


def cmd_objectives(args):
    raw = _load_batch(args.batch)
    if args.kind == "infonce":
        u, v = _arr(raw, "u", args.batch), _arr(raw, "v", args.batch)
        tau = float(raw.get("tau", args.tau))
        loss, du, dv = obj.infonce_loss(u, v, tau)
        res = {"loss": loss, "tau": tau, "grad_u": du, "grad_v": dv}
        if args.grad_check:
            u, v = u.copy(), v.copy()
            res["grad_check_max_rel_err"] = _fd_check(lambda: obj.infonce_loss(u, v, tau)[0], [u, v], [du, dv])
    else:
        keys = ("student_visible", "teacher_visible", "student_masked", "teacher_masked")
        sv, tv, sm, tm = (_arr(raw, k, args.batch) for k in keys)
        if sm.size == 0:
            sm = sm.reshape(0, sv.shape[1] if sv.ndim == 2 else 0)
            tm = tm.reshape(sm.shape)
        if sv.size == 0:
            sv = sv.reshape(0, sm.shape[1])
            tv = tv.reshape(sv.shape)
        loss, gv, gm = obj.mim_loss(sv, tv, sm, tm)
        res = {"loss": loss, "grad_student_visible": gv, "grad_student_masked": gm}
        if args.grad_check:
            sv, sm = sv.copy(), sm.copy()
            res["grad_check_max_rel_err"] = _fd_check(lambda: obj.mim_loss(sv, tv, sm, tm)[0], [sv, sm], [gv, gm])
    if args.grad_check:
        res["grad_check_passed"] = bool(res["grad_check_max_rel_err"] < 1e-5)
    return res


# --------------------------------------------------------------------------
# sae


def cmd_sae_train(args):
    X = store.read_matrix(args.data)
    cfg = sae_mod.SaeTrainConfig(
        l1_coef=args.l1, expansion=args.expansion, learning_rate=args.lr,
        batch_size=args.batch_size, n_epochs=args.epochs, seed=args.seed,
        bias=args.bias, center=args.center,
    )
    model, curve = sae_mod.sae_train(X, cfg)
    model = sae_mod.as_float32(model)
    sae_mod.save_sae(args.model_out, model)
    A = sae_mod.sae_encode(model, X)
    if args.curve:
        write_curve(args.curve, [("loss", e + 1, v, None, None) for e, v in enumerate(curve)])
    return {
        "d": model.d,
        "m": model.m,
        "loss_curve": curve,
        "reconstruction_mse": sae_mod.reconstruction_mse(model, X),
        "zero_fraction": float(np.mean(A == 0)),
    }


def cmd_sae_encode(args):
    model = sae_mod.load_sae(args.model)
    A = sae_mod.sae_encode(model, store.read_matrix(args.data))
    store.save_embeddings(args.output, store.EmbeddingMatrix(A))
    return {"rows": A.shape[0], "m": model.m, "zero_fraction": float(np.mean(A == 0))}


def cmd_sae_decode(args):
    model = sae_mod.load_sae(args.model)
    R = sae_mod.sae_decode(model, store.read_matrix(args.latents))
    store.save_embeddings(args.output, store.EmbeddingMatrix(R))
    return {"rows": R.shape[0], "d": model.d}


# --------------------------------------------------------------------------
# concepts


def _labels_for(path, n):
    y = store.load_manifest(path).label_array()
    if y.size != n:
        raise ManifestError(f"manifest has {y.size} labels for {n} rows")
    return y


def _load_classifier(path):
    try:
        return cpt.SparseLinearModel.from_dict(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a concept classifier ({exc})") from None


def _suppress_set(args, sae):
    idx = list(args.suppress or [])
    if getattr(args, "artifacts", None):
        A = store.read_matrix(args.artifacts)
        idx += cpt.find_artifact_neurons(sae, A, k=args.k, statistic=args.statistic).tolist()
    return sorted(set(idx))


def _cbm_metrics(p, y, args):
    y = np.asarray(y)
    if p.ndim == 1:
        pred = (p >= 0.5).astype(np.int64)
        P = np.column_stack([1 - p, p])
    else:
        pred = np.argmax(p, axis=1)
        P = p / p.sum(axis=1, keepdims=True)
    return _classification_battery(y, pred, P, args, wanted=["auroc", "bacc"])


def cmd_concepts_filter(args):
    if args.latents:
        A = store.read_matrix(args.latents).data.astype(np.float64)
    else:
        if not (args.sae and args.data):
            raise DataError("filter needs --latents or both --sae and --data")
        A = sae_mod.sae_encode(sae_mod.load_sae(args.sae), store.read_matrix(args.data))
    y = _labels_for(args.manifest, A.shape[0])
    clf = cpt.fit_concept_filter(A, y, alpha=args.alpha, lr=args.lr, n_epochs=args.epochs,
                                 batch_size=args.batch_size, seed=args.seed)
    if args.model_out:
        Path(args.model_out).write_text(json.dumps(_plain(clf.to_dict()), sort_keys=True) + "\n")
    return {"alpha": clf.alpha, "support": clf.support, "n_support": int(clf.support.size),
            "m": int(A.shape[1])}


def cmd_concepts_name(args):
    sae = sae_mod.load_sae(args.sae)
    if args.concepts is not None:
        retained = args.concepts
    elif args.classifier:
        retained = _load_classifier(args.classifier).support.tolist()
    else:
        raise DataError("name needs --concepts or --classifier")
    vocab = store.load_vocabulary(args.terms, args.term_emb)
    assignment = cpt.name_concepts(sae, retained, vocab)
    pairs = assignment.to_json()
    if args.assign_out:
        Path(args.assign_out).write_text(json.dumps(pairs) + "\n")
    return {"assignments": pairs, "total_similarity": assignment.total_similarity}


def cmd_concepts_cbm(args):
    sae = sae_mod.load_sae(args.sae)
    clf = _load_classifier(args.classifier)
    X = store.read_matrix(args.data)
    suppress = _suppress_set(args, sae)
    p = cpt.cbm_predict(sae, clf, X, suppress=suppress)
    res = {"n": X.rows, "suppressed": suppress, "n_support": int(clf.support.size)}
    if args.manifest:
        res["metrics"] = _cbm_metrics(p, _labels_for(args.manifest, X.rows), args)
    if args.pred_out:
        P = np.column_stack([1 - p, p]) if p.ndim == 1 else p
        _write_predictions(args.pred_out, [str(i) for i in range(X.rows)], np.argmax(P, axis=1), P)
    return res


def cmd_concepts_artifact_neurons(args):
    sae = sae_mod.load_sae(args.sae)
    A = store.read_matrix(args.artifacts)
    top = cpt.find_artifact_neurons(sae, A, k=args.k, statistic=args.statistic)
    scores = cpt.latent_scores(sae, A, args.statistic)
    return {"statistic": args.statistic, "neurons": top, "scores": scores[top]}


def cmd_concepts_intervene(args):
    sae = sae_mod.load_sae(args.sae)
    X = store.read_matrix(args.data)
    suppress = _suppress_set(args, sae)
    edited = cpt.intervene(sae, suppress, X)
    if args.output:
        store.save_embeddings(args.output, store.EmbeddingMatrix(edited))
    res = {"rows": X.rows, "suppressed": suppress}
    if args.classifier and args.manifest:
        clf = _load_classifier(args.classifier)
        y = _labels_for(args.manifest, X.rows)
        res["before"] = _cbm_metrics(cpt.cbm_predict(sae, clf, X), y, args)
        res["after"] = _cbm_metrics(cpt.cbm_predict(sae, clf, X, suppress=suppress), y, args)
    return res


# --------------------------------------------------------------------------
# stats


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = reader.fieldnames or []
    if not rows:
        raise FormatError(f"{path}: no rows")
    return cols, rows


def _pred_table(path):
    cols, rows = _read_csv(path)
    if "y_true" not in cols:
        raise FormatError(f"{path}: missing column 'y_true'")
    try:
        y = np.array([int(float(r["y_true"])) for r in rows])
        pcols = sorted((c for c in cols if c.startswith("prob_")), key=lambda c: int(c[5:]))
        if pcols:
            P = np.array([[float(r[c]) for c in pcols] for r in rows])
        elif "score" in cols:
            s = np.array([float(r["score"]) for r in rows])
            P = np.column_stack([1 - s, s])
        else:
            P = None
        if "y_pred" in cols:
            pred = np.array([int(float(r["y_pred"])) for r in rows])
        elif P is not None:
            pred = np.argmax(P, axis=1)
        else:
            raise FormatError(f"{path}: needs y_pred, prob_* or score columns")
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return y, pred, P


def cmd_stats(args):
    if args.pred is None:
        raise DataError("stats needs --pred (or the 'paired' mode)")
    y, pred, P = _pred_table(args.pred)
    return {"n": int(y.size), "metrics": _classification_battery(y, pred, P, args, wanted=args.metrics)}


def _paired_values(path, column):
    cols, rows = _read_csv(path)
    if column not in cols:
        raise FormatError(f"{path}: missing column {column!r}")
    try:
        vals = [float(r[column]) for r in rows]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    ids = [r["id"] for r in rows] if "id" in cols else None
    return ids, np.array(vals)


def cmd_stats_paired(args):
    ids_a, a = _paired_values(args.pre, args.column)
    ids_b, b = _paired_values(args.post, args.column)
    if args.test != "welch":
        if ids_a is not None and ids_b is not None:
            pos = {k: i for i, k in enumerate(ids_a)}
            if set(pos) != set(ids_b) or len(pos) != len(ids_b):
                raise DataError("pre and post ids do not match one-to-one")
            a = a[[pos[k] for k in ids_b]]
        elif a.size != b.size:
            raise ShapeError(f"pre has {a.size} values, post has {b.size}")
    # post versus pre: "greater" asks whether post exceeds pre
    if args.test == "wilcoxon":
        stat, p = metrics.wilcoxon_signed_rank(b, a, alternative=args.alternative)
        name = "W_plus"
    elif args.test == "paired-t":
        stat, p = metrics.paired_t_test(b, a, alternative=args.alternative)
        name = "t"
    else:
        stat, p = metrics.welch_t_test(b, a, alternative=args.alternative)
        name = "t"
    return {
        "test": args.test,
        "alternative": args.alternative,
        "n_pre": int(a.size),
        "n_post": int(b.size),
        "mean_pre": float(a.mean()),
        "mean_post": float(b.mean()),
        name: float(stat),
        "p_value": float(p),
    }


# --------------------------------------------------------------------------
# survival


def _groups(recs, args):
    """Two labelled groups: the ``group`` column, else a risk split."""
    if recs.group is not None and not args.risk_split:
        names = sorted(set(recs.group.tolist()))
        return [(n, recs.group == n) for n in names], None
    if recs.risk is None:
        raise DataError("records need a 'group' or 'risk' column to form groups")
    high, thr = surv.median_split(recs.risk, args.threshold)
    return [("low_risk", ~high), ("high_risk", high)], thr


def cmd_survival_km(args):
    recs = surv.load_records(args.data)
    groups, thr = _groups(recs, args) if (recs.group is not None or recs.risk is not None) else (
        [("all", np.ones(len(recs), dtype=bool))], None)
    out, curve = {}, []
    for name, mask in groups:
        if not mask.any():
            continue
        km = surv.kaplan_meier(recs.time[mask], recs.event[mask])
        lo, hi = km.confidence_band()
        entry = {"n": int(mask.sum()), "events": int(recs.event[mask].sum()),
                 "times": km.times, "survival": km.survival, "ci_lo": lo, "ci_hi": hi}
        if args.horizons:
            entry["at_horizons"] = {f"{h:g}": km(h) for h in args.horizons}
        out[str(name)] = entry
        curve.append((name, 0.0, 1.0, 1.0, 1.0))
        curve.extend((name, t, s, l_, h_) for t, s, l_, h_ in zip(km.times, km.survival, lo, hi))
    if args.curve:
        write_curve(args.curve, curve)
    res = {"groups": out}
    if thr is not None:
        res["threshold"] = thr
    return res


def cmd_survival_logrank(args):
    recs = surv.load_records(args.data)
    groups, thr = _groups(recs, args)
    if len(groups) != 2:
        raise DataError(f"log-rank needs exactly two groups, found {len(groups)}")
    (na, ma), (nb, mb) = groups
    chi2, p = surv.log_rank(recs.time[ma], recs.event[ma], recs.time[mb], recs.event[mb])
    res = {"groups": [str(na), str(nb)], "n": [int(ma.sum()), int(mb.sum())], "chi2": chi2, "p_value": p}
    if thr is not None:
        res["threshold"] = thr
    return res


def cmd_survival_cox(args):
    recs = surv.load_records(args.data)
    X, names = recs.covariates, list(recs.covariate_names)
    if args.include_risk:
        if recs.risk is None:
            raise DataError("--include-risk needs a 'risk' column")
        X = np.column_stack([recs.risk, X])
        names = ["risk"] + names
    if X.shape[1] == 0:
        raise DataError("no covariates: add cov_* columns or --include-risk")
    fit = surv.cox_fit(X, recs.time, recs.event, ties=args.ties, covariate_names=tuple(names))
    res = fit.to_dict()
    res["ties"] = args.ties
    res["n"] = len(recs)
    res["events"] = int(recs.event.sum())
    return res


def cmd_survival_tdroc(args):
    recs = surv.load_records(args.data)
    if recs.risk is None:
        raise DataError("time-dependent ROC needs a 'risk' column")
    idx = np.arange(len(recs))
    out, curve = {}, []
    for h in args.horizons:
        fn = lambda i, h=h: surv.time_dependent_auc(recs.time[i], recs.event[i], recs.risk[i], h,
                                                     ipcw=not args.no_ipcw)
        e = _entry(fn, idx, args=args)
        out[f"{h:g}"] = e
        curve.append(("auc", h, e["point"], e.get("ci_lo"), e.get("ci_hi")))
    if args.curve:
        write_curve(args.curve, curve)
    return {"ipcw": not args.no_ipcw, "auc": out}


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embedlab", description="Evaluation and interpretability tools for image-text embeddings.")
    parser.add_argument("--version", action="version", version=f"embedlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    nb = _common(bootstrap=False)
    wb = _common(bootstrap=True)

    p = sub.add_parser("convert", parents=[nb], help="convert between CSV and binary embeddings")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("validate", parents=[nb], help="check an embedding file (and manifest)")
    p.add_argument("--input", required=True)
    p.add_argument("--normalized", action="store_true", help="require unit-norm rows")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("zeroshot", parents=[wb], help="prompt-ensemble zero-shot classification")
    p.add_argument("--images", required=True)
    p.add_argument("--class-emb-dir", required=True,
                   help="directory of <class_name>.emb (or <index>.emb) template embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--renorm-proto", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)
    p.add_argument("--pred-out", default=None, help="write per-row predictions CSV")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("retrieve", parents=[wb], help="cross-modal retrieval Recall@K")
    p.add_argument("--queries", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--pairs", required=True, help="manifest with pair_ids (and optional text_ids)")
    p.add_argument("--k", type=_int_list, default=[5, 10, 50])
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("probe", parents=[wb], help="logistic-regression linear probe")
    p.add_argument("--train", required=True)
    p.add_argument("--test", default=None, help="test rows; otherwise split tags select them")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions", type=_float_list, default=[1.0])
    p.add_argument("--C", type=_c_value, default="auto", help="inverse L2 strength or 'auto' (M*C/100)")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--max-iter", type=int, default=1000)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("objectives", parents=[nb], help="pretraining losses and gradients")
    p.add_argument("--kind", choices=["infonce", "mim"], required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--tau", type=float, default=0.07, help="used when the batch omits tau")
    p.add_argument("--grad-check", action="store_true")
    p.set_defaults(func=cmd_objectives)

    sae_p = sub.add_parser("sae", help="sparse autoencoder")
    sae_sub = sae_p.add_subparsers(dest="action", metavar="ACTION", required=True)
    p = sae_sub.add_parser("train", parents=[nb])
    p.add_argument("--data", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--l1", type=float, default=3e-5)
    p.add_argument("--expansion", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--bias", action="store_true", help="add a pre-encoder bias")
    p.add_argument("--center", action="store_true", help="subtract the training mean")
    p.add_argument("--curve", default=None, help="write the loss curve CSV")
    p.set_defaults(func=cmd_sae_train)
    p = sae_sub.add_parser("encode", parents=[nb])
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sae_encode)
    p = sae_sub.add_parser("decode", parents=[nb])
    p.add_argument("--model", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sae_decode)

    c_p = sub.add_parser("concepts", help="concept discovery, naming and intervention")
    c_sub = c_p.add_subparsers(dest="action", metavar="ACTION", required=True)
    p = c_sub.add_parser("filter", parents=[nb])
    p.add_argument("--latents", default=None)
    p.add_argument("--sae", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--model-out", default=None)
    p.set_defaults(func=cmd_concepts_filter)
    p = c_sub.add_parser("name", parents=[nb])
    p.add_argument("--sae", required=True)
    p.add_argument("--classifier", default=None, help="name the classifier's support")
    p.add_argument("--concepts", type=_int_list, default=None)
    p.add_argument("--terms", required=True)
    p.add_argument("--term-emb", required=True)
    p.add_argument("--assign-out", default=None)
    p.set_defaults(func=cmd_concepts_name)
    for verb, fn in (("cbm", cmd_concepts_cbm), ("intervene", cmd_concepts_intervene)):
        p = c_sub.add_parser(verb, parents=[wb])
        p.add_argument("--sae", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--classifier", required=(verb == "cbm"), default=None)
        p.add_argument("--manifest", default=None)
        p.add_argument("--suppress", type=_int_list, default=None)
        p.add_argument("--artifacts", default=None, help="also suppress the top-k artifact neurons")
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--statistic", choices=["mean", "frequency"], default="mean")
        if verb == "cbm":
            p.add_argument("--pred-out", default=None)
        else:
            p.add_argument("--output", default=None)
        p.set_defaults(func=fn)
    p = c_sub.add_parser("artifact-neurons", parents=[nb])
    p.add_argument("--sae", required=True)
    p.add_argument("--artifacts", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--statistic", choices=["mean", "frequency"], default="mean")
    p.set_defaults(func=cmd_concepts_artifact_neurons)

    p = sub.add_parser("stats", parents=[wb], help="metrics with bootstrap CIs, paired tests")
    p.add_argument("--pred", default=None, help="CSV with y_true and y_pred/prob_*/score")
    p.add_argument("--metrics", type=_str_list, default=["bacc", "wf1", "mf1", "auroc"])
    p.set_defaults(func=cmd_stats)
    s_sub = p.add_subparsers(dest="action", metavar="MODE")
    q = s_sub.add_parser("paired", parents=[nb], help="reader-study pre/post comparison")
    q.add_argument("--pre", required=True)
    q.add_argument("--post", required=True)
    q.add_argument("--column", default="value")
    q.add_argument("--test", choices=["wilcoxon", "paired-t", "welch"], default="wilcoxon")
    q.add_argument("--alternative", choices=["two-sided", "greater", "less"], default="two-sided")
    q.set_defaults(func=cmd_stats_paired)

    sv_p = sub.add_parser("survival", help="Kaplan-Meier, log-rank, Cox, time-dependent ROC")
    sv_sub = sv_p.add_subparsers(dest="action", metavar="ACTION", required=True)
    for verb, fn, boot in (("km", cmd_survival_km, False), ("logrank", cmd_survival_logrank, False),
                           ("cox", cmd_survival_cox, False), ("tdroc", cmd_survival_tdroc, True)):
        p = sv_sub.add_parser(verb, parents=[wb if boot else nb])
        p.add_argument("--data", required=True)
        p.set_defaults(func=fn)
        if verb in ("km", "logrank"):
            p.add_argument("--threshold", type=float, default=None, help="risk cut (default median)")
            p.add_argument("--risk-split", action="store_true", help="split on risk even if groups exist")
        if verb in ("km", "tdroc"):
            p.add_argument("--horizons", type=_float_list, default=[3.0, 5.0, 7.0] if verb == "tdroc" else None)
            p.add_argument("--curve", default=None, help="write curve CSV (series,x,y,lo,hi)")
        if verb == "cox":
            p.add_argument("--ties", choices=["breslow", "efron"], default="breslow")
            p.add_argument("--include-risk", action="store_true", help="use the risk column as a covariate")
        if verb == "tdroc":
            p.add_argument("--no-ipcw", action="store_true")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.command_path = " ".join(x for x in (args.command, getattr(args, "action", None)) if x)
    if args.threads is None and os.environ.get("EMBEDLAB_THREADS"):
        env = os.environ["EMBEDLAB_THREADS"]
        if not env.strip().isdigit() or int(env) < 1:
            sys.stderr.write(f"embedlab: error: EMBEDLAB_THREADS must be a positive integer, got {env!r}\n")
            return 2
    if args.threads is not None and args.threads < 1:
        sys.stderr.write("embedlab: error: --threads must be >= 1\n")
        return 2
    if args.bootstrap < 0:
        sys.stderr.write("embedlab: error: --bootstrap must be >= 0\n")
        return 2
    t0 = time.perf_counter()
    try:
        results = args.func(args)
        report = build_report(args, results, time.perf_counter() - t0)
        write_report(report, args.out)
    except FileNotFoundError as exc:
        sys.stderr.write(f"embedlab: FileNotFound: {exc.filename or exc}\n")
        return 1
    except (EmbedlabError, OSError, ValueError) as exc:
        sys.stderr.write(f"embedlab: {type(exc).__name__}: {exc}\n")
        return 1
    return 0


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
