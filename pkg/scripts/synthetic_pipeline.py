#!/usr/bin/env python3
"""End-to-end synthetic run of every ``embedlab`` subcommand.

Generates a small synthetic dataset, drives the CLI through each module
(store, zeroshot, retrieval, probe, objectives, sae, concepts, stats,
survival) and writes one combined JSON document holding every step's
report. Reports are written without timestamps, so the combined document
is byte-identical across reruns and ``--threads`` settings.

    python scripts/synthetic_pipeline.py --workdir /tmp/run --threads 2
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from embedlab import cli, store

D = 16
CLASSES = ["nevus", "melanoma", "keratosis"]
N_IMAGES = 240
N_TEMPLATES = 7


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_data(workdir: Path, seed: int = 7) -> None:
    rng = np.random.default_rng(seed)
    C = len(CLASSES)
    centers = _unit(rng.normal(size=(C, D)))
    labels = np.arange(N_IMAGES) % C
    images = _unit(centers[labels] + 0.35 * rng.normal(size=(N_IMAGES, D)))
    captions = _unit(images + 0.25 * rng.normal(size=images.shape))
    ids = [f"img{i:03d}" for i in range(N_IMAGES)]
    cap_ids = [f"cap{i:03d}" for i in range(N_IMAGES)]
    # caption rows are stored shuffled; pair_ids carries the link
    perm = rng.permutation(N_IMAGES)
    store.save_embeddings_csv(workdir / "images.csv", images, ids)
    store.save_embeddings(workdir / "captions.emb", captions[perm])
    split = ["train" if i < 160 else "test" for i in range(N_IMAGES)]
    store.save_manifest(
        workdir / "manifest.json",
        store.DatasetManifest(
            ids=ids,
            labels=labels.tolist(),
            class_names=CLASSES,
            split=split,
            pair_ids=cap_ids,
            text_ids=[cap_ids[j] for j in perm],
        ),
    )
    protos = workdir / "protos"
    protos.mkdir(exist_ok=True)
    for c, name in enumerate(CLASSES):
        t = _unit(centers[c] + 0.3 * rng.normal(size=(N_TEMPLATES, D)))
        store.save_embeddings(protos / f"{name}.emb", t)

    # binary concept task with a label-correlated artifact direction
    art = _unit(rng.normal(size=D))
    y_bin = (labels == 1).astype(int)
    X_bin = images + 0.6 * np.outer(y_bin, art)
    store.save_embeddings(workdir / "concept_x.emb", X_bin)
    store.save_manifest(
        workdir / "concept_manifest.json",
        store.DatasetManifest(ids=ids, labels=y_bin.tolist(), class_names=["benign", "malignant"]),
    )
    store.save_embeddings(workdir / "artifacts.emb", images[:40] + 1.5 * art)
    terms = store.load_demo_terms()
    terms += [f"filler term {i}" for i in range(64 - len(terms))]
    (workdir / "terms.txt").write_text("\n".join(terms) + "\n")
    store.save_embeddings(workdir / "terms.emb", _unit(rng.normal(size=(len(terms), D))))

    batch = {"u": _unit(rng.normal(size=(4, 8))).tolist(), "v": _unit(rng.normal(size=(4, 8))).tolist(), "tau": 0.07}
    (workdir / "infonce.json").write_text(json.dumps(batch))
    mim = {
        "student_visible": rng.normal(size=(3, 6)).tolist(),
        "teacher_visible": rng.normal(size=(3, 6)).tolist(),
        "student_masked": rng.normal(size=(2, 6)).tolist(),
        "teacher_masked": rng.normal(size=(2, 6)).tolist(),
    }
    (workdir / "mim.json").write_text(json.dumps(mim))

    pre = 0.6 + 0.05 * rng.normal(size=12)
    post = pre + 0.04 + 0.02 * rng.normal(size=12)
    for name, vals in (("pre.csv", pre), ("post.csv", post)):
        with open(workdir / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "value"])
            for i, v in enumerate(vals):
                w.writerow([f"reader{i:02d}", repr(float(v))])

    n = 300
    x = rng.integers(0, 2, size=n)
    age = rng.normal(size=n)
    t_event = rng.exponential(1.0 / (0.15 * np.exp(np.log(2.0) * x + 0.3 * age)))
    t_cens = rng.uniform(0, 12, size=n)
    time_ = np.minimum(t_event, t_cens)
    event = (t_event <= t_cens).astype(int)
    risk = np.log(2.0) * x + 0.3 * age + 0.3 * rng.normal(size=n)
    with open(workdir / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", "event", "risk", "cov_x", "cov_age", "group"])
        for i in range(n):
            w.writerow([f"p{i:03d}", repr(float(time_[i])), event[i], repr(float(risk[i])),
                        int(x[i]), repr(float(age[i])), "treated" if x[i] else "control"])


STEPS = [
    ("convert", ["convert", "--input", "images.csv", "--output", "images.emb"]),
    ("validate", ["validate", "--input", "images.emb", "--normalized", "--manifest", "manifest.json"]),
    ("zeroshot", ["zeroshot", "--images", "images.emb", "--class-emb-dir", "protos",
                  "--manifest", "manifest.json", "--pred-out", "zs_preds.csv"]),
    ("retrieve", ["retrieve", "--queries", "images.emb", "--candidates", "captions.emb",
                  "--pairs", "manifest.json", "--k", "1,5,10"]),
    ("probe", ["probe", "--train", "images.emb", "--manifest", "manifest.json", "--fractions", "0.3,1.0"]),
    ("objectives_infonce", ["objectives", "--kind", "infonce", "--batch", "infonce.json", "--grad-check"]),
    ("objectives_mim", ["objectives", "--kind", "mim", "--batch", "mim.json", "--grad-check"]),
    ("sae_train", ["sae", "train", "--data", "concept_x.emb", "--model-out", "sae.bin", "--expansion", "2",
                   "--batch-size", "64", "--epochs", "30", "--lr", "5e-3", "--curve", "sae_curve.csv"]),
    ("sae_encode", ["sae", "encode", "--model", "sae.bin", "--data", "concept_x.emb", "--output", "latents.emb"]),
    ("sae_decode", ["sae", "decode", "--model", "sae.bin", "--latents", "latents.emb", "--output", "recon.emb"]),
    ("concepts_filter", ["concepts", "filter", "--latents", "latents.emb", "--manifest", "concept_manifest.json",
                         "--lr", "1.0", "--model-out", "clf.json"]),
    ("concepts_name", ["concepts", "name", "--sae", "sae.bin", "--classifier", "clf.json",
                       "--terms", "terms.txt", "--term-emb", "terms.emb", "--assign-out", "assign.json"]),
    ("concepts_artifacts", ["concepts", "artifact-neurons", "--sae", "sae.bin", "--artifacts", "artifacts.emb"]),
    ("concepts_cbm", ["concepts", "cbm", "--sae", "sae.bin", "--classifier", "clf.json", "--data", "concept_x.emb",
                      "--manifest", "concept_manifest.json"]),
    ("concepts_intervene", ["concepts", "intervene", "--sae", "sae.bin", "--data", "concept_x.emb",
                            "--artifacts", "artifacts.emb", "--classifier", "clf.json",
                            "--manifest", "concept_manifest.json", "--output", "edited.emb"]),
    ("stats", ["stats", "--pred", "zs_preds.csv", "--metrics", "bacc,wf1,mf1,auroc"]),
    ("stats_paired", ["stats", "paired", "--pre", "pre.csv", "--post", "post.csv",
                      "--test", "wilcoxon", "--alternative", "greater"]),
    ("survival_km", ["survival", "km", "--data", "records.csv", "--horizons", "2,4", "--curve", "km_curve.csv"]),
    ("survival_logrank", ["survival", "logrank", "--data", "records.csv"]),
    ("survival_cox", ["survival", "cox", "--data", "records.csv"]),
    ("survival_cox_efron", ["survival", "cox", "--data", "records.csv", "--ties", "efron"]),
    ("survival_tdroc", ["survival", "tdroc", "--data", "records.csv", "--horizons", "2,4,6"]),
]

# Bootstrap-capable steps run with a reduced replicate count to stay quick.
_BOOT = {"zeroshot", "retrieve", "probe", "concepts_cbm", "concepts_intervene", "stats", "survival_tdroc"}


@contextlib.contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def run_pipeline(workdir, threads=1, n_boot=200, seed=42) -> dict:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    make_data(workdir)
    combined = {}
    with _cwd(workdir):
        for name, argv in STEPS:
            extra = ["--seed", str(seed), "--threads", str(threads), "--no-timestamp", "--out", f"{name}.json"]
            if name in _BOOT:
                extra += ["--bootstrap", str(n_boot)]
            code = cli.run(argv + extra)
            if code != 0:
                raise RuntimeError(f"step {name} failed with exit code {code}")
            combined[name] = json.loads(Path(f"{name}.json").read_text())
    return {"pipeline": "synthetic", "steps": combined}


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--bootstrap", type=int, default=200)
    ap.add_argument("--out", default=None, help="combined report (default: <workdir>/pipeline.json)")
    args = ap.parse_args(argv)
    doc = run_pipeline(args.workdir, threads=args.threads, n_boot=args.bootstrap)
    out = Path(args.out) if args.out else Path(args.workdir) / "pipeline.json"
    out.write_text(dumps(doc))
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
