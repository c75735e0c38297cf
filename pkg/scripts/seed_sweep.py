"""Five-seed comparison on the default synthetic task.

For each seed: full model, global-only ablation (lambda_local=0), the
averaged-word-vector baseline, and the ground-truth oracle. Prints a table and
writes one JSON line per seed.

    python3 scripts/seed_sweep.py --out runs/sweep [--seeds 0 1 2 3 4] [--epochs 100]
"""
import argparse
import json
import os
import time

import numpy as np

from doczsl import corpus, explain, synth, wordvec
from doczsl import evaluate as E
from doczsl.train import TrainConfig, fit


def planted(params, ds, truth):
    top8 = []
    for c in ds.unseen_classes:
        words = {w for w, _ in explain.top_attended_words(ds.documents[c], params, k=8).payload["words"]}
        top8.append(len(words & set(truth.class_words[c])))
    hits = total = 0
    for rec in ds.images("test"):
        if rec.class_id in ds.unseen_classes:
            doc = ds.documents[rec.class_id]
            attn = explain.attention_matrix(rec, doc, params)
            for n, word in enumerate(truth.patch_words[rec.image_id]):
                hits += doc.tokens[int(np.argmax(attn[n]))] == word
                total += 1
    return float(np.median(top8)), hits / total


def run_seed(seed, epochs, out):
    paths, data = synth.generate(synth.SynthConfig(seed=seed), os.path.join(out, f"data{seed}"))
    wv = wordvec.parse_wordvec_file(paths["wordvecs"])
    ds = corpus.load_dataset(paths["documents"], paths["features"], paths["split"], wv)
    row = {"seed": seed}
    for kind, lam in (("full", 1.0), ("global_only", 0.0)):
        start = time.perf_counter()
        res = fit(ds, TrainConfig(seed=seed, lambda_local=lam, epochs=epochs))
        row[f"{kind}_seconds"] = round(time.perf_counter() - start, 1)
        row[f"{kind}_best_epoch"] = res.best_epoch
        row[f"{kind}_t1"] = E.evaluate(res.params, ds).zsl_top1
        if kind == "full":
            row["emb_t1"] = E.nearest_class_top1(E.learned_embeddings(res.params, ds.documents), ds)
            row["top8_planted"], row["alignment"] = planted(res.params, ds, data.truth)
    row["avg_wordvec_t1"] = E.nearest_class_top1(E.baseline_avg_wordvec(ds.documents, wv), ds)
    _, row["oracle_t1"] = synth.oracle_classify(ds.images("test"), data.truth)
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--epochs", type=int, default=100)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    rows = []
    with open(os.path.join(args.out, "sweep.jsonl"), "w", encoding="utf-8") as fh:
        for seed in args.seeds:
            rows.append(run_seed(seed, args.epochs, args.out))
            fh.write(json.dumps(rows[-1], sort_keys=True) + "\n")
            fh.flush()
            print(json.dumps(rows[-1], sort_keys=True))
    cols = ["full_t1", "global_only_t1", "emb_t1", "avg_wordvec_t1", "oracle_t1", "top8_planted", "alignment"]
    print("median  " + "  ".join(f"{c}={np.median([r[c] for r in rows]):.3f}" for c in cols))


if __name__ == "__main__":
    main()
