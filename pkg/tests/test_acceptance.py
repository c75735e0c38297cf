"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The synthetic-task criteria share one set of trainings: five seeds of the full
model and five of the global-only ablation on the default synthetic config.
"""
import filecmp
import math
import time

import numpy as np
import pytest

from doczsl import corpus, explain, synth, wordvec
from doczsl import evaluate as E
from doczsl import model as M
from doczsl.model import ModelConfig, encode_document, encode_images, init_params
from doczsl.tensor import Tensor, grad_check
from doczsl.train import TrainConfig, fit, load_checkpoint, save_checkpoint, write_log
from doczsl.wordvec import ClassDocument
from test_tensor import _cases as op_cases

SEEDS = range(5)
TIME_LIMIT_S = 300.0


def _report(log, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    log.append((name, ok, detail))
    return ok


def _load(paths):
    wv = wordvec.parse_wordvec_file(paths["wordvecs"])
    return corpus.load_dataset(paths["documents"], paths["features"], paths["split"], wv), wv


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    runs = []
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"seed{seed}")
        paths, data = synth.generate(synth.SynthConfig(seed=seed), str(out))
        ds, wv = _load(paths)
        row = {"seed": seed, "dataset": ds, "wv": wv, "truth": data.truth, "dir": out}
        for kind, lam in (("full", 1.0), ("ablation", 0.0)):
            start = time.perf_counter()
            res = fit(ds, TrainConfig(seed=seed, lambda_local=lam))
            row[kind] = res
            row[kind + "_seconds"] = time.perf_counter() - start
        runs.append(row)
    return runs


# 1 -------------------------------------------------------------------------------
def _composed(seed):
    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(r0=4, r=4, heads=2, blocks=1, pool="max" if seed % 2 else "mean"), seed)
    for t in params.tensors.values():
        t.data = t.data * 2.0 + rng.normal(scale=0.1, size=t.shape)
    docs = [ClassDocument(c, tuple("abcde"[:m]), rng.normal(size=(m, 4))) for c, m in (("a", 3), ("b", 5))]
    cls, patches = rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 4))

    def loss(p):
        img = encode_images(p, cls, patches)
        return M.batch_losses(p, img, M.encode_documents(p, docs), np.array([0, 1]), 1.0)[0]

    return params, loss


def test_gradient_suite(acceptance_log):
    start = time.perf_counter()
    worst, worst_where, zero_bias = 0.0, "", 0.0
    for seed in range(10):
        for op, (fn, x, _) in op_cases(np.random.default_rng(seed)).items():
            err = grad_check(fn, x)
            if err > worst:
                worst, worst_where = err, f"{op} seed {seed}"
        params, loss = _composed(seed)
        for name in params:
            if name == "local_head.bias":
                # shift-invariant under the full-set cross-entropy: gradient is zero up to rounding
                params.zero_grad()
                loss(params).backward()
                zero_bias = max(zero_bias, float(np.abs(params[name].grad).max()))
                continue
            err = grad_check(lambda t, n=name: loss(params.with_tensor(n, t)), params[name].data)
            if err > worst:
                worst, worst_where = err, f"{name} seed {seed}"
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60 and zero_bias < 1e-15
    detail = (f"max rel err {worst:.2e} ({worst_where}); local_head.bias grad {zero_bias:.1e}; "
              f"{elapsed:.1f}s")
    assert _report(acceptance_log, "gradient suite", ok, detail)


# 2 -------------------------------------------------------------------------------
def test_metric_arithmetic(acceptance_log):
    h1, h2 = E.harmonic_mean(66.8, 76.8), E.harmonic_mean(35.8, 91.9)
    ok = abs(h1 - 71.5) <= 0.05 and abs(h2 - 51.5) <= 0.05
    assert _report(acceptance_log, "harmonic mean arithmetic", ok, f"{h1:.3f} / {h2:.3f}")


# 3 -------------------------------------------------------------------------------
def _unseen_t1(row, kind):
    return E.evaluate(row[kind].params, row["dataset"]).zsl_top1


@pytest.mark.slow
def test_synthetic_zsl(trained, acceptance_log):
    t1 = [_unseen_t1(r, "full") for r in trained]
    secs = [r["full_seconds"] for r in trained]
    med = float(np.median(t1))
    ok = med >= 0.60 and max(secs) <= TIME_LIMIT_S
    detail = (f"median unseen T1 {med:.3f} (per seed {[round(v, 3) for v in t1]}), "
              f"slowest training {max(secs):.0f}s, target >= 0.600 within {TIME_LIMIT_S:.0f}s")
    assert _report(acceptance_log, "synthetic ZSL end-to-end", ok, detail)


# 4 -------------------------------------------------------------------------------
@pytest.mark.slow
def test_ablation_direction(trained, acceptance_log):
    full = float(np.median([_unseen_t1(r, "full") for r in trained]))
    glob = float(np.median([_unseen_t1(r, "ablation") for r in trained]))
    assert _report(acceptance_log, "ablation direction", full >= glob,
                   f"median T1 full {full:.3f} vs global-only {glob:.3f}")


# 5 -------------------------------------------------------------------------------
@pytest.mark.slow
def test_baseline_direction(trained, acceptance_log, tmp_path):
    learned, base = [], []
    for r in trained:
        ds = r["dataset"]
        path = tmp_path / f"emb{r['seed']}.jsonl"
        E.export_embeddings(r["full"].params, ds.documents, path)
        learned.append(E.nearest_class_top1(E.read_embeddings(path), ds))
        base.append(E.nearest_class_top1(E.baseline_avg_wordvec(ds.documents, r["wv"]), ds))
    ml, mb = float(np.median(learned)), float(np.median(base))
    assert _report(acceptance_log, "baseline direction", ml > mb,
                   f"median nearest-class T1 learned {ml:.3f} vs averaged word vectors {mb:.3f}")


# 6 -------------------------------------------------------------------------------
@pytest.mark.slow
def test_calibrated_stacking(trained, acceptance_log):
    problems = []
    for r in trained:
        ds, res = r["dataset"], r["full"]
        cal = E.calibrate_gamma(res.params, ds, proxy=res.proxy)
        us, ss = [c[1] for c in cal.curve], [c[2] for c in cal.curve]
        if any(b < a for a, b in zip(us, us[1:])) or any(b > a for a, b in zip(ss, ss[1:])):
            problems.append(f"seed {r['seed']} not monotone")
        h_star = next(c[3] for c in cal.curve if c[0] == cal.gamma)
        h0 = next(c[3] for c in cal.curve if c[0] == 0.0)
        if h_star < h0:
            problems.append(f"seed {r['seed']} H* {h_star:.3f} < H0 {h0:.3f}")
        test = E.heldout_problem(res.params, ds, "true")
        preds = E.stacked_argmax(test.scores, ~test.unseen_mask, math.inf)
        if not test.unseen_mask[preds].all():
            problems.append(f"seed {r['seed']} large gamma still predicts seen")
    assert _report(acceptance_log, "calibrated stacking", not problems,
                   "; ".join(problems) or f"monotone sweeps, gamma->inf all unseen, H* >= H(0) on {len(trained)} seeds")


# 7 -------------------------------------------------------------------------------
@pytest.mark.slow
def test_attention_invariants(trained, acceptance_log, tmp_path):
    rng = np.random.default_rng(0)
    params = trained[0]["full"].params
    ds = trained[0]["dataset"]
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(1, 60))
        doc = encode_document(rng.normal(size=(m, ds.r0)), params)
        img = encode_images(params, rng.normal(size=(1, ds.r0)), rng.normal(size=(1, ds.n_patches, ds.r0)))
        attn, _ = M.attention_map(M.EncodedImage(img.f_cls[0], img.f_patches[0]), doc, params)
        worst = max(worst, float(np.abs(attn.data.sum(axis=1) - 1.0).max()))
    before = params.checksum()
    rec = ds.images("test")[0]
    doc = ds.documents[rec.class_id]
    records = [explain.top_attended_words(doc, params), explain.patch_to_word(rec, doc, params, 0),
               explain.word_to_image(rec, doc, params, 0)]
    explain.write_attributions(records, tmp_path / "a.jsonl")
    explain.render_heatmap_svg(records[-1].payload["grid"], tmp_path / "h.svg")
    unchanged = params.checksum() == before
    ok = worst <= 1e-6 and unchanged
    assert _report(acceptance_log, "attention invariants", ok,
                   f"max |row sum - 1| {worst:.1e}; checksums unchanged: {unchanged}")


# 8 -------------------------------------------------------------------------------
def _planted_stats(row):
    ds, truth, params = row["dataset"], row["truth"], row["full"].params
    counts = []
    for c in ds.unseen_classes:
        top = explain.top_attended_words(ds.documents[c], params, k=8).payload["words"]
        counts.append(len({w for w, _ in top} & set(truth.class_words[c])))
    hits = total = 0
    for rec in ds.images("test"):
        if rec.class_id not in ds.unseen_classes:
            continue
        doc = ds.documents[rec.class_id]
        attn = explain.attention_matrix(rec, doc, params)
        for n, word in enumerate(truth.patch_words[rec.image_id]):
            hits += doc.tokens[int(np.argmax(attn[n]))] == word
            total += 1
    return float(np.median(counts)), hits / total


@pytest.mark.slow
def test_planted_alignment(trained, acceptance_log):
    stats = [_planted_stats(r) for r in trained]
    top8 = float(np.median([s[0] for s in stats]))
    align = float(np.median([s[1] for s in stats]))
    ok = top8 >= 2.5 and align >= 0.60
    detail = (f"median planted words in top-8 {top8:.1f} of 5 (target >= 2.5); "
              f"median patch->word top-1 match {align:.3f} (target >= 0.600)")
    assert _report(acceptance_log, "planted-alignment interpretability", ok, detail)


# 9 -------------------------------------------------------------------------------
def test_determinism_and_round_trips(acceptance_log, tmp_path):
    cfg = synth.SynthConfig(seed=9)
    pa, _ = synth.generate(cfg, str(tmp_path / "a"))
    pb, _ = synth.generate(cfg, str(tmp_path / "b"))
    same_data = all(filecmp.cmp(pa[k], pb[k], shallow=False) for k in synth.FILES)
    ds, wv = _load(pa)
    tcfg = TrainConfig(seed=9, epochs=2, patience=0)
    outs = []
    for name in ("a", "b"):
        res = fit(ds, tcfg)
        d = tmp_path / name
        write_log(res.log, d / "log.jsonl")
        save_checkpoint(res.params, d / "ck.jsonl", state=res.state)
        E.export_embeddings(res.params, ds.documents, d / "emb.jsonl")
        explain.write_attributions([explain.top_attended_words(ds.documents[c], res.params)
                                    for c in ds.unseen_classes], d / "attr.jsonl")
        outs.append(d)
    same_runs = all(filecmp.cmp(outs[0] / f, outs[1] / f, shallow=False)
                    for f in ("log.jsonl", "ck.jsonl", "emb.jsonl", "attr.jsonl"))
    ck = load_checkpoint(outs[0] / "ck.jsonl")
    save_checkpoint(ck.params, tmp_path / "again.jsonl", state=ck.state)
    ck_round = filecmp.cmp(outs[0] / "ck.jsonl", tmp_path / "again.jsonl", shallow=False)
    recs, _ = corpus.load_features(pa["features"])
    corpus.write_features(tmp_path / "f.jsonl", recs)
    wordvec.write_wordvec_file(wv, tmp_path / "wv.txt")
    data_round = (filecmp.cmp(pa["features"], tmp_path / "f.jsonl", shallow=False)
                  and filecmp.cmp(pa["wordvecs"], tmp_path / "wv.txt", shallow=False))
    ok = same_data and same_runs and ck_round and data_round
    detail = (f"datasets {same_data}, logs/checkpoints/exports {same_runs}, "
              f"checkpoint round trip {ck_round}, data-file round trip {data_round}")
    assert _report(acceptance_log, "determinism and round trips", ok, detail)
