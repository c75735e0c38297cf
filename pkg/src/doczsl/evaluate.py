"""Inference, per-class ZSL/GZSL metrics, calibrated stacking and embedding export."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDocumentError, FormatError, ProtocolError
from .model import encode_documents, encode_images
from .tensor import no_grad

log = logging.getLogger(__name__)

GAMMA_STEPS = 41


# -- scoring ------------------------------------------------------------------
def document_embeddings(params, docs):
    """(D, r) global document embeddings, no graph."""
    with no_grad():
        return encode_documents(params, docs).g_cls.data


def image_embeddings(params, records, chunk=512):
    out = []
    with no_grad():
        for start in range(0, len(records), chunk):
            part = records[start:start + chunk]
            cls = np.stack([r.cls_feature for r in part])
            # patches are not needed for the global score; a 1-patch stub keeps shapes valid
            enc = encode_images(params, cls, cls[:, None, :])
            out.append(enc.f_cls.data)
    return np.concatenate(out) if out else np.zeros((0, params.config.r))


def score_matrix(params, records, docs):
    """(B, D) global compatibility scores of images against documents."""
    return image_embeddings(params, records) @ document_embeddings(params, docs).T


def stacked_argmax(scores, seen_mask, gamma=0.0):
    """Argmax after subtracting ``gamma`` from seen-class columns.

    Columns must be in sorted class order; ``np.argmax`` returns the first
    maximum, which breaks ties by that order.
    """
    if gamma:
        scores = np.where(np.asarray(seen_mask, dtype=bool)[None, :], scores - gamma, scores)
    return np.argmax(scores, axis=1)


def predict(rec, candidates, params, gamma=0.0, seen=()):
    """Class of the best-scoring candidate document for one image."""
    if not candidates:
        raise ProtocolError("predict needs at least one candidate document")
    docs = sorted(candidates, key=lambda d: d.class_id)
    seen = set(seen)
    scores = score_matrix(params, [rec], docs)
    idx = stacked_argmax(scores, [d.class_id in seen for d in docs], gamma)[0]
    return docs[idx].class_id


# -- metrics ------------------------------------------------------------------
def per_class_top1(predictions, labels, classes):
    """Mean over ``classes`` of within-class accuracy."""
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ProtocolError("predictions and labels differ in length")
    accs = []
    for c in sorted(classes):
        idx = [i for i, y in enumerate(labels) if y == c]
        if not idx:
            raise ProtocolError(f"class {c!r} has no evaluation images")
        accs.append(sum(predictions[i] == c for i in idx) / len(idx))
    if not accs:
        raise ProtocolError("no classes to evaluate")
    return float(np.mean(accs))


def per_class_table(predictions, labels, classes):
    table = {}
    for c in sorted(classes):
        idx = [i for i, y in enumerate(labels) if y == c]
        if not idx:
            raise ProtocolError(f"class {c!r} has no evaluation images")
        table[c] = sum(predictions[i] == c for i in idx) / len(idx)
    return table


def harmonic_mean(u, s):
    return 0.0 if u + s == 0 else 2.0 * u * s / (u + s)


# -- GZSL sweeps ----------------------------------------------------------------
@dataclass
class StackingProblem:
    """Scores of evaluation images against candidate classes, with the
    'unseen' role assigned per column."""

    scores: np.ndarray
    class_ids: list
    unseen_mask: np.ndarray
    labels: list

    def accuracies(self, gamma):
        preds = [self.class_ids[i] for i in stacked_argmax(self.scores, ~self.unseen_mask, gamma)]
        unseen = [c for c, m in zip(self.class_ids, self.unseen_mask) if m]
        seen = [c for c, m in zip(self.class_ids, self.unseen_mask) if not m]
        u_idx = [i for i, y in enumerate(self.labels) if y in set(unseen)]
        s_idx = [i for i, y in enumerate(self.labels) if y in set(seen)]
        u = per_class_top1([preds[i] for i in u_idx], [self.labels[i] for i in u_idx],
                           {self.labels[i] for i in u_idx})
        s = per_class_top1([preds[i] for i in s_idx], [self.labels[i] for i in s_idx],
                           {self.labels[i] for i in s_idx})
        return u, s

    def default_grid(self, steps=GAMMA_STEPS):
        seen_max = self.scores[:, ~self.unseen_mask].max()
        unseen_min = self.scores[:, self.unseen_mask].min()
        return np.linspace(0.0, max(0.0, float(seen_max - unseen_min)), steps)


def proxy_classes(seen_classes, count, seed):
    """Deterministic subset of seen classes that stands in for unseen ones."""
    seen = sorted(seen_classes)
    count = min(max(1, count), len(seen) - 1)
    pick = np.random.default_rng([seed, 7919]).choice(len(seen), count, replace=False)
    return sorted(seen[i] for i in pick)


def heldout_problem(params, dataset, mode="proxy", proxy=None):
    if mode == "proxy":
        if not proxy:
            raise ProtocolError("proxy calibration needs a non-empty proxy class list")
        class_ids = dataset.seen_classes
        records = dataset.images("heldout")
        unseen = set(proxy)
    elif mode == "true":
        class_ids = dataset.all_classes
        records = dataset.images("heldout") + dataset.images("unseen_heldout")
        unseen = set(dataset.unseen_classes)
    else:
        raise ValueError(f"unknown calibration mode {mode!r}")
    if not records:
        raise ProtocolError("held-out set is empty")
    labels = [r.class_id for r in records]
    if not any(y in unseen for y in labels) or all(y in unseen for y in labels):
        raise ProtocolError(f"held-out set ({mode}) needs images of both seen and unseen-role classes")
    scores = score_matrix(params, records, dataset.docs_for(class_ids))
    mask = np.array([c in unseen for c in class_ids])
    return StackingProblem(scores, list(class_ids), mask, labels)


@dataclass
class Calibration:
    gamma: float
    curve: list  # (gamma, u, s, h) per grid point
    mode: str = "proxy"


def calibrate_gamma(params, dataset, mode="proxy", proxy=None, grid=None, steps=GAMMA_STEPS):
    """Pick the stacking constant maximising held-out harmonic mean.

    Ties go to the smallest gamma in the grid.
    """
    problem = heldout_problem(params, dataset, mode, proxy)
    grid = problem.default_grid(steps) if grid is None else np.asarray(grid, dtype=np.float64)
    grid = np.unique(grid)
    if grid.size == 0:
        raise ProtocolError("empty gamma grid")
    curve = []
    for g in grid:
        u, s = problem.accuracies(float(g))
        curve.append((float(g), u, s, harmonic_mean(u, s)))
    best = max(range(len(curve)), key=lambda i: (curve[i][3], -i))
    for g, u, s, h in curve:
        log.debug("gamma=%.6g u=%.4f s=%.4f H=%.4f", g, u, s, h)
    return Calibration(curve[best][0], curve, mode)


# -- full evaluation --------------------------------------------------------------
@dataclass
class EvalReport:
    zsl_top1: float
    gzsl_u: float
    gzsl_s: float
    gzsl_h: float
    gamma: float
    per_class_accuracy: dict = field(default_factory=dict)
    zsl_per_class: dict = field(default_factory=dict)

    def records(self):
        yield {"metric": "zsl_top1", "value": self.zsl_top1}
        yield {"metric": "gzsl_u", "value": self.gzsl_u}
        yield {"metric": "gzsl_s", "value": self.gzsl_s}
        yield {"metric": "gzsl_h", "value": self.gzsl_h}
        yield {"metric": "gamma", "value": self.gamma}
        for c, a in self.zsl_per_class.items():
            yield {"metric": "zsl_class_top1", "class_id": c, "value": a}
        for c, a in self.per_class_accuracy.items():
            yield {"metric": "gzsl_class_top1", "class_id": c, "value": a}

    def summary(self):
        return (
            f"ZSL  T1 = {100 * self.zsl_top1:.2f}\n"
            f"GZSL u  = {100 * self.gzsl_u:.2f}\n"
            f"GZSL s  = {100 * self.gzsl_s:.2f}\n"
            f"GZSL H  = {100 * self.gzsl_h:.2f}\n"
            f"gamma   = {self.gamma:.6g}\n"
        )


def evaluate(params, dataset, gamma=0.0):
    records = dataset.images("test")
    if not records:
        raise ProtocolError("test split is empty")
    classes = dataset.all_classes
    unseen = set(dataset.unseen_classes)
    labels = [r.class_id for r in records]
    scores = score_matrix(params, records, dataset.docs_for(classes))

    unseen_cols = [i for i, c in enumerate(classes) if c in unseen]
    u_idx = [i for i, y in enumerate(labels) if y in unseen]
    zsl_scores = scores[np.ix_(u_idx, unseen_cols)]
    zsl_pred = [classes[unseen_cols[j]] for j in np.argmax(zsl_scores, axis=1)]
    zsl_labels = [labels[i] for i in u_idx]
    zsl_table = per_class_table(zsl_pred, zsl_labels, unseen)

    seen_mask = np.array([c not in unseen for c in classes])
    gzsl_pred = [classes[j] for j in stacked_argmax(scores, seen_mask, gamma)]
    table = per_class_table(gzsl_pred, labels, classes)
    u = float(np.mean([table[c] for c in sorted(unseen)]))
    s = float(np.mean([table[c] for c in classes if c not in unseen]))
    return EvalReport(float(np.mean(list(zsl_table.values()))), u, s, harmonic_mean(u, s), float(gamma),
                      table, zsl_table)


def write_report(report, path, summary_path=None):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    if summary_path:
        with open(summary_path, "w", encoding="utf-8") as fh:
            fh.write(report.summary())


# -- embeddings ---------------------------------------------------------------
def learned_embeddings(params, documents):
    ids = sorted(documents)
    emb = document_embeddings(params, [documents[c] for c in ids])
    return dict(zip(ids, emb))


def baseline_avg_wordvec(documents, wv):
    """Per class, the mean word vector of its in-vocabulary tokens."""
    out = {}
    for c in sorted(documents):
        rows = [wv[t] for t in documents[c].tokens if t in wv]
        if not rows:
            raise EmptyDocumentError(c, "no in-vocabulary tokens for the averaged baseline")
        out[c] = np.mean(rows, axis=0)
    return out


def write_embeddings(embeddings, path):
    with open(path, "w", encoding="utf-8") as fh:
        for c in sorted(embeddings):
            vec = [float(x) for x in embeddings[c]]
            fh.write(json.dumps({"class_id": c, "embedding": vec}, separators=(",", ":")) + "\n")


def export_embeddings(params, documents, path):
    emb = learned_embeddings(params, documents)
    write_embeddings(emb, path)
    return emb


def read_embeddings(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rec = json.loads(line)
                    out[rec["class_id"]] = np.array(rec["embedding"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError) as exc:
                    raise FormatError(f"{path}:{lineno}: bad embedding record ({exc})") from None
    return out


def nearest_class_top1(embeddings, dataset, ridge=1.0):
    """Unseen-class T1 of a linear probe that uses ``embeddings`` as class side
    information.

    A ridge map from frozen image features to the embedding of each training
    image's class is fit on seen classes; unseen test images are assigned
    to the unseen class whose embedding is nearest in cosine.
    """
    train = dataset.images("train")
    x = np.stack([r.cls_feature for r in train])
    y = np.stack([embeddings[r.class_id] for r in train])
    w = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)

    unseen = dataset.unseen_classes
    test = [r for r in dataset.images("test") if r.class_id in set(unseen)]
    proj = np.stack([r.cls_feature for r in test]) @ w
    proto = np.stack([embeddings[c] for c in unseen])

    def unit(a):
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return a / np.where(n == 0, 1.0, n)

    pred = [unseen[i] for i in np.argmax(unit(proj) @ unit(proto).T, axis=1)]
    return per_class_top1(pred, [r.class_id for r in test], unseen)
