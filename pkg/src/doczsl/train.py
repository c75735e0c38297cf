"""Adam training on seen classes, held-out model selection, checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .corpus import batches
from .errors import ConfigError, DivergenceError, IntegrityError
from .evaluate import GAMMA_STEPS, heldout_problem, harmonic_mean, per_class_top1, proxy_classes, stacked_argmax
from .model import ModelConfig, ModelParams, batch_losses, encode_documents, encode_images, init_params
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "doczsl-checkpoint/1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_local: float = 1.0
    pool: str = "mean"
    r: int = 64
    blocks: int = 2
    heads: int = 4
    pos_emb: bool = False
    max_words: int = 512
    seed: int = 0
    patience: int = 10
    proxy_classes: int = 4

    def __post_init__(self):
        for name in ("epochs", "batch_size", "r", "heads", "max_words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigError("invalid Adam hyperparameters")
        if self.lambda_local < 0:
            raise ConfigError("lambda_local must be >= 0")
        if self.patience < 0 or self.blocks < 0 or self.proxy_classes < 1:
            raise ConfigError("patience/blocks must be >= 0 and proxy_classes >= 1")

    def model_config(self, r0):
        return ModelConfig(r0=r0, r=self.r, heads=self.heads, blocks=self.blocks,
                           max_words=self.max_words, pos_emb=self.pos_emb, pool=self.pool)


# -- Adam -----------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(lr, beta1, beta2, eps, 0,
                   {k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params, state, grads=None):
    """One bias-corrected Adam update in place. ``grads`` defaults to each
    tensor's ``.grad``; a missing gradient counts as zero."""
    for name, t in params.items():
        g = grads[name] if grads is not None else t.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in params.items():
        g = grads[name] if grads is not None else t.grad
        if g is None:
            g = np.zeros_like(t.data)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- training loop -----------------------------------------------------------------
@dataclass
class FitResult:
    params: ModelParams
    log: list
    best_epoch: int
    best_h: float
    state: AdamState
    proxy: list
    final_params: ModelParams = None


def heldout_metrics(params, dataset, proxy, gamma_steps=GAMMA_STEPS):
    """Held-out metrics with the withheld ``proxy`` classes in the unseen role.

    ``h`` is the harmonic mean after calibrating gamma on the same held-out
    images (the value used for model selection); ``h0`` is the raw gamma = 0 value.
    """
    problem = heldout_problem(params, dataset, "proxy", proxy)
    u0, s0 = problem.accuracies(0.0)
    best = (harmonic_mean(u0, s0), u0, s0, 0.0)
    for g in problem.default_grid(gamma_steps)[1:]:
        u, s = problem.accuracies(float(g))
        h = harmonic_mean(u, s)
        if h > best[0]:
            best = (h, u, s, float(g))
    cols = np.flatnonzero(problem.unseen_mask)
    rows = [i for i, y in enumerate(problem.labels) if y in set(proxy)]
    sub = problem.scores[np.ix_(rows, cols)]
    preds = [problem.class_ids[cols[j]] for j in stacked_argmax(sub, np.zeros(len(cols), bool))]
    zsl = per_class_top1(preds, [problem.labels[i] for i in rows], proxy)
    return {"zsl": zsl, "u": best[1], "s": best[2], "h": best[0], "gamma": best[3],
            "h0": harmonic_mean(u0, s0)}


def _stack(batch):
    cls = np.stack([rec.cls_feature for rec, _ in batch])
    patches = np.stack([rec.patch_features for rec, _ in batch])
    return cls, patches, np.array([y for _, y in batch], dtype=np.int64)


def train_step(params, state, docs, batch, lambda_local):
    """Forward, backward and Adam update on one batch. Returns the loss values."""
    params.zero_grad()
    cls, patches, targets = _stack(batch)
    enc_docs = encode_documents(params, docs)
    img = encode_images(params, cls, patches)
    total, l_glob, l_loc = batch_losses(params, img, enc_docs, targets, lambda_local)
    values = (total.item(), l_glob.item(), None if l_loc is None else l_loc.item())
    if not all(math.isfinite(v) for v in values if v is not None):
        raise DivergenceError(f"non-finite loss {values}")
    total.backward()
    adam_step(params, state)
    return values


def fit(dataset, config, on_epoch=None):
    """Train on seen classes; keep the parameters with the best held-out H.

    Every seen document is re-encoded at every step since the document
    transformer is being trained.
    """
    params = init_params(config.model_config(dataset.r0), config.seed)
    state = AdamState.for_params(params, config.lr, config.beta1, config.beta2, config.eps)
    proxy = proxy_classes(dataset.seen_classes, config.proxy_classes, config.seed)
    # proxy classes are withheld so that held-out metrics measure transfer to new classes
    train_classes = [c for c in dataset.seen_classes if c not in set(proxy)]
    docs = dataset.docs_for(train_classes)
    records, best, best_h, best_epoch, stale, step = [], None, -1.0, -1, 0, 0
    for epoch in range(config.epochs):
        for batch in batches(dataset, config.batch_size, config.seed, epoch, train_classes):
            try:
                total, l_glob, l_loc = train_step(params, state, docs, batch, config.lambda_local)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}", last_good=best) from None
            records.append({"kind": "step", "epoch": epoch, "step": step, "loss_global": l_glob,
                            "loss_local": l_loc, "loss_total": total})
            step += 1
        metrics = heldout_metrics(params, dataset, proxy)
        improved = metrics["h"] > best_h
        records.append({"kind": "epoch", "epoch": epoch, "heldout_zsl": metrics["zsl"],
                        "heldout_u": metrics["u"], "heldout_s": metrics["s"],
                        "heldout_h": metrics["h"], "heldout_gamma": metrics["gamma"],
                        "heldout_h0": metrics["h0"], "best": improved})
        log.info("epoch %d: loss %.4f heldout H %.4f", epoch, records[-2]["loss_total"], metrics["h"])
        if on_epoch is not None:
            on_epoch(epoch, params, metrics)
        if improved:
            best, best_h, best_epoch, stale = params.copy(), metrics["h"], epoch, 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break
    return FitResult(best, records, best_epoch, best_h, state, proxy, final_params=params)


def write_log(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# -- checkpoints -------------------------------------------------------------------
def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def save_checkpoint(params, path, state=None, extra=None):
    """Line-delimited JSON: header, config echo, one record per tensor, optional
    Adam moments, then a sha256 line over everything above it."""
    lines = [_dumps({"format": CHECKPOINT_FORMAT}),
             _dumps({"config": params.config.to_dict(), "extra": extra or {}})]
    for name, t in params.items():
        lines.append(_dumps({"param": name, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}))
    if state is not None:
        hyper = {k: getattr(state, k) for k in ("lr", "beta1", "beta2", "eps", "step")}
        lines.append(_dumps({"adam": hyper}))
        for name in params:
            lines.append(_dumps({"moment": "m", "param": name, "values": state.m[name].reshape(-1).tolist()}))
            lines.append(_dumps({"moment": "v", "param": name, "values": state.v[name].reshape(-1).tolist()}))
    body = "".join(line + "\n" for line in lines)
    digest = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(body + _dumps({"sha256": digest}) + "\n")


@dataclass
class Checkpoint:
    params: ModelParams
    state: AdamState = None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path, expect=None):
    """Read a checkpoint. ``expect`` (a ModelConfig) rejects mismatched architectures."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines(keepends=True)
    if len(lines) < 3:
        raise IntegrityError(f"{path}: truncated checkpoint")
    body = "".join(lines[:-1])
    try:
        tail = json.loads(lines[-1])
        header = json.loads(lines[0])
        meta = json.loads(lines[1])
    except json.JSONDecodeError:
        raise IntegrityError(f"{path}: unreadable checkpoint") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if tail.get("sha256") != hashlib.sha256(body.encode()).hexdigest():
        raise IntegrityError(f"{path}: checksum mismatch")
    config = ModelConfig(**meta["config"])
    if expect is not None:
        diff = [f.name for f in fields(ModelConfig) if getattr(expect, f.name) != getattr(config, f.name)]
        if diff:
            raise ConfigError(f"checkpoint architecture differs from config in {diff}")
    tensors, state = {}, None
    for line in lines[2:-1]:
        rec = json.loads(line)
        if "param" in rec and "moment" not in rec:
            data = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
            tensors[rec["param"]] = Tensor(data, requires_grad=True, name=rec["param"])
        elif "adam" in rec:
            state = AdamState(**rec["adam"])
        elif "moment" in rec:
            getattr(state, rec["moment"])[rec["param"]] = np.array(rec["values"]).reshape(
                tensors[rec["param"]].shape)
    return Checkpoint(ModelParams(config, tensors), state, meta.get("extra", {}))


def config_dict(config):
    return asdict(config)
