"""Image/document encoders, global scoring and the patch-to-word attention head.

Batched entry points (``encode_images``, ``encode_documents``,
``global_scores``, ``cross_attention``, ``local_scores``, ``batch_losses``) are
what training and evaluation use. The single-pair functions below them wrap
the batched code for one image / one document.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, EmptyDocumentError
from .tensor import Tensor

POOL_KINDS = ("mean", "max")


@dataclass(frozen=True)
class ModelConfig:
    r0: int
    r: int = 64
    heads: int = 4
    blocks: int = 2
    max_words: int = 512
    pos_emb: bool = False
    pool: str = "mean"

    def __post_init__(self):
        for name in ("r0", "r", "heads", "max_words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.blocks < 0:
            raise ConfigError("blocks must be >= 0")
        if self.r % self.heads:
            raise ConfigError(f"r={self.r} is not divisible by heads={self.heads}")
        if self.pool not in POOL_KINDS:
            raise ConfigError(f"pool must be one of {POOL_KINDS}, got {self.pool!r}")

    def to_dict(self):
        return asdict(self)


class ModelParams:
    """Named parameter tensors plus the architecture config."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def with_tensor(self, name, t):
        """Shallow copy with one tensor swapped (used by gradient checks)."""
        out = ModelParams(self.config, self.tensors)
        out.tensors[name] = t
        return out

    def copy(self):
        return ModelParams(
            self.config,
            {k: Tensor(v.data, requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
        )

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def group_checksum(self, prefix):
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def parameter_shapes(config):
    r, r0 = config.r, config.r0
    shapes = {
        "image_proj.weight": (r0, r),
        "image_proj.bias": (r,),
        "token_proj.fc1.weight": (r0, 2 * r),
        "token_proj.fc1.bias": (2 * r,),
        "token_proj.fc2.weight": (2 * r, r),
        "token_proj.fc2.bias": (r,),
        "cls_token": (r,),
    }
    if config.pos_emb:
        shapes["pos_emb"] = (config.max_words, r)
    for i in range(config.blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gain": (r,), p + "ln1.bias": (r,),
            p + "attn.wq": (r, r), p + "attn.bq": (r,),
            p + "attn.wk": (r, r),
            p + "attn.wv": (r, r), p + "attn.bv": (r,),
            p + "attn.wo": (r, r), p + "attn.bo": (r,),
            p + "ln2.gain": (r,), p + "ln2.bias": (r,),
            p + "mlp.fc1.weight": (r, 4 * r), p + "mlp.fc1.bias": (4 * r,),
            p + "mlp.fc2.weight": (4 * r, r), p + "mlp.fc2.bias": (r,),
        })
    if config.blocks:
        # the last block's output bias shifts every score of a row equally
        del shapes[f"blocks.{config.blocks - 1}.mlp.fc2.bias"]
    shapes.update({
        "cross.wq": (r, r),
        "cross.wk": (r, r),
        "cross.wv": (r, r),
        "local_head.weight": (r, 1),
        "local_head.bias": (1,),
    })
    return shapes


# parameters of the patch-to-word head; untouched when the local loss is off
CROSS_PREFIXES = ("cross.", "local_head.")


def init_params(config, seed):
    """Fan-in scaled zero-mean uniform weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif len(shape) == 2 or name == "cls_token":
            # fan-in for weight matrices; cls/pos embeddings use width r
            bound = 1.0 / math.sqrt(config.r if name == "pos_emb" else shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


# -- encoded forms ------------------------------------------------------------
@dataclass
class EncodedImage:
    f_cls: Tensor  # (r,) or (B, r)
    f_patches: Tensor  # (N, r) or (B, N, r)


@dataclass
class EncodedDocument:
    g_cls: Tensor  # (r,)
    g_tokens: Tensor  # (M, r)
    cls_attention: np.ndarray  # (heads, M + 1); column M is the CLS position
    tokens: tuple = ()


@dataclass
class EncodedDocuments:
    """Padded batch of documents: rows of ``g_tokens`` beyond a document's
    length are padding and excluded by ``mask``."""

    g_cls: Tensor  # (D, r)
    g_tokens: Tensor  # (D, L, r)
    mask: np.ndarray  # (D, L) bool
    lengths: tuple
    cls_attention: np.ndarray  # (D, heads, L + 1); column L is the CLS position
    class_ids: tuple = ()
    tokens: tuple = ()

    def __len__(self):
        return len(self.lengths)

    def single(self, i):
        m = self.lengths[i]
        att = self.cls_attention[i]
        att = np.concatenate([att[:, :m], att[:, -1:]], axis=1)
        return EncodedDocument(
            self.g_cls[i], self.g_tokens[i, :m], att, self.tokens[i] if self.tokens else ()
        )


def _linear(x, params, weight, bias=None):
    y = T.matmul(x, params[weight])
    return T.add(y, params[bias]) if bias else y


# -- image side ---------------------------------------------------------------
def encode_images(params, cls_features, patch_features):
    """Project frozen (B, r0) global and (B, N, r0) patch features into the joint space."""
    cls_features = np.asarray(cls_features, dtype=np.float64)
    patch_features = np.asarray(patch_features, dtype=np.float64)
    r0 = params.config.r0
    if cls_features.ndim != 2 or patch_features.ndim != 3 or cls_features.shape[1] != r0 \
            or patch_features.shape[2] != r0 or patch_features.shape[0] != cls_features.shape[0]:
        raise DimensionError(
            f"image features {cls_features.shape}/{patch_features.shape} do not match r0={r0}"
        )
    f_cls = _linear(Tensor(cls_features), params, "image_proj.weight", "image_proj.bias")
    f_patches = _linear(Tensor(patch_features), params, "image_proj.weight", "image_proj.bias")
    return EncodedImage(f_cls, f_patches)


def encode_image(rec, params):
    enc = encode_images(params, rec.cls_feature[None, :], rec.patch_features[None, :, :])
    return EncodedImage(enc.f_cls[0], enc.f_patches[0])


# -- document side ------------------------------------------------------------
def _self_attention_block(x, mask, params, prefix, heads):
    d, length, r = x.shape
    dh = r // heads
    h = T.layer_norm(x, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"])

    def split(w, b=None):
        y = _linear(h, params, prefix + w, prefix + b if b else None)
        return T.transpose(T.reshape(y, (d, length, heads, dh)), (0, 2, 1, 3))

    # a key bias shifts every logit in a row equally, so it is omitted
    q, k, v = split("attn.wq", "attn.bq"), split("attn.wk"), split("attn.wv", "attn.bv")
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    mixed = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (d, length, r))
    x = T.add(x, _linear(mixed, params, prefix + "attn.wo", prefix + "attn.bo"))
    h2 = T.layer_norm(x, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"])
    ff = _linear(T.gelu(_linear(h2, params, prefix + "mlp.fc1.weight", prefix + "mlp.fc1.bias")),
                 params, prefix + "mlp.fc2.weight",
                 prefix + "mlp.fc2.bias" if prefix + "mlp.fc2.bias" in params else None)
    return T.add(x, ff), attn


def project_tokens(params, x):
    hidden = T.gelu(_linear(x, params, "token_proj.fc1.weight", "token_proj.fc1.bias"))
    return _linear(hidden, params, "token_proj.fc2.weight", "token_proj.fc2.bias")


def encode_documents(params, docs):
    """Run the document transformer over a list of ``ClassDocument``.

    Documents are right-padded to a common length; the CLS token is appended
    after the padding so every document's CLS sits at the same index.
    """
    cfg = params.config
    if not docs:
        raise EmptyDocumentError("<none>", "no documents to encode")
    lengths = []
    for doc in docs:
        m = len(doc.matrix)
        if m == 0:
            raise EmptyDocumentError(doc.class_id)
        if m > cfg.max_words:
            raise DimensionError(f"document {doc.class_id!r} has {m} tokens > max_words={cfg.max_words}")
        if doc.matrix.shape[1] != cfg.r0:
            raise DimensionError(f"document {doc.class_id!r} width {doc.matrix.shape[1]} != r0={cfg.r0}")
        lengths.append(m)
    d, length = len(docs), max(lengths)
    padded = np.zeros((d, length, cfg.r0))
    mask = np.zeros((d, length + 1), dtype=bool)
    for i, doc in enumerate(docs):
        padded[i, :lengths[i]] = doc.matrix
        mask[i, :lengths[i]] = True
    mask[:, -1] = True

    tok = project_tokens(params, Tensor(padded))
    if cfg.pos_emb:
        tok = T.add(tok, params["pos_emb"][:length])
    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, 1, cfg.r)), (d, 1, cfg.r))
    x = T.concat([tok, cls], axis=1)
    cls_att = np.zeros((d, cfg.heads, length + 1))
    cls_att[:, :, -1] = 1.0
    for i in range(cfg.blocks):
        x, attn = _self_attention_block(x, mask, params, f"blocks.{i}.", cfg.heads)
        cls_att = attn.data[:, :, -1, :]
    return EncodedDocuments(
        g_cls=x[:, length, :],
        g_tokens=x[:, :length, :],
        mask=mask[:, :length],
        lengths=tuple(lengths),
        cls_attention=cls_att,
        class_ids=tuple(doc.class_id for doc in docs),
        tokens=tuple(doc.tokens for doc in docs),
    )


def encode_document(doc, params):
    """Encode one document. ``doc`` is a ``ClassDocument`` or an (M, r0) matrix."""
    if not hasattr(doc, "matrix"):
        from .wordvec import ClassDocument

        matrix = np.asarray(doc, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] == 0:
            raise EmptyDocumentError("<matrix>", f"expected a non-empty (M, r0) matrix, got {matrix.shape}")
        doc = ClassDocument("<matrix>", tuple(str(i) for i in range(len(matrix))), matrix)
    return encode_documents(params, [doc]).single(0)


# -- scoring ------------------------------------------------------------------
def global_scores(img, docs):
    """(B, D) dot products between image and document global embeddings."""
    return T.matmul(img.f_cls, T.transpose(docs.g_cls, (1, 0)))


def cross_attention(img, docs, params):
    """Patches query document words.

    Returns the (B, D, N, L) attention tensor (softmax over words, padding
    masked out) and the pooled (B, D, r) attended patch embedding.
    """
    b, n, r = img.f_patches.shape
    d, length, _ = docs.g_tokens.shape
    # one (B*N, D*L) product for all logits, then a per-document batched product
    q = T.reshape(T.matmul(img.f_patches, params["cross.wq"]), (b * n, r))
    k = T.reshape(T.matmul(docs.g_tokens, params["cross.wk"]), (d * length, r))
    v = T.matmul(docs.g_tokens, params["cross.wv"])
    logits = T.reshape(T.matmul(q, T.transpose(k, (1, 0))), (b, n, d, length))
    logits = T.scale(T.transpose(logits, (0, 2, 1, 3)), 1.0 / math.sqrt(r))
    attn = T.softmax(logits, axis=-1, mask=docs.mask[None, :, None, :])
    # no skip connection: the attended words alone represent the patch
    per_doc = T.reshape(T.transpose(attn, (1, 0, 2, 3)), (d, b * n, length))
    attended = T.transpose(T.reshape(T.matmul(per_doc, v), (d, b, n, r)), (1, 0, 2, 3))
    pooled = T.reduce(params.config.pool, attended, axis=2)
    return attn, pooled


def local_scores(pooled, params):
    """Affine head on pooled (..., r) embeddings -> (...) scores."""
    y = T.add(T.matmul(pooled, params["local_head.weight"]), params["local_head.bias"])
    return T.reshape(y, y.shape[:-1])


def batch_losses(params, img, docs, targets, lambda_local):
    """Return (total, global, local) mean cross-entropy losses over the batch.

    With ``lambda_local == 0`` the attention head is not evaluated at all and
    ``local`` is None.
    """
    if lambda_local < 0:
        raise ValueError("lambda_local must be >= 0")
    targets = np.asarray(targets, dtype=np.int64)
    l_global = T.cross_entropy(global_scores(img, docs), targets)
    if lambda_local == 0:
        return l_global, l_global, None
    _, pooled = cross_attention(img, docs, params)
    l_local = T.cross_entropy(local_scores(pooled, params), targets)
    return T.add(l_global, T.scale(l_local, lambda_local)), l_global, l_local


# -- single image / single document wrappers ----------------------------------
def _as_batch_image(img):
    if img.f_cls.ndim == 2:
        return img
    return EncodedImage(T.reshape(img.f_cls, (1,) + img.f_cls.shape),
                        T.reshape(img.f_patches, (1,) + img.f_patches.shape))


def _as_batch_docs(docs):
    if isinstance(docs, EncodedDocuments):
        return docs
    if isinstance(docs, EncodedDocument):
        docs = [docs]
    lengths = [d.g_tokens.shape[0] for d in docs]
    length, r = max(lengths), docs[0].g_cls.shape[0]
    rows, mask = [], np.zeros((len(docs), length), dtype=bool)
    for i, doc in enumerate(docs):
        g = doc.g_tokens
        if lengths[i] < length:
            g = T.concat([g, Tensor(np.zeros((length - lengths[i], r)))], axis=0)
        rows.append(g)
        mask[i, :lengths[i]] = True
    return EncodedDocuments(T.stack([d.g_cls for d in docs]), T.stack(rows), mask, tuple(lengths),
                            np.zeros((len(docs), 1, length + 1)))


def global_score(img, doc):
    """f_cls . g_cls for one image and one document (scalar Tensor)."""
    if img.f_cls.shape != doc.g_cls.shape:
        raise DimensionError(f"embedding widths differ: {img.f_cls.shape} vs {doc.g_cls.shape}")
    return T.reduce_sum(T.mul(img.f_cls, doc.g_cls))


def global_loss(img, docs, target):
    """Cross-entropy of ``target`` against every document in ``docs``."""
    scores = global_scores(_as_batch_image(img), _as_batch_docs(docs))
    return T.cross_entropy(T.reshape(scores, (scores.shape[1],)), int(target))


def attention_map(img, doc, params):
    """(N, M) attention of one image's patches over one document's words,
    and the pooled r-vector."""
    attn, pooled = cross_attention(_as_batch_image(img), _as_batch_docs([doc]), params)
    m = doc.g_tokens.shape[0]
    return attn[0, 0, :, :m], pooled[0, 0]


def local_score(pooled, params):
    if pooled.shape[-1] != params.config.r:
        raise DimensionError(f"pooled width {pooled.shape[-1]} != r={params.config.r}")
    if pooled.ndim == 1:
        return T.reshape(local_scores(T.reshape(pooled, (1, pooled.shape[0])), params), ())
    return local_scores(pooled, params)


def local_loss(img, docs, target, params):
    _, pooled = cross_attention(_as_batch_image(img), _as_batch_docs(docs), params)
    scores = local_scores(pooled, params)
    return T.cross_entropy(T.reshape(scores, (scores.shape[1],)), int(target))


def total_loss(img, docs, target, params, lambda_local=1.0):
    if lambda_local < 0:
        raise ValueError("lambda_local must be >= 0")
    loss = global_loss(img, docs, target)
    if lambda_local == 0:
        return loss
    return T.add(loss, T.scale(local_loss(img, docs, target, params), lambda_local))
