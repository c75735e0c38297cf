"""Class documents, precomputed image features and seen/unseen splits.

All three inputs are JSON-lines files:

* documents: ``{"class_id": ..., "text": ...}``
* features:  ``{"image_id": ..., "class_id": ..., "cls_feature": [...], "patch_features": [[...], ...]}``
* split:     ``{"class_id": ..., "role": "seen"|"unseen"}`` and
             ``{"image_id": ..., "partition": "train"|"heldout"|"test"|"unseen_heldout"}``

``unseen_heldout`` images (optional) belong to unseen classes and are only
used when calibrating on true unseen classes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import EmptyDocumentError, FormatError, ValidationError
from .wordvec import DEFAULT_MAX_WORDS, TokenizedDocument, embed_tokens, tokenize

PARTITIONS = ("train", "heldout", "test", "unseen_heldout")


@dataclass(frozen=True, eq=False)
class ImageFeatureRecord:
    image_id: str
    class_id: str
    cls_feature: np.ndarray  # (r0,)
    patch_features: np.ndarray  # (N, r0)


@dataclass(frozen=True)
class SplitSpec:
    seen_classes: frozenset
    unseen_classes: frozenset
    train_images: frozenset
    heldout_images: frozenset
    test_images: frozenset
    unseen_heldout_images: frozenset = frozenset()


@dataclass(frozen=True, eq=False)
class Dataset:
    documents: dict  # class_id -> ClassDocument, sorted by class_id
    features: tuple  # ImageFeatureRecord, sorted by image_id
    split: SplitSpec
    r0: int
    n_patches: int
    _by_id: dict = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {rec.image_id: rec for rec in self.features})

    def record(self, image_id):
        return self._by_id[image_id]

    def __contains__(self, image_id):
        return image_id in self._by_id

    @cached_property
    def seen_classes(self):
        return sorted(self.split.seen_classes)

    @cached_property
    def unseen_classes(self):
        return sorted(self.split.unseen_classes)

    @cached_property
    def all_classes(self):
        return sorted(self.split.seen_classes | self.split.unseen_classes)

    def images(self, partition):
        ids = getattr(self.split, f"{partition}_images")
        return [self._by_id[i] for i in sorted(ids)]

    def docs_for(self, class_ids):
        return [self.documents[c] for c in class_ids]


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected an object")
            yield lineno, rec


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_documents(path, wv, max_words=DEFAULT_MAX_WORDS, oov_policy="drop"):
    raw = {}
    for lineno, rec in _read_jsonl(path):
        try:
            class_id, text = str(rec["class_id"]), rec["text"]
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
        if class_id in raw:
            raise FormatError(f"{path}:{lineno}: duplicate document for class {class_id!r}")
        raw[class_id] = text
    docs = {}
    for class_id in sorted(raw):
        tokens = tokenize(raw[class_id], max_words)
        if not tokens:
            raise EmptyDocumentError(class_id, "no tokens after tokenization")
        docs[class_id] = embed_tokens(TokenizedDocument(class_id, tuple(tokens)), wv, oov_policy)
    return docs


def load_features(path):
    records, shape = {}, None
    for lineno, rec in _read_jsonl(path):
        try:
            image_id, class_id = str(rec["image_id"]), str(rec["class_id"])
            cls_raw, patch_raw = rec["cls_feature"], rec["patch_features"]
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
        if image_id in records:
            raise FormatError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
        try:
            cls = np.array(cls_raw, dtype=np.float64)
            patches = np.array(patch_raw, dtype=np.float64)
        except (ValueError, TypeError):
            raise FormatError(f"image {image_id!r}: ragged or non-numeric feature arrays") from None
        if cls.ndim != 1 or patches.ndim != 2 or patches.shape[0] == 0:
            raise FormatError(f"image {image_id!r}: expected a vector and an N x r0 patch matrix")
        if patches.shape[1] != cls.shape[0]:
            raise FormatError(
                f"image {image_id!r}: patch width {patches.shape[1]} != cls width {cls.shape[0]}"
            )
        if not (np.isfinite(cls).all() and np.isfinite(patches).all()):
            raise FormatError(f"image {image_id!r}: non-finite feature values")
        if shape is None:
            shape = patches.shape
        elif patches.shape != shape:
            raise FormatError(
                f"image {image_id!r}: patch matrix {patches.shape} differs from earlier records {shape}"
            )
        cls.setflags(write=False)
        patches.setflags(write=False)
        records[image_id] = ImageFeatureRecord(image_id, class_id, cls, patches)
    if shape is None:
        raise FormatError(f"{path}: no feature records")
    return [records[k] for k in sorted(records)], shape


def write_features(path, records):
    write_jsonl(
        path,
        (
            {
                "image_id": r.image_id,
                "class_id": r.class_id,
                "cls_feature": r.cls_feature.tolist(),
                "patch_features": r.patch_features.tolist(),
            }
            for r in records
        ),
    )


def load_split(path, documents, features):
    roles = {"seen": set(), "unseen": set()}
    parts = {p: set() for p in PARTITIONS}
    for lineno, rec in _read_jsonl(path):
        if "class_id" in rec:
            role = rec.get("role")
            if role not in roles:
                raise FormatError(f"{path}:{lineno}: class role must be seen/unseen, got {role!r}")
            roles[role].add(str(rec["class_id"]))
        elif "image_id" in rec:
            part = rec.get("partition")
            if part not in parts:
                raise FormatError(f"{path}:{lineno}: unknown partition {part!r}")
            parts[part].add(str(rec["image_id"]))
        else:
            raise FormatError(f"{path}:{lineno}: record has neither class_id nor image_id")
    split = SplitSpec(
        frozenset(roles["seen"]),
        frozenset(roles["unseen"]),
        *(frozenset(parts[p]) for p in ("train", "heldout", "test", "unseen_heldout")),
    )
    validate_split(split, documents, features)
    return split


def validate_split(split, documents, features):
    overlap = split.seen_classes & split.unseen_classes
    if overlap:
        raise ValidationError(f"classes both seen and unseen: {sorted(overlap)}")
    if not split.seen_classes or not split.unseen_classes:
        raise ValidationError("split needs at least one seen and one unseen class")
    for c in sorted(split.seen_classes | split.unseen_classes):
        if c not in documents:
            raise ValidationError(f"class {c!r} has no document")
    class_of = {r.image_id: r.class_id for r in features}
    names = ("train", "heldout", "test", "unseen_heldout")
    sets = [getattr(split, f"{n}_images") for n in names]
    for i, a in enumerate(names):
        for j in range(i + 1, len(names)):
            both = sets[i] & sets[j]
            if both:
                raise ValidationError(f"images in both {a} and {names[j]}: {sorted(both)[:5]}")
    known = split.seen_classes | split.unseen_classes
    for name, ids in zip(names, sets):
        for image_id in sorted(ids):
            if image_id not in class_of:
                raise ValidationError(f"{name} image {image_id!r} has no feature record")
            cls = class_of[image_id]
            if cls not in known:
                raise ValidationError(f"image {image_id!r} has unknown class {cls!r}")
            if name in ("train", "heldout") and cls not in split.seen_classes:
                raise ValidationError(f"{name} image {image_id!r} belongs to unseen class {cls!r}")
            if name == "unseen_heldout" and cls not in split.unseen_classes:
                raise ValidationError(f"unseen_heldout image {image_id!r} belongs to seen class {cls!r}")
    if not split.train_images:
        raise ValidationError("split has no training images")


def load_dataset(documents_path, features_path, split_path, wv, max_words=DEFAULT_MAX_WORDS,
                 oov_policy="drop"):
    documents = load_documents(documents_path, wv, max_words, oov_policy)
    features, (n, r0) = load_features(features_path)
    if r0 != wv.dim:
        raise ValidationError(f"feature width {r0} differs from word-vector width {wv.dim}")
    split = load_split(split_path, documents, features)
    return Dataset(documents, tuple(features), split, r0, n)


def batches(dataset, batch_size, seed, epoch=0, classes=None):
    """One epoch of (record, label index) batches in a seeded order.

    ``classes`` (default: all seen classes, sorted) restricts the training
    images and fixes the label order. The last partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    classes = dataset.seen_classes if classes is None else list(classes)
    label = {c: i for i, c in enumerate(classes)}
    records = [r for r in dataset.images("train") if r.class_id in label]
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield [(records[i], label[records[i].class_id]) for i in order[start:start + batch_size]]
