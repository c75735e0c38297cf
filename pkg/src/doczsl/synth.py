"""Seeded synthetic zero-shot tasks with planted patch-word alignments.

Each visual word has a unit prototype vector that doubles as its word
vector. A class owns a few visual words; its document lists them among many
noise words, and each image patch is a noisy copy of one of the class's
visual-word prototypes. ``oracle_classify`` decodes images with the ground
truth and bounds what a learned model can reach.
"""
from __future__ import annotations

import json
import os
from math import comb
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import ImageFeatureRecord, write_features, write_jsonl
from .errors import ConfigError
from .wordvec import WordVectors, write_wordvec_file

FILES = {
    "documents": "documents.jsonl",
    "features": "features.jsonl",
    "split": "split.jsonl",
    "wordvecs": "wordvecs.txt",
    "ground_truth": "ground_truth.json",
}


@dataclass(frozen=True)
class SynthConfig:
    n_seen: int = 20
    n_unseen: int = 5
    train_per_class: int = 20
    heldout_per_class: int = 5
    test_per_class: int = 10
    n_patches: int = 16
    r0: int = 32
    visual_vocab: int = 40
    noise_vocab: int = 200
    words_per_doc: int = 50
    discriminative_words: int = 5
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_seen", "n_unseen", "train_per_class", "heldout_per_class", "test_per_class",
                     "n_patches", "r0", "visual_vocab", "noise_vocab", "discriminative_words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.discriminative_words > self.visual_vocab:
            raise ConfigError("discriminative_words cannot exceed visual_vocab")
        if self.words_per_doc < self.discriminative_words:
            raise ConfigError("words_per_doc must be >= discriminative_words")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")


@dataclass
class GroundTruth:
    class_words: dict  # class_id -> tuple of discriminative words
    prototypes: dict  # visual word -> (r0,) unit vector
    patch_words: dict  # image_id -> tuple of generating word per patch
    seen_classes: tuple = ()
    unseen_classes: tuple = ()
    image_class: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "class_words": {c: list(w) for c, w in self.class_words.items()},
            "prototypes": {w: v.tolist() for w, v in self.prototypes.items()},
            "patch_words": {i: list(w) for i, w in self.patch_words.items()},
            "seen_classes": list(self.seen_classes),
            "unseen_classes": list(self.unseen_classes),
            "image_class": self.image_class,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            {c: tuple(w) for c, w in obj["class_words"].items()},
            {w: np.array(v) for w, v in obj["prototypes"].items()},
            {i: tuple(w) for i, w in obj["patch_words"].items()},
            tuple(obj["seen_classes"]),
            tuple(obj["unseen_classes"]),
            dict(obj["image_class"]),
        )


def load_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        return GroundTruth.from_json(json.load(fh))


def _unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class SynthData:
    documents: list  # {"class_id", "text"} records
    features: list  # ImageFeatureRecord
    split: list  # split records
    wordvecs: WordVectors
    truth: GroundTruth
    counts: dict


def build(config):
    """Generate everything in memory; ``generate`` writes it to disk."""
    rng = np.random.default_rng(config.seed)
    n_classes = config.n_seen + config.n_unseen
    width = len(str(n_classes - 1))
    class_ids = [f"c{i:0{width}d}" for i in range(n_classes)]
    visual = [f"vis{i:03d}" for i in range(config.visual_vocab)]
    noise = [f"noise{i:03d}" for i in range(config.noise_vocab)]
    proto = _unit_rows(rng, config.visual_vocab, config.r0)
    noise_vecs = _unit_rows(rng, config.noise_vocab, config.r0)

    # distinct discriminative sets per class
    class_words, taken = {}, set()
    for c in class_ids:
        while True:
            pick = tuple(sorted(rng.choice(config.visual_vocab, config.discriminative_words, replace=False)))
            if pick not in taken or len(taken) >= comb(config.visual_vocab, config.discriminative_words):
                break
        taken.add(pick)
        class_words[c] = tuple(visual[i] for i in pick)

    unseen = sorted(class_ids[i] for i in rng.choice(n_classes, config.n_unseen, replace=False))
    seen = sorted(set(class_ids) - set(unseen))

    documents = []
    n_noise = config.words_per_doc - config.discriminative_words
    for c in class_ids:
        words = list(class_words[c]) + [noise[i] for i in rng.integers(0, config.noise_vocab, n_noise)]
        order = rng.permutation(len(words))
        documents.append({"class_id": c, "text": " ".join(words[i] for i in order)})

    vocab_index = {w: i for i, w in enumerate(visual)}
    features, patch_words, image_class, split = [], {}, {}, []
    split += [{"class_id": c, "role": "seen"} for c in seen]
    split += [{"class_id": c, "role": "unseen"} for c in unseen]
    pools = (("train", config.train_per_class), ("heldout", config.heldout_per_class),
             ("test", config.test_per_class))
    counts = {name: 0 for name, _ in pools}
    n_img = 0
    for pool, per_class in pools:
        for c in class_ids:
            for _ in range(per_class):
                image_id = f"img{n_img:05d}"
                n_img += 1
                choice = rng.integers(0, config.discriminative_words, config.n_patches)
                words = tuple(class_words[c][k] for k in choice)
                base = proto[[vocab_index[w] for w in words]]
                patches = base + config.sigma * rng.normal(size=base.shape) if config.sigma else base.copy()
                features.append(ImageFeatureRecord(image_id, c, patches.mean(axis=0), patches))
                patch_words[image_id] = words
                image_class[image_id] = c
                counts[pool] += 1
                if pool == "test":
                    split.append({"image_id": image_id, "partition": "test"})
                elif c in seen:
                    split.append({"image_id": image_id, "partition": pool})
                elif pool == "heldout":
                    split.append({"image_id": image_id, "partition": "unseen_heldout"})
                # unseen-class training-pool images are generated but never listed

    wv = WordVectors.from_pairs(list(zip(visual, proto)) + list(zip(noise, noise_vecs)))
    truth = GroundTruth(class_words, dict(zip(visual, proto)), patch_words, tuple(seen), tuple(unseen),
                        image_class)
    counts.update(classes=n_classes, documents=len(documents), images=n_img)
    return SynthData(documents, features, split, wv, truth, counts)


def generate(config, out_dir):
    """Write documents, features, split, word vectors and ground truth to ``out_dir``.

    Returns ``(paths, SynthData)``.
    """
    data = build(config)
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in FILES.items()}
    write_jsonl(paths["documents"], data.documents)
    write_features(paths["features"], data.features)
    write_jsonl(paths["split"], data.split)
    write_wordvec_file(data.wordvecs, paths["wordvecs"])
    with open(paths["ground_truth"], "w", encoding="utf-8") as fh:
        json.dump({"config": asdict(config), **data.truth.to_json()}, fh, separators=(",", ":"))
        fh.write("\n")
    return paths, data


def oracle_predict(patch_features, truth, candidates):
    """Nearest-prototype (cosine) word per patch, then the candidate class whose
    discriminative set covers the most patches. Ties go to the first class in
    sorted order."""
    words = sorted(truth.prototypes)
    proto = np.array([truth.prototypes[w] for w in words])
    proto = proto / np.linalg.norm(proto, axis=1, keepdims=True)
    candidates = sorted(candidates)
    patches = np.asarray(patch_features)
    norms = np.linalg.norm(patches, axis=1, keepdims=True)
    assigned = np.argmax((patches / np.where(norms == 0, 1.0, norms)) @ proto.T, axis=1)
    assigned = [words[i] for i in assigned]
    votes = [sum(w in set(truth.class_words[c]) for w in assigned) for c in candidates]
    return candidates[int(np.argmax(votes))]


def oracle_classify(features, truth, candidates=None):
    """Oracle ZSL decisions over unseen classes.

    ``features`` is an iterable of ``ImageFeatureRecord``; only images of
    candidate classes are scored. Returns ``(predictions, per-class accuracy)``.
    """
    from .evaluate import per_class_top1

    candidates = sorted(candidates if candidates is not None else truth.unseen_classes)
    recs = [r for r in features if r.class_id in set(candidates)]
    preds = {r.image_id: oracle_predict(r.patch_features, truth, candidates) for r in recs}
    acc = per_class_top1([preds[r.image_id] for r in recs], [r.class_id for r in recs], candidates)
    return preds, acc
