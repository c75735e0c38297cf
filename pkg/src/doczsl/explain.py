"""Read-only attention exports: top document words, patch->word rows,
word->patch grids, and grayscale SVG heatmaps."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .model import attention_map, encode_document, encode_image
from .tensor import no_grad

DEFAULT_TOP_WORDS = 8


@dataclass
class AttributionRecord:
    class_id: str
    kind: str  # top_words | patch_to_word | word_to_image
    payload: dict = field(default_factory=dict)
    image_id: str = None

    def to_json(self):
        rec = {"class_id": self.class_id, "kind": self.kind}
        if self.image_id is not None:
            rec["image_id"] = self.image_id
        rec.update(self.payload)
        return rec


def _ranked(tokens, weights, k):
    order = sorted(range(len(tokens)), key=lambda i: (-weights[i], i))[:max(0, k)]
    return [(tokens[i], float(weights[i])) for i in order]


def word_distribution(doc, params):
    """Head-averaged final-block CLS attention over the document's words,
    renormalised after removing the CLS self-attention entry."""
    with no_grad():
        enc = encode_document(doc, params)
    att = enc.cls_attention.mean(axis=0)[: len(doc.tokens)]
    total = att.sum()
    return att / total if total > 0 else np.full(len(att), 1.0 / len(att))


def top_attended_words(doc, params, k=DEFAULT_TOP_WORDS):
    weights = word_distribution(doc, params)
    return AttributionRecord(doc.class_id, "top_words",
                             {"words": _ranked(doc.tokens, weights, min(k, len(doc.tokens)))})


def attention_matrix(rec, doc, params):
    """(N, M) patch-over-word attention for one image and one document."""
    with no_grad():
        attn, _ = attention_map(encode_image(rec, params), encode_document(doc, params), params)
    return attn.data


def patch_to_word(rec, doc, params, patch, k=3):
    attn = attention_matrix(rec, doc, params)
    if not 0 <= patch < attn.shape[0]:
        raise IndexError(f"patch {patch} out of range for {attn.shape[0]} patches")
    row = attn[patch]
    return AttributionRecord(doc.class_id, "patch_to_word", {
        "patch": int(patch),
        "words": _ranked(doc.tokens, row, min(k, len(doc.tokens))),
        "row": [float(x) for x in row],
    }, image_id=rec.image_id)


def grid_shape(n, shape=None):
    if shape is not None:
        rows, cols = shape
        if rows * cols != n:
            raise DimensionError(f"grid {rows}x{cols} does not hold {n} patches")
        return rows, cols
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def minmax(values):
    """Scale to [0, 1]; a constant input maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    return np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)


def word_to_image(rec, doc, params, position, shape=None):
    attn = attention_matrix(rec, doc, params)
    if not 0 <= position < attn.shape[1]:
        raise IndexError(f"token position {position} out of range for {attn.shape[1]} words")
    col = attn[:, position]
    rows, cols = grid_shape(len(col), shape)
    return AttributionRecord(doc.class_id, "word_to_image", {
        "token": doc.tokens[position],
        "position": int(position),
        "grid_shape": [rows, cols],
        "raw": [float(x) for x in col],
        "grid": minmax(col).reshape(rows, cols).tolist(),
    }, image_id=rec.image_id)


def write_attributions(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


def render_heatmap_svg(grid, path, cell=24, title=None, vmin=None, vmax=None):
    """Grayscale heatmap, darker = larger weight, with a min/max legend."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise DimensionError(f"heatmap needs a non-empty 2-D grid, got shape {grid.shape}")
    rows, cols = grid.shape
    lo = float(grid.min()) if vmin is None else vmin
    hi = float(grid.max()) if vmax is None else vmax
    norm = np.zeros_like(grid) if hi == lo else np.clip((grid - lo) / (hi - lo), 0.0, 1.0)
    width, legend_h = cols * cell, 40
    height = rows * cell + legend_h
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    if title:
        out.append(f"<title>{_escape(title)}</title>")
    for i in range(rows):
        for j in range(cols):
            level = int(round(255 * (1.0 - norm[i, j])))
            out.append(f'<rect class="cell" x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({level},{level},{level})"/>')
    y = rows * cell
    out.append(f'<g class="legend" font-family="monospace" font-size="10">')
    out.append(f'<rect x="0" y="{y + 6}" width="10" height="10" fill="rgb(255,255,255)" stroke="black"/>')
    out.append(f'<text x="14" y="{y + 15}">min {lo:.4g}</text>')
    out.append(f'<rect x="0" y="{y + 22}" width="10" height="10" fill="rgb(0,0,0)"/>')
    out.append(f'<text x="14" y="{y + 31}">max {hi:.4g}</text>')
    out.append("</g></svg>\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out))


def _escape(text):
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
