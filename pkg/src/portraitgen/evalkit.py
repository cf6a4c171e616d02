"""Evaluation metrics: identity preservation, text-image consistency, expression coefficient.

All three go through an :class:`EmbedderInterface` so real recognizers can be
plugged in. The defaults are analytic: the face embedder from ``conditioning``
and a toy joint text/image embedder that reads expression strokes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from . import toyfaces
from .conditioning import default_face_embedder, skin_weights, split_words

# crop used for images without a known face box (covers the face at 32 x 32)
FIXED_CROP = (5, 5, 27, 27)
JOINT_DIM = 8


# --- similarity + matching ----------------------------------------------------

def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    if not np.all(np.isfinite(x)) or np.any(norms <= 1e-12):
        raise ValueError(f"zero-norm or non-finite {what} embedding")
    return x / norms[:, None]


def cosine(a, b) -> float:
    a = _unit_rows(a, "first")[0]
    b = _unit_rows(b, "second")[0]
    return float(np.clip(a @ b, -1.0, 1.0))


def similarity_matrix(gen: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return np.clip(_unit_rows(gen, "generated") @ _unit_rows(ref, "reference").T, -1.0, 1.0)


def greedy_match(sim: np.ndarray) -> Tuple[List[Tuple[int, int]], float]:
    """Take the global maximum, drop its row and column, repeat.

    Ties go to the lowest row index, then the lowest column index. Returns the
    matched (row, col) pairs and the mean matched similarity.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or 0 in sim.shape:
        raise ValueError("similarity matrix must be non-empty and 2-D")
    work = sim.copy()
    pairs = []
    for _ in range(min(sim.shape)):
        # argmax on the flattened array returns the first (row-major) maximum
        i, j = np.unravel_index(int(np.argmax(work)), work.shape)
        pairs.append((int(i), int(j)))
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return pairs, float(np.mean([sim[i, j] for i, j in pairs]))


# --- toy joint text/image embedder -------------------------------------------

def _joint_features(curv: float, tilt: float, mouth_open: float) -> np.ndarray:
    o = mouth_open - 0.5
    return np.array([curv, tilt, o, 0.5, curv * tilt, curv * o, tilt * o, 0.5 * (curv ** 2 - tilt ** 2)])


def expression_descriptor(image) -> np.ndarray:
    """Estimate (mouth curvature, brow tilt, mouth openness) from dark skin strokes.

    Inverts the renderer's geometry: the mouth is a parabola in the lower face
    whose corner lift is proportional to curvature; each brow is a bar whose
    slope is proportional to tilt. Returns zeros when no face is visible.
    """
    img = torch.as_tensor(np.asarray(image, dtype=np.float64))
    w, _, _, inten = (t.numpy() for t in skin_weights(img))
    if w.sum() < 10:
        return np.zeros(3)
    core = w > 0.5
    ref = np.quantile(inten[core], 0.75)
    rel = inten / max(ref, 1e-6)
    stroke = w * np.clip((0.75 - rel) / 0.2, 0.0, 1.0)

    h, wd = w.shape
    yy, xx = np.mgrid[0:h, 0:wd].astype(np.float64)
    mass = w.sum()
    cx, cy = (w * xx).sum() / mass, (w * yy).sum() / mass
    dx, dy = xx - cx, yy - cy
    b = 2.0 * np.sqrt((w * dx * dx).sum() / mass)
    a = 2.0 * np.sqrt((w * dy * dy).sum() / mass)

    # mouth: dy = c0 + c1 * u^2 with u = dx / (0.55 b); c1 = -curv * amplitude
    mz = stroke * (dy > 0.1 * a)
    curv, openness = 0.0, 0.0
    if mz.sum() > 2:
        u2 = (dx / (0.55 * b)) ** 2
        X = np.stack([np.ones_like(u2), u2], -1)[mz > 0]
        sw = np.sqrt(mz[mz > 0])
        coef, *_ = np.linalg.lstsq(X * sw[:, None], dy[mz > 0] * sw, rcond=None)
        curv = -coef[1] / toyfaces.MOUTH_AMPLITUDE
        # stroke rows per mouth column: ~1.6 closed, ~3.6 open
        thickness = mz.sum() / max(1.1 * b, 1.0)
        openness = (thickness - 1.6) / 2.0

    # brows: dy = k - 0.45 * tilt * |dx|
    bz = stroke * (dy < -0.25 * a - 0.5) * (np.abs(dx) > 1.0)
    tilt = 0.0
    if bz.sum() > 2:
        X = np.stack([np.ones_like(dx), np.abs(dx)], -1)[bz > 0]
        sw = np.sqrt(bz[bz > 0])
        coef, *_ = np.linalg.lstsq(X * sw[:, None], dy[bz > 0] * sw, rcond=None)
        tilt = -coef[1] / 0.45
    return np.clip(np.array([curv, tilt, openness]), -1.5, 1.5)


class ToyJointEmbedder:
    """Maps emotion words and rendered expression strokes into one 8-dim space.

    Text side: the emotion word's rendering parameters (``neutral`` when the
    prompt has none). Image side: the same features of the parameters measured
    by :func:`expression_descriptor`. Identity and background are ignored.
    """

    source = "toy-joint"
    dim = JOINT_DIM

    def __init__(self, emotions: Optional[Dict[str, Tuple[float, float, float]]] = None):
        self.params = dict(emotions or toyfaces.EXPRESSION_PARAMS)

    def emotion_word(self, prompt: str) -> str:
        for w in split_words(prompt):
            if w in self.params:
                return w
        return "neutral"

    def embed_emotion(self, word: str) -> np.ndarray:
        if word not in self.params:
            raise ValueError(f"unknown emotion word {word!r}")
        return _joint_features(*self.params[word])

    def embed_text(self, prompt: str) -> np.ndarray:
        return self.embed_emotion(self.emotion_word(prompt))

    def embed_image(self, image) -> np.ndarray:
        return _joint_features(*expression_descriptor(image))


def _analytic_face(crop) -> np.ndarray:
    return default_face_embedder()(torch.as_tensor(np.asarray(crop, dtype=np.float64))).numpy()


@dataclass
class EmbedderInterface:
    face: Callable = _analytic_face
    joint: ToyJointEmbedder = field(default_factory=ToyJointEmbedder)


def default_embedders() -> EmbedderInterface:
    return EmbedderInterface()


# --- metrics --------------------------------------------------------------------

def identity_preservation(generated_faces: Sequence, reference_faces: Sequence,
                          embedder: Optional[EmbedderInterface] = None) -> float:
    if len(generated_faces) == 0 or len(reference_faces) == 0:
        raise ValueError("need at least one generated face and one reference")
    embedder = embedder or default_embedders()
    gen = np.stack([np.asarray(embedder.face(f), dtype=np.float64) for f in generated_faces])
    ref = np.stack([np.asarray(embedder.face(f), dtype=np.float64) for f in reference_faces])
    return greedy_match(similarity_matrix(gen, ref))[1]


def text_image_consistency(prompt: str, image, embedder: Optional[EmbedderInterface] = None) -> float:
    joint = (embedder or default_embedders()).joint
    return cosine(joint.embed_text(prompt), joint.embed_image(image))


def expression_coefficient(emotion_word: str, image, embedder: Optional[EmbedderInterface] = None) -> float:
    joint = (embedder or default_embedders()).joint
    return cosine(joint.embed_emotion(emotion_word), joint.embed_image(image))


def attention_ratio(token_map, mask) -> float:
    """Mean attention inside the mask over mean attention outside it.

    Maps and masks share a resolution (``H x W``, or batched ``B x H x W``, in
    which case the per-row ratios are averaged). Uniform attention gives 1.
    """
    a = torch.as_tensor(token_map, dtype=torch.float64)
    m = torch.as_tensor(mask, dtype=torch.float64)
    if a.shape != m.shape:
        raise ValueError(f"map {tuple(a.shape)} and mask {tuple(m.shape)} differ")
    if a.ndim == 2:
        a, m = a[None], m[None]
    inside = m.sum(dim=(-2, -1))
    outside = (1 - m).sum(dim=(-2, -1))
    if bool((inside <= 0).any() or (outside <= 0).any()):
        raise ValueError("mask must have pixels both inside and outside")
    din = (a * m).sum(dim=(-2, -1)) / inside
    dout = (a * (1 - m)).sum(dim=(-2, -1)) / outside
    return float((din / dout.clamp_min(1e-12)).mean())


# --- directory evaluation ------------------------------------------------------------

@dataclass
class EvalReport:
    id_pres: float
    clip_ti: float
    expression_coeff: float
    rows: List[dict]
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def evaluate(directory, out_dir=None, embedder: Optional[EmbedderInterface] = None,
             fixed_crop: Tuple[int, int, int, int] = FIXED_CROP) -> EvalReport:
    """Score a ``{generated/, references/, prompts.jsonl}`` directory.

    Each prompts.jsonl line: ``{"image": "generated/0.png", "prompt": "...",
    "references": ["references/a.png", ...], "face_boxes": [[x0, y0, x1, y1], ...]}``.
    ``face_boxes`` is optional; without it one face at ``fixed_crop`` is assumed.
    Writes ``report.json`` and ``rows.csv`` to ``out_dir`` when given.
    """
    directory = Path(directory)
    embedder = embedder or default_embedders()
    records = [json.loads(line) for line in (directory / "prompts.jsonl").read_text().splitlines() if line.strip()]
    if not records:
        raise ValueError("prompts.jsonl is empty")
    rows = []
    for rec in records:
        image = _read_image(directory / rec["image"])
        boxes = rec.get("face_boxes") or [list(fixed_crop)]
        faces = [toyfaces.crop(image, tuple(b)) for b in boxes]
        refs = [_read_image(directory / r) for r in rec.get("references", [])]
        word = embedder.joint.emotion_word(rec["prompt"])
        rows.append({
            "image": rec["image"],
            "prompt": rec["prompt"],
            "id_pres": identity_preservation(faces, refs, embedder) if refs else float("nan"),
            "clip_ti": text_image_consistency(rec["prompt"], image, embedder),
            "emotion": word,
            "expression_coeff": expression_coefficient(word, image, embedder),
        })

    def mean(key):
        vals = [r[key] for r in rows if np.isfinite(r[key])]
        return float(np.mean(vals)) if vals else float("nan")

    report = EvalReport(mean("id_pres"), mean("clip_ti"), mean("expression_coeff"), rows,
                        {"directory": str(directory), "fixed_crop": list(fixed_crop),
                         "face_embedder": getattr(embedder.face, "__name__", str(embedder.face)),
                         "joint_embedder": embedder.joint.source})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(out / "rows.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return report
