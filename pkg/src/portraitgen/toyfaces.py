"""Procedural face corpus with known identity and expression factors.

Faces are flat-shaded ellipses. Identity sets skin hue, ellipse eccentricity
and eye spacing; expression only bends the mouth and tilts the brows. Mouth
and brow strokes are drawn by scaling the skin colour, so their chromaticity
equals the skin's and a chromaticity-based face embedder cannot see them.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

IDENTITY_TOKENS: Tuple[str, ...] = ("man", "woman")

EMOTIONS: Tuple[str, ...] = (
    "happy", "angry", "sad", "surprised", "fearful", "disgusted",
    "neutral", "calm", "excited", "bored", "confused",
)

# (mouth curvature, brow tilt, mouth open); curvature > 0 lifts the mouth
# corners, tilt > 0 lowers the inner brow ends.
EXPRESSION_PARAMS = {
    "happy": (1.0, 0.0, 0.0),
    "angry": (-0.5, 1.0, 0.0),
    "sad": (-1.0, -1.0, 0.0),
    "surprised": (0.0, -1.0, 1.0),
    "fearful": (-0.5, -1.0, 1.0),
    "disgusted": (-1.0, 1.0, 0.0),
    "neutral": (0.0, 0.0, 0.0),
    "calm": (0.5, 0.0, 0.0),
    "excited": (1.0, -1.0, 1.0),
    "bored": (-0.5, 0.0, 0.0),
    "confused": (0.0, 1.0, 0.0),
}

CAPTION_TEMPLATES: Tuple[str, ...] = (
    "a {emotion} {identity} in front of a plain background",
    "a photo of a {emotion} {identity}",
    "a portrait of a {identity} looking {emotion}",
    "a {identity} with a {emotion} face",
    "a photo of a {identity}",
    "a portrait of a {identity} in front of a plain background",
)
NEUTRAL_TEMPLATES = frozenset({4, 5})

IMAGE_SIZE = 32
NUM_BACKGROUNDS = 4

FACE_RADIUS = 11.0
MAX_ECCENTRICITY = 0.75
SKIN_SATURATION = 0.6
SKIN_VALUE = 0.85
STROKE_SCALE = 0.45
MOUTH_AMPLITUDE = 2.5


@dataclass(frozen=True)
class FaceSpec:
    identity_params: Tuple[float, float, float]
    expression: str = "neutral"
    gender_token: str = "man"
    background_id: int = 0
    emotions: Tuple[str, ...] = field(default=EMOTIONS, compare=False, repr=False)

    def __post_init__(self):
        params = tuple(float(p) for p in self.identity_params)
        if len(params) != 3:
            raise ValueError(f"identity_params needs 3 values, got {len(params)}")
        if not all(0.0 <= p <= 1.0 for p in params):
            raise ValueError(f"identity_params must lie in [0, 1], got {params}")
        object.__setattr__(self, "identity_params", params)
        if self.expression not in self.emotions:
            raise ValueError(f"unknown expression {self.expression!r}")
        if self.expression not in EXPRESSION_PARAMS:
            raise ValueError(f"no rendering parameters for expression {self.expression!r}")
        if self.gender_token not in IDENTITY_TOKENS:
            raise ValueError(f"gender_token must be one of {IDENTITY_TOKENS}, got {self.gender_token!r}")
        if not 0 <= int(self.background_id) < NUM_BACKGROUNDS:
            raise ValueError(f"background_id must be in [0, {NUM_BACKGROUNDS})")

    @property
    def hue(self) -> float:
        return self.identity_params[0]

    def with_expression(self, expression: str) -> "FaceSpec":
        return FaceSpec(self.identity_params, expression, self.gender_token,
                        self.background_id, self.emotions)


@dataclass
class TrainingSample:
    image: np.ndarray          # H x W x 3 in [0, 1]
    caption: str
    reference_face: np.ndarray  # h x w x 3 in [0, 1]
    face_mask: np.ndarray      # H x W in [0, 1]
    face_bbox: Tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    gender: str = "man"
    emotion: Optional[str] = None
    identity_id: int = 0


def skin_rgb(hue: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, SKIN_SATURATION, SKIN_VALUE))


def face_axes(eccentricity_param: float) -> Tuple[float, float]:
    """Half-width and half-height; the area stays pi * FACE_RADIUS**2."""
    ecc = MAX_ECCENTRICITY * eccentricity_param
    squash = (1.0 - ecc * ecc) ** 0.25
    return FACE_RADIUS * squash, FACE_RADIUS / squash


def render_face(spec: FaceSpec, seed: int, size: int = IMAGE_SIZE):
    """Render one face.

    Returns ``(image, face_mask, face_bbox)``: an ``size x size x 3`` float64
    image in [0, 1], a binary float mask of the face ellipse and its bounding
    box ``(x0, y0, x1, y1)`` with exclusive upper corner.
    """
    if not isinstance(spec, FaceSpec):
        raise TypeError("spec must be a FaceSpec")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x70F])
    jx, jy = rng.integers(-1, 2, size=2)
    hue, ecc_param, spacing = spec.identity_params
    curv, tilt, mouth_open = EXPRESSION_PARAMS[spec.expression]

    half = (size - 1) / 2.0
    cx, cy = half + jx, half + jy
    b, a = face_axes(ecc_param)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy

    face = (dx / b) ** 2 + (dy / a) ** 2 <= 1.0

    eye_dx = 2.5 + 2.5 * spacing
    eye_y = -0.25 * a
    eye_r, pupil_r = 1.6, 0.8
    eyes = np.zeros_like(face)
    pupils = np.zeros_like(face)
    for side in (-1.0, 1.0):
        d2 = (dx - side * eye_dx) ** 2 + (dy - eye_y) ** 2
        eyes |= d2 <= eye_r ** 2
        pupils |= d2 <= pupil_r ** 2

    # mouth: parabola through the lower face, corners lifted by curvature
    half_width = 0.55 * b
    u = dx / half_width
    mouth_y = 0.5 * a - curv * MOUTH_AMPLITUDE * (u ** 2 - 0.5)
    mouth_half = 1.8 if mouth_open else 0.8
    mouth = (np.abs(u) <= 1.0) & (np.abs(dy - mouth_y) <= mouth_half)

    brows = np.zeros_like(face)
    brow_len = 2.2
    for side in (-1.0, 1.0):
        v = side * dx - eye_dx
        brow_y = eye_y - 2.6 - tilt * 0.45 * v
        brows |= (np.abs(v) <= brow_len) & (np.abs(dy - brow_y) <= 0.7)

    bg_hue = (0.13 + 0.29 * spec.background_id) % 1.0
    bg_val = 0.35 + 0.1 * spec.background_id
    background = np.array(colorsys.hsv_to_rgb(bg_hue, 0.08, bg_val))
    grain = rng.uniform(-0.03, 0.03, size=(size, size, 1))
    image = np.broadcast_to(background, (size, size, 3)) + grain

    skin = skin_rgb(hue)
    scale = np.where(mouth | brows, STROKE_SCALE, 1.0)[..., None]
    image = np.where(face[..., None], skin * scale, image)
    image = np.where((face & eyes)[..., None], 0.9, image)
    image = np.where((face & pupils)[..., None], 0.05, image)
    image = np.clip(image, 0.0, 1.0)

    mask = face.astype(np.float64)
    rows = np.flatnonzero(face.any(axis=1))
    cols = np.flatnonzero(face.any(axis=0))
    bbox = (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
    return image, mask, bbox


def crop(image, bbox):
    x0, y0, x1, y1 = bbox
    return image[y0:y1, x0:x1]


def make_caption(spec: FaceSpec, template_id: int) -> str:
    if not 0 <= template_id < len(CAPTION_TEMPLATES):
        raise ValueError(f"template_id must be in [0, {len(CAPTION_TEMPLATES)})")
    return CAPTION_TEMPLATES[template_id].format(emotion=spec.expression, identity=spec.gender_token)


def caption_words() -> List[str]:
    """Every word the caption templates can produce."""
    words = set(IDENTITY_TOKENS) | set(EMOTIONS)
    for tpl in CAPTION_TEMPLATES:
        words.update(w for w in tpl.split() if not w.startswith("{"))
    return sorted(words)


# --- dataset ---------------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid the files are stored on."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float64) / 255.0


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_png(path: Path, array: np.ndarray):
    arr = _to_uint8(array)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).astype(np.float64) / 255.0


def generate_samples(n: int, seed: int, size: int = IMAGE_SIZE,
                     emotions: Sequence[str] = EMOTIONS) -> List[TrainingSample]:
    """Draw ``n`` samples in memory, quantized to the on-disk 8-bit grid.

    Identities are shared by groups of four samples so each one has
    reference renders from sibling frames.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    emotions = tuple(emotions)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xDA7A])
    n_ids = max(1, (n + 3) // 4)
    id_params = rng.uniform(0.0, 1.0, size=(n_ids, 3))
    genders = rng.integers(0, 2, size=n_ids)
    samples = []
    for k in range(n):
        ident = k % n_ids
        spec = FaceSpec(
            tuple(id_params[ident]),
            emotions[int(rng.integers(len(emotions)))],
            IDENTITY_TOKENS[int(genders[ident])],
            int(rng.integers(NUM_BACKGROUNDS)),
            emotions,
        )
        render_seed = int(rng.integers(2 ** 31))
        image, mask, bbox = render_face(spec, render_seed, size)
        ref_spec = FaceSpec(spec.identity_params, emotions[int(rng.integers(len(emotions)))],
                            spec.gender_token, int(rng.integers(NUM_BACKGROUNDS)), emotions)
        ref_image, _, ref_bbox = render_face(ref_spec, int(rng.integers(2 ** 31)), size)
        template = int(rng.integers(len(CAPTION_TEMPLATES)))
        caption = make_caption(spec, template)
        samples.append(TrainingSample(
            image=quantize(image),
            caption=caption,
            reference_face=quantize(crop(ref_image, ref_bbox)),
            face_mask=mask,
            face_bbox=bbox,
            gender=spec.gender_token,
            emotion=None if template in NEUTRAL_TEMPLATES else spec.expression,
            identity_id=ident,
        ))
    return samples


def write_dataset(samples: Sequence[TrainingSample], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    out = Path(out_dir)
    for sub in ("images", "masks", "refs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for k, s in enumerate(samples):
        rec = {
            "image": f"images/{k:06d}.png",
            "mask": f"masks/{k:06d}.png",
            "ref_face": f"refs/{k:06d}.png",
            "caption": s.caption,
            "bbox": list(s.face_bbox),
            "gender": s.gender,
            "emotion": s.emotion,
            "identity_id": s.identity_id,
        }
        _save_png(out / rec["image"], s.image)
        _save_png(out / rec["mask"], s.face_mask)
        _save_png(out / rec["ref_face"], s.reference_face)
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out / manifest_name
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def build_dataset(n: int, seed: int, manifest_path) -> Path:
    """Render ``n`` samples next to ``manifest_path`` and write the manifest.

    ``manifest_path`` may name a directory (``manifest.jsonl`` is created in
    it) or the manifest file itself.
    """
    path = Path(manifest_path)
    if path.suffix == ".jsonl":
        out_dir, name = path.parent, path.name
    else:
        out_dir, name = path, "manifest.jsonl"
    samples = generate_samples(n, seed)
    return write_dataset(samples, out_dir, name)


def load_manifest(manifest_path) -> List[TrainingSample]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(TrainingSample(
                image=_load_png(root / rec["image"]),
                caption=rec["caption"],
                reference_face=_load_png(root / rec["ref_face"]),
                face_mask=_load_png(root / rec["mask"]),
                face_bbox=tuple(int(v) for v in rec["bbox"]),
                gender=rec["gender"],
                emotion=rec["emotion"],
                identity_id=int(rec["identity_id"]),
            ))
    return samples


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root) -> str:
    """Digest over every file under ``root`` (relative names and bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(file_digest(p).encode())
    return h.hexdigest()
