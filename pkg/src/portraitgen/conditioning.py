"""Text encoding, face embedding and identity-token augmentation.

The text encoder is a frozen lookup table plus sinusoidal positions, so each
row depends only on its own word and slot. The face embedder is analytic:
chromaticity and shape moments of the skin region, which on toy faces are
blind to expression strokes by construction.
"""

from __future__ import annotations

import functools
import hashlib
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import toyfaces

PAD, UNK = "<pad>", "<unk>"
TEXT_DIM = 64
FACE_DIM = 8
MAX_TOKENS = 16

UNCONDITIONAL, TEXT_ONLY, FULL = "unconditional", "text_only", "full"
UNCOND_FRACTION = 0.10
TEXT_ONLY_FRACTION = 0.10

EXTRA_WORDS = (
    "person", "and", "smiling", "reading", "sitting", "standing", "walking",
    "painting", "sketch", "style", "at", "the", "beach", "park", "city",
    "wearing", "hat", "glasses", "on", "looking", "with", "face",
)


@dataclass
class TokenSequence:
    tokens: List[int]
    words: List[str]
    identity_index: Optional[int] = None
    emotion_index: Optional[int] = None

    def __len__(self):
        return len(self.tokens)


@dataclass
class FaceEmbedding:
    vector: torch.Tensor
    source: str = "analytic"


@dataclass
class ConditioningSequence:
    embeddings: torch.Tensor            # n x D_c
    identity_index: Optional[int]
    emotion_index: Optional[int]
    dropout_state: str = FULL
    text_embeddings: Optional[torch.Tensor] = None  # raw psi rows, kept for dropout


# --- vocabulary & text ------------------------------------------------------

def default_vocabulary() -> Dict[str, int]:
    words = sorted(set(toyfaces.caption_words()) | set(EXTRA_WORDS))
    return {w: i for i, w in enumerate([PAD, UNK] + words)}


def save_vocabulary(vocab: Dict[str, int], path) -> None:
    lines = [f"{w}\t{i}" for w, i in sorted(vocab.items(), key=lambda kv: kv[1])]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocabulary(path) -> Dict[str, int]:
    vocab = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        word, idx = line.rsplit("\t", 1)
        vocab[word] = int(idx)
    for special in (PAD, UNK):
        if special not in vocab:
            raise ValueError(f"vocabulary lacks {special}")
    return vocab


def vocabulary_hash(vocab: Dict[str, int]) -> str:
    text = "\n".join(f"{w}\t{i}" for w, i in sorted(vocab.items(), key=lambda kv: kv[1]))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def split_words(prompt: str) -> List[str]:
    return re.findall(r"[a-z0-9']+", prompt.lower())


def locate_identity_token(tokens: TokenSequence, identity_set: Iterable[str] = toyfaces.IDENTITY_TOKENS) -> Optional[int]:
    identity_set = set(identity_set)
    for i, w in enumerate(tokens.words):
        if w in identity_set:
            return i
    return None


def locate_emotion_token(tokens: TokenSequence, emotions: Iterable[str] = toyfaces.EMOTIONS) -> Optional[int]:
    emotions = set(emotions)
    for i, w in enumerate(tokens.words):
        if w in emotions:
            return i
    return None


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)[None, :]
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


class TextEncoder:
    """Frozen, context-free prompt encoder."""

    def __init__(self, vocab: Optional[Dict[str, int]] = None, dim: int = TEXT_DIM,
                 max_tokens: int = MAX_TOKENS, seed: int = 0,
                 identity_tokens: Sequence[str] = toyfaces.IDENTITY_TOKENS,
                 emotions: Sequence[str] = toyfaces.EMOTIONS):
        self.vocab = dict(vocab) if vocab is not None else default_vocabulary()
        self.dim = dim
        self.max_tokens = max_tokens
        self.identity_tokens = tuple(identity_tokens)
        self.emotions = tuple(emotions)
        rng = np.random.default_rng([seed, 0x7E47])
        table = rng.standard_normal((max(self.vocab.values()) + 1, dim))
        self.table = table
        self.table.setflags(write=False)
        self.positions = 0.5 * sinusoidal_positions(max_tokens, dim)
        self.positions.setflags(write=False)

    @property
    def vocab_hash(self) -> str:
        return vocabulary_hash(self.vocab)

    def tokenize(self, prompt: str) -> TokenSequence:
        words = split_words(prompt)
        if not words:
            raise ValueError("empty prompt")
        if len(words) > self.max_tokens:
            raise ValueError(f"prompt has {len(words)} words, limit is {self.max_tokens}")
        unk = self.vocab[UNK]
        ids = [self.vocab.get(w, unk) for w in words]
        seq = TokenSequence(ids, words)
        seq.identity_index = locate_identity_token(seq, self.identity_tokens)
        seq.emotion_index = locate_emotion_token(seq, self.emotions)
        return seq

    def encode(self, prompt: str, dtype=torch.float32) -> Tuple[TokenSequence, torch.Tensor]:
        """Return the token sequence and a ``max_tokens x dim`` matrix (padded)."""
        seq = self.tokenize(prompt)
        ids = seq.tokens + [self.vocab[PAD]] * (self.max_tokens - len(seq.tokens))
        emb = self.table[ids] + self.positions
        return seq, torch.as_tensor(emb, dtype=dtype)


_DEFAULT_ENCODER: Optional[TextEncoder] = None


def encode_text(prompt: str, encoder: Optional[TextEncoder] = None):
    global _DEFAULT_ENCODER
    if encoder is None:
        if _DEFAULT_ENCODER is None:
            _DEFAULT_ENCODER = TextEncoder()
        encoder = _DEFAULT_ENCODER
    return encoder.encode(prompt)


# --- face embedding ----------------------------------------------------------

def _smoothstep(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    s = ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


# skin chroma^2 is about 0.057 for every hue; grey background sits near 0
SKIN_CHROMA2 = (0.025, 0.045)


def skin_weights(face: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Soft skin membership plus chroma coordinates for an ``(..., h, w, 3)`` batch.

    Membership depends on chromaticity only (gated by brightness), so pixels
    scaled by a common factor keep their weight.
    """
    x = face.clamp(0.0, 1.0)
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    intensity = (r + g + b).clamp_min(1e-3)
    u = (2.0 * r - g - b) / (2.0 * intensity)
    v = (math.sqrt(3.0) / 2.0) * (g - b) / intensity
    chroma2 = u * u + v * v
    w = _smoothstep(chroma2, *SKIN_CHROMA2) * _smoothstep(intensity, 0.3, 0.5)
    return w, u, v, intensity


def face_moments(face: torch.Tensor) -> torch.Tensor:
    """Raw shallow features: chroma means and skin-shape moments (..., 8)."""
    w, u, v, _ = skin_weights(face)
    h, wd = face.shape[-3], face.shape[-2]
    yy = torch.arange(h, dtype=face.dtype).reshape(h, 1).expand(h, wd)
    xx = torch.arange(wd, dtype=face.dtype).reshape(1, wd).expand(h, wd)
    mass = w.sum(dim=(-2, -1)) + 1e-6

    def wmean(q):
        return (w * q).sum(dim=(-2, -1)) / mass

    cx, cy = wmean(xx), wmean(yy)
    dx = xx - cx[..., None, None]
    dy = yy - cy[..., None, None]
    mu_xx = wmean(dx * dx)
    mu_yy = wmean(dy * dy)
    upper = torch.tanh(dy / 2.0)
    # eye holes sit in the upper half, so horizontal spread there vs below
    # tracks eye spacing
    eye_asym = wmean(dx * dx * upper)
    mu_xxxx = wmean(dx ** 4)
    mu_xxyy = wmean(dx * dx * dy * dy)
    return torch.stack([
        wmean(u), wmean(v),
        mu_xx, mu_yy, eye_asym,
        mu_xxxx.clamp_min(0.0).sqrt(), mu_xxyy.clamp_min(1e-12).sqrt(),
        mass / (h * wd),
    ], dim=-1)


# relative weight of each standardized feature; hue dominates
FEATURE_WEIGHTS = np.array([1.6, 1.6, 1.0, 1.0, 1.0, 0.6, 0.6, 0.3])


@functools.lru_cache(maxsize=None)
def _calibration(size: int = toyfaces.IMAGE_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    """Centre and scale of the raw features over a deterministic identity grid."""
    feats = []
    grid = np.linspace(0.0, 1.0, 5)
    for h in np.linspace(0.0, 1.0, 12, endpoint=False):
        for e in grid:
            for s in grid:
                spec = toyfaces.FaceSpec((h, e, s), "neutral", "man", 0)
                img, _, bbox = toyfaces.render_face(spec, 0, size)
                crop = torch.as_tensor(toyfaces.crop(img, bbox))
                feats.append(face_moments(crop).numpy())
    feats = np.stack(feats)
    center = feats.mean(axis=0)
    center[:2] = 0.0  # hue is uniform on the circle
    scale = feats.std(axis=0)
    scale[:2] = np.sqrt((feats[:, :2] ** 2).mean())
    scale = np.maximum(scale, 1e-6)
    return center, scale


class AnalyticFaceEmbedder:
    """Differentiable analytic stand-in for a face recognition network."""

    source = "analytic"

    def __init__(self, min_size: int = 4, max_size: int = 64):
        self.min_size = min_size
        self.max_size = max_size
        center, scale = _calibration()
        self.center = center.copy()
        self.scale = scale.copy()
        self.center.setflags(write=False)
        self.scale.setflags(write=False)
        self.dim = FACE_DIM

    def __call__(self, face) -> torch.Tensor:
        face = torch.as_tensor(face)
        if not face.is_floating_point():
            face = face.to(torch.float64)
        if face.shape[-1] != 3 or face.ndim < 3:
            raise ValueError(f"expected (..., h, w, 3) face crop, got {tuple(face.shape)}")
        h, w = face.shape[-3], face.shape[-2]
        if not (self.min_size <= h <= self.max_size and self.min_size <= w <= self.max_size):
            raise ValueError(f"face crop {h}x{w} outside [{self.min_size}, {self.max_size}]")
        flat = face.reshape(-1, h, w, 3)
        if bool((flat == 0).reshape(flat.shape[0], -1).all(dim=1).any()):
            raise ValueError("degenerate all-zero face crop")
        raw = face_moments(face)
        center = torch.tensor(self.center, dtype=face.dtype)
        scale = torch.tensor(self.scale, dtype=face.dtype)
        weights = torch.tensor(FEATURE_WEIGHTS, dtype=face.dtype)
        return (raw - center) / scale * weights

    def state_bytes(self) -> bytes:
        return self.center.tobytes() + self.scale.tobytes()


_DEFAULT_EMBEDDER: Optional[AnalyticFaceEmbedder] = None


def default_face_embedder() -> AnalyticFaceEmbedder:
    global _DEFAULT_EMBEDDER
    if _DEFAULT_EMBEDDER is None:
        _DEFAULT_EMBEDDER = AnalyticFaceEmbedder()
    return _DEFAULT_EMBEDDER


def embed_face(face, embedder: Optional[AnalyticFaceEmbedder] = None) -> FaceEmbedding:
    embedder = embedder or default_face_embedder()
    return FaceEmbedding(embedder(face), embedder.source)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Cosine along the last axis; zero vectors are rejected, not clamped."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na < eps).any()) or bool((nb < eps).any()):
        raise ValueError("zero-norm embedding")
    return (a * b).sum(dim=-1) / (na * nb)


# --- augmentation ------------------------------------------------------------

class AugmentationHead(nn.Module):
    """Two-layer perceptron fusing [text row || face embedding] into a text row."""

    def __init__(self, text_dim: int = TEXT_DIM, face_dim: int = FACE_DIM, hidden: int = 128):
        super().__init__()
        self.text_dim = text_dim
        self.face_dim = face_dim
        self.fc1 = nn.Linear(text_dim + face_dim, hidden)
        self.act = nn.SiLU()
        self.fc2 = nn.Linear(hidden, text_dim)

    def forward(self, text_row: torch.Tensor, face_vec: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(torch.cat([text_row, face_vec], dim=-1))))


def augment(tokens: TokenSequence, text_emb: torch.Tensor, face: Optional[FaceEmbedding],
            head: AugmentationHead) -> ConditioningSequence:
    """Replace the identity token's row with ``head([psi(w) || phi(f)])``."""
    if face is None:
        return ConditioningSequence(text_emb, tokens.identity_index, tokens.emotion_index,
                                    TEXT_ONLY, text_emb)
    idx = tokens.identity_index
    if idx is None:
        raise ValueError("face provided but the prompt has no identity token")
    vec = face.vector.to(text_emb.dtype)
    new_row = head(text_emb[idx], vec)
    rows = [text_emb[:idx], new_row.unsqueeze(0), text_emb[idx + 1:]]
    return ConditioningSequence(torch.cat(rows, dim=0), idx, tokens.emotion_index, FULL, text_emb)


def dropout_branch(u: float) -> str:
    if u < UNCOND_FRACTION:
        return UNCONDITIONAL
    if u < UNCOND_FRACTION + TEXT_ONLY_FRACTION:
        return TEXT_ONLY
    return FULL


def null_conditioning(null_embedding: torch.Tensor, n: int) -> torch.Tensor:
    return null_embedding.unsqueeze(0).expand(n, -1)


def apply_conditioning_dropout(cond: ConditioningSequence, u: float,
                               null_embedding: torch.Tensor) -> ConditioningSequence:
    """Map a uniform draw to the unconditional / text-only / full branch."""
    branch = dropout_branch(u)
    if branch == FULL:
        return cond
    raw = cond.text_embeddings if cond.text_embeddings is not None else cond.embeddings
    if branch == TEXT_ONLY:
        return replace(cond, embeddings=raw, dropout_state=TEXT_ONLY)
    null = null_conditioning(null_embedding.to(raw.dtype), raw.shape[0])
    return replace(cond, embeddings=null, dropout_state=UNCONDITIONAL)


class Conditioner(nn.Module):
    """Trainable conditioning parts: the augmentation head and the null row."""

    def __init__(self, text_dim: int = TEXT_DIM, face_dim: int = FACE_DIM, hidden: int = 128):
        super().__init__()
        self.head = AugmentationHead(text_dim, face_dim, hidden)
        self.null_embedding = nn.Parameter(torch.zeros(text_dim))

    def build(self, encoder: TextEncoder, prompt: str, face_vec: Optional[torch.Tensor],
              branch: str = FULL, dtype=torch.float32) -> ConditioningSequence:
        seq, text = encoder.encode(prompt, dtype=dtype)
        if branch == UNCONDITIONAL:
            return ConditioningSequence(null_conditioning(self.null_embedding.to(dtype), text.shape[0]),
                                        seq.identity_index, seq.emotion_index, UNCONDITIONAL, text)
        if branch == TEXT_ONLY or face_vec is None:
            return ConditioningSequence(text, seq.identity_index, seq.emotion_index, TEXT_ONLY, text)
        return augment(seq, text, FaceEmbedding(face_vec), self.head)
