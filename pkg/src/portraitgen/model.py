"""The trainable bundle (UNet + conditioning head) and its frozen companions."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .conditioning import (FULL, TEXT_ONLY, UNCONDITIONAL, AnalyticFaceEmbedder, Conditioner,
                           TextEncoder, default_face_embedder)
from .denoiser import DenoiserConfig, UNet
from .losses import IdentityCodec
from .schedule import NoiseSchedule, build_schedule


class PortraitModel(nn.Module):
    """UNet and augmentation head (trained) plus text/face encoders (frozen)."""

    def __init__(self, denoiser_config: Optional[DenoiserConfig] = None,
                 schedule: Optional[NoiseSchedule] = None,
                 encoder: Optional[TextEncoder] = None,
                 embedder: Optional[AnalyticFaceEmbedder] = None,
                 head_hidden: int = 128):
        super().__init__()
        cfg = denoiser_config or DenoiserConfig()
        self.encoder = encoder or TextEncoder(dim=cfg.text_dim)
        if self.encoder.dim != cfg.text_dim:
            raise ValueError("text encoder width must match the denoiser's text_dim")
        self.embedder = embedder or default_face_embedder()
        self.schedule = schedule or build_schedule(100)
        self.codec = IdentityCodec()
        self.unet = UNet(cfg)
        self.conditioner = Conditioner(cfg.text_dim, self.embedder.dim, head_hidden)
        self.head_hidden = head_hidden
        self._text_cache = {}

    @property
    def dtype(self):
        return self.conditioner.null_embedding.dtype

    def text(self, prompt: str):
        if prompt not in self._text_cache:
            self._text_cache[prompt] = self.encoder.encode(prompt, dtype=torch.float64)
        seq, emb = self._text_cache[prompt]
        return seq, emb.to(self.dtype)

    def face_vector(self, face) -> torch.Tensor:
        return self.embedder(torch.as_tensor(face, dtype=self.dtype))

    def context(self, prompts: Sequence[str], face_vecs: Sequence[Optional[torch.Tensor]],
                branches: Sequence[str]) -> Tuple[torch.Tensor, List[Optional[int]], List[Optional[int]]]:
        """Stack conditioning rows for a batch; returns (B x n x D, id idx, emotion idx)."""
        rows, id_idx, emo_idx = [], [], []
        head = self.conditioner.head
        for prompt, face, branch in zip(prompts, face_vecs, branches):
            seq, text = self.text(prompt)
            id_idx.append(seq.identity_index)
            emo_idx.append(seq.emotion_index)
            if branch == UNCONDITIONAL:
                rows.append(self.conditioner.null_embedding.unsqueeze(0).expand_as(text))
            elif branch == TEXT_ONLY or face is None:
                rows.append(text)
            elif branch == FULL:
                i = seq.identity_index
                if i is None:
                    raise ValueError(f"face provided but no identity token in {prompt!r}")
                new_row = head(text[i], face.to(text.dtype)).unsqueeze(0)
                rows.append(torch.cat([text[:i], new_row, text[i + 1:]], dim=0))
            else:
                raise ValueError(f"unknown branch {branch!r}")
        return torch.stack(rows), id_idx, emo_idx

    # --- checkpoint header ---------------------------------------------------

    def config_header(self) -> dict:
        return {
            "denoiser": self.unet.config.to_dict(),
            "text_dim": self.encoder.dim,
            "max_tokens": self.encoder.max_tokens,
            "vocab_hash": self.encoder.vocab_hash,
            "vocabulary": self.encoder.vocab,
            "identity_tokens": list(self.encoder.identity_tokens),
            "emotions": list(self.encoder.emotions),
            "schedule": self.schedule.to_config(),
            "head_hidden": self.head_hidden,
        }

    def arrays(self) -> dict:
        return {f"model/{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict):
        state = {k[len("model/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("model/")}
        self.load_state_dict(state, strict=True)

    @classmethod
    def from_header(cls, header: dict) -> "PortraitModel":
        cfg = DenoiserConfig(**header["denoiser"])
        encoder = TextEncoder(header["vocabulary"], header["text_dim"], header["max_tokens"],
                              identity_tokens=header["identity_tokens"], emotions=header["emotions"])
        sched = build_schedule(**header["schedule"])
        return cls(cfg, sched, encoder, head_hidden=header["head_hidden"])


def load_model(path, expected: Optional[dict] = None) -> Tuple[PortraitModel, dict, dict]:
    header, arrays = ckpt.load(path)
    model = PortraitModel.from_header(header["model"])
    if expected is not None:
        ckpt.require_match(header["model"], expected, [k for k in expected if k != "vocabulary"])
    model.load_arrays(arrays)
    model.eval()
    return model, header, arrays
