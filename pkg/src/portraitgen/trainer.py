"""Training loop: timestep/dropout/face-region draws, total loss, updates.

All randomness comes from named numpy substreams of one root seed; their
states go into every checkpoint so a resumed run continues bit-identically.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from . import toyfaces
from .conditioning import FULL, dropout_branch
from .denoiser import DenoiserConfig
from .losses import (LossReport, LossWeights, batched_noise_loss, identity_loss, localization_loss,
                     resample_mask)
from .model import PortraitModel
from .schedule import build_schedule, forward_noise

log = logging.getLogger(__name__)

STREAMS = ("data", "timestep", "dropout", "region", "noise", "init", "sampler")


class TrainingError(RuntimeError):
    pass


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a root seed."""
    return np.random.default_rng([int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


class Streams:
    def __init__(self, root_seed: int):
        self.gens = {name: substream(root_seed, name) for name in STREAMS}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.gens[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.gens.items()}

    def restore(self, state: dict):
        for name, st in state.items():
            self.gens[name].bit_generator.state = st


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 2
    learning_rate: float = 1e-5
    momentum: float = 0.9
    optimizer: str = "sgd"
    grad_clip: float = 1.0
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    loss_weights: LossWeights = field(default_factory=LossWeights)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    manifest: Optional[str] = None
    out_dir: Optional[str] = None
    checkpoint_interval: int = 500
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        self.loss_weights.check_schedule(self.T)

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def schedule(self):
        return build_schedule(self.T, self.beta_start, self.beta_end)


def desk_config(**overrides) -> TrainConfig:
    """Scaled-down profile: T=100 with R_t kept at T/4.

    beta_start is stretched by 1000/T; beta_end = 0.05 leaves abar_T ~ 0.075,
    low enough to start sampling from pure noise without the near-zero SNR
    that makes a tiny network's eps errors blow up. Adam is used because
    momentum SGD under the global clip never trains the conditioning path in
    2000 steps, and the identity loss is down-weighted because the analytic
    embedder is very sensitive to the residual noise in one-step estimates.
    """
    weights = overrides.pop("loss_weights", None) or LossWeights(R_t=25, identity_weight=0.05)
    base = dict(steps=2000, batch_size=8, learning_rate=2e-3, optimizer="adam", T=100,
                beta_start=1e-3, beta_end=0.05, loss_weights=weights)
    base.update(overrides)
    return TrainConfig(**base)


# --- batches ------------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor        # B x 3 x H x W (latents)
    masks: torch.Tensor         # B x H x W
    captions: List[str]
    bboxes: List[tuple]
    references: List[torch.Tensor]
    ref_vectors: List[torch.Tensor]
    indices: List[int]


class SampleCache:
    """Tensors for a fixed sample list, converted once."""

    def __init__(self, samples: Sequence[toyfaces.TrainingSample], model: PortraitModel):
        self.samples = list(samples)
        self.model = model
        self._cache: Dict[int, tuple] = {}

    def __len__(self):
        return len(self.samples)

    def get(self, i: int):
        if i not in self._cache:
            s = self.samples[i]
            dtype = self.model.dtype
            image = self.model.codec.encode(torch.as_tensor(s.image, dtype=dtype))
            ref = torch.as_tensor(s.reference_face, dtype=dtype)
            with torch.no_grad():
                ref_vec = self.model.embedder(ref)
            self._cache[i] = (image, torch.as_tensor(s.face_mask, dtype=dtype), ref, ref_vec)
        return self._cache[i]

    def batch(self, indices: Sequence[int]) -> Batch:
        items = [self.get(int(i)) for i in indices]
        return Batch(
            images=torch.stack([it[0] for it in items]),
            masks=torch.stack([it[1] for it in items]),
            captions=[self.samples[int(i)].caption for i in indices],
            bboxes=[self.samples[int(i)].face_bbox for i in indices],
            references=[it[2] for it in items],
            ref_vectors=[it[3] for it in items],
            indices=[int(i) for i in indices],
        )


@dataclass
class Draws:
    t: List[int]
    branch: List[str]
    face_region: List[bool]
    eps: torch.Tensor


def draw(streams: Streams, batch_size: int, shape, T: int, weights: LossWeights, dtype) -> Draws:
    t = [int(v) for v in streams["timestep"].integers(1, T + 1, size=batch_size)]
    branch = [dropout_branch(float(u)) for u in streams["dropout"].random(batch_size)]
    region = [bool(u < weights.face_region_loss_fraction) for u in streams["region"].random(batch_size)]
    eps = torch.as_tensor(streams["noise"].standard_normal((batch_size,) + tuple(shape)), dtype=dtype)
    return Draws(t, branch, region, eps)


def compute_losses(model: PortraitModel, batch: Batch, draws: Draws, weights: LossWeights):
    """Per-sample (noise, identity, localization) tensors plus the attention record."""
    sched = model.schedule
    t = np.asarray(draws.t)
    zt = forward_noise(batch.images, t, draws.eps, sched)
    faces = [v if b == FULL else None for v, b in zip(batch.ref_vectors, draws.branch)]
    context, id_idx, emo_idx = model.context(batch.captions, faces, draws.branch)
    eps_pred, record = model.unet(zt, torch.as_tensor(t, dtype=torch.long), context)

    use_region = torch.tensor(draws.face_region)
    noise = batched_noise_loss(eps_pred, draws.eps, batch.masks, use_region)

    b = len(draws.t)
    zero = torch.zeros((), dtype=eps_pred.dtype)
    full = [br == FULL for br in draws.branch]
    loc = torch.zeros(b, dtype=eps_pred.dtype)
    if any(full) and (weights.lambda_id_loc > 0 or weights.mu_expr_loc > 0):
        rows = [i for i in range(b) if full[i]]
        if any(id_idx[i] is None for i in rows):
            raise TrainingError("full conditioning requires an identity token in every caption")
        sub_maps = type(record)([m[rows] for m in record.maps], record.resolutions)
        masks = [resample_mask(batch.masks[rows], r) for r in record.resolutions]
        sub = localization_loss(sub_maps, masks, [id_idx[i] for i in rows], [emo_idx[i] for i in rows], weights)
        loc = loc.index_put((torch.tensor(rows),), sub)

    ident = []
    for i in range(b):
        if full[i] and draws.t[i] <= weights.R_t and weights.identity_weight > 0:
            ident.append(weights.identity_weight * identity_loss(
                zt[i], eps_pred[i], draws.t[i], sched, model.codec, batch.bboxes[i],
                batch.references[i], model.embedder, weights))
        else:
            ident.append(zero)
    ident = torch.stack(ident)
    return noise, ident, loc, record


# --- optimizer state ----------------------------------------------------------

def make_optimizer(model: PortraitModel, config: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)


def optimizer_arrays(model: PortraitModel, opt) -> dict:
    out = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for p, st in opt.state.items():
        for key, val in st.items():
            out[f"opt/{names[id(p)]}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return out


def restore_optimizer(model: PortraitModel, opt, arrays: dict):
    params = dict(model.named_parameters())
    for key, arr in arrays.items():
        if not key.startswith("opt/"):
            continue
        name, slot = key[4:].rsplit("/", 1)
        p = params[name]
        val = torch.as_tensor(arr)
        opt.state[p][slot] = val if slot == "step" else val.to(p.dtype).clone()


# --- stepping -----------------------------------------------------------------

def train_step(batch: Batch, model: PortraitModel, optimizer, config: TrainConfig, streams: Streams,
               step: int = 0):
    """One update. Returns (LossReport, per-step log record)."""
    weights = config.loss_weights
    draws = draw(streams, len(batch.indices), batch.images.shape[1:], model.schedule.T, weights,
                 batch.images.dtype)
    noise, ident, loc, _ = compute_losses(model, batch, draws, weights)
    per_sample = noise + ident + loc
    bad = ~torch.isfinite(per_sample.detach())
    if bool(bad.any()):
        k = int(torch.nonzero(bad)[0])
        raise TrainingError(
            f"non-finite loss at step {step}, batch row {k} (sample index {batch.indices[k]}, "
            f"t={draws.t[k]}, branch={draws.branch[k]}): noise={float(noise[k].detach())}, "
            f"id={float(ident[k].detach())}, loc={float(loc[k].detach())}")
    total = per_sample.mean()
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.grad_clip and config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], config.grad_clip)
    optimizer.step()

    report = LossReport(float(noise.detach().mean()), float(ident.detach().mean()),
                        float(loc.detach().mean()), float(total.detach()),
                        gated=all(t > weights.R_t for t in draws.t))
    record = {
        "step": step,
        "t": draws.t,
        "branch": draws.branch,
        "face_region": draws.face_region,
        "sample": batch.indices,
        "noise": report.noise,
        "id": report.identity,
        "loc": report.localization,
        "total": report.total,
        "per_sample": {
            "noise": [float(v) for v in noise.detach()],
            "id": [float(v) for v in ident.detach()],
            "loc": [float(v) for v in loc.detach()],
        },
    }
    return report, record


def build_model(config: TrainConfig) -> PortraitModel:
    seed = int(substream(config.seed, "init").integers(2 ** 62))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        den = config.denoiser
        if den.skip_schedule is None:
            den = DenoiserConfig(**{**den.to_dict(), "skip_schedule": (config.beta_start, config.beta_end, config.T)})
        model = PortraitModel(den, config.schedule())
    return model.to(config.torch_dtype)


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["denoiser"] = config.denoiser.to_dict()
    return d


def save_checkpoint(path, model: PortraitModel, optimizer, streams: Streams, step: int,
                    config: TrainConfig) -> Path:
    header = {
        "model": model.config_header(),
        "step": step,
        "rng": streams.state(),
        "train_config": config_to_dict(config),
    }
    arrays = model.arrays()
    arrays.update(optimizer_arrays(model, optimizer))
    return ckpt.save(path, header, arrays)


class Trainer:
    """Owns model, optimizer, streams and the on-disk run directory."""

    def __init__(self, config: TrainConfig, samples: Optional[Sequence[toyfaces.TrainingSample]] = None):
        self.config = config
        if samples is None:
            if not config.manifest:
                raise ValueError("no manifest configured")
            if not Path(config.manifest).exists():
                raise FileNotFoundError(f"manifest not found: {config.manifest}")
            samples = toyfaces.load_manifest(config.manifest)
        self.model = build_model(config)
        self.data = SampleCache(samples, self.model)
        self.optimizer = make_optimizer(self.model, config)
        self.streams = Streams(config.seed)
        self.step = 0
        self.out = Path(config.out_dir) if config.out_dir else None

    def resume(self, path):
        header, arrays = ckpt.load(path)
        ckpt.require_match(header["model"], self.model.config_header(),
                           ["denoiser", "text_dim", "vocab_hash", "schedule", "head_hidden"])
        self.model.load_arrays(arrays)
        restore_optimizer(self.model, self.optimizer, arrays)
        self.streams.restore(header["rng"])
        self.step = int(header["step"])
        if self.out is not None:
            self._truncate_log(self.step)

    def _truncate_log(self, keep: int):
        path = self.out / "train_log.jsonl"
        if path.exists():
            lines = path.read_text(encoding="utf-8").splitlines()[:keep]
            path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")

    def checkpoint(self) -> Path:
        return save_checkpoint(self.out / f"ckpt_{self.step:06d}.npz", self.model, self.optimizer,
                               self.streams, self.step, self.config)

    def run(self, until: Optional[int] = None, callback=None) -> List[LossReport]:
        cfg = self.config
        until = cfg.steps if until is None else until
        reports = []
        log_fh = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            log_fh = open(self.out / "train_log.jsonl", "a", encoding="utf-8")
        self.model.train()
        try:
            while self.step < until:
                idx = self.streams["data"].integers(0, len(self.data), size=cfg.batch_size)
                batch = self.data.batch(idx)
                try:
                    report, record = train_step(batch, self.model, self.optimizer, cfg, self.streams,
                                                self.step + 1)
                except TrainingError as err:
                    if self.out is not None:
                        (self.out / "failure.json").write_text(
                            json.dumps({"step": self.step + 1, "error": str(err),
                                        "samples": batch.indices}), encoding="utf-8")
                    raise
                self.step += 1
                reports.append(report)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if callback is not None:
                    callback(self.step, report, record)
                if self.out is not None and (self.step % cfg.checkpoint_interval == 0 or self.step == cfg.steps):
                    log_fh.flush()
                    self.checkpoint()
                if self.step % 100 == 0:
                    log.info("step %d noise %.4f id %.4f loc %.2e", self.step, report.noise,
                             report.identity, report.localization)
        finally:
            if log_fh is not None:
                log_fh.close()
        self.model.eval()
        return reports


def train(config: TrainConfig, samples=None, resume=None) -> Trainer:
    trainer = Trainer(config, samples)
    if resume is not None:
        trainer.resume(resume)
    trainer.run()
    return trainer


def ema(values: Sequence[float], window: int = 100) -> np.ndarray:
    """Exponential moving average with span ``window``."""
    alpha = 2.0 / (window + 1.0)
    out = np.empty(len(values))
    acc = values[0]
    for i, v in enumerate(values):
        acc = alpha * v + (1 - alpha) * acc if i else v
        out[i] = acc
    return out
