"""Command-line entry points: build-data, train, generate, evaluate, inspect-attention.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from . import toyfaces
from .conditioning import FULL
from .denoiser import DenoiserConfig
from .evalkit import attention_ratio, evaluate
from .losses import LossWeights, resample_mask
from .model import load_model
from .sampler import RegionSpec, SamplerConfig, multi_subject_sample, noise_digest, initial_noise, sample
from .schedule import forward_noise
from .trainer import TrainConfig, Trainer, desk_config, substream

log = logging.getLogger("portraitgen")


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


# --- run configuration ------------------------------------------------------------

def _widths(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    section: str            # train | loss | denoiser | sampler
    parse: Callable[[str], Any]
    help: str


# every key of the run-config file; defaults come from the selected profile
RUN_KEYS: Dict[str, Key] = {
    "profile": Key("meta", str, "desk (T=100, scaled for one CPU) or full (T=1000 reference-scale defaults)"),
    "steps": Key("train", int, "optimizer steps"),
    "batch_size": Key("train", int, "samples per step"),
    "learning_rate": Key("train", float, "step size"),
    "momentum": Key("train", float, "SGD momentum"),
    "optimizer": Key("train", str, "sgd or adam"),
    "grad_clip": Key("train", float, "global gradient-norm clip (0 disables)"),
    "seed": Key("train", int, "root seed for every random substream"),
    "T": Key("train", int, "diffusion steps"),
    "beta_start": Key("train", float, "first beta of the linear schedule"),
    "beta_end": Key("train", float, "last beta of the linear schedule"),
    "checkpoint_interval": Key("train", int, "steps between checkpoints"),
    "dtype": Key("train", str, "float32 or float64"),
    "manifest": Key("train", str, "dataset manifest path"),
    "out_dir": Key("train", str, "run directory"),
    "beta": Key("loss", float, "identity-token ceiling inside the face"),
    "gamma": Key("loss", float, "expression-token ceiling inside the face"),
    "lambda_id_loc": Key("loss", float, "identity localization weight"),
    "mu_expr_loc": Key("loss", float, "expression localization weight"),
    "R_t": Key("loss", int, "identity loss only for t <= R_t"),
    "face_region_loss_fraction": Key("loss", float, "share of samples with face-only noise loss"),
    "identity_weight": Key("loss", float, "multiplier on the identity loss (1 = plain sum)"),
    "widths": Key("denoiser", _widths, "channel widths of the three UNet levels"),
    "text_dim": Key("denoiser", int, "conditioning width D_c"),
    "attn_dim": Key("denoiser", int, "attention width d"),
    "heads": Key("denoiser", int, "attention heads (1 or 2)"),
    "time_dim": Key("denoiser", int, "timestep embedding width"),
    "num_steps": Key("sampler", int, "sampling steps"),
    "guidance_scale": Key("sampler", float, "classifier-free guidance scale"),
}


@dataclass
class RunConfig:
    train: TrainConfig
    sampler: SamplerConfig

    @staticmethod
    def parse_file(path) -> Dict[str, str]:
        """Read ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise UsageError(f"cannot read config {path}: {err}") from err
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in RUN_KEYS:
                raise UsageError(f"{path}:{no}: unknown config key {key!r}")
            values[key] = value
        return values

    @classmethod
    def build(cls, values: Dict[str, Any]) -> "RunConfig":
        profile = str(values.get("profile", "desk"))
        if profile not in ("desk", "full"):
            raise UsageError(f"profile must be 'desk' or 'full', got {profile!r}")
        base = desk_config() if profile == "desk" else TrainConfig()
        parsed: Dict[str, Dict[str, Any]] = {"train": {}, "loss": {}, "denoiser": {}, "sampler": {}}
        for key, raw in values.items():
            if key not in RUN_KEYS:
                raise UsageError(f"unknown config key {key!r}")
            spec = RUN_KEYS[key]
            if spec.section == "meta":
                continue
            try:
                parsed[spec.section][key] = spec.parse(raw) if isinstance(raw, str) else raw
            except ValueError as err:
                raise UsageError(f"bad value for {key}: {err}") from err
        try:
            weights = LossWeights(**{**base.loss_weights.to_dict(), **parsed["loss"]})
            den = DenoiserConfig(**{**base.denoiser.to_dict(), **parsed["denoiser"]})
            train_kw = {k: getattr(base, k) for k in RUN_KEYS
                        if RUN_KEYS[k].section == "train"}
            train_kw.update(parsed["train"])
            train = TrainConfig(loss_weights=weights, denoiser=den, **train_kw)
            sampler = SamplerConfig(**parsed["sampler"])
        except (TypeError, ValueError) as err:
            raise UsageError(f"invalid configuration: {err}") from err
        return cls(train, sampler)


def config_reference() -> str:
    """Every config key with its desk and full-scale default."""
    desk, full = RunConfig.build({}), RunConfig.build({"profile": "full"})
    lines = ["config keys (desk default / full default):"]
    for key, spec in RUN_KEYS.items():
        if spec.section == "meta":
            d, f = "desk", "full"
        else:
            d, f = _lookup(desk, key, spec.section), _lookup(full, key, spec.section)
        lines.append(f"  {key} = {d} / {f}  {spec.help}")
    return "\n".join(lines)


def _lookup(cfg: RunConfig, key: str, section: str):
    obj = {"train": cfg.train, "loss": cfg.train.loss_weights, "denoiser": cfg.train.denoiser,
           "sampler": cfg.sampler}[section]
    value = getattr(obj, key)
    return ",".join(map(str, value)) if isinstance(value, tuple) else value


# --- helpers ---------------------------------------------------------------------------

def _read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as err:
        raise UsageError(f"cannot read image {path}: {err}") from err


def _read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _write_png(path: Path, image: np.ndarray):
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --- commands --------------------------------------------------------------------------

def cmd_build_data(args) -> int:
    manifest = toyfaces.build_dataset(args.n, args.seed, args.out)
    print(f"wrote {args.n} samples to {manifest} (sha256 {toyfaces.file_digest(manifest)[:16]})")
    return 0


def cmd_train(args) -> int:
    values: Dict[str, Any] = RunConfig.parse_file(args.config) if args.config else {}
    for key in ("steps", "seed", "manifest", "out_dir"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    run = RunConfig.build(values)
    cfg = run.train
    if not cfg.manifest:
        raise UsageError("no manifest: pass --manifest or set manifest in the config")
    if not cfg.out_dir:
        raise UsageError("no output directory: pass --out or set out_dir in the config")
    trainer = Trainer(cfg)
    if args.resume:
        trainer.resume(args.resume)
    reports = trainer.run()
    last = reports[-1] if reports else None
    if last is not None:
        print(f"step {trainer.step}: noise {last.noise:.4f} id {last.identity:.4f} loc {last.localization:.3e}")
    print(f"checkpoint {Path(cfg.out_dir) / f'ckpt_{trainer.step:06d}.npz'}")
    return 0


def _load_regions(path: Path, size: int) -> List[RegionSpec]:
    try:
        req = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read regions file {path}: {err}") from err
    regions = []
    for item in req.get("regions", []):
        if "mask" in item:
            mask = _read_mask(path.parent / item["mask"])
        elif "box" in item:
            x0, y0, x1, y1 = item["box"]
            mask = np.zeros((size, size))
            mask[y0:y1, x0:x1] = 1.0
        else:
            raise UsageError("each region needs a 'mask' image or a 'box'")
        face = _read_rgb(path.parent / item["face"]) if item.get("face") else None
        regions.append(RegionSpec(mask, item["prompt"], face))
    if not regions:
        raise UsageError("regions file lists no regions")
    return regions


def cmd_generate(args) -> int:
    model, header, _ = load_model(args.checkpoint)
    config = SamplerConfig(num_steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = initial_noise((model.unet.config.in_channels, args.size, args.size), args.seed, model.dtype)
    side = {"checkpoint_sha256": toyfaces.file_digest(args.checkpoint), "seed": args.seed,
            "num_steps": args.steps, "guidance_scale": args.guidance, "size": args.size,
            "noise_sha256": noise_digest(noise)}
    if args.regions:
        regions = _load_regions(Path(args.regions), args.size)
        image = multi_subject_sample(regions, model, config, image_size=args.size)
        side.update(mode="multi", prompts=[r.prompt for r in regions])
    else:
        if not args.prompt:
            raise UsageError("pass --prompt (and optionally --face) or --regions")
        face = _read_rgb(args.face) if args.face else None
        image = sample(args.prompt, face, model, config, image_size=args.size)
        side.update(mode="single", prompt=args.prompt, face=str(args.face) if args.face else None)
    _write_png(out / f"{args.name}.png", image)
    _write_json(out / f"{args.name}.json", side)
    print(f"wrote {out / (args.name + '.png')}")
    return 0


def cmd_evaluate(args) -> int:
    report = evaluate(args.dir, args.out)
    print(f"id_pres {report.id_pres:.4f} clip_ti {report.clip_ti:.4f} "
          f"expression {report.expression_coeff:.4f} over {len(report.rows)} images")
    return 0


def _heatmap(amap: torch.Tensor, size: int) -> np.ndarray:
    a = amap.detach().to(torch.float64).cpu().numpy()
    a = a / max(float(a.max()), 1e-12)
    img = Image.fromarray(np.round(a * 255).astype(np.uint8), mode="L")
    return np.asarray(img.resize((size, size), Image.NEAREST))


def cmd_inspect_attention(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    samples = toyfaces.load_manifest(args.manifest)
    if not 0 <= args.index < len(samples):
        raise UsageError(f"--index must lie in [0, {len(samples)})")
    s = samples[args.index]
    prompt = args.prompt or s.caption
    seq, _ = model.text(prompt)
    if seq.identity_index is None:
        raise UsageError(f"no identity token in {prompt!r}")
    if not 1 <= args.t <= model.schedule.T:
        raise UsageError(f"--t must lie in [1, {model.schedule.T}]")
    x0 = model.codec.encode(torch.as_tensor(s.image, dtype=model.dtype))
    eps = torch.as_tensor(substream(args.seed, "noise").standard_normal(tuple(x0.shape)), dtype=model.dtype)
    zt = forward_noise(x0, args.t, eps, model.schedule)
    ctx, id_idx, emo_idx = model.context([prompt], [model.face_vector(s.reference_face)], [FULL])
    with torch.no_grad():
        _, record = model.unet(zt.unsqueeze(0), torch.tensor([args.t]), ctx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = torch.as_tensor(s.face_mask, dtype=torch.float64)
    tokens = {"identity": id_idx[0]}
    if emo_idx[0] is not None:
        tokens["emotion"] = emo_idx[0]
    ratios: Dict[str, List[float]] = {name: [] for name in tokens}
    size = s.image.shape[0]
    for l, (amap, res) in enumerate(zip(record.maps, record.resolutions)):
        m = resample_mask(mask[None], res)[0]
        for name, idx in tokens.items():
            token_map = amap[0, idx]
            Image.fromarray(_heatmap(token_map, size)).save(out / f"{name}_layer{l}.png", format="PNG")
            ratios[name].append(attention_ratio(token_map, m))
    result = {"prompt": prompt, "t": args.t, "index": args.index, "resolutions": [list(r) for r in record.resolutions],
              "ratios": ratios, "mean_ratio": {k: float(np.mean(v)) for k, v in ratios.items()}}
    _write_json(out / "attention_ratios.json", result)
    print(json.dumps(result["mean_ratio"]))
    return 0


# --- parser ----------------------------------------------------------------------------

class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portraitgen", formatter_class=_Formatter,
                                     description="Identity- and expression-conditioned toy portrait diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", formatter_class=_Formatter, help="render the toy face corpus")
    p.add_argument("--n", type=int, default=512, help="number of samples")
    p.add_argument("--seed", type=int, default=7, help="dataset seed")
    p.add_argument("--out", required=True, help="output directory (manifest.jsonl is written inside)")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", formatter_class=_Formatter, help="train the denoiser and conditioning head",
                       epilog=config_reference())
    p.add_argument("--config", default=None, help="key = value run-config file (keys listed below)")
    p.add_argument("--steps", type=int, default=None, help="override steps (profile default 2000)")
    p.add_argument("--seed", type=int, default=None, help="override the root seed (default 0)")
    p.add_argument("--manifest", default=None, help="override the dataset manifest")
    p.add_argument("--out", dest="out_dir", default=None, help="override the run directory")
    p.add_argument("--resume", default=None, help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", formatter_class=_Formatter, help="sample an image from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--prompt", default=None, help="text prompt")
    p.add_argument("--face", default=None, help="reference face image (PNG)")
    p.add_argument("--regions", default=None, help="multi-subject request JSON "
                   "{regions: [{prompt, face?, mask | box}]}")
    p.add_argument("--seed", type=int, default=0, help="sampler seed")
    p.add_argument("--steps", type=int, default=50, help="Euler steps")
    p.add_argument("--guidance", type=float, default=5.0,
                   help="classifier-free guidance scale")
    p.add_argument("--size", type=int, default=toyfaces.IMAGE_SIZE, help="image side in pixels")
    p.add_argument("--out", default="generated", help="output directory")
    p.add_argument("--name", default="sample", help="base name of the PNG and its sidecar JSON")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", formatter_class=_Formatter, help="score a generated/ references/ prompts.jsonl tree")
    p.add_argument("--dir", required=True, help="directory holding generated/, references/, prompts.jsonl")
    p.add_argument("--out", default=None, help="where report.json and rows.csv go (default: --dir)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-attention", formatter_class=_Formatter,
                       help="per-layer identity/emotion attention heatmaps and in/out ratios")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--index", type=int, default=0, help="sample index in the manifest")
    p.add_argument("--prompt", default=None, help="prompt override (default: the sample caption)")
    p.add_argument("--t", type=int, default=30, help="timestep at which to noise the sample")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", default="attention", help="output directory")
    p.set_defaults(func=cmd_inspect_attention)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)       # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate" and args.out is None:
        args.out = args.dir
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"portraitgen {args.command}: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - every runtime failure becomes exit 1
        log.debug("failure", exc_info=True)
        print(f"portraitgen {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
