"""Export segmentation logits from a TorchScript model to VNF1 tensors.

The adapter is model-agnostic: any scripted module mapping a normalized
(1, 3, H, W) float batch to (1, K, H', W') pre-softmax scores works.
Spatially smaller outputs are bilinearly upsampled back to the input size;
the class axis is reordered onto the pipeline's palette via the class map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .vnf import write_vnf

# standard ImageNet statistics; recorded in the run manifest
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)
DEFAULT_CROP = (1200, 480)  # width, height


class ExportError(RuntimeError):
    pass


def load_palette_names(path: str | Path) -> list[str]:
    """Class names, in order, from a pipeline palette file (`name = r,g,b`)."""
    names = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ExportError(f"{path}: malformed palette line {raw!r}")
        names.append(line.split("=", 1)[0].strip())
    if not names:
        raise ExportError(f"{path}: empty palette")
    return names


def load_class_map(path: str | Path, palette_names: list[str]) -> list[int]:
    """Model output channel for each palette index; must be a bijection."""
    mapping: dict[str, int] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ExportError(f"{path}: expected 'class name = channel', got {raw!r}")
        name, channel = (part.strip() for part in line.split("=", 1))
        if name in mapping:
            raise ExportError(f"{path}: duplicate class {name!r}")
        try:
            mapping[name] = int(channel)
        except ValueError:
            raise ExportError(f"{path}: non-integer channel in {raw!r}") from None
    missing = [n for n in palette_names if n not in mapping]
    extra = [n for n in mapping if n not in palette_names]
    if missing or extra:
        raise ExportError(
            f"{path}: class map must cover the palette exactly "
            f"(missing {missing}, unknown {extra})"
        )
    channels = [mapping[n] for n in palette_names]
    if sorted(channels) != list(range(len(palette_names))):
        raise ExportError(
            f"{path}: channels must be a permutation of 0..{len(palette_names) - 1}"
        )
    return channels


@dataclass(frozen=True)
class ExportSpec:
    weights: Path
    channel_of_class: list[int]  # palette index -> model output channel
    crop: tuple[int, int] = DEFAULT_CROP  # width, height
    mean: tuple[float, float, float] = DEFAULT_MEAN
    std: tuple[float, float, float] = DEFAULT_STD
    device: str = "cpu"


def _parse_manifest(path: Path) -> list[dict]:
    records, block = [], {}
    for number, raw in enumerate(path.read_text().splitlines() + [""], start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if block:
                records.append(block)
                block = {}
            continue
        if "=" not in line:
            raise ExportError(f"{path}:{number}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        block[key] = val
    return records


def _write_manifest(records: list[dict], path: Path) -> None:
    fields = ("id", "vis", "nir", "label", "logits", "split")
    blocks = [
        "\n".join(f"{key} = {rec.get(key, '')}" for key in fields) for rec in records
    ]
    path.write_text("\n\n".join(blocks) + "\n")


def _prepare_input(image_path: Path, spec: ExportSpec) -> torch.Tensor:
    with Image.open(image_path) as im:
        if im.mode != "RGB":
            raise ExportError(f"{image_path}: VIS image must be RGB, got mode {im.mode!r}")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    h, w = arr.shape[:2]
    crop_w, crop_h = spec.crop
    if w < crop_w or h < crop_h:
        raise ExportError(
            f"{image_path}: image {w}x{h} smaller than the input crop {crop_w}x{crop_h}"
        )
    x0 = (w - crop_w) // 2
    y0 = (h - crop_h) // 2
    arr = arr[y0 : y0 + crop_h, x0 : x0 + crop_w]
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    arr = (arr - mean) / std
    return torch.from_numpy(np.moveaxis(arr, 2, 0)).unsqueeze(0)


def export_logits(
    manifest_path: str | Path, spec: ExportSpec, out_dir: str | Path
) -> tuple[Path, list[str]]:
    """Write one logit tensor per sample plus an updated manifest.

    Returns (updated manifest path, list of failed sample ids). Failed
    samples are skipped and keep their previous logits entry.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ExportError(f"manifest not found: {manifest_path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = torch.jit.load(str(spec.weights), map_location=spec.device)
    model.eval()

    records = _parse_manifest(manifest_path)
    if not records:
        raise ExportError(f"{manifest_path}: no samples")
    k = len(spec.channel_of_class)
    failures: list[str] = []
    for rec in records:
        sid = rec.get("id", "?")
        try:
            vis_path = manifest_path.parent / rec["vis"]
            batch = _prepare_input(vis_path, spec).to(spec.device)
            with torch.no_grad():
                out = model(batch)
            if out.ndim != 4 or out.shape[0] != 1:
                raise ExportError(f"model output must be (1, K, H, W), got {tuple(out.shape)}")
            if out.shape[1] != k:
                raise ExportError(
                    f"model emits {out.shape[1]} classes, class map covers {k}"
                )
            if out.shape[2:] != batch.shape[2:]:
                out = torch.nn.functional.interpolate(
                    out, size=batch.shape[2:], mode="bilinear", align_corners=False
                )
            logits = out[0].cpu().numpy()  # (K, H, W), model channel order
            logits = logits[spec.channel_of_class]  # palette order
            tensor_path = out_dir / f"{sid}.vnf"
            write_vnf(np.moveaxis(logits, 0, 2), tensor_path)
            rec["logits"] = str(tensor_path.resolve())
        except (ExportError, OSError, RuntimeError, KeyError) as exc:
            print(f"export-logits: sample {sid} failed: {exc}")
            failures.append(sid)

    # updated manifest uses absolute paths so it works from any directory
    updated = out_dir / "manifest.txt"
    remapped = []
    for rec in records:
        rec = dict(rec)
        for field_name in ("vis", "nir", "label", "logits"):
            if rec.get(field_name) and not Path(rec[field_name]).is_absolute():
                rec[field_name] = str((manifest_path.parent / rec[field_name]).resolve())
        remapped.append(rec)
    _write_manifest(remapped, updated)

    receipt = {
        "weights": str(spec.weights),
        "crop": list(spec.crop),
        "mean": list(spec.mean),
        "std": list(spec.std),
        "device": spec.device,
        "class_channels": list(spec.channel_of_class),
        "failures": failures,
    }
    (out_dir / "run.json").write_text(json.dumps(receipt, sort_keys=True, indent=1))
    return updated, failures
