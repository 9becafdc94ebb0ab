"""Dataset manifest: one key/value block per sample.

Format, blocks separated by blank lines::

    id = fr_0001
    vis = images/fr_0001_vis.png
    nir = images/fr_0001_nir.png
    label = labels/fr_0001.png
    logits = logits/fr_0001.vnf
    split = val

Relative paths resolve against the manifest's directory. ``logits`` may
be empty for manifests that predate the exporter run; every non-empty
path must exist at load time.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


SPLITS = ("train", "val", "test")
_FIELDS = ("id", "vis", "nir", "label", "logits", "split")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    vis: Path
    nir: Path
    label: Path
    logits: Path | None
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[SampleRecord, ...]

    def split(self, name: str) -> tuple[SampleRecord, ...]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return tuple(s for s in self.samples if s.split == name)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.samples:
            out[s.split] = out.get(s.split, 0) + 1
        return out

    def __len__(self) -> int:
        return len(self.samples)


def _parse_blocks(text: str, path: Path):
    block: dict[str, str] = {}
    line_no = 0
    for raw in text.splitlines() + [""]:
        line_no += 1
        line = raw.split("#", 1)[0].strip()
        if not line:
            if block:
                yield block
                block = {}
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ManifestError(f"{path}:{line_no}: unknown field {key!r}")
        if key in block:
            raise ManifestError(f"{path}:{line_no}: duplicate field {key!r} in record")
        block[key] = val


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    seen_ids = set()
    for block in _parse_blocks(path.read_text(), path):
        missing = [f for f in ("id", "vis", "nir", "label", "split") if f not in block]
        if missing:
            raise ManifestError(f"{path}: record {block.get('id', '?')!r} missing fields {missing}")
        sid = block["id"]
        if sid in seen_ids:
            raise ManifestError(f"{path}: duplicate sample id {sid!r}")
        seen_ids.add(sid)
        if block["split"] not in SPLITS:
            raise ManifestError(f"{path}: sample {sid!r} has unknown split {block['split']!r}")
        paths = {f: root / block[f] for f in ("vis", "nir", "label") }
        logits = block.get("logits", "")
        paths["logits"] = root / logits if logits else None
        if check_paths:
            for fieldname, p in paths.items():
                if p is not None and not p.exists():
                    raise ManifestError(f"{path}: sample {sid!r} {fieldname} path does not exist: {p}")
        records.append(
            SampleRecord(
                sample_id=sid,
                vis=paths["vis"],
                nir=paths["nir"],
                label=paths["label"],
                logits=paths["logits"],
                split=block["split"],
            )
        )
    return DatasetManifest(tuple(records))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write records with paths relative to the manifest directory when possible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        p = Path(p)
        try:
            return p.resolve().relative_to(root).as_posix()
        except ValueError:
            return str(p)

    blocks = []
    for s in manifest.samples:
        blocks.append(
            "\n".join(
                [
                    f"id = {s.sample_id}",
                    f"vis = {rel(s.vis)}",
                    f"nir = {rel(s.nir)}",
                    f"label = {rel(s.label)}",
                    f"logits = {rel(s.logits)}",
                    f"split = {s.split}",
                ]
            )
        )
    path.write_text("\n\n".join(blocks) + "\n")
