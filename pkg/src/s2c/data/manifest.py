"""Dataset manifests: JSON lists of (t1, t2, label) files per split."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from ..core import ImagePair, S2CError, ShapeMismatch
from .tensorio import read_image_png, read_mask_png, write_image_png, write_mask_png


class ManifestError(S2CError, ValueError):
    pass


@dataclass(frozen=True)
class ManifestItem:
    t1: str
    t2: str
    label: Optional[str] = None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    items: tuple[ManifestItem, ...]
    split: str = "train"

    def __len__(self):
        return len(self.items)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load(self) -> list[ImagePair]:
        pairs = []
        for item in self.items:
            t1 = read_image_png(self.resolve(item.t1))
            t2 = read_image_png(self.resolve(item.t2))
            label = read_mask_png(self.resolve(item.label)) if item.label else None
            try:
                pairs.append(ImagePair(t1, t2, label))
            except ShapeMismatch as exc:
                raise ManifestError(f"{item}: {exc}") from exc
        return pairs

    def to_json(self) -> dict:
        return {"split": self.split,
                "items": [{"t1": i.t1, "t2": i.t2, "label": i.label} for i in self.items]}

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def load_manifest(path) -> DatasetManifest:
    """Read a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    items = tuple(ManifestItem(i["t1"], i["t2"], i.get("label")) for i in d["items"])
    m = DatasetManifest(path.parent, items, d.get("split", "train"))
    for item in items:
        for rel in (item.t1, item.t2, item.label):
            if rel is not None and not m.resolve(rel).exists():
                raise ManifestError(f"missing file {m.resolve(rel)}")
    return m


def write_split(root: Path, split: str, pairs: Sequence[ImagePair]) -> DatasetManifest:
    """Write pairs as PNGs under ``root/split`` and save ``root/<split>.json``."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    items = []
    for i, pair in enumerate(pairs):
        stem = f"{split}/{i:04d}"
        write_image_png(root / f"{stem}_t1.png", pair.t1)
        write_image_png(root / f"{stem}_t2.png", pair.t2)
        label = None
        if pair.label is not None:
            label = f"{stem}_label.png"
            write_mask_png(root / label, pair.label)
        items.append(ManifestItem(f"{stem}_t1.png", f"{stem}_t2.png", label))
    manifest = DatasetManifest(root, tuple(items), split)
    manifest.save(root / f"{split}.json")
    return manifest
