"""Aerial imagery ingestion: tiling, band stacking, mask binarisation, manifests.

Manifests are JSON-lines files, one ``SampleRecord`` per line. Channel set,
normalisation statistics and the split seed live in a sidecar
``<manifest>.meta.json`` next to it.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import tifffile
import torch
from PIL import Image
from torch.utils.data import Dataset

SPLITS = ("train", "val", "test")
STD_EPS = 1e-6
CHANNEL_SETS = {"RGB": 3, "RGB-NIR": 4, "RGB-NIR-RE": 5}
BAND_ORDER = ("R", "G", "B", "NIR", "RE")
# ImageNet statistics for the RGB slices, scaled to 8-bit values
IMAGENET_MEAN = (0.485 * 255, 0.456 * 255, 0.406 * 255)
IMAGENET_STD = (0.229 * 255, 0.224 * 255, 0.225 * 255)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSet:
    name: str = "RGB"

    def __post_init__(self):
        if self.name not in CHANNEL_SETS:
            raise DataError(f"unknown channel set {self.name!r}; expected one of {', '.join(CHANNEL_SETS)}")

    @property
    def count(self) -> int:
        return CHANNEL_SETS[self.name]

    @property
    def bands(self) -> tuple[str, ...]:
        return BAND_ORDER[: self.count]

    @classmethod
    def for_count(cls, count: int) -> "ChannelSet":
        for name, n in CHANNEL_SETS.items():
            if n == count:
                return cls(name)
        raise DataError(f"no channel set with {count} bands")


@dataclass
class SampleRecord:
    band_paths: list[str]
    mask_path: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")


@dataclass
class ChannelStats:
    mean: list[float]
    std: list[float]


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    channel_set: ChannelSet = field(default_factory=ChannelSet)
    stats: ChannelStats | None = None
    seed: int = 0

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")
        meta = {
            "channel_set": self.channel_set.name,
            "stats": asdict(self.stats) if self.stats else None,
            "seed": self.seed,
        }
        _meta_path(path).write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        base = path.parent
        records = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            d["band_paths"] = [str(_resolve(base, p)) for p in d["band_paths"]]
            d["mask_path"] = str(_resolve(base, d["mask_path"]))
            records.append(SampleRecord(**d))
        meta = {}
        if _meta_path(path).is_file():
            meta = json.loads(_meta_path(path).read_text())
        stats = ChannelStats(**meta["stats"]) if meta.get("stats") else None
        return cls(records, ChannelSet(meta.get("channel_set", "RGB")), stats, meta.get("seed", 0))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _resolve(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


# --- raster I/O --------------------------------------------------------------

def read_raster(path: str | Path) -> np.ndarray:
    """Read an image as (H, W) or (H, W, C); TIFF via tifffile, others via Pillow."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"raster not found: {path}")
    if path.suffix.lower() in (".tif", ".tiff"):
        arr = tifffile.imread(path)
        # planar (C, H, W) layouts are transposed to channels-last
        if arr.ndim == 3 and arr.shape[0] <= 8 and arr.shape[-1] > 8:
            arr = np.moveaxis(arr, 0, -1)
        return arr
    with Image.open(path) as im:
        return np.asarray(im)


def write_raster(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in (".tif", ".tiff"):
        tifffile.imwrite(path, arr)
    else:
        Image.fromarray(arr).save(path)


def load_bands(paths: Sequence[str | Path]) -> np.ndarray:
    """Stack all channels of the given files into (H, W, C) in file order."""
    if not paths:
        raise DataError("record has no band files")
    layers = []
    for p in paths:
        a = read_raster(p)
        layers.append(a[..., None] if a.ndim == 2 else a)
    shape = layers[0].shape[:2]
    for p, a in zip(paths, layers):
        if a.shape[:2] != shape:
            raise DataError(f"band {p} has size {a.shape[:2]}, expected {shape}")
    return np.concatenate(layers, axis=-1)


# --- operations --------------------------------------------------------------

def patch_tile(tile: np.ndarray, patch: int, stride: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Cut a row-major grid of ``patch`` x ``patch`` windows; border remainders are dropped."""
    h, w = tile.shape[:2]
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if patch < 1 or patch > min(h, w):
        raise DataError(f"patch size {patch} does not fit a {h}x{w} tile")
    out = []
    for r in patch_offsets(h, patch, stride):
        for c in patch_offsets(w, patch, stride):
            out.append((tile[r : r + patch, c : c + patch], (r, c)))
    return out


def patch_offsets(length: int, patch: int, stride: int) -> range:
    return range(0, (length - patch) // stride * stride + 1, stride)


def binarize_mask(mask: np.ndarray, weed_labels: Iterable[int]) -> np.ndarray:
    labels = sorted(set(int(v) for v in weed_labels))
    if not labels:
        raise DataError("weed_labels must not be empty")
    return np.isin(mask, labels).astype(np.uint8)


def stack_and_normalize(record: SampleRecord, channel_set: ChannelSet, stats: ChannelStats | None) -> torch.Tensor:
    """Load a record's bands as a normalised float tensor (C, H, W) in R,G,B,NIR,RE order."""
    arr = load_bands(record.band_paths)
    n = channel_set.count
    if arr.shape[-1] < n:
        raise DataError(f"{channel_set.name} needs {n} bands, record provides {arr.shape[-1]}")
    x = arr[..., :n].astype(np.float32)
    if stats is not None:
        mean = np.asarray(stats.mean[:n], dtype=np.float32)
        std = np.maximum(np.asarray(stats.std[:n], dtype=np.float32), STD_EPS)
        x = (x - mean) / std
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand remainders out by largest fractional part."""
    raw = [r * n for r in ratios]
    sizes = [math.floor(v + 1e-9) for v in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_manifest(
    records: Sequence[SampleRecord],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    channel_set: ChannelSet | None = None,
) -> DatasetManifest:
    if not records:
        raise DataError("cannot split an empty record list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise DataError(f"ratios must be three non-negative shares summing to 1, got {tuple(ratios)}")
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)
    sizes = split_sizes(len(records), ratios)
    out = []
    pos = 0
    for split, size in zip(SPLITS, sizes):
        for i in order[pos : pos + size]:
            r = records[i]
            out.append(SampleRecord(list(r.band_paths), r.mask_path, split))
        pos += size
    return DatasetManifest(out, channel_set or ChannelSet(), None, seed)


def compute_stats(manifest: DatasetManifest, rgb: str = "dataset") -> ChannelStats:
    """Per-channel mean/std over the train split.

    ``rgb="imagenet"`` substitutes ImageNet constants on the RGB slices (8-bit
    scale); extra bands always use train statistics.
    """
    train = manifest.split("train")
    if not train:
        raise DataError("train split is empty; cannot compute statistics")
    n = manifest.channel_set.count
    total = np.zeros(n)
    sq = np.zeros(n)
    count = 0
    for r in train:
        x = load_bands(r.band_paths)[..., :n].astype(np.float64).reshape(-1, n)
        total += x.sum(axis=0)
        sq += (x * x).sum(axis=0)
        count += x.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
    mean, std = mean.tolist(), std.tolist()
    if rgb == "imagenet":
        mean[:3], std[:3] = list(IMAGENET_MEAN), list(IMAGENET_STD)
    elif rgb != "dataset":
        raise DataError(f"rgb statistics must be 'dataset' or 'imagenet', got {rgb!r}")
    return ChannelStats(mean, std)


def prepare_tile(
    band_paths: Sequence[str | Path],
    mask_path: str | Path,
    out_dir: str | Path,
    patch: int = 512,
    stride: int = 512,
    weed_labels: Iterable[int] = (1,),
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    channel_set: ChannelSet | None = None,
    rgb_stats: str = "dataset",
) -> DatasetManifest:
    """Patch a co-registered tile + label raster into ``out_dir/{split}/{images,masks}/``.

    Writes ``out_dir/manifest.jsonl`` (paths relative to ``out_dir``) and its
    meta sidecar, and returns the manifest with absolute paths.
    """
    out_dir = Path(out_dir)
    bands = load_bands(band_paths)
    channel_set = channel_set or ChannelSet.for_count(min(bands.shape[-1], 5))
    if bands.shape[-1] < channel_set.count:
        raise DataError(f"{channel_set.name} needs {channel_set.count} bands, tile provides {bands.shape[-1]}")
    bands = bands[..., : channel_set.count]
    mask = read_raster(mask_path)
    if mask.ndim == 3:
        mask = mask[..., 0]
    if mask.shape != bands.shape[:2]:
        raise DataError(f"mask size {mask.shape} does not match tile size {bands.shape[:2]}")
    mask = binarize_mask(mask, weed_labels)

    img_patches = patch_tile(bands, patch, stride)
    mask_patches = patch_tile(mask, patch, stride)
    names = [f"r{r:05d}_c{c:05d}" for _, (r, c) in img_patches]
    placeholders = [SampleRecord([n], n) for n in names]
    split = split_manifest(placeholders, ratios, seed, channel_set)
    lookup = {n: i for i, n in enumerate(names)}
    records = []
    for rec in split.records:
        i = lookup[rec.mask_path]
        img_rel = f"{rec.split}/images/{names[i]}.tif"
        mask_rel = f"{rec.split}/masks/{names[i]}.png"
        write_raster(out_dir / img_rel, np.ascontiguousarray(img_patches[i][0]))
        write_raster(out_dir / mask_rel, np.ascontiguousarray(mask_patches[i][0]))
        records.append(SampleRecord([img_rel], mask_rel, rec.split))
    manifest = DatasetManifest(
        [SampleRecord([str(out_dir / r.band_paths[0])], str(out_dir / r.mask_path), r.split) for r in records],
        channel_set,
        None,
        seed,
    )
    if manifest.split("train"):
        manifest.stats = compute_stats(manifest, rgb=rgb_stats)
    DatasetManifest(records, channel_set, manifest.stats, seed).save(out_dir / "manifest.jsonl")
    return manifest


class SegmentationDataset(Dataset):
    """Normalised image tensors and label masks for one split of a manifest."""

    def __init__(self, manifest: DatasetManifest, split: str = "train", weed_labels: Iterable[int] | None = None):
        self.records = manifest.split(split)
        self.channel_set = manifest.channel_set
        self.stats = manifest.stats
        self.weed_labels = None if weed_labels is None else set(weed_labels)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        rec = self.records[i]
        x = stack_and_normalize(rec, self.channel_set, self.stats)
        m = read_raster(rec.mask_path)
        if m.ndim == 3:
            m = m[..., 0]
        if self.weed_labels is not None:
            m = binarize_mask(m, self.weed_labels)
        if m.shape != tuple(x.shape[-2:]):
            raise DataError(f"mask {rec.mask_path} size {m.shape} does not match image {tuple(x.shape[-2:])}")
        return x, torch.from_numpy(m.astype(np.int64))
