"""Paired (image, saliency, EEG) records: synthetic generator and on-disk format.

Directory layout::

    root/
      manifest.json        version, channels, samples, height, width, records[]
      images/{id}.png      RGB, 8 bit
      saliency/{id}.png    grayscale, 8 bit, value / 255
      eeg/{id}.f32         little-endian float32, row-major [channels x samples]

Synthetic images and maps are generated on the 8-bit grid so a save/load
round trip is exact.
"""

from __future__ import annotations

import colorsys
import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, IngestionError

FORMAT_VERSION = 1
SPLITS = ("train", "test")
SHAPES = ("disc", "square", "triangle", "diamond", "cross", "ring", "bar", "ellipse")
_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass
class EEGEpoch:
    data: np.ndarray
    subject_id: int = 1
    stimulus_id: str = ""


@dataclass
class StimulusRecord:
    stimulus_id: str
    image: np.ndarray  # [3, H, W] in [0, 1]
    saliency: np.ndarray  # [H, W], max-normalized
    eeg: EEGEpoch
    class_label: int = -1


@dataclass
class PairedDataset:
    records: list
    channels: int
    samples: int
    height: int
    width: int
    splits: list = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.records)

    def __len__(self):
        return len(self.records)

    @property
    def ids(self) -> list:
        return [r.stimulus_id for r in self.records]

    def subset(self, split: str) -> "PairedDataset":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return replace(self, records=[self.records[i] for i in keep], splits=[split] * len(keep))

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])

    def saliency_maps(self) -> np.ndarray:
        return np.stack([r.saliency for r in self.records])

    def eeg(self) -> np.ndarray:
        return np.stack([r.eeg.data for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.class_label for r in self.records])

    def equals(self, other: "PairedDataset") -> bool:
        head = (self.channels, self.samples, self.height, self.width, self.splits)
        if head != (other.channels, other.samples, other.height, other.width, other.splits):
            return False
        if len(self.records) != len(other.records):
            return False
        for a, b in zip(self.records, other.records):
            if (a.stimulus_id, a.class_label, a.eeg.subject_id) != (b.stimulus_id, b.class_label, b.eeg.subject_id):
                return False
            for x, y in ((a.image, b.image), (a.saliency, b.saliency), (a.eeg.data, b.eeg.data)):
                if x.shape != y.shape or not np.array_equal(x, y):
                    return False
        return True


@dataclass(frozen=True)
class SyntheticSpec:
    n_records: int = 64
    n_classes: int = 4
    channels: int = 64
    samples: int = 250
    height: int = 64
    width: int = 64
    noise_level: float = 0.5

    def validate(self):
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.n_records < self.n_classes:
            raise ConfigurationError("n_records must be >= n_classes")
        if min(self.channels, self.samples) < 1:
            raise ConfigurationError("channels and samples must be >= 1")
        if min(self.height, self.width) < 8:
            raise ConfigurationError("images must be at least 8x8")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        m = dy ** 2 + dx ** 2 <= r ** 2
    elif kind == "square":
        m = (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    elif kind == "triangle":
        m = (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))
    elif kind == "diamond":
        m = np.abs(dy) + np.abs(dx) <= 1.2 * r
    elif kind == "cross":
        m = ((np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)) | ((np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r))
    elif kind == "ring":
        d2 = dy ** 2 + dx ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif kind == "bar":
        m = (np.abs(dy) <= 0.4 * r) & (np.abs(dx) <= 1.1 * r)
    else:  # ellipse
        m = (dy / (0.6 * r)) ** 2 + (dx / (1.1 * r)) ** 2 <= 1.0
    return m


def _class_color(label: int, n_classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(label / n_classes, 0.85, 0.95))


def generate_synthetic(spec: SyntheticSpec, seed: int) -> PairedDataset:
    """Colored shapes on gray with blurred-mask saliency and class/position-coded EEG.

    Class fixes shape and hue; the position is uniform inside a margin. The EEG
    is a class template on a class-specific channel subset, plus a fixed
    spatial loading pattern scaled by the shape position, plus gaussian noise.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n, k, C, T, H, W = spec.n_records, spec.n_classes, spec.channels, spec.samples, spec.height, spec.width

    time = np.arange(T) / T
    templates = np.zeros((k, C, T))
    for c in range(k):
        n_ch = max(1, C // 4)
        chans = rng.choice(C, size=n_ch, replace=False)
        freq = 3.0 + 2.0 * c
        latency = rng.uniform(0.2, 0.5)
        wave = np.sin(2 * np.pi * freq * time + rng.uniform(0, 2 * np.pi))
        wave *= np.exp(-((time - latency) ** 2) / 0.02)
        templates[c, chans] = wave * rng.uniform(0.8, 1.2, size=(n_ch, 1))
    pos_loading = rng.normal(size=(C, 2))
    pos_wave = np.sin(2 * np.pi * 1.5 * time) * np.exp(-((time - 0.3) ** 2) / 0.05)

    labels = rng.permutation(np.arange(n) % k)
    radius = 0.14 * min(H, W)
    margin = radius + 2
    records = []
    for i in range(n):
        label = int(labels[i])
        cy = rng.uniform(margin, H - 1 - margin)
        cx = rng.uniform(margin, W - 1 - margin)
        mask = _shape_mask(SHAPES[label % len(SHAPES)], H, W, cy, cx, radius)
        if not mask.any():  # thin shapes can vanish on tiny grids
            mask[int(round(cy)), int(round(cx))] = True
        image = np.full((3, H, W), 0.5)
        image[:, mask] = _class_color(label, k)[:, None]
        sal = ndimage.gaussian_filter(mask.astype(np.float64), sigma=H / 16.0)
        sal = sal / sal.max()
        pos = np.array([2 * cy / (H - 1) - 1, 2 * cx / (W - 1) - 1])
        eeg = templates[label] + (pos_loading @ pos)[:, None] * pos_wave[None, :]
        eeg = eeg + spec.noise_level * rng.normal(size=(C, T))
        sid = f"stim{i:05d}"
        records.append(
            StimulusRecord(
                stimulus_id=sid,
                image=_quantize(image),
                saliency=_quantize(sal),
                eeg=EEGEpoch(eeg.astype(np.float32), subject_id=1, stimulus_id=sid),
                class_label=label,
            )
        )
    return PairedDataset(records=records, channels=C, samples=T, height=H, width=W)


def split(ds: PairedDataset, test_fraction: float, seed: int) -> PairedDataset:
    """Stratified, seeded train/test tagging.

    The test count is ``round(N * test_fraction)``, shared out over classes by
    largest remainder. A class with at least two records always lands in both
    splits when the totals allow it.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must be in (0, 1)")
    n = len(ds)
    n_test = int(round(n * test_fraction))
    if n_test == 0 or n_test == n:
        raise ConfigurationError(f"test_fraction {test_fraction} on {n} records leaves a split empty")
    rng = np.random.default_rng(seed)
    labels = ds.labels()
    classes = sorted(set(labels.tolist()))
    groups = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    quota = {c: len(groups[c]) * n_test / n for c in classes}
    alloc = {c: int(np.floor(quota[c])) for c in classes}
    for c in classes:
        if len(groups[c]) >= 2:
            alloc[c] = min(max(alloc[c], 1), len(groups[c]) - 1)
    remaining = n_test - sum(alloc.values())
    order = sorted(classes, key=lambda c: (alloc[c] - quota[c], c))
    while remaining != 0:
        progressed = False
        for c in (order if remaining > 0 else order[::-1]):
            if remaining == 0:
                break
            lo = 1 if len(groups[c]) >= 2 else 0
            hi = len(groups[c]) - 1 if len(groups[c]) >= 2 else len(groups[c])
            if remaining > 0 and alloc[c] < hi:
                alloc[c] += 1
                remaining -= 1
                progressed = True
            elif remaining < 0 and alloc[c] > lo:
                alloc[c] -= 1
                remaining += 1
                progressed = True
        if not progressed:
            # stratification constraints cannot be met; fall back to free allocation
            for c in order:
                cap = len(groups[c]) if remaining > 0 else 0
                while remaining > 0 and alloc[c] < cap:
                    alloc[c] += 1
                    remaining -= 1
                while remaining < 0 and alloc[c] > 0:
                    alloc[c] -= 1
                    remaining += 1
    tags = ["train"] * n
    for c in classes:
        for idx in groups[c][: alloc[c]]:
            tags[int(idx)] = "test"
    return replace(ds, splits=tags)


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image: np.ndarray):
    """Write a ``[3, H, W]`` or ``[H, W]`` array in [0, 1] as an 8-bit PNG."""
    arr = _to_u8(image)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(arr, (2, 0, 1)).copy()


def load_map(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def save_dataset(ds: PairedDataset, root) -> None:
    root = Path(root)
    for sub in ("images", "saliency", "eeg"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    seen = set()
    entries = []
    for rec, tag in zip(ds.records, ds.splits):
        sid = rec.stimulus_id
        if not _SAFE_ID.match(sid):
            raise IngestionError(f"stimulus id {sid!r} is not file-name safe", sid)
        if sid in seen:
            raise IngestionError(f"duplicate stimulus id {sid!r}", sid)
        seen.add(sid)
        save_image(root / "images" / f"{sid}.png", rec.image)
        save_image(root / "saliency" / f"{sid}.png", rec.saliency)
        np.ascontiguousarray(rec.eeg.data, dtype="<f4").tofile(root / "eeg" / f"{sid}.f32")
        entries.append({"id": sid, "label": int(rec.class_label), "split": tag, "subject_id": int(rec.eeg.subject_id)})
    manifest = {
        "version": FORMAT_VERSION,
        "channels": ds.channels,
        "samples": ds.samples,
        "height": ds.height,
        "width": ds.width,
        "records": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(root, fill_missing_saliency: bool = False) -> PairedDataset:
    """Read a dataset directory, validating every file against the manifest.

    With ``fill_missing_saliency`` a record without a ``saliency/`` file gets a
    spectral-residual map computed from its image instead of an error.
    """
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise IngestionError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        C, T, H, W = (int(manifest[k]) for k in ("channels", "samples", "height", "width"))
        entries = manifest["records"]
    except (ValueError, KeyError, TypeError) as exc:
        raise IngestionError(f"malformed manifest {mpath}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise IngestionError(f"unsupported dataset version {manifest.get('version')!r}")
    records, tags, seen = [], [], set()
    for entry in entries:
        sid = str(entry["id"])
        if sid in seen:
            raise IngestionError(f"duplicate stimulus id {sid!r}", sid)
        seen.add(sid)
        tag = entry.get("split", "train")
        if tag not in SPLITS:
            raise IngestionError(f"record {sid}: unknown split tag {tag!r}", sid)
        img_path = root / "images" / f"{sid}.png"
        try:
            image = load_image(img_path)
        except (OSError, ValueError) as exc:
            raise IngestionError(f"record {sid}: unreadable image {img_path}: {exc}", sid) from exc
        if image.shape != (3, H, W):
            raise IngestionError(f"record {sid}: image is {image.shape[1:]}, manifest says {(H, W)}", sid)
        sal_path = root / "saliency" / f"{sid}.png"
        if sal_path.is_file():
            try:
                sal = load_map(sal_path)
            except (OSError, ValueError) as exc:
                raise IngestionError(f"record {sid}: unreadable saliency {sal_path}: {exc}", sid) from exc
        elif fill_missing_saliency:
            from .saliency import spectral_residual

            sal = spectral_residual(image).data.astype(np.float32)
        else:
            raise IngestionError(f"record {sid}: missing saliency map {sal_path}", sid)
        if sal.shape != (H, W):
            raise IngestionError(f"record {sid}: saliency is {sal.shape}, manifest says {(H, W)}", sid)
        eeg_path = root / "eeg" / f"{sid}.f32"
        if not eeg_path.is_file():
            raise IngestionError(f"record {sid}: missing EEG file {eeg_path}", sid)
        raw = np.fromfile(eeg_path, dtype="<f4")
        if raw.size != C * T:
            rows = f"{raw.size // T} rows" if raw.size % T == 0 else f"{raw.size} values"
            raise IngestionError(
                f"record {sid}: EEG file holds {rows}, manifest declares {C} channels x {T} samples", sid
            )
        data = raw.reshape(C, T).astype(np.float32)
        if not np.isfinite(data).all():
            raise IngestionError(f"record {sid}: EEG contains non-finite values", sid)
        records.append(
            StimulusRecord(
                stimulus_id=sid,
                image=image,
                saliency=sal,
                eeg=EEGEpoch(data, subject_id=int(entry.get("subject_id", 1)), stimulus_id=sid),
                class_label=int(entry.get("label", -1)),
            )
        )
        tags.append(tag)
    return PairedDataset(records=records, channels=C, samples=T, height=H, width=W, splits=tags)


def dataset_exists(root) -> bool:
    return os.path.isfile(os.path.join(root, "manifest.json"))
