"""Reconstruction and saliency metrics.

Low-level: PixCorr, SSIM. High-level: exhaustive two-way identification over
feature extractors and a SwAV-style correlation distance. Saliency: CC,
KL(gt || pred) and SIM (histogram intersection).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from skimage.transform import resize

from .errors import ConfigurationError, ContractError, MetricError
from .saliency import EPS, as_map, normalize, resize_map, spectral_residual

EVAL_SIZE = 64


# ---------------------------------------------------------------------------
# Pearson-based metrics
# ---------------------------------------------------------------------------


def _pearson(a: np.ndarray, b: np.ndarray, what: str) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"{what}: size mismatch {a.size} vs {b.size}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    # resampling leaves ~1e-17 ripple on constant images; treat that as zero variance
    tol = 1e-12 * np.sqrt(a.size)
    if na <= tol * max(1.0, np.abs(a).max()) or nb <= tol * max(1.0, np.abs(b).max()):
        raise MetricError(f"{what}: zero-variance input")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def resize_image(image: np.ndarray, size: int = EVAL_SIZE) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] == (size, size):
        return image
    return resize(image, (image.shape[0], size, size), order=1, mode="edge", anti_aliasing=True,
                  preserve_range=True)


def pixcorr(a: np.ndarray, b: np.ndarray, size: Optional[int] = EVAL_SIZE) -> float:
    """Pearson correlation of all pixels after resizing both images to ``size``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"channel counts differ: {a.shape[0]} vs {b.shape[0]}")
    if size is not None:
        a, b = resize_image(a, size), resize_image(b, size)
    return _pearson(a, b, "pixcorr")


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         K1: float = 0.01, K2: float = 0.03, L: float = 1.0) -> float:
    """Gaussian-window SSIM averaged over all valid window positions and channels.

    Inputs are ``[C, H, W]`` or ``[H, W]``. Statistics use population
    (biased) variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ConfigurationError(f"ssim: image {a.shape[-2:]} smaller than window {window}")
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    w = _gaussian_window(window, sigma)
    vals = []
    for x, y in zip(a, b):
        def filt(z):
            return ndimage.correlate(z, w, mode="constant")[window // 2: z.shape[0] - window // 2,
                                                            window // 2: z.shape[1] - window // 2]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2))
        vals.append(s.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Feature-space metrics
# ---------------------------------------------------------------------------


def _distance_matrix(r: np.ndarray, g: np.ndarray, distance: str) -> np.ndarray:
    if distance == "correlation":
        r = r - r.mean(axis=1, keepdims=True)
        g = g - g.mean(axis=1, keepdims=True)
    elif distance != "cosine":
        raise ContractError(f"distance must be 'cosine' or 'correlation', got {distance!r}")
    for name, m in (("recon", r), ("gt", g)):
        norms = np.linalg.norm(m, axis=1)
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise MetricError(f"two-way identification: zero-norm {name} feature at sample {int(bad[0])}")
    r = r / np.linalg.norm(r, axis=1, keepdims=True)
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    return 1.0 - r @ g.T


def two_way_identification(recon_features, gt_features, distance: str = "correlation") -> float:
    """Fraction of (i, j != i) pairs where recon_i is closer to gt_i than to gt_j; ties count 0.5."""
    r = np.asarray(recon_features, dtype=np.float64)
    g = np.asarray(gt_features, dtype=np.float64)
    if r.ndim != 2 or r.shape != g.shape:
        raise ContractError(f"feature arrays must be matching [N, d], got {r.shape} and {g.shape}")
    n = r.shape[0]
    if n < 2:
        raise ContractError("two-way identification needs N >= 2")
    d = _distance_matrix(r, g, distance)
    own = np.diag(d)[:, None]
    score = (own < d).astype(np.float64) + 0.5 * (own == d)
    np.fill_diagonal(score, 0.0)
    return float(score.sum() / (n * (n - 1)))


def swav_distance(recon_features, gt_features) -> float:
    """Mean of ``1 - pearson(recon_i, gt_i)`` over pairs."""
    r = np.asarray(recon_features, dtype=np.float64)
    g = np.asarray(gt_features, dtype=np.float64)
    if r.shape != g.shape:
        raise ContractError(f"feature shapes differ: {r.shape} vs {g.shape}")
    r, g = np.atleast_2d(r), np.atleast_2d(g)
    return float(np.mean([1.0 - _pearson(x, y, f"swav sample {i}") for i, (x, y) in enumerate(zip(r, g))]))


# ---------------------------------------------------------------------------
# Saliency metrics
# ---------------------------------------------------------------------------


def _pair(p, q):
    p, q = as_map(p), as_map(q)
    if p.shape != q.shape:
        raise ContractError(f"saliency maps differ in size: {p.shape} vs {q.shape}")
    return p, q


def saliency_cc(p, q) -> float:
    p, q = _pair(p, q)
    return _pearson(p.data, q.data, "saliency CC")


def saliency_kl(gt, pred) -> float:
    """KL(gt || pred), natural log, both maps sum-normalized with the epsilon floor."""
    gt, pred = _pair(gt, pred)
    g = normalize(gt, "sum1").data
    p = normalize(pred, "sum1").data
    return float(max(np.sum(g * np.log(g / p)), 0.0))


def saliency_sim(p, q) -> float:
    p, q = _pair(p, q)
    return float(min(np.sum(np.minimum(normalize(p, "sum1").data, normalize(q, "sum1").data)), 1.0))


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class FeatureExtractor(Protocol):
    name: str
    deterministic: bool

    def extract(self, image: np.ndarray) -> np.ndarray: ...


class ToyExtractor:
    """Fixed random conv stack (3x3, stride 2, ReLU) pooled to a 4x4 grid.

    Stands in for pretrained networks at desk scale; ``depth`` mimics
    shallow vs deep layers.
    """

    deterministic = True

    def __init__(self, name: str, depth: int = 2, width: int = 16, seed: int = 0, size: int = EVAL_SIZE):
        self.name = name
        self.depth = depth
        self.size = size
        gen = torch.Generator().manual_seed(seed)
        self.weights = []
        prev = 3
        for _ in range(depth):
            w = torch.randn((width, prev, 3, 3), generator=gen, dtype=torch.float64) / np.sqrt(prev * 9)
            self.weights.append(w)
            prev = width
        self.dim = width * 16

    def extract(self, image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(resize_image(image, self.size))[None]
        x = x - 0.5
        with torch.no_grad():
            for w in self.weights:
                x = F.relu(F.conv2d(x, w, stride=2, padding=1))
            x = F.adaptive_avg_pool2d(x, 4)
        return x.flatten().numpy()


def default_extractors() -> list:
    """Toy stand-ins filling the AlexNet(2), AlexNet(5), Inception, CLIP and SwAV slots."""
    return [
        ToyExtractor("alexnet2", depth=2, seed=2),
        ToyExtractor("alexnet5", depth=5, seed=5),
        ToyExtractor("inception", depth=4, width=24, seed=11),
        ToyExtractor("clip", depth=3, width=32, seed=13),
        ToyExtractor("swav", depth=4, seed=17),
    ]


def write_features(root, extractor: str, ids: Sequence[str], features: np.ndarray):
    d = Path(root) / "features" / extractor
    d.mkdir(parents=True, exist_ok=True)
    for sid, vec in zip(ids, features):
        np.ascontiguousarray(vec, dtype="<f4").tofile(d / f"{sid}.f32")


def read_features(root, extractor: str, ids: Sequence[str]) -> np.ndarray:
    """Load precomputed ``features/{extractor}/{id}.f32`` vectors as ``[N, d]``."""
    d = Path(root) / "features" / extractor
    vecs = []
    for sid in ids:
        path = d / f"{sid}.f32"
        if not path.is_file():
            raise MetricError(f"missing precomputed feature {path}")
        vecs.append(np.fromfile(path, dtype="<f4").astype(np.float64))
    if len({v.size for v in vecs}) > 1:
        raise MetricError(f"precomputed features for {extractor} have inconsistent lengths")
    return np.stack(vecs)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    pixcorr: Optional[float]
    ssim: Optional[float]
    two_way_accuracy: dict
    swav_distance: Optional[float]
    saliency_cc: Optional[float]
    saliency_kl: Optional[float]
    saliency_sim: Optional[float]
    n_samples: int
    config: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_json(Path(path).read_text())


def _mean(values):
    return float(np.mean(values)) if values else None


def evaluate_run(
    recons: Sequence[Optional[np.ndarray]],
    gts: Sequence[np.ndarray],
    gt_saliency_source: str = "dataset",
    extractors: Optional[Sequence] = None,
    ids: Optional[Sequence[str]] = None,
    gt_maps: Optional[Sequence] = None,
    precomputed: Optional[dict] = None,
    distance: str = "correlation",
    eval_size: int = EVAL_SIZE,
) -> MetricReport:
    """Compute every metric for aligned reconstruction / ground-truth lists.

    A ``None`` reconstruction marks a missing sample: it is listed under
    ``missing`` and left out of all aggregates. Per-sample metric failures
    (e.g. a constant image under PixCorr) go to ``failures``.

    ``gt_saliency_source`` is ``"dataset"`` (use ``gt_maps``) or
    ``"fallback"`` (spectral residual of each ground-truth image). The
    reconstruction side always uses the spectral-residual predictor.
    ``precomputed`` maps an extractor name to ``(recon_features, gt_features)``
    arrays aligned with the full input lists; these are used in place of
    on-the-fly extraction for that name.
    """
    n = len(gts)
    if n == 0 or len(recons) != n:
        raise ContractError("evaluate_run needs equal-length, non-empty recon and gt lists")
    if ids is None:
        ids = [str(i) for i in range(n)]
    if gt_saliency_source not in ("dataset", "fallback"):
        raise ContractError("gt_saliency_source must be 'dataset' or 'fallback'")
    if gt_saliency_source == "dataset" and (gt_maps is None or len(gt_maps) != n):
        raise ContractError("dataset saliency source needs one gt map per sample")
    extractors = list(extractors) if extractors is not None else []
    precomputed = dict(precomputed or {})
    if not extractors and not precomputed:
        raise ContractError("at least one feature extractor is required")

    missing = [ids[i] for i in range(n) if recons[i] is None]
    keep = [i for i in range(n) if recons[i] is not None]
    failures = []

    def attempt(metric, sid, fn):
        try:
            return fn()
        except (MetricError, ContractError) as exc:
            failures.append({"id": sid, "metric": metric, "error": str(exc)})
            return None

    pcs, sss, ccs, kls, sims = [], [], [], [], []
    for i in keep:
        r = resize_image(recons[i], eval_size)
        g = resize_image(gts[i], eval_size)
        for bucket, metric, fn in (
            (pcs, "pixcorr", lambda: pixcorr(r, g, size=None)),
            (sss, "ssim", lambda: ssim(r, g)),
        ):
            v = attempt(metric, ids[i], fn)
            if v is not None:
                bucket.append(v)
        gt_map = as_map(gt_maps[i]) if gt_saliency_source == "dataset" else spectral_residual(gts[i])
        pred = resize_map(spectral_residual(recons[i]), *gt_map.shape)
        for bucket, metric, fn in (
            (ccs, "saliency_cc", lambda: saliency_cc(pred, gt_map)),
            (kls, "saliency_kl", lambda: saliency_kl(gt_map, pred)),
            (sims, "saliency_sim", lambda: saliency_sim(pred, gt_map)),
        ):
            v = attempt(metric, ids[i], fn)
            if v is not None:
                bucket.append(v)

    feats = {}
    for ex in extractors:
        if ex.name in precomputed:
            continue
        feats[ex.name] = (
            np.stack([ex.extract(recons[i]) for i in keep]) if keep else np.zeros((0, 1)),
            np.stack([ex.extract(gts[i]) for i in keep]) if keep else np.zeros((0, 1)),
        )
    for name, (rf, gf) in precomputed.items():
        feats[name] = (np.asarray(rf)[keep], np.asarray(gf)[keep])

    two_way = {}
    for name, (rf, gf) in feats.items():
        v = attempt(f"two_way[{name}]", "*", lambda: two_way_identification(rf, gf, distance)) if len(keep) >= 2 else None
        two_way[name] = v
    swav_name = "swav" if "swav" in feats else (next(iter(feats)) if feats else None)
    swav = None
    if swav_name is not None and keep:
        rf, gf = feats[swav_name]
        per = []
        for j, i in enumerate(keep):
            v = attempt("swav_distance", ids[i], lambda: swav_distance(rf[j:j + 1], gf[j:j + 1]))
            if v is not None:
                per.append(v)
        swav = _mean(per)

    config = {
        "eval_size": eval_size,
        "ssim": {"window": 11, "sigma": 1.5, "K1": 0.01, "K2": 0.03, "L": 1.0},
        "two_way_distance": distance,
        "two_way_ties": 0.5,
        "swav_extractor": swav_name,
        "extractors": sorted(feats),
        "gt_saliency_source": gt_saliency_source,
        "recon_saliency": "spectral_residual",
        "kl_direction": "KL(gt||pred)",
        "kl_log": "natural",
        "saliency_epsilon": EPS,
    }
    return MetricReport(
        pixcorr=_mean(pcs),
        ssim=_mean(sss),
        two_way_accuracy=two_way,
        swav_distance=swav,
        saliency_cc=_mean(ccs),
        saliency_kl=_mean(kls),
        saliency_sim=_mean(sims),
        n_samples=len(keep),
        config=config,
        missing=missing,
        failures=failures,
    )


def comparison_table(reports: dict) -> str:
    """Markdown table with one row per named report (e.g. the two generation arms)."""
    names = list(reports)
    extractor_names = sorted({k for r in reports.values() for k in r.two_way_accuracy})
    cols = ["pixcorr", "ssim"] + [f"2way:{e}" for e in extractor_names] + [
        "swav_distance", "saliency_cc", "saliency_kl", "saliency_sim", "n_samples"]
    lines = ["| arm | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    for name in names:
        r = reports[name]
        row = []
        for c in cols:
            v = r.two_way_accuracy.get(c[5:]) if c.startswith("2way:") else getattr(r, c)
            row.append("-" if v is None else (str(v) if isinstance(v, int) else f"{v:.4f}"))
        lines.append(f"| {name} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def _to_rgb(a: np.ndarray, size: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = np.repeat(a[None], 3, axis=0)
    return resize_image(a, size)


def write_grid(path, rows: Sequence[tuple], size: int = EVAL_SIZE, pad: int = 2):
    """PNG sheet, one row per sample: GT | reconstruction | GT saliency | recon saliency."""
    if not rows:
        raise ContractError("write_grid needs at least one row")
    ncol = len(rows[0])
    H = len(rows) * (size + pad) + pad
    W = ncol * (size + pad) + pad
    sheet = np.ones((3, H, W))
    for r, row in enumerate(rows):
        for c, panel in enumerate(row):
            y, x = pad + r * (size + pad), pad + c * (size + pad)
            sheet[:, y:y + size, x:x + size] = np.clip(_to_rgb(panel, size), 0, 1)
    arr = np.round(sheet * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")
