"""Slide preprocessing: tissue filtering, tiling, stain normalization, synthetic slides."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
WHITE = 255.0

# Typical H&E optical density directions (columns: hematoxylin, eosin).
DEFAULT_STAINS = np.array([[0.65, 0.07],
                           [0.70, 0.99],
                           [0.29, 0.11]])


@dataclass
class SlideImage:
    pixels: np.ndarray  # H x W x 3 uint8
    slide_id: str
    label: int | None = None
    instance_labels: np.ndarray | None = None  # rows x cols, synthetic only
    patch_size: int | None = None


@dataclass
class TileSet:
    tiles: list
    coords: list
    slide_id: str
    patch_size: int
    grid: tuple = (0, 0)
    threshold: int | None = None
    status: str = "ok"
    label: int | None = None
    instance_labels: list | None = None
    normalized: bool = False
    degenerate: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tiles)


@dataclass
class StainProfile:
    stain_matrix: np.ndarray  # 3 x 2, unit columns (H, E)
    max_concentrations: np.ndarray  # 2

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=float)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=float)
        norms = np.linalg.norm(self.stain_matrix, axis=0)
        if self.stain_matrix.shape != (3, 2) or not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("stain_matrix must be 3x2 with unit-norm columns")
        cos = abs(self.stain_matrix[:, 0] @ self.stain_matrix[:, 1])
        if cos > 1 - 1e-9:
            raise ValueError("stain vectors are colinear")

    def to_json(self) -> dict:
        return {"stain_matrix": self.stain_matrix.tolist(),
                "max_concentrations": self.max_concentrations.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "StainProfile":
        return cls(np.array(d["stain_matrix"]), np.array(d["max_concentrations"]))


# -- Otsu --------------------------------------------------------------------

def otsu_threshold(histogram) -> int:
    """Threshold ``t`` maximising the between-class variance of a 256-bin histogram.

    Class 0 holds bins ``<= t``. The objective is compared in exact integer
    arithmetic, so equal-variance thresholds tie exactly and the smallest wins.
    """
    counts = [int(c) for c in np.asarray(histogram).ravel()]
    if len(counts) != 256:
        raise ValueError(f"expected 256 bins, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be non-negative")
    total = sum(counts)
    if total <= 0:
        raise ValueError("histogram is empty")
    total_sum = sum(i * c for i, c in enumerate(counts))

    # sigma_b^2 * N^2 = (S0*n1 - S1*n0)^2 / (n0*n1); kept as a fraction (num, den)
    best_num, best_den, best_t = 0, 1, 0
    n0 = s0 = 0
    for t, c in enumerate(counts):
        n0 += c
        s0 += t * c
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        diff = s0 * n1 - (total_sum - s0) * n0
        num, den = diff * diff, n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t


def to_gray(pixels: np.ndarray) -> np.ndarray:
    gray = np.asarray(pixels, dtype=float)[..., :3] @ LUMA
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def filter_tiles(slide: SlideImage, patch_size: int, min_foreground_fraction: float = 0.25,
                 threshold: int | None = None) -> TileSet:
    """Cut non-overlapping tiles and keep those with enough tissue.

    Foreground pixels are those whose luminance is at or below the slide-wide
    Otsu threshold (tissue is darker than glass). Tiles come back in row-major
    grid order.
    """
    if not 0.0 <= min_foreground_fraction <= 1.0:
        raise ValueError("min_foreground_fraction must lie in [0, 1]")
    h, w = slide.pixels.shape[:2]
    rows, cols = h // patch_size, w // patch_size
    ts = TileSet([], [], slide.slide_id, patch_size, (rows, cols), label=slide.label)
    if rows == 0 or cols == 0:
        logger.warning("slide %s (%dx%d) is smaller than one %d px tile", slide.slide_id, h, w, patch_size)
        ts.status = "too_small"
        return ts
    gray = to_gray(slide.pixels)
    if threshold is None:
        threshold = otsu_threshold(np.bincount(gray.ravel(), minlength=256))
    ts.threshold = int(threshold)
    fg = gray[: rows * patch_size, : cols * patch_size] <= threshold
    frac = fg.reshape(rows, patch_size, cols, patch_size).mean(axis=(1, 3))
    keep = frac >= min_foreground_fraction
    if slide.instance_labels is not None:
        ts.instance_labels = []
    for r in range(rows):
        for c in range(cols):
            if not keep[r, c]:
                continue
            ts.tiles.append(slide.pixels[r * patch_size:(r + 1) * patch_size,
                                         c * patch_size:(c + 1) * patch_size].copy())
            ts.coords.append((r, c))
            if slide.instance_labels is not None:
                ts.instance_labels.append(int(slide.instance_labels[r, c]))
    return ts


# -- Macenko ----------------------------------------------------------------

def optical_density(pixels: np.ndarray) -> np.ndarray:
    return -np.log((np.asarray(pixels, dtype=float).reshape(-1, 3) + 1.0) / (WHITE + 1.0))


def from_optical_density(od: np.ndarray, shape) -> np.ndarray:
    rgb = (WHITE + 1.0) * np.exp(-od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8).reshape(shape)


def estimate_stains(pixels: np.ndarray, beta: float = 0.15, alpha: float = 1.0,
                    min_pixels: int = 16) -> np.ndarray | None:
    """Macenko estimate of the 3x2 stain matrix, or ``None`` when too few pixels carry stain."""
    od = optical_density(pixels)
    od_hat = od[np.all(od >= beta, axis=1)]
    if len(od_hat) < min_pixels:
        return None
    _, vecs = np.linalg.eigh(np.cov(od_hat.T))
    plane = vecs[:, 1:3]
    # orient the plane so the dominant axis points into positive OD
    if plane[:, 1].sum() < 0:
        plane[:, 1] *= -1
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    proj = od_hat @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    if abs(v_lo @ v_hi) / (np.linalg.norm(v_lo) * np.linalg.norm(v_hi)) > 1 - 1e-9:
        return None
    # hematoxylin absorbs more red
    he = np.stack([v_lo, v_hi], axis=1) if v_lo[0] > v_hi[0] else np.stack([v_hi, v_lo], axis=1)
    he *= np.sign(he.sum(axis=0))
    return he / np.linalg.norm(he, axis=0)


def _concentrations(od: np.ndarray, stains: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(stains, od.T, rcond=None)[0]


def fit_stain_profile(pixels: np.ndarray, beta: float = 0.15, alpha: float = 1.0) -> StainProfile:
    """Reference profile (stain basis + 99th-percentile concentrations) of one tile."""
    stains = estimate_stains(pixels, beta, alpha)
    if stains is None:
        raise ValueError("reference tile carries no usable stain signal")
    conc = _concentrations(optical_density(pixels), stains)
    return StainProfile(stains, np.percentile(conc, 99, axis=1, method="nearest"))


def macenko_normalize(tile: np.ndarray, reference: StainProfile, beta: float = 0.15,
                      alpha: float = 1.0) -> tuple[np.ndarray, bool]:
    """Map a tile's stain appearance onto ``reference``.

    Returns ``(pixels, degenerate)``; a degenerate tile (e.g. blank glass) is
    returned unchanged.
    """
    stains = estimate_stains(tile, beta, alpha)
    if stains is None:
        return tile, True
    conc = _concentrations(optical_density(tile), stains)
    max_c = np.percentile(conc, 99, axis=1, method="nearest")
    if np.any(max_c <= 0):
        return tile, True
    conc *= (reference.max_concentrations / max_c)[:, None]
    return from_optical_density((reference.stain_matrix @ conc).T, tile.shape), False


def render_stains(concentrations: np.ndarray, stains: np.ndarray) -> np.ndarray:
    """8-bit RGB image from an H x W x 2 concentration field and a 3x2 stain matrix."""
    h, w, _ = concentrations.shape
    od = concentrations.reshape(-1, 2) @ stains.T
    return from_optical_density(od, (h, w, 3))


# -- synthetic slides -------------------------------------------------------

def _negative_texture(rng, size: int) -> np.ndarray:
    # eosin stroma in smooth blobs with scattered round hematoxylin nuclei
    e = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8, mode="wrap")
    e = 0.6 + 0.35 * e / (np.abs(e).max() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size]
    h = np.full((size, size), 0.08)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, size, size=2)
        rad = rng.uniform(size / 10, size / 6)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        h += 0.9 * np.exp(-d2 / (2 * rad ** 2))
    return np.clip(np.stack([h, e], axis=-1), 0.02, None)


def _positive_texture(rng, size: int) -> np.ndarray:
    # high-frequency checker of dense hematoxylin; the phase is fixed because an
    # inverted checker projects to the opposite direction under a linear patch embedding
    yy, xx = np.mgrid[0:size, 0:size]
    checker = ((yy // 2 + xx // 2) % 2).astype(float)
    h = 0.25 + 0.9 * checker + 0.05 * rng.normal(size=(size, size))
    e = 0.45 + 0.1 * rng.normal(size=(size, size))
    return np.clip(np.stack([h, e], axis=-1), 0.05, None)


def synth_slide(seed: int, grid: tuple = (8, 8), positive: bool = False,
                planted_positive_cells=(), patch_size: int = 32, background_prob: float = 0.15,
                slide_id: str | None = None) -> SlideImage:
    """Deterministic synthetic slide on a ``grid`` of ``patch_size`` cells.

    Tissue cells carry smooth stain blobs; planted cells carry a fine
    checker texture. Roughly ``background_prob`` of the non-planted cells are
    blank glass. Each slide draws its own stain basis and intensity jitter.
    """
    planted = {tuple(int(v) for v in c) for c in planted_positive_cells}
    if bool(positive) != bool(planted):
        raise ValueError("positive slides need planted cells and negative slides none")
    rows, cols = grid
    for r, c in planted:
        if not (0 <= r < rows and 0 <= c < cols):
            raise ValueError(f"planted cell {(r, c)} outside {rows}x{cols} grid")
    rng = np.random.default_rng(seed)
    stains = DEFAULT_STAINS + rng.normal(scale=0.05, size=(3, 2))
    stains = np.abs(stains) / np.linalg.norm(stains, axis=0)
    strength = rng.uniform(0.8, 1.25, size=2)

    conc = np.zeros((rows * patch_size, cols * patch_size, 2))
    labels = np.zeros((rows, cols), dtype=np.int64)
    background = rng.random((rows, cols)) < background_prob
    for r in range(rows):
        for c in range(cols):
            cell_rng = np.random.default_rng([seed, r, c])
            if (r, c) in planted:
                field_ = _positive_texture(cell_rng, patch_size)
                labels[r, c] = 1
            elif background[r, c]:
                field_ = np.abs(cell_rng.normal(scale=0.01, size=(patch_size, patch_size, 2)))
            else:
                field_ = _negative_texture(cell_rng, patch_size)
            conc[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = field_
    pixels = render_stains(conc * strength, stains)
    return SlideImage(pixels, slide_id or f"slide_{seed}", int(labels.any()), labels, patch_size)


# -- disk formats -----------------------------------------------------------

def load_slide(path: Path) -> SlideImage:
    path = Path(path)
    pixels = np.asarray(Image.open(path).convert("RGB"))
    slide = SlideImage(pixels, path.stem)
    meta = path.with_suffix(".json")
    if meta.exists():
        info = json.loads(meta.read_text())
        slide.slide_id = info.get("slide_id", slide.slide_id)
        slide.label = info.get("label")
        if info.get("instance_labels") is not None:
            slide.instance_labels = np.array(info["instance_labels"], dtype=np.int64)
        slide.patch_size = info.get("patch_size")
    return slide


def save_slide(slide: SlideImage, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{slide.slide_id}.png"
    Image.fromarray(slide.pixels).save(path)
    meta = {"slide_id": slide.slide_id, "label": slide.label, "patch_size": slide.patch_size,
            "instance_labels": None if slide.instance_labels is None else slide.instance_labels.tolist()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")
    return path


def write_tileset(ts: TileSet, out_dir: Path) -> Path:
    """One directory per slide: ``tile_<row>_<col>.png`` plus ``manifest.json``."""
    d = Path(out_dir) / ts.slide_id
    d.mkdir(parents=True, exist_ok=True)
    tiles = []
    for i, (tile, (r, c)) in enumerate(zip(ts.tiles, ts.coords)):
        name = f"tile_{r:03d}_{c:03d}.png"
        Image.fromarray(tile).save(d / name)
        entry = {"row": r, "col": c, "file": name}
        if ts.instance_labels is not None:
            entry["label"] = ts.instance_labels[i]
        tiles.append(entry)
    manifest = {
        "slide_id": ts.slide_id,
        "patch_size": ts.patch_size,
        "grid": list(ts.grid),
        "bag_label": ts.label,
        "otsu_threshold": ts.threshold,
        "normalized": ts.normalized,
        "status": ts.status,
        "tiles": tiles,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return d


def read_tileset(slide_dir: Path) -> TileSet:
    d = Path(slide_dir)
    m = json.loads((d / "manifest.json").read_text())
    tiles = [np.asarray(Image.open(d / t["file"]).convert("RGB")) for t in m["tiles"]]
    coords = [(t["row"], t["col"]) for t in m["tiles"]]
    labels = [t["label"] for t in m["tiles"]] if m["tiles"] and "label" in m["tiles"][0] else None
    return TileSet(tiles, coords, m["slide_id"], m["patch_size"], tuple(m["grid"]),
                   m.get("otsu_threshold"), m.get("status", "ok"), m.get("bag_label"), labels,
                   m.get("normalized", False))
