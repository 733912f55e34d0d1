"""Procedural dataset: color scenes with region layouts and captions,
edge-based sketch extraction, and moving-least-squares deformation."""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, ParameterError, ShapeError

# 12 fully saturated hues at 30 degree spacing so hue-histogram bins and
# caption colors line up one-to-one.
PALETTE_NAMES = (
    "red", "orange", "yellow", "lime", "green", "teal",
    "cyan", "azure", "blue", "violet", "magenta", "rose",
)


def _palette_rgb() -> dict[str, np.ndarray]:
    out = {}
    for i, name in enumerate(PALETTE_NAMES):
        rgb = colorsys.hsv_to_rgb(i / 12.0, 0.9, 0.95)
        out[name] = np.array(rgb, dtype=np.float32)
    return out


PALETTE = _palette_rgb()
SHAPE_KINDS = ("circle", "polygon", "stripe")

SKETCH_EDGE_THRESHOLD = 0.08
MIN_CAPTION_FRACTION = 0.005  # a region must be visible to be captioned


@dataclass
class ShapeSpec:
    kind: str
    center: tuple[float, float]
    size: float
    color: str
    gradient: Optional[float] = None     # vertical luminance ramp strength
    vertices: Optional[np.ndarray] = None  # polygon corners, (k, 2)
    angle: float = 0.0                   # stripe orientation


@dataclass
class SceneSpec:
    seed: int
    size: int
    background: str
    shapes: list[ShapeSpec]
    captions: list[str]
    labels: np.ndarray = field(repr=False)  # (H, W) int, 0 = background


def caption_vocabulary() -> list[str]:
    """Closed word list the synthetic caption grammar composes from."""
    return sorted(set(PALETTE_NAMES) | set(SHAPE_KINDS) | {"background"})


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def _shape_mask(shape: ShapeSpec, size: int) -> np.ndarray:
    xs, ys = _grid(size)
    cx, cy = shape.center
    if shape.kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= shape.size ** 2
    if shape.kind == "polygon":
        mask = np.ones((size, size), dtype=bool)
        verts = shape.vertices
        k = len(verts)
        for i in range(k):  # convex polygon: intersection of half planes
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % k]
            mask &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
        return mask
    if shape.kind == "stripe":
        nx, ny = np.cos(shape.angle), np.sin(shape.angle)
        dist = (xs - cx) * nx + (ys - cy) * ny
        return np.abs(dist) <= shape.size
    raise ParameterError(f"unknown shape kind {shape.kind!r}")


def _render(spec_bg: str, shapes: list[ShapeSpec], size: int):
    img = np.empty((3, size, size), dtype=np.float32)
    img[:] = PALETTE[spec_bg][:, None, None]
    labels = np.zeros((size, size), dtype=np.int32)
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None]
    for idx, shape in enumerate(shapes, start=1):
        mask = _shape_mask(shape, size)
        fill = PALETTE[shape.color][:, None, None] * np.ones((3, size, size), dtype=np.float32)
        if shape.gradient is not None:
            fill = fill * (1.0 - shape.gradient * ramp)[None, :, :]
        img = np.where(mask[None], fill, img)
        labels[mask] = idx
    return img.astype(np.float32), labels


def generate_scene(seed: int, size: int = 64) -> tuple[np.ndarray, SceneSpec]:
    """Deterministic scene: background plus 2-6 shapes from the named palette."""
    rng = np.random.RandomState(seed)
    names = list(PALETTE_NAMES)
    background = names[rng.randint(len(names))]
    n_shapes = rng.randint(2, 7)
    shapes = []
    for _ in range(n_shapes):
        kind = SHAPE_KINDS[rng.randint(len(SHAPE_KINDS))]
        color = names[rng.randint(len(names))]
        center = (float(rng.uniform(0.15, 0.85) * size), float(rng.uniform(0.15, 0.85) * size))
        gradient = float(rng.uniform(0.15, 0.4)) if rng.rand() < 0.3 else None
        if kind == "circle":
            shapes.append(ShapeSpec(kind, center, float(rng.uniform(0.09, 0.28) * size),
                                    color, gradient))
        elif kind == "polygon":
            k = rng.randint(3, 7)
            radius = rng.uniform(0.12, 0.3) * size
            phase = rng.uniform(0, 2 * np.pi)
            angles = phase + np.arange(k) * 2 * np.pi / k
            verts = np.stack([center[0] + radius * np.cos(angles),
                              center[1] + radius * np.sin(angles)], axis=1)
            shapes.append(ShapeSpec(kind, center, float(radius), color, gradient, vertices=verts))
        else:
            shapes.append(ShapeSpec(kind, center, float(rng.uniform(0.04, 0.12) * size),
                                    color, gradient, angle=float(rng.uniform(0, np.pi))))
    img, labels = _render(background, shapes, size)

    captions = []
    total = labels.size
    if np.count_nonzero(labels == 0) >= MIN_CAPTION_FRACTION * total:
        captions.append(f"{background} background")
    for idx, shape in enumerate(shapes, start=1):
        if np.count_nonzero(labels == idx) >= MIN_CAPTION_FRACTION * total:
            captions.append(f"{shape.color} {shape.kind}")
    captions = list(dict.fromkeys(captions))
    return img, SceneSpec(seed=seed, size=size, background=background,
                          shapes=shapes, captions=captions, labels=labels)


# ---------------------------------------------------------------------------
# Sketch extraction
# ---------------------------------------------------------------------------

def extract_sketch(color: np.ndarray) -> np.ndarray:
    """Gradient-magnitude edges, dilated 1px, inverted to white-bg dark lines.

    Input is RGB (3, H, W) in [0, 1]; output is (1, H, W) in [0, 1].
    """
    if color.ndim != 3 or color.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) RGB image, got {color.shape}")
    gray = 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2]
    gy, gx = np.gradient(gray.astype(np.float64))
    mag = np.hypot(gx, gy)
    mask = mag > SKETCH_EDGE_THRESHOLD
    mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))
    sketch = 1.0 - mask.astype(np.float32)
    return sketch[None]


def binarize_lines(sketch: np.ndarray) -> np.ndarray:
    """Boolean line mask from a white-bg dark-line sketch (any leading dims)."""
    arr = np.asarray(sketch)
    if arr.ndim == 3:
        arr = arr[0]
    return arr < 0.5


# ---------------------------------------------------------------------------
# Moving-least-squares deformation (affine variant)
# ---------------------------------------------------------------------------

def _mls_affine_map(points: np.ndarray, p_ctrl: np.ndarray, q_ctrl: np.ndarray,
                    alpha: float) -> np.ndarray:
    """Affine MLS of Schaefer et al.: maps ``points`` with controls p -> q.

    Weights w_i = 1 / |v - p_i|^(2 alpha); points coinciding with a control
    point are snapped to its image (the singular-weight interpolation limit).
    """
    v = points[:, None, :]                       # (N, 1, 2)
    d2 = np.sum((v - p_ctrl[None]) ** 2, axis=2)  # (N, K)
    exact = d2 < 1e-12
    w = 1.0 / np.maximum(d2, 1e-12) ** alpha
    wsum = w.sum(axis=1, keepdims=True)

    p_star = (w @ p_ctrl) / wsum                 # (N, 2)
    q_star = (w @ q_ctrl) / wsum
    ph = p_ctrl[None] - p_star[:, None, :]       # (N, K, 2)
    qh = q_ctrl[None] - q_star[:, None, :]

    # 2x2 systems per point: A = sum w ph^T ph, B = sum w ph^T qh
    A = np.einsum("nk,nki,nkj->nij", w, ph, ph)
    B = np.einsum("nk,nki,nkj->nij", w, ph, qh)
    M = np.linalg.solve(A, B)
    out = np.einsum("ni,nij->nj", points - p_star, M) + q_star

    hit_rows = exact.any(axis=1)
    if hit_rows.any():
        hit_cols = exact[hit_rows].argmax(axis=1)
        out[hit_rows] = q_ctrl[hit_cols]
    return out


def _check_controls(p: np.ndarray, q: np.ndarray):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"control point arrays must both be (K, 2), got {p.shape} and {q.shape}")
    if len(p) < 3:
        raise ParameterError(f"need >= 3 control points, got {len(p)}")
    centered = p - p.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-8) < 2:
        raise ParameterError("control points are collinear")
    return p, q


def mls_deform(image: np.ndarray, control_src: np.ndarray, control_dst: np.ndarray,
               alpha: float = 1.0) -> np.ndarray:
    """Warp so that content at control_src lands at control_dst.

    Backward-mapped with bilinear sampling; out-of-bounds samples clamp to
    the image edge.
    """
    if alpha <= 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    src, dst = _check_controls(control_src, control_dst)
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got {image.shape}")
    _, h, w = image.shape
    xs, ys = _grid(h)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    # backward map: for each output pixel find its source location
    back = _mls_affine_map(pts, dst, src, alpha)
    coords = np.stack([back[:, 1].reshape(h, w), back[:, 0].reshape(h, w)])  # (row, col)
    out = np.stack([
        ndimage.map_coordinates(ch.astype(np.float64), coords, order=1, mode="nearest")
        for ch in image
    ])
    return out.astype(image.dtype)


def random_deformation(size: int, rng: np.random.RandomState, grid: int = 4,
                       max_shift: float = 6.0):
    """Jittered grid controls for reference synthesis; returns (src, dst)."""
    coords = np.linspace(size * 0.125, size * 0.875, grid)
    src = np.stack(np.meshgrid(coords, coords), axis=-1).reshape(-1, 2)
    dst = src + rng.uniform(-max_shift, max_shift, size=src.shape)
    return src, dst


def mean_displacement(size: int, control_src, control_dst, alpha: float = 1.0) -> float:
    """Mean magnitude of the backward warp field over all pixels."""
    xs, ys = _grid(size)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    back = _mls_affine_map(pts, np.asarray(control_dst, float), np.asarray(control_src, float), alpha)
    return float(np.linalg.norm(back - pts, axis=1).mean())


# ---------------------------------------------------------------------------
# Corpus builder and manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.txt"


def save_image(path: Path, img: np.ndarray):
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path)).astype(np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.moveaxis(arr, -1, 0)


def build_dataset(n: int, out_dir, deform: bool = True, size: int = 64, seed: int = 0,
                  deform_max_shift: float = 6.0, deform_alpha: float = 1.0) -> Path:
    """Write n (color, sketch, reference) triples plus a JSONL manifest.

    The manifest's first line is a header record carrying the palette,
    caption vocabulary, and build parameters; one sample record per line
    follows. Returns the manifest path.
    """
    if n < 0:
        raise ParameterError(f"n must be >= 0, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = caption_vocabulary()
    header = {
        "kind": "header", "version": 1, "n": n, "size": size, "seed": seed,
        "deform": deform, "deform_max_shift": deform_max_shift,
        "palette": list(PALETTE_NAMES), "vocabulary": vocab,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(n):
        sample_seed = seed + i
        img, spec = generate_scene(sample_seed, size=size)
        sketch = extract_sketch(img)
        record = {
            "kind": "sample", "index": i, "seed": sample_seed,
            "color": f"color_{i:05d}.png", "sketch": f"sketch_{i:05d}.png",
            "captions": spec.captions,
            "palette": sorted({spec.background} | {s.color for s in spec.shapes}),
        }
        try:
            save_image(out_dir / record["color"], img)
            save_image(out_dir / record["sketch"], sketch)
            if deform:
                drng = np.random.RandomState(sample_seed + 1_000_003)
                src, dst = random_deformation(size, drng, max_shift=deform_max_shift)
                ref = mls_deform(img, src, dst, alpha=deform_alpha)
                record["reference"] = f"ref_{i:05d}.png"
                record["mean_displacement"] = round(
                    mean_displacement(size, src, dst, deform_alpha), 4)
                save_image(out_dir / record["reference"], ref)
            else:
                record["reference"] = record["color"]
        except OSError as exc:
            raise DataError(f"failed writing sample {i}: {exc}") from exc
        lines.append(json.dumps(record, sort_keys=True))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / VOCAB_NAME).write_text("\n".join(vocab) + "\n", encoding="utf-8")
    return manifest


def load_manifest(manifest_path) -> tuple[dict, list[dict]]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    header = None
    records = []
    with manifest_path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "header":
                header = rec
            else:
                records.append(rec)
    if header is None:
        raise DataError(f"manifest missing header record: {manifest_path}")
    if len(records) != header["n"]:
        raise DataError(f"manifest lists {len(records)} samples, header says {header['n']}")
    return header, records
