"""Deterministic procedural face-sprite corpus: rendering, captions,
generation, ingestion and preprocessing.

Sprites are flat-color compositions on an 8-bit color grid, so PNG round
trips are exact and region oracles see the palette colors verbatim. The
attribute tuple plus a jitter seed fully determines every pixel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .imageio import read_image, write_image


def _c(r: int, g: int, b: int) -> np.ndarray:
    return np.array([r, g, b], dtype=np.float64) / 255.0


COLOR_CLASSES = {
    "class1": _c(77, 51, 36),
    "class2": _c(247, 230, 209),
    "class3": _c(237, 184, 102),
    "class4": _c(153, 97, 56),
    "class5": _c(209, 140, 107),
}
COLOR_CLASS_NAMES = sorted(COLOR_CLASSES)
STYLES = ("boy", "girl")
EXPRESSIONS = ("frown", "neutral", "smile", "surprise")
HAIR_COLORS = {
    "dark": _c(20, 18, 26),
    "brown": _c(89, 51, 26),
    "blonde": _c(217, 179, 77),
    "red": _c(140, 38, 26),
}
HAIR_NAMES = sorted(HAIR_COLORS)

_BACKGROUND = _c(234, 236, 242)
_EYE_WHITE = _c(250, 250, 250)
_PUPIL = _c(25, 25, 30)
_MOUTH = _c(140, 45, 55)
_GLASSES = _c(30, 30, 35)
_HAT = _c(51, 64, 128)


@dataclass(frozen=True)
class SpriteAttributes:
    color_class: str
    style: str
    expression: str
    glasses: bool
    hat: bool
    hair: str

    def __post_init__(self):
        if self.color_class not in COLOR_CLASSES:
            raise ValueError(f"unknown color class {self.color_class!r}")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")
        if self.expression not in EXPRESSIONS:
            raise ValueError(f"unknown expression {self.expression!r}")
        if self.hair not in HAIR_COLORS:
            raise ValueError(f"unknown hair palette {self.hair!r}")


@dataclass
class SpriteRecord:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    attributes: SpriteAttributes
    caption: str
    jitter_seed: int
    file: Optional[str] = None


def caption(attrs: SpriteAttributes) -> str:
    """Canonical caption grammar; injective over attribute tuples."""
    parts = [attrs.style, attrs.color_class, attrs.expression]
    if attrs.glasses:
        parts.append("glasses")
    if attrs.hat:
        parts.append("hat")
    parts.append(f"{attrs.hair} hair")
    return " , ".join(parts)


def sprite_geometry(size: int, jitter_seed: int) -> dict:
    """Jittered layout (+-10% positions/scales) shared by the renderer and the
    eye-region containment contract. Attribute values never shift the draws."""
    rng = np.random.default_rng(jitter_seed)
    u = rng.uniform(-1.0, 1.0, size=16)
    s = float(size)
    face_rx = 0.30 * s * (1 + 0.1 * u[0])
    face_ry = 0.34 * s * (1 + 0.1 * u[1])
    cx = 0.50 * s + 0.1 * face_rx * u[2]
    cy = 0.54 * s + 0.1 * face_ry * u[3]
    eye_dx = 0.45 * face_rx * (1 + 0.1 * u[4])
    eye_dy = 0.22 * face_ry * (1 + 0.1 * u[5])
    eye_r = max(0.16 * face_rx * (1 + 0.1 * u[6]), 1.0)
    mouth_y = cy + 0.48 * face_ry * (1 + 0.1 * u[7])
    mouth_w = 0.55 * face_rx * (1 + 0.1 * u[8])
    hairline = cy - 0.40 * face_ry * (1 + 0.1 * u[9])
    side_len = 1.15 * face_ry * (1 + 0.1 * u[10])
    hat_w = 1.35 * face_rx * (1 + 0.1 * u[11])
    g = {
        "face_rx": face_rx,
        "face_ry": face_ry,
        "cx": cx,
        "cy": cy,
        "eye_dx": eye_dx,
        "eye_dy": eye_dy,
        "eye_r": eye_r,
        "mouth_y": mouth_y,
        "mouth_w": mouth_w,
        "hairline": hairline,
        "side_len": side_len,
        "hat_w": hat_w,
    }
    g["eye_bbox"] = _eye_bbox(g, size)
    return g


def _eye_bbox(g: dict, size: int) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) half-open box that bounds everything glasses may touch."""
    fw = 1.6 * g["eye_r"] + 1.5
    fh = 1.3 * g["eye_r"] + 1.5
    x0 = int(np.floor(g["cx"] - g["eye_dx"] - fw - 1))
    x1 = int(np.ceil(g["cx"] + g["eye_dx"] + fw + 1)) + 1
    ey = g["cy"] - g["eye_dy"]
    y0 = int(np.floor(ey - fh - 1))
    y1 = int(np.ceil(ey + fh + 1)) + 1
    return max(x0, 0), max(y0, 0), min(x1, size), min(y1, size)


def render_sprite(attrs: SpriteAttributes, size: int = 32, jitter_seed: int = 0) -> np.ndarray:
    """Render to a (3, size, size) float array in [0, 1]; bit-deterministic."""
    if size < 16:
        raise ValueError("sprite size must be >= 16")
    g = sprite_geometry(size, jitter_seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = _BACKGROUND

    cx, cy = g["cx"], g["cy"]
    rx, ry = g["face_rx"], g["face_ry"]
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    hair_color = HAIR_COLORS[attrs.hair]

    if attrs.style == "girl":
        half_w = 0.42 * rx
        for sgn in (-1.0, 1.0):
            px = cx + sgn * (rx + 0.02 * size)
            panel = (np.abs(xx - px) <= half_w) & (yy >= cy - 0.6 * ry) & (yy <= cy + g["side_len"])
            img[panel] = hair_color

    img[face] = COLOR_CLASSES[attrs.color_class]

    halo = ((xx - cx) / (rx * 1.06)) ** 2 + ((yy - cy) / (ry * 1.06)) ** 2 <= 1.0
    cap = halo & (yy <= g["hairline"])
    img[cap] = hair_color

    line = max(size / 32.0, 1.0)
    ey = cy - g["eye_dy"]
    er = g["eye_r"]
    for sgn in (-1.0, 1.0):
        ex = cx + sgn * g["eye_dx"]
        white = ((xx - ex) / er) ** 2 + ((yy - ey) / (0.85 * er)) ** 2 <= 1.0
        img[white] = _EYE_WHITE
        pupil = (xx - ex) ** 2 + (yy - ey) ** 2 <= (0.45 * er) ** 2
        img[pupil] = _PUPIL

    mx, my, mw = cx, g["mouth_y"], g["mouth_w"]
    th = 0.55 * line
    if attrs.expression == "neutral":
        mouth = (np.abs(xx - mx) <= mw) & (np.abs(yy - my) <= th)
    elif attrs.expression == "surprise":
        mouth = ((xx - mx) / (0.45 * mw)) ** 2 + ((yy - my) / (0.55 * mw)) ** 2 <= 1.0
    else:
        bend = 0.8 * mw
        if attrs.expression == "smile":
            ccy = my - bend
            dist = np.sqrt((xx - mx) ** 2 + (yy - ccy) ** 2)
            mouth = (np.abs(dist - bend) <= th * 1.2) & (yy >= my - 0.25 * bend) & (np.abs(xx - mx) <= mw)
        else:  # frown
            ccy = my + bend
            dist = np.sqrt((xx - mx) ** 2 + (yy - ccy) ** 2)
            mouth = (np.abs(dist - bend) <= th * 1.2) & (yy <= my + 0.25 * bend) & (np.abs(xx - mx) <= mw)
    img[mouth & face] = _MOUTH

    if attrs.hat:
        brim_y = g["hairline"] - 0.05 * ry
        brim = (np.abs(xx - cx) <= g["hat_w"]) & (yy >= brim_y - 1.1 * line) & (yy <= brim_y)
        crown = (np.abs(xx - cx) <= 0.72 * g["hat_w"]) & (yy >= brim_y - 0.38 * ry) & (yy < brim_y - 1.1 * line)
        img[brim | crown] = _HAT

    if attrs.glasses:
        bx0, by0, bx1, by1 = g["eye_bbox"]
        inbox = (xx >= bx0) & (xx < bx1) & (yy >= by0) & (yy < by1)
        fw, fh = 1.6 * er, 1.3 * er
        frame = np.zeros_like(face)
        for sgn in (-1.0, 1.0):
            ex = cx + sgn * g["eye_dx"]
            outer = (np.abs(xx - ex) <= fw) & (np.abs(yy - ey) <= fh)
            inner = (np.abs(xx - ex) <= fw - line) & (np.abs(yy - ey) <= fh - line)
            frame |= outer & ~inner
        bridge = (np.abs(yy - ey) <= 0.5 * line) & (np.abs(xx - cx) <= g["eye_dx"] - fw + line)
        frame |= bridge
        img[frame & inbox] = _GLASSES

    # snap to the 8-bit grid so PNG round trips and palette oracles are exact
    img8 = np.round(img * 255.0)
    return (img8 / 255.0).astype(np.float32).transpose(2, 0, 1)


def make_record(attrs: SpriteAttributes, size: int, jitter_seed: int) -> SpriteRecord:
    return SpriteRecord(
        image=render_sprite(attrs, size, jitter_seed),
        attributes=attrs,
        caption=caption(attrs),
        jitter_seed=jitter_seed,
    )


def _draw_attrs(rng: np.random.Generator, color_class: str, style: str) -> SpriteAttributes:
    return SpriteAttributes(
        color_class=color_class,
        style=style,
        expression=EXPRESSIONS[rng.integers(0, len(EXPRESSIONS))],
        glasses=bool(rng.random() < 0.3),
        hat=bool(rng.random() < 0.2),
        hair=HAIR_NAMES[rng.integers(0, len(HAIR_NAMES))],
    )


def gen_corpus(
    n_per_cell: int,
    seed: int,
    out_dir,
    size: int = 32,
    image_format: str = "png",
) -> list[dict]:
    """Write a corpus balanced over color_class x style; returns manifest rows.

    The default release layout is n_per_cell=250: 5 classes x 500 images with
    a 250/250 style split, 2,500 total."""
    if n_per_cell < 1:
        raise ValueError("n_per_cell must be >= 1")
    if image_format not in ("png", "ppm"):
        raise ValueError(f"unsupported image format {image_format!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rows = []
    for color_class in COLOR_CLASS_NAMES:
        for style in STYLES:
            for i in range(n_per_cell):
                attrs = _draw_attrs(rng, color_class, style)
                jitter_seed = int(rng.integers(0, 2**31 - 1))
                rec = make_record(attrs, size, jitter_seed)
                fname = f"images/{color_class}_{style}_{i:05d}.{image_format}"
                write_image(out_dir / fname, rec.image)
                rows.append(
                    {
                        "file": fname,
                        "attributes": asdict(attrs),
                        "caption": rec.caption,
                        "jitter_seed": jitter_seed,
                    }
                )
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(out_dir / "meta.json", "w") as fh:
        json.dump({"n_per_cell": n_per_cell, "seed": seed, "size": size, "format": image_format}, fh, sort_keys=True)
    return rows


@dataclass
class SpriteDataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    captions: list[str]
    attributes: list[SpriteAttributes]
    files: list[str]
    rejects: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "SpriteDataset":
        idx = np.asarray(idx)
        return SpriteDataset(
            images=self.images[idx],
            captions=[self.captions[i] for i in idx],
            attributes=[self.attributes[i] for i in idx],
            files=[self.files[i] for i in idx],
            rejects=[],
        )


class EmptyDatasetError(ValueError):
    pass


def ingest(corpus_dir, target_size: Optional[int] = None) -> SpriteDataset:
    """Load a generated corpus; undecodable files are skipped and reported."""
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.jsonl"
    if not manifest.exists():
        raise EmptyDatasetError(f"no manifest.jsonl under {corpus_dir}")
    images, captions, attributes, files, rejects = [], [], [], [], []
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            path = corpus_dir / row["file"]
            try:
                img = read_image(path)
            except Exception:
                rejects.append(row["file"])
                continue
            if target_size is not None and img.shape[1:] != (target_size, target_size):
                img = preprocess(img, target_size)
            images.append(img)
            captions.append(row["caption"])
            attributes.append(SpriteAttributes(**row["attributes"]))
            files.append(row["file"])
    if not images:
        raise EmptyDatasetError(f"no decodable images under {corpus_dir} ({len(rejects)} rejects)")
    return SpriteDataset(np.stack(images), captions, attributes, files, rejects)


def preprocess(image: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize (half-pixel centers) of a (C, H, W) [0,1] image."""
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    if (h, w) == (target_size, target_size):
        return image.astype(np.float32)
    out = _bilinear(img, target_size, target_size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _bilinear(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    c, h, w = img.shape
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def class_histogram(rows: Iterable[dict]) -> dict[tuple[str, str], int]:
    hist: dict[tuple[str, str], int] = {}
    for row in rows:
        key = (row["attributes"]["color_class"], row["attributes"]["style"])
        hist[key] = hist.get(key, 0) + 1
    return hist
