"""Self-contained synthetic corpus: procedurally rendered images with
attribute-keyed comments, a rating that is a declared monotone function of
the luminance parameter plus bounded noise, and style labels for the
rendered patterns.

Everything is a pure function of (spec, seed): regenerating with the same
arguments reproduces the manifest and every image byte-for-byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import ManifestRecord, save_manifest
from .imageio import write_raw

BRIGHT_THRESHOLD = 0.55

POSITIVE_COMMENTS = [
    "good image",
    "good lighting",
    "very good lighting",
    "good composition",
    "bright image with good content",
    "the lighting is good",
    "good foreground and good background",
    "nice and bright image",
]
NEGATIVE_COMMENTS = [
    "bad image",
    "bad lighting",
    "very bad lighting",
    "bad composition",
    "dark image with bad content",
    "the lighting is bad",
    "bad foreground and bad background",
    "too dark and gloomy",
]
HUES = {
    "red": (1.0, 0.55, 0.55),
    "green": (0.55, 1.0, 0.55),
    "blue": (0.55, 0.6, 1.0),
    "gray": (0.85, 0.85, 0.85),
}
HUE_COMMENTS = {
    "red": "strong red tones",
    "green": "strong green tones",
    "blue": "strong blue tones",
    "gray": "muted gray tones",
}
# pattern name -> (style label or None, comment)
PATTERNS = {
    "flat": (None, "smooth flat texture"),
    "checker": (1, "two tone checker pattern"),
    "grain": (3, "grainy dotted texture"),
    "stripes": (7, "streaked stripe pattern"),
    "silhouette": (11, "dark silhouette shape"),
}


@dataclass(frozen=True)
class SynthSpec:
    count: int = 512
    image_size: int = 40
    channels: int = 3
    comments_min: int = 2
    comments_max: int = 4
    mos_noise: float = 0.25

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("synthetic corpus needs count >= 1")
        if self.channels != 3:
            raise ValueError("synthetic corpus renders 3-channel images")
        if not (1 <= self.comments_min <= self.comments_max):
            raise ValueError("need 1 <= comments_min <= comments_max")
        if not (0.0 <= self.mos_noise <= 0.5):
            raise ValueError("mos_noise must be in [0, 0.5]")


def mos_from_luminance(lum: float) -> float:
    """Declared monotone rating map: [0.15, 0.95] luminance -> [1.5, 9.5]."""
    return 1.5 + 10.0 * (lum - 0.15)


def _render(rng: np.random.Generator, size: int, lum: float, hue: str,
            pattern: str, contrast: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if pattern == "flat":
        mod = np.zeros((size, size))
    elif pattern == "stripes":
        freq = int(rng.integers(2, 6))
        phase = rng.uniform(0, 2 * np.pi)
        mod = contrast * np.sin(2 * np.pi * freq * xx / size + phase)
    elif pattern == "checker":
        cell = int(rng.integers(4, 9))
        mod = contrast * (((xx // cell + yy // cell) % 2) * 2.0 - 1.0)
    elif pattern == "grain":
        mod = contrast * (rng.random((size, size)) * 2.0 - 1.0)
    elif pattern == "silhouette":
        cy = rng.uniform(0.35, 0.65) * size
        cx = rng.uniform(0.35, 0.65) * size
        radius = rng.uniform(0.18, 0.3) * size
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        mod = np.where(disc, -0.9 * lum, 0.08)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    mult = np.array(HUES[hue])
    pix = np.clip((lum + mod)[:, :, None] * mult[None, None, :], 0.0, 1.0)
    return np.round(pix * 255.0).astype(np.uint8)


def generate_synthetic_corpus(spec: SynthSpec, out_dir: str, seed: int) -> str:
    """Render a corpus under `out_dir`; returns the manifest path."""
    rng = np.random.default_rng(seed)
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    pattern_names = list(PATTERNS)
    hue_names = list(HUES)
    records: list[ManifestRecord] = []
    for i in range(spec.count):
        lum = float(rng.uniform(0.15, 0.95))
        hue = hue_names[int(rng.integers(len(hue_names)))]
        pattern = pattern_names[int(rng.integers(len(pattern_names)))]
        contrast = float(rng.uniform(0.05, 0.22))
        pixels = _render(rng, spec.image_size, lum, hue, pattern, contrast)
        name = f"img{i:05d}"
        write_raw(pixels, os.path.join(image_dir, f"{name}.img"))

        polarity = POSITIVE_COMMENTS if lum >= BRIGHT_THRESHOLD else NEGATIVE_COMMENTS
        n_comments = int(rng.integers(spec.comments_min, spec.comments_max + 1))
        style_label, pattern_comment = PATTERNS[pattern]
        extras = list(polarity) + [HUE_COMMENTS[hue], pattern_comment]
        comments = [polarity[int(rng.integers(len(polarity)))]]
        for _ in range(n_comments - 1):
            comments.append(extras[int(rng.integers(len(extras)))])

        mos = mos_from_luminance(lum)
        if spec.mos_noise > 0:
            mos += float(rng.uniform(-spec.mos_noise, spec.mos_noise))
        records.append(ManifestRecord(
            id=name, image=os.path.join("images", f"{name}.img"),
            comments=comments, mos=round(mos, 6),
            styles=[style_label] if style_label is not None else []))
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    save_manifest(records, manifest_path)
    return manifest_path
