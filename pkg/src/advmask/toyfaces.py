"""Deterministic synthetic face-like corpus for desk-scale experiments.

Renders parametric "identities" (skin/hair palette, eye, brow, and nose
geometry) with small per-image jitter (translation, brightness, pixel
noise). Identity-discriminative detail is concentrated in the eye/brow/
nose band; the mouth is near-constant across identities so the lower
face carries little identity information. Everything is a pure function
of (seed, subject index, image index).
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

IRIS_COLORS = [
    (95, 60, 30),     # brown
    (60, 90, 150),    # blue
    (60, 110, 70),    # green
    (110, 110, 118),  # gray
]

HAIR_COLORS = [
    (35, 25, 20),     # near-black
    (105, 70, 40),    # brown
    (190, 165, 105),  # blonde
    (150, 70, 45),    # auburn
    (120, 120, 125),  # gray
]


def _ellipse(xx, yy, cx, cy, ax, ay):
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _segment(xx, yy, p0, p1, thickness):
    """Mask of points within `thickness` of the segment p0-p1."""
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = px * px + py * py
    if norm2 == 0:
        return (xx - p0[0]) ** 2 + (yy - p0[1]) ** 2 <= thickness**2
    t = ((xx - p0[0]) * px + (yy - p0[1]) * py) / norm2
    t = np.clip(t, 0.0, 1.0)
    dx = xx - (p0[0] + t * px)
    dy = yy - (p0[1] + t * py)
    return dx * dx + dy * dy <= thickness**2


def identity_params(seed: int, subject: int) -> dict:
    """Draw the per-identity appearance parameters."""
    rng = np.random.default_rng([seed, subject])
    skin_r = rng.uniform(150, 225)
    skin = np.array([skin_r, skin_r - rng.uniform(20, 45), skin_r - rng.uniform(45, 85)])
    hair = np.array(HAIR_COLORS[rng.integers(len(HAIR_COLORS))], dtype=float)
    hair = np.clip(hair + rng.uniform(-12, 12, size=3), 0, 255)
    iris = np.array(IRIS_COLORS[rng.integers(len(IRIS_COLORS))], dtype=float)
    iris = np.clip(iris + rng.uniform(-10, 10, size=3), 0, 255)
    return {
        "skin": skin,
        "hair": hair,
        "iris": iris,
        "face_ax": rng.uniform(0.28, 0.34),
        "face_ay": rng.uniform(0.36, 0.42),
        "hair_h": rng.uniform(0.04, 0.09),
        "eye_y": rng.uniform(0.40, 0.46),
        "eye_dx": rng.uniform(0.13, 0.19),
        "eye_rx": rng.uniform(0.045, 0.068),
        "eye_aspect": rng.uniform(0.55, 0.75),
        "iris_frac": rng.uniform(0.45, 0.62),
        "brow_dy": rng.uniform(0.055, 0.085),
        "brow_len": rng.uniform(0.10, 0.16),
        "brow_t": rng.uniform(0.010, 0.020),
        "brow_tilt": rng.uniform(-0.05, 0.05),
        "nose_len": rng.uniform(0.10, 0.17),
        "nose_t": rng.uniform(0.012, 0.024),
        "nose_shade": rng.uniform(0.72, 0.88),
    }


def render_face(params: dict, resolution: int, jitter_rng: np.random.Generator) -> np.ndarray:
    """Render one uint8 HxWx3 image of an identity with per-image jitter."""
    r = resolution
    shift = jitter_rng.uniform(-0.03, 0.03, size=2)  # whole-face translation
    brightness = jitter_rng.uniform(0.92, 1.08)
    bg = jitter_rng.uniform(35, 70)

    ys, xs = np.linspace(0, 1, r), np.linspace(0, 1, r)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    img = np.full((r, r, 3), bg, dtype=np.float64)
    img += jitter_rng.uniform(-6, 6)  # background tint wobble

    cx, cy = 0.5 + shift[0], 0.54 + shift[1]
    p = params

    def paint(mask, color):
        img[mask] = color

    # hair: larger ellipse behind the face, visible as a top/side rim
    paint(_ellipse(xx, yy, cx, cy - p["hair_h"], p["face_ax"] + 0.05,
                   p["face_ay"] + 0.05), p["hair"])
    paint(_ellipse(xx, yy, cx, cy, p["face_ax"], p["face_ay"]), p["skin"])

    eye_y = p["eye_y"] + shift[1]
    for side in (-1, 1):
        ex = cx + side * p["eye_dx"]
        # brow
        bx0 = ex - p["brow_len"] / 2
        bx1 = ex + p["brow_len"] / 2
        by = eye_y - p["brow_dy"]
        brow_col = p["hair"] * 0.55
        paint(_segment(xx, yy, (bx0, by - side * p["brow_tilt"]),
                       (bx1, by + side * p["brow_tilt"]), p["brow_t"]), brow_col)
        # sclera, iris, pupil
        paint(_ellipse(xx, yy, ex, eye_y, p["eye_rx"],
                       p["eye_rx"] * p["eye_aspect"]), (235, 235, 235))
        ir = p["eye_rx"] * p["iris_frac"]
        paint(_ellipse(xx, yy, ex, eye_y, ir, ir), p["iris"])
        pr = ir * 0.45
        paint(_ellipse(xx, yy, ex, eye_y, pr, pr), (15, 15, 15))

    # nose: vertical ridge plus a base blob, shaded skin
    nose_col = p["skin"] * p["nose_shade"]
    nose_top = (cx, eye_y + 0.04)
    nose_bot = (cx, eye_y + 0.04 + p["nose_len"])
    paint(_segment(xx, yy, nose_top, nose_bot, p["nose_t"]), nose_col)
    paint(_ellipse(xx, yy, nose_bot[0], nose_bot[1], p["nose_t"] * 2.2,
                   p["nose_t"] * 1.4), nose_col)

    # mouth: deliberately generic, same geometry/color for every identity
    mouth_y = cy + 0.20
    paint(_segment(xx, yy, (cx - 0.10, mouth_y), (cx + 0.10, mouth_y), 0.016),
          (150, 70, 70))

    img *= brightness
    img += jitter_rng.normal(0.0, 2.5, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_corpus(
    root: str,
    n_subjects: int = 20,
    images_per_subject: int = 6,
    resolution: int = 64,
    seed: int = 0,
) -> list[str]:
    """Write a ``root/<subject>/<image>.png`` tree; returns written paths."""
    paths = []
    for s in range(n_subjects):
        params = identity_params(seed, s)
        subject_dir = os.path.join(root, f"s{s:03d}")
        os.makedirs(subject_dir, exist_ok=True)
        for k in range(images_per_subject):
            jitter = np.random.default_rng([seed, s, k])
            img = render_face(params, resolution, jitter)
            path = os.path.join(subject_dir, f"img{k:02d}.png")
            Image.fromarray(img).save(path)
            paths.append(path)
    return paths
