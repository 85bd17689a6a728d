"""Deterministic synthetic scenes for the two desk-scale voting tasks.

Scenes are 64x64 single-channel images in [0, 1]. The within-part task has
one soft blob whose centre is the keypoint. The cross-part task places
three joints on a jittered near-horizontal chain; with ``occlude=True`` the
middle joint's blob is erased from the image while its keypoint stays in
the ground truth, so it can only be recovered by evidence from its
neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import ScalarField
from .supervision import KeypointSet

SIZE = 64
MARGIN = 4

TRAIN_SEED_START, TRAIN_SEED_END = 0, 5000
EVAL_SEED_START, EVAL_SEED_END = 10000, 10200

_MEAN_BONE = 12.0
_BONE_SPREAD = 1.5
_LENGTH_EXPONENT = 0.25
_BASE_ANGLE = math.radians(25.0)
_BONE_ANGLE_JITTER = math.radians(5.0)
_NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class Scene:
    image: ScalarField
    keypoints: KeypointSet
    seed: int


def train_seed(step: int) -> int:
    return TRAIN_SEED_START + step % (TRAIN_SEED_END - TRAIN_SEED_START)


def eval_seeds() -> range:
    return range(EVAL_SEED_START, EVAL_SEED_END)


def render_blob(cx: float, cy: float, sigma: float, amplitude: float) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    return amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


def _finish(image: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return np.clip(image + noise, 0.0, 1.0)


def gen_within(seed: int) -> Scene:
    """Single soft blob; its centre is the (sub-pixel) keypoint."""
    rng = np.random.default_rng(seed)
    lo, hi = float(MARGIN), float(SIZE - 1 - MARGIN)
    cx = rng.uniform(lo, hi)
    cy = rng.uniform(lo, hi)
    sigma = rng.uniform(2.0, 4.0)
    amp = rng.uniform(0.6, 1.0)
    noise = rng.normal(0.0, _NOISE_SIGMA, (SIZE, SIZE))
    image = _finish(render_blob(cx, cy, sigma, amp), noise)
    kps = KeypointSet(np.array([[cx, cy]]), np.array([True]))
    return Scene(ScalarField(image[None]), kps, seed)


def _chain_positions(rng: np.random.Generator) -> np.ndarray:
    """Three joints on a left-to-right chain with jittered bones.

    All bone directions stay within +/-30 degrees of horizontal: a shared
    base inclination varies scene to scene and each bone adds a small
    independent wiggle on top. Bone lengths jitter multiplicatively inside
    [mean/1.5, mean*1.5]. The shared-plus-small structure keeps the middle
    joint well determined by its two neighbours, which is what lets the
    occlusion experiment isolate evidence transfer rather than measure an
    irreducible geometry-noise floor. Draws repeat until all joints respect
    the border margin.
    """
    lo, hi = float(MARGIN), float(SIZE - 1 - MARGIN)
    while True:
        x0 = rng.uniform(lo, hi - 2.0 * _MEAN_BONE)
        y0 = rng.uniform(lo + _MEAN_BONE, hi - _MEAN_BONE)
        base = rng.uniform(-_BASE_ANGLE, _BASE_ANGLE)
        pts = [(x0, y0)]
        for _ in range(2):
            length = _MEAN_BONE * _BONE_SPREAD ** rng.uniform(-_LENGTH_EXPONENT, _LENGTH_EXPONENT)
            angle = base + rng.uniform(-_BONE_ANGLE_JITTER, _BONE_ANGLE_JITTER)
            px, py = pts[-1]
            pts.append((px + length * math.cos(angle), py + length * math.sin(angle)))
        pos = np.array(pts)
        if np.all((pos >= lo) & (pos <= hi)):
            return pos


def gen_cross(seed: int, occlude: bool = False) -> Scene:
    """Three-joint chain scene; ``occlude`` erases the middle blob only."""
    rng = np.random.default_rng(seed)
    pos = _chain_positions(rng)
    sigmas = rng.uniform(2.0, 3.0, 3)
    amps = rng.uniform(0.6, 1.0, 3)
    noise = rng.normal(0.0, _NOISE_SIGMA, (SIZE, SIZE))
    image = np.zeros((SIZE, SIZE))
    for j in range(3):
        if occlude and j == 1:
            continue
        image += render_blob(pos[j, 0], pos[j, 1], sigmas[j], amps[j])
    image = _finish(image, noise)
    kps = KeypointSet(pos, np.array([True, True, True]))
    return Scene(ScalarField(image[None]), kps, seed)
