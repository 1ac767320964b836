"""Per-epoch random image transforms for training crops.

Order is fixed: flips, rotation, shear, zoom, channel shift. The three
geometric warps are composed into one affine map about the image center and
resampled once (bilinear, edge-replicated borders).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np

_EPS = 1e-9


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_deg: float = 45.0
    shear_deg: float = 5.0
    zoom: float = 0.2          # scale drawn from [1 - zoom, 1 + zoom]
    channel_shift: float = 10.0  # on the 0-255 scale
    h_flip: float = 0.5
    v_flip: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if min(self.rotation_deg, self.shear_deg, self.zoom, self.channel_shift) < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if self.zoom >= 1:
            raise ValueError("zoom range must stay below 1 so scales remain positive")
        if not (0 <= self.h_flip <= 1 and 0 <= self.v_flip <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(enabled=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        return cls(**d)


@dataclass(frozen=True)
class AugmentationParams:
    rotation: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    channel_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    h_flip: bool = False
    v_flip: bool = False

    @property
    def is_identity(self) -> bool:
        return self == AugmentationParams()

    def check(self, policy: AugmentationPolicy) -> None:
        problems = []
        if abs(self.rotation) > policy.rotation_deg + _EPS:
            problems.append(f"rotation {self.rotation}")
        if abs(self.shear) > policy.shear_deg + _EPS:
            problems.append(f"shear {self.shear}")
        if abs(self.zoom - 1) > policy.zoom + _EPS:
            problems.append(f"zoom {self.zoom}")
        if len(self.channel_shift) != 3 or any(abs(s) > policy.channel_shift + _EPS
                                               for s in self.channel_shift):
            problems.append(f"channel_shift {self.channel_shift}")
        if problems:
            raise ValueError("augmentation params outside policy: " + ", ".join(problems))


def sample_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent generator for one (seed, epoch, sample) triple."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def sample_params(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentationParams:
    if not policy.enabled:
        return AugmentationParams()
    u = rng.uniform
    return AugmentationParams(
        rotation=float(u(-policy.rotation_deg, policy.rotation_deg)),
        shear=float(u(-policy.shear_deg, policy.shear_deg)),
        zoom=float(u(1 - policy.zoom, 1 + policy.zoom)),
        channel_shift=tuple(float(s) for s in u(-policy.channel_shift, policy.channel_shift, 3)),
        h_flip=bool(rng.random() < policy.h_flip),
        v_flip=bool(rng.random() < policy.v_flip),
    )


def affine_matrix(params: AugmentationParams, width: int, height: int) -> np.ndarray:
    """3x3 map from source to destination pixel coordinates (rotation, then shear, then zoom)."""
    cx, cy = (width - 1) / 2, (height - 1) / 2
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    t = math.radians(params.rotation)
    # positive angles turn the picture counter-clockwise on screen (y axis points down)
    rot = np.array([[math.cos(t), math.sin(t), 0], [-math.sin(t), math.cos(t), 0], [0, 0, 1]])
    shear = np.array([[1, math.tan(math.radians(params.shear)), 0], [0, 1, 0], [0, 0, 1]])
    zoom = np.diag([params.zoom, params.zoom, 1.0])
    return back @ zoom @ shear @ rot @ to_origin


def apply_augmentation(image: np.ndarray, params: AugmentationParams,
                       policy: AugmentationPolicy | None = None) -> np.ndarray:
    """Transform an HxWx3 uint8 image; output has the same shape and dtype."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    params.check(policy or AugmentationPolicy())
    out = image
    if params.h_flip:
        out = out[:, ::-1]
    if params.v_flip:
        out = out[::-1]
    h, w = out.shape[:2]
    if (params.rotation, params.shear, params.zoom) != (0.0, 0.0, 1.0):
        m = affine_matrix(params, w, h)[:2]
        out = cv2.warpAffine(np.ascontiguousarray(out), m, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REPLICATE)
    if any(params.channel_shift):
        shifted = out.astype(np.float32) + np.asarray(params.channel_shift, dtype=np.float32)
        out = np.clip(np.rint(shifted), 0, 255).astype(np.uint8)
    return np.array(out, dtype=np.uint8, copy=True)
