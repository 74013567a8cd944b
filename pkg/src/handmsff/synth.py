"""Procedural generator of annotated 2D hand images, plus the dataset format.

Hands are built by 2D forward kinematics over the canonical skeleton
(wrist, five chains of base/mid/mid/tip) and rendered as anti-aliased
capsules over a textured noise background. Everything is deterministic
given a seed. Joints that land outside the canvas are marked occluded and
stored as the literal coordinate (0, 0), which is also how the loader and
all metrics recognize occlusion.

On disk a dataset is ``images/NNNNNN.png`` plus a ``manifest.json`` with
fields {version, seed, image_size, generator_params, samples[]}. The same
schema doubles as the import format for converted external datasets.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from . import graph as graph_mod
from .errors import ConfigError, ContractViolation, FormatError

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Forward-kinematics constants, in pixels at palm scale 1. Angles are
# radians relative to the hand axis (0 = straight along the hand).
_BASE_ANGLES = (-1.05, -0.42, 0.0, 0.34, 0.70)
_PALM_LENGTHS = (40.0, 74.0, 80.0, 74.0, 64.0)
_SEGMENT_LENGTHS = (
    (34.0, 26.0, 20.0),  # thumb
    (32.0, 22.0, 17.0),  # index
    (34.0, 24.0, 18.0),  # middle
    (30.0, 22.0, 17.0),  # ring
    (24.0, 17.0, 14.0),  # pinky
)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the procedural generator."""

    image_size: int = 320
    scale_range: tuple[float, float] = (0.5, 0.9)
    two_hand_prob: float = 0.25
    max_abduction: float = 0.12
    flexion_range: tuple[float, float] = (-0.1, 0.55)
    target_sigma: float = 2.0

    def validate(self) -> "GenConfig":
        if self.image_size < 64:
            raise ConfigError("image_size: must be >= 64")
        if not 0.0 < self.scale_range[0] <= self.scale_range[1]:
            raise ConfigError("scale_range: must be increasing and positive")
        if not 0.0 <= self.two_hand_prob <= 1.0:
            raise ConfigError("two_hand_prob: must be in [0, 1]")
        if self.target_sigma <= 0:
            raise ConfigError("target_sigma: must be > 0")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["flexion_range"] = list(self.flexion_range)
        return d

    @classmethod
    def from_dict(cls, data) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown generator config field")
        data = dict(data)
        for key in ("scale_range", "flexion_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data).validate()


@dataclass(frozen=True)
class HandPose:
    """Raw kinematic joint positions (may leave the canvas) plus occlusion flags."""

    joints: np.ndarray  # (21, 2) float64, raw positions
    occluded: np.ndarray  # (21,) bool

    @property
    def visible(self) -> np.ndarray:
        return ~self.occluded

    def annotated_joints(self) -> np.ndarray:
        """Joints with the occluded entries replaced by the (0, 0) convention."""
        return np.where(self.occluded[:, None], 0.0, self.joints)


@dataclass
class Hand:
    joints: np.ndarray  # (21, 2), occluded entries exactly (0, 0)

    @property
    def visible(self) -> np.ndarray:
        return ~np.all(self.joints == 0.0, axis=1)


@dataclass
class HandAnnotation:
    image_path: str
    hands: list[Hand]
    image_size: tuple[int, int]  # (width, height)


def _direction(angle: float) -> np.ndarray:
    # Angle 0 points up the canvas (negative y); positive angles turn toward +x.
    return np.array([math.sin(angle), -math.cos(angle)])


def forward_kinematics(wrist, rotation: float, scale: float,
                       abductions, flexions) -> np.ndarray:
    """Place all 21 joints from pose parameters.

    ``abductions`` has one sideways offset per finger; ``flexions`` is
    (5, 3) with one curl angle per phalanx. With zero rotation, abduction
    and flexion, every finger is a straight chain along its base direction.
    """
    joints = np.zeros((21, 2))
    joints[0] = np.asarray(wrist, dtype=np.float64)
    flexions = np.asarray(flexions, dtype=np.float64)
    for f, chain in enumerate(graph_mod.FINGER_CHAINS):
        angle = rotation + _BASE_ANGLES[f] + abductions[f]
        pos = joints[0] + _PALM_LENGTHS[f] * scale * _direction(angle)
        joints[chain[0]] = pos
        for s in range(3):
            angle += flexions[f, s]
            pos = pos + _SEGMENT_LENGTHS[f][s] * scale * _direction(angle)
            joints[chain[s + 1]] = pos
    return joints


def sample_hand_pose(rng_seed, gen_config: GenConfig, slot: int = 0,
                     n_slots: int = 1) -> HandPose:
    """Draw one plausible hand pose. ``slot`` places multi-hand images apart."""
    cfg = gen_config.validate()
    rng = np.random.default_rng(rng_seed)
    size = cfg.image_size
    scale = rng.uniform(*cfg.scale_range)
    if n_slots > 1:
        scale *= 0.72
        bands = ((0.18, 0.40), (0.60, 0.82))
        wx = rng.uniform(*bands[slot % 2]) * size
    else:
        wx = rng.uniform(0.32, 0.68) * size
    wy = rng.uniform(0.32, 0.68) * size
    rotation = rng.uniform(0.0, 2.0 * math.pi)
    abductions = rng.uniform(-cfg.max_abduction, cfg.max_abduction, size=5)
    flexions = rng.uniform(cfg.flexion_range[0], cfg.flexion_range[1], size=(5, 3))
    joints = forward_kinematics((wx, wy), rotation, scale, abductions, flexions)
    inside = (
        (joints[:, 0] >= 1.0)
        & (joints[:, 0] <= size - 2.0)
        & (joints[:, 1] >= 1.0)
        & (joints[:, 1] <= size - 2.0)
    )
    return HandPose(joints=joints, occluded=~inside)


def _upsample_bilinear(channel: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BILINEAR))


def _segment_distance(px, py, a, b):
    ab = b - a
    ap_x = px - a[0]
    ap_y = py - a[1]
    denom = float(ab[0] ** 2 + ab[1] ** 2)
    if denom == 0.0:
        return np.hypot(ap_x, ap_y)
    t = np.clip((ap_x * ab[0] + ap_y * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(ap_x - t * ab[0], ap_y - t * ab[1])


def render_hand(hands: Sequence[np.ndarray], gen_config: GenConfig,
                rng_seed) -> np.ndarray:
    """Render zero or more hands onto a textured background, (3, S, S) in [0, 1].

    Bones are thick anti-aliased capsules and joints are discs. The
    background's red channel is capped well below skin red, so hand pixels
    stay separable from the background by at least 0.2 in that channel.
    """
    cfg = gen_config.validate()
    rng = np.random.default_rng(rng_seed)
    size = cfg.image_size

    base = rng.uniform((0.10, 0.16, 0.22), (0.34, 0.42, 0.52))
    blotch = np.stack(
        [_upsample_bilinear(rng.uniform(-0.10, 0.10, (8, 8)), size) for _ in range(3)]
    )
    grain = rng.normal(0.0, 0.02, (3, size, size))
    image = np.clip(base[:, None, None] + blotch + grain, 0.0, 1.0)
    image[0] = np.minimum(image[0], 0.50)

    px, py = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="xy")
    for joints in hands:
        joints = np.asarray(joints, dtype=np.float64)
        skin = rng.uniform((0.80, 0.55, 0.42), (0.95, 0.72, 0.58))
        texture = 1.0 + rng.normal(0.0, 0.015, (size, size))
        alpha = np.zeros((size, size))
        for a_idx, b_idx in graph_mod.EDGES:
            a, b = joints[a_idx], joints[b_idx]
            bone_len = float(np.hypot(*(b - a)))
            radius = float(np.clip(0.22 * bone_len, 1.5, 8.0))
            d = _segment_distance(px, py, a, b)
            alpha = np.maximum(alpha, np.clip((radius + 0.75 - d) / 1.5, 0.0, 1.0))
        layer = np.clip(skin[:, None, None] * texture[None], 0.0, 1.0)
        image = image * (1.0 - alpha[None]) + layer * alpha[None]
        # Bright knuckle discs on top of the skin give each joint a crisp,
        # localizable appearance.
        disc_alpha = np.zeros((size, size))
        for k in range(joints.shape[0]):
            d = np.hypot(px - joints[k, 0], py - joints[k, 1])
            radius = 3.4 if k == 0 else 2.8
            disc_alpha = np.maximum(
                disc_alpha, np.clip((radius + 0.75 - d) / 1.5, 0.0, 1.0)
            )
        disc_color = np.clip(skin * 1.18 + 0.04, 0.0, 1.0)
        image = image * (1.0 - disc_alpha[None]) + disc_color[:, None, None] * disc_alpha[None]

    return image.astype(np.float32)


def gaussian_targets(joints, sigma: float, size: int, occl_mask) -> np.ndarray:
    """Per-joint Gaussian bump targets on a size x size grid, peak 1 at the joint cell."""
    if sigma <= 0:
        raise ContractViolation("sigma must be > 0")
    joints = np.asarray(joints, dtype=np.float64)
    occl = np.asarray(occl_mask, dtype=bool)
    k = joints.shape[0]
    xs = np.arange(size, dtype=np.float64)
    grid_x, grid_y = np.meshgrid(xs, xs, indexing="xy")
    maps = np.zeros((k, size, size), dtype=np.float64)
    for j in range(k):
        if occl[j]:
            continue
        # Peak sits on the nearest cell so the map's max is exactly 1.
        cx = float(np.clip(np.rint(joints[j, 0]), 0, size - 1))
        cy = float(np.clip(np.rint(joints[j, 1]), 0, size - 1))
        maps[j] = np.exp(-((grid_x - cx) ** 2 + (grid_y - cy) ** 2) / (2.0 * sigma**2))
    return maps


@dataclass
class DatasetManifest:
    version: int
    seed: int
    image_size: int
    generator_params: dict
    samples: list[HandAnnotation]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "image_size": self.image_size,
            "generator_params": self.generator_params,
            "samples": [
                {
                    "image_path": ann.image_path,
                    "hands": [{"joints": h.joints.tolist()} for h in ann.hands],
                }
                for ann in self.samples
            ],
        }


class Dataset:
    """Loaded dataset: lazy image access plus parsed annotations."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.manifest.samples)

    def annotation(self, index: int) -> HandAnnotation:
        return self.manifest.samples[index]

    def image(self, index: int) -> np.ndarray:
        path = self.root / self.manifest.samples[index].image_path
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return np.transpose(arr, (2, 0, 1))

    def __iter__(self) -> Iterator[tuple[np.ndarray, HandAnnotation]]:
        for i in range(len(self)):
            yield self.image(i), self.annotation(i)


def generate_dataset(n_images: int, seed: int, out_dir,
                     gen_config: Optional[GenConfig] = None) -> DatasetManifest:
    """Write ``n_images`` rendered samples plus a manifest; reproducible from seed."""
    if n_images <= 0:
        raise ConfigError("n_images: must be positive")
    cfg = (gen_config or GenConfig()).validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    samples = []
    children = np.random.SeedSequence(seed).spawn(n_images)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        n_hands = 2 if rng.random() < cfg.two_hand_prob else 1
        poses = [
            sample_hand_pose(int(rng.integers(2**63)), cfg, slot=s, n_slots=n_hands)
            for s in range(n_hands)
        ]
        image = render_hand([p.joints for p in poses], cfg, int(rng.integers(2**63)))
        rel_path = f"images/{i:06d}.png"
        arr = np.transpose(np.round(image * 255.0).astype(np.uint8), (1, 2, 0))
        Image.fromarray(arr).save(out / rel_path)
        hands = [
            Hand(joints=np.round(p.annotated_joints(), 2)) for p in poses
        ]
        samples.append(
            HandAnnotation(
                image_path=rel_path,
                hands=hands,
                image_size=(cfg.image_size, cfg.image_size),
            )
        )

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        seed=seed,
        image_size=cfg.image_size,
        generator_params=cfg.to_dict(),
        samples=samples,
    )
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    return manifest


def load_dataset(root) -> Dataset:
    """Parse and validate a dataset directory; raises FormatError on any defect."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"{manifest_path}: manifest not found")
    try:
        raw = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc

    for fname in ("version", "seed", "image_size", "generator_params", "samples"):
        if fname not in raw:
            raise FormatError(f"{manifest_path}: missing field '{fname}'")
    if raw["version"] != MANIFEST_VERSION:
        raise FormatError(
            f"{manifest_path}: unknown version {raw['version']} "
            f"(expected {MANIFEST_VERSION})"
        )

    size = int(raw["image_size"])
    samples = []
    for s_idx, sample in enumerate(raw["samples"]):
        if "image_path" not in sample or "hands" not in sample:
            raise FormatError(
                f"{manifest_path}: sample {s_idx} missing 'image_path' or 'hands'"
            )
        img_path = root / sample["image_path"]
        if not img_path.is_file():
            raise FormatError(f"{manifest_path}: missing image file {img_path}")
        hands = []
        for h_idx, hand in enumerate(sample["hands"]):
            joints = np.asarray(hand["joints"], dtype=np.float64)
            if joints.shape != (graph_mod.JOINT_COUNT, 2):
                raise FormatError(
                    f"{manifest_path}: sample {s_idx} hand {h_idx} joints must be "
                    f"{graph_mod.JOINT_COUNT}x2, got {joints.shape}"
                )
            occluded = np.all(joints == 0.0, axis=1)
            in_bounds = (
                (joints[:, 0] >= 0)
                & (joints[:, 0] <= size - 1)
                & (joints[:, 1] >= 0)
                & (joints[:, 1] <= size - 1)
            )
            if not np.all(occluded | in_bounds):
                raise FormatError(
                    f"{manifest_path}: sample {s_idx} hand {h_idx} has visible "
                    "joints outside the image bounds"
                )
            hands.append(Hand(joints=joints))
        samples.append(
            HandAnnotation(
                image_path=sample["image_path"], hands=hands, image_size=(size, size)
            )
        )

    manifest = DatasetManifest(
        version=int(raw["version"]),
        seed=int(raw["seed"]),
        image_size=size,
        generator_params=dict(raw["generator_params"]),
        samples=samples,
    )
    return Dataset(root, manifest)
