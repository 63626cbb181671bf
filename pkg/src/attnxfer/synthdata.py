"""Synthetic two-domain corpus: labelled "web images" and target-domain videos.

Each concept is a small texture glyph. Source images carry a background
brightness that mostly encodes the class; target frames do not, and differ in
contrast, noise and framing: with the default ``"shifted"`` layout each class
sits at another class's source position (so a pixel-level classifier fitted on
the source fails), with ``"random"`` the glyph may appear anywhere. A
classifier that leans on global intensity loses accuracy on the target, while
localised glyph evidence still transfers.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_MAGIC = b"ATIM"
IMAGE_VERSION = 1

SPLITS = ("source", "target-train", "target-test")


def _glyphs() -> list[np.ndarray]:
    # textures separable by a single 3x3 filter; all symmetric under horizontal flip
    g = 7
    yy, xx = np.mgrid[:g, :g]
    c = g // 2
    hstripes = (yy % 2 == 0).astype(float)
    vstripes = (xx % 2 == 0).astype(float)
    checker = ((yy + xx) % 2 == 0).astype(float)
    solid = np.ones((g, g))
    plus = ((yy == c) | (xx == c)).astype(float)
    square = ((yy == 0) | (yy == g - 1) | (xx == 0) | (xx == g - 1)).astype(float)
    dots = ((yy % 3 == 0) & (xx % 3 == 0)).astype(float)
    diamond = (np.abs(yy - c) + np.abs(xx - c) <= 2).astype(float)
    return [hstripes, vstripes, checker, solid, plus, square, dots, diamond]


GLYPHS = _glyphs()


@dataclass
class SynthConfig:
    n_concepts: int = 4
    image_size: int = 24
    frames_per_video: int = 20
    train_videos_per_class: int = 2
    test_videos_per_class: int = 8
    source_noise: float = 0.05
    target_noise: float = 0.12
    source_contrast: float = 1.0
    target_contrast: float = 0.7
    tint: float = 0.15
    tint_correlation: float = 0.8
    source_per_class: int = 100
    position_jitter: int = 2
    frame_jitter: int = 1
    target_layout: str = "shifted"
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.n_concepts <= len(GLYPHS):
            raise ValueError(f"n_concepts must be in [2, {len(GLYPHS)}]")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        for name in ("frames_per_video", "source_per_class", "train_videos_per_class", "test_videos_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.target_layout not in ("shifted", "random"):
            raise ValueError("target_layout must be 'shifted' or 'random'")
        if min(self.source_noise, self.target_noise, self.tint) < 0:
            raise ValueError("noise and tint levels must be non-negative")


@dataclass
class Video:
    video_id: str
    label: int
    split: str
    frames: np.ndarray  # (F, 1, H, W) float64


@dataclass
class SynthDataset:
    config: SynthConfig
    concepts: list
    videos: dict = field(default_factory=dict)  # split -> list[Video]

    def split(self, name: str) -> list[Video]:
        return self.videos[name]


def concept_names(n: int) -> list[str]:
    return [f"concept{i}" for i in range(n)]


def class_anchor(label: int, n: int, size: int) -> tuple[int, int]:
    """Top-left corner of the glyph for ``label``, spread on a ring."""
    g = GLYPHS[0].shape[0]
    centre = (size - g) / 2.0
    radius = (size - g) / 2.0 - 3
    angle = 2 * np.pi * label / n + np.pi / 4
    return int(round(centre + radius * np.sin(angle))), int(round(centre + radius * np.cos(angle)))


def _render(label, pos, cfg: SynthConfig, background: float, contrast: float, noise: float, rng) -> np.ndarray:
    size = cfg.image_size
    img = np.full((size, size), background)
    glyph = GLYPHS[label]
    g = glyph.shape[0]
    r = int(np.clip(pos[0], 0, size - g))
    c = int(np.clip(pos[1], 0, size - g))
    img[r : r + g, c : c + g] += contrast * glyph
    img += noise * rng.standard_normal(img.shape)
    return img[None]


def _source_background(label: int, cfg: SynthConfig) -> float:
    return 0.1 + cfg.tint * label / (cfg.n_concepts - 1)


def generate(config: SynthConfig) -> SynthDataset:
    """Build all three splits deterministically from ``config.seed``.

    Every video gets its own RNG stream derived from the seed, split and
    index, so videos can be generated independently.
    """
    config.validate()
    n = config.n_concepts
    data = SynthDataset(config, concept_names(n), {s: [] for s in SPLITS})
    for label in range(n):
        base = np.array(class_anchor(label, n, config.image_size))
        for i in range(config.source_per_class):
            rng = np.random.default_rng([config.seed, 0, label, i])
            pos = base + rng.integers(-config.position_jitter, config.position_jitter + 1, size=2)
            if rng.random() < config.tint_correlation:
                background = _source_background(label, config)
            else:
                background = _source_background(int(rng.integers(n)), config)
            img = _render(label, pos, config, background,
                          config.source_contrast, config.source_noise, rng)
            data.videos["source"].append(Video(f"src-c{label}-{i:04d}", label, "source", img[None]))
    for split_no, (split, count) in enumerate(
        (("target-train", config.train_videos_per_class), ("target-test", config.test_videos_per_class)), start=1
    ):
        prefix = "trn" if split == "target-train" else "tst"
        for label in range(n):
            base = np.array(class_anchor((label + 1) % n, n, config.image_size))
            for v in range(count):
                rng = np.random.default_rng([config.seed, split_no, label, v])
                if config.target_layout == "shifted":
                    offset = base + rng.integers(-config.position_jitter, config.position_jitter + 1, size=2)
                else:
                    offset = rng.integers(0, config.image_size - GLYPHS[0].shape[0] + 1, size=2)
                background = 0.1 + config.tint * rng.random()
                frames = []
                for _ in range(config.frames_per_video):
                    jit = rng.integers(-config.frame_jitter, config.frame_jitter + 1, size=2)
                    frames.append(_render(label, offset + jit, config, background,
                                          config.target_contrast, config.target_noise, rng))
                data.videos[split].append(Video(f"{prefix}-c{label}-{v:03d}", label, split, np.stack(frames)))
    return data


def arrays(videos) -> tuple[np.ndarray, np.ndarray]:
    """Stack every frame of ``videos`` with its label."""
    x = np.concatenate([v.frames for v in videos])
    y = np.concatenate([np.full(len(v.frames), v.label) for v in videos])
    return x, y


def separable_maps(n_concepts: int = 4, size: int = 5, videos_per_class: int = 2, frames: int = 6,
                   seed: int = 0):
    """Attention-map stacks where only the true concept's map has a dense blob.

    Returns a list of ``(video_id, label, stacks)`` with stacks of shape
    ``(frames, n_concepts, size, size)``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for label in range(n_concepts):
        for v in range(videos_per_class):
            stacks = 0.02 * rng.random((frames, n_concepts, size, size))
            for f in range(frames):
                r, c = rng.integers(0, size - 2, size=2)
                stacks[f, label, r : r + 3, c : c + 3] += 0.5 + 0.5 * rng.random((3, 3))
            out.append((f"sep-c{label}-{v:03d}", label, stacks))
    return out


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def image_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    header = IMAGE_MAGIC + struct.pack("<II", IMAGE_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def image_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != IMAGE_MAGIC:
        raise ValueError("not an image tensor file (bad magic)")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != IMAGE_VERSION:
        raise ValueError(f"unsupported image tensor version {version}")
    shape = struct.unpack_from(f"<{ndim}I", data, 12)
    off = 12 + 4 * ndim
    count = int(np.prod(shape))
    if len(data) != off + 4 * count:
        raise ValueError("image tensor size does not match its header")
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64)


def write_image(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(image_bytes(arr))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return image_from_bytes(fh.read())


def write_dataset(data: SynthDataset, out_dir) -> dict:
    """Write frames as tensor files and one JSON-lines manifest per split.

    Returns ``{split: manifest_path}``. Frame paths in a manifest are relative
    to the manifest's directory.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split in SPLITS:
        manifest = os.path.join(out_dir, f"{split}.jsonl")
        with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
            for video in data.videos[split]:
                vdir = os.path.join(out_dir, split, video.video_id)
                os.makedirs(vdir, exist_ok=True)
                rel = []
                for i, frame in enumerate(video.frames):
                    name = f"{i:04d}.atim"
                    write_image(os.path.join(vdir, name), frame)
                    rel.append(f"{split}/{video.video_id}/{name}")
                record = {"video_id": video.video_id, "class": data.concepts[video.label],
                          "split": split, "frames": rel}
                fh.write(json.dumps(record) + "\n")
        paths[split] = manifest
    with open(os.path.join(out_dir, "concepts.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(data.concepts) + "\n")
    return paths
