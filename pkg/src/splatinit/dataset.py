"""Posed image collections and their on-disk layout.

Layout::

    scene/cameras.json   {"cameras": [{fx, fy, cx, cy, width, height,
                                       R: 9 floats row-major (world-to-camera),
                                       t: 3 floats, near, far, split}, ...]}
    scene/images/000.png 8-bit RGB, one per camera in list order
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from splatinit.geometry import Camera, DomainError


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so in-memory and PNG copies agree exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    train_idx: list[int]
    test_idx: list[int]

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DomainError("cameras and images differ in count")
        both = set(self.train_idx) | set(self.test_idx)
        if set(self.train_idx) & set(self.test_idx):
            raise DomainError("train and test splits overlap")
        if both != set(range(len(self.cameras))):
            raise DomainError("splits must cover every view exactly once")

    @property
    def train_cameras(self) -> list[Camera]:
        return [self.cameras[i] for i in self.train_idx]

    @property
    def train_images(self) -> list[np.ndarray]:
        return [self.images[i] for i in self.train_idx]

    @property
    def test_cameras(self) -> list[Camera]:
        return [self.cameras[i] for i in self.test_idx]

    @property
    def test_images(self) -> list[np.ndarray]:
        return [self.images[i] for i in self.test_idx]


def camera_to_json(cam: Camera, split: str) -> dict:
    return {
        "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
        "width": int(cam.width), "height": int(cam.height),
        "R": [float(v) for v in cam.rotation.ravel()],
        "t": [float(v) for v in cam.translation],
        "near": float(cam.near), "far": float(cam.far),
        "split": split,
    }


def camera_from_json(d: dict) -> Camera:
    return Camera(
        d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
        np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64), d["near"], d["far"],
    )


def save_image(path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    test = set(ds.test_idx)
    entries = [camera_to_json(c, "test" if i in test else "train") for i, c in enumerate(ds.cameras)]
    (root / "cameras.json").write_text(json.dumps({"cameras": entries}, indent=1))
    for i, img in enumerate(ds.images):
        save_image(root / "images" / f"{i:03d}.png", img)


def load_dataset(root) -> Dataset:
    root = Path(root)
    entries = json.loads((root / "cameras.json").read_text())["cameras"]
    cams = [camera_from_json(e) for e in entries]
    imgs = [load_image(root / "images" / f"{i:03d}.png") for i in range(len(cams))]
    train = [i for i, e in enumerate(entries) if e.get("split", "train") == "train"]
    test = [i for i, e in enumerate(entries) if e.get("split") == "test"]
    return Dataset(cams, imgs, train, test)
