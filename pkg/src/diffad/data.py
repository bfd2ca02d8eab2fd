"""Dataset loading and deterministic synthetic-defect generation.

Layout convention: root/category/train/good/*.png and
root/category/test/<defect_type>/*.png.  Loaded tensors are C x H x W in
[-1, 1]; labels are +1 for "good" and -1 otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import rng

DEFECT_TYPES = ("patch", "scratch", "blob")


@dataclass
class Sample:
    image: torch.Tensor
    label: int
    category: str
    defect_type: str
    source_path: str
    id: str

    def __post_init__(self):
        good = self.defect_type == "good"
        if (self.label == 1) != good:
            raise ValueError("label must be +1 exactly for 'good' samples")


@dataclass(frozen=True)
class DatasetSpec:
    root: str
    category: str
    resolution: int = 64
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        if self.resolution < 16 or self.resolution % 8 != 0:
            raise ValueError("resolution must be >= 16 and divisible by 8")


def _load_image(path: Path, resolution: int) -> torch.Tensor:
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    # BOX resampling is area averaging: deterministic and antialiased
    img = img.resize((resolution, resolution), Image.BOX)
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
    return torch.from_numpy(arr / 127.5 - 1.0)


def load_benchmark_layout(spec: DatasetSpec) -> list[Sample]:
    split_dir = Path(spec.root) / spec.category / spec.split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"missing dataset directory {split_dir}")
    samples = []
    for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        defect_type = defect_dir.name
        if spec.split == "train" and defect_type != "good":
            continue
        for path in sorted(defect_dir.glob("*")):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            samples.append(Sample(
                image=_load_image(path, spec.resolution),
                label=1 if defect_type == "good" else -1,
                category=spec.category,
                defect_type=defect_type,
                source_path=str(path),
                id=f"{spec.split}/{defect_type}/{path.stem}",
            ))
    if not samples:
        raise FileNotFoundError(f"no images found under {split_dir}")
    return samples


# -- synthetic textures with injected defects -------------------------------

def render_texture(seed: int, resolution: int) -> np.ndarray:
    """Smooth band-limited texture in [0, 1], shape (H, W, 3)."""
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution] / resolution
    img = np.zeros((resolution, resolution, 3))
    for _ in range(4):
        fx, fy = r.uniform(0.5, 3.0, size=2)
        phase = r.uniform(0, 2 * np.pi)
        amp = r.uniform(0.05, 0.15, size=3)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += amp[None, None, :] * wave[:, :, None]
    base = r.uniform(0.35, 0.65, size=3)
    img += base[None, None, :]
    img += r.normal(0.0, 2.0 / 255.0, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def apply_defect(img: np.ndarray, defect_type: str, params: dict) -> np.ndarray:
    """Add one defect strictly inside params['bbox'] = (y0, x0, y1, x1)."""
    out = img.copy()
    y0, x0, y1, x1 = params["bbox"]
    contrast = params["contrast"]
    window = out[y0:y1, x0:x1]
    h, w = window.shape[:2]
    if defect_type == "patch":
        window += contrast * np.asarray(params["color"])[None, None, :]
    elif defect_type == "scratch":
        yy, xx = np.mgrid[0:h, 0:w]
        t = xx / max(w - 1, 1)
        line_y = params["line_from"] * (1 - t) + params["line_to"] * t
        mask = np.abs(yy - line_y * (h - 1)) <= params["width"]
        window[mask] += contrast * np.asarray(params["color"])[None, :]
    elif defect_type == "blob":
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        bump = np.exp(-(((yy - cy) / (h / 4.0)) ** 2 + ((xx - cx) / (w / 4.0)) ** 2))
        window += contrast * bump[:, :, None] * np.asarray(params["color"])[None, None, :]
    else:
        raise ValueError(f"unknown defect type {defect_type!r}")
    out[y0:y1, x0:x1] = window
    return np.clip(out, 0.0, 1.0)


def _draw_defect_params(r: np.random.Generator, resolution: int,
                        defect_type: str) -> dict:
    size = int(r.integers(resolution // 6, resolution // 3))
    y0 = int(r.integers(2, resolution - size - 2))
    x0 = int(r.integers(2, resolution - size - 2))
    params = {
        "bbox": (y0, x0, y0 + size, x0 + size),
        "contrast": float(r.uniform(0.35, 0.6)) * float(r.choice([-1.0, 1.0])),
        "color": [float(c) for c in r.uniform(0.6, 1.0, size=3)],
    }
    if defect_type == "scratch":
        params["line_from"] = float(r.uniform(0.1, 0.9))
        params["line_to"] = float(r.uniform(0.1, 0.9))
        params["width"] = 1
    return params


def _save(path: Path, img: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((img * 255.0).round().astype(np.uint8)).save(path)


def synth_generate(seed: int, out_root, n_train: int, n_test_normal: int,
                   n_test_anomalous: int, resolution: int = 64,
                   category: str = "synthetic") -> Path:
    """Write a benchmark-layout dataset fully determined by the seed."""
    for name, count in (("n_train", n_train), ("n_test_normal", n_test_normal),
                        ("n_test_anomalous", n_test_anomalous)):
        if count < 1:
            raise ValueError(f"{name} must be >= 1")
    root = Path(out_root) / category
    manifest = []

    def texture_seed(kind: str, index: int) -> int:
        return rng.child_seed(seed, "texture", kind, index) % (2 ** 32)

    for i in range(n_train):
        ts = texture_seed("train", i)
        _save(root / "train" / "good" / f"{i:04d}.png", render_texture(ts, resolution))
        manifest.append({"id": f"train/good/{i:04d}", "defect_type": "good",
                         "bbox": None, "contrast": 0.0, "seed": ts})
    for i in range(n_test_normal):
        ts = texture_seed("test-normal", i)
        _save(root / "test" / "good" / f"{i:04d}.png", render_texture(ts, resolution))
        manifest.append({"id": f"test/good/{i:04d}", "defect_type": "good",
                         "bbox": None, "contrast": 0.0, "seed": ts})
    for i in range(n_test_anomalous):
        ts = texture_seed("test-anomaly", i)
        base = render_texture(ts, resolution)
        r = np.random.default_rng(rng.child_seed(seed, "defect", i) % (2 ** 32))
        defect_type = DEFECT_TYPES[i % len(DEFECT_TYPES)]
        params = _draw_defect_params(r, resolution, defect_type)
        img = apply_defect(base, defect_type, params)
        _save(root / "test" / defect_type / f"{i:04d}.png", img)
        manifest.append({"id": f"test/{defect_type}/{i:04d}",
                         "defect_type": defect_type, "bbox": list(params["bbox"]),
                         "contrast": params["contrast"], "seed": ts,
                         "params": params})
    with open(root / "manifest.json", "w") as fh:
        json.dump({"seed": seed, "resolution": resolution, "samples": manifest},
                  fh, indent=1, sort_keys=True)
    return root
