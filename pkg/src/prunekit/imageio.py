"""Image and raw-tensor files for the CLI.

8-bit images (PGM/PPM/PNG, anything Pillow reads) load as float32 (C, H, W)
scaled to [0, 1]. Files ending in ``.prt`` are raw float32 tensors stored in
the weight-store container under the single name ``tensor``; they load as-is.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from . import tensorstore

RAW_SUFFIX = ".prt"


def read_image(path) -> np.ndarray:
    path = os.fspath(path)
    if path.endswith(RAW_SUFFIX):
        store = tensorstore.load(path)
        arr = np.asarray(store["tensor"], dtype=np.float32)
        return arr[None] if arr.ndim == 2 else arr
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float32) / 255.0


def write_image(path, arr) -> None:
    path = os.fspath(path)
    arr = np.asarray(arr, dtype=np.float32)
    if path.endswith(RAW_SUFFIX):
        tensorstore.save({"tensor": arr}, path)
        return
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    elif arr.ndim == 3:
        if arr.shape[0] != 3:
            raise ValueError(f"can only write 1- or 3-channel images, got {arr.shape[0]} channels")
        arr = arr.transpose(1, 2, 0)
    px = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(px).save(path)


def read_pairs(manifest) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load ``input<TAB>reference`` lines; relative paths resolve against the manifest."""
    base = os.path.dirname(os.fspath(manifest))
    pairs = []
    with open(manifest) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{manifest}:{lineno}: expected 'input<TAB>reference'")
            a, b = (p if os.path.isabs(p) else os.path.join(base, p) for p in parts)
            pairs.append((read_image(a), read_image(b)))
    return pairs


def write_pairs(pairs, directory, stem: str = "pair", suffix: str = RAW_SUFFIX) -> str:
    """Write pairs as files plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, (x, y) in enumerate(pairs):
        a, b = f"{stem}{i:04d}_in{suffix}", f"{stem}{i:04d}_ref{suffix}"
        write_image(os.path.join(directory, a), x)
        write_image(os.path.join(directory, b), y)
        lines.append(f"{a}\t{b}\n")
    manifest = os.path.join(directory, f"{stem}s.tsv")
    with open(manifest, "w") as f:
        f.writelines(lines)
    return manifest
