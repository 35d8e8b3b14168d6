"""Gaussian heatmap encoding of landmarks and argmax decoding.

Landmarks are ``(K, 2)`` arrays of ``(x, y)`` in input pixels, x = column,
y = row, origin top-left. Heatmaps are ``(H/4, W/4, K)`` arrays.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

STRIDE = 4


def encode(landmarks, H: int, W: int, sigma: float) -> np.ndarray:
    """Render one unnormalized Gaussian per landmark on the 1/4-resolution grid.

    Centers are ``p / 4`` kept real-valued; the whole map is evaluated.
    """
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    if H % STRIDE or W % STRIDE:
        raise ValueError(f"image size {H}x{W} not divisible by {STRIDE}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x < 0) or np.any(x >= W) or np.any(y < 0) or np.any(y >= H):
        raise ValueError("landmark outside the image")
    rows = np.arange(H // STRIDE, dtype=np.float64)[:, None, None]
    cols = np.arange(W // STRIDE, dtype=np.float64)[None, :, None]
    cx, cy = x / STRIDE, y / STRIDE
    d2 = (rows - cy) ** 2 + (cols - cx) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def encode_batch(landmarks, H: int, W: int, sigma: float) -> np.ndarray:
    return np.stack([encode(p, H, W, sigma) for p in landmarks])


def decode_argmax(heatmaps) -> np.ndarray:
    """Per-map argmax cell scaled back to input pixels; ties go to the first row-major cell."""
    maps = np.asarray(heatmaps)
    if maps.ndim != 3 or maps.shape[2] < 1 or maps.shape[0] * maps.shape[1] == 0:
        raise ValueError(f"expected (h, w, K) heatmaps, got {maps.shape}")
    h, w, k = maps.shape
    flat = maps.reshape(h * w, k).argmax(axis=0)
    rows, cols = np.divmod(flat, w)
    return np.stack([cols * STRIDE, rows * STRIDE], axis=1).astype(np.float64)


def decode_batch(heatmaps) -> np.ndarray:
    return np.stack([decode_argmax(m) for m in heatmaps])


def write_landmarks_csv(path, landmarks) -> None:
    pts = np.asarray(landmarks, dtype=np.float64)
    lines = [f"{k},{x!r},{y!r}" for k, (x, y) in enumerate(pts.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks_csv(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        k, x, y = line.split(",")
        rows.append((int(k), float(x), float(y)))
    rows.sort()
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: landmark indices are not 0..K-1")
    return np.array([[r[1], r[2]] for r in rows], dtype=np.float64)
