"""Independent numerical oracles used across the test suite."""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
MNIST_SUBSET = ROOT / "data" / "mnist5k"


def central_diff_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def central_diff_dir(f, x, v, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    return (np.asarray(f(x + h * v)) - np.asarray(f(x - h * v))) / (2 * h)


def jacobi_eigenvalues(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations for a symmetric matrix; returns sorted eigenvalues."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * np.linalg.norm(a):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t ** 2 + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))


def write_idx(path, array, kind, gz=False):
    """Byte-level IDX writer (big-endian header) for fixtures."""
    array = np.asarray(array, dtype=np.uint8)
    if kind == "images":
        header = struct.pack(">IIII", 0x803, *array.shape)
    else:
        header = struct.pack(">II", 0x801, array.shape[0])
    raw = header + array.tobytes()
    Path(path).write_bytes(gzip.compress(raw, mtime=0) if gz else raw)
    return Path(path)


def mnist_paths():
    """Full MNIST if ``RECONBOUND_MNIST_DIR`` points at it, else the bundled 5k subset."""
    full = os.environ.get("RECONBOUND_MNIST_DIR")
    if full:
        d = Path(full)
        for suffix in ("", ".gz"):
            img = d / f"train-images-idx3-ubyte{suffix}"
            if img.exists():
                test_img = d / f"t10k-images-idx3-ubyte{suffix}"
                return {
                    "train": (img, d / f"train-labels-idx1-ubyte{suffix}"),
                    "test": (test_img, d / f"t10k-labels-idx1-ubyte{suffix}") if test_img.exists() else None,
                    "full": True,
                }
    return {
        "train": (MNIST_SUBSET / "train-images-idx3-ubyte.gz", MNIST_SUBSET / "train-labels-idx1-ubyte.gz"),
        "test": None,
        "full": False,
    }


def spearman(a, b):
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).correlation)


# criterion number -> (passed, detail); printed by the terminal-summary hook in conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"CRITERION {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
