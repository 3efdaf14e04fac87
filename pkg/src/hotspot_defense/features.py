"""Clip images and 10x10x32 block-DCT feature tensors."""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .geometry import CLIP_SIZE_NM, LayoutClip, rasterize

BLOCK = 111
GRID = 10
COEFFS = 32
IMAGE_SIZE = BLOCK * GRID
CACHE_MAGIC = b"HSFT"
CACHE_VERSION = 2
DIGEST_BYTES = 64

assert IMAGE_SIZE == CLIP_SIZE_NM


class FeatureDimensionError(ValueError):
    pass


class FeatureCacheError(ValueError):
    pass


def clip_to_image(clip: LayoutClip) -> np.ndarray:
    """1 nm/pixel binary rendering, metal = 1."""
    return rasterize(clip, 1)


@lru_cache(maxsize=8)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k is the k-th basis vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] *= np.sqrt(1.0 / n)
    m[1:] *= np.sqrt(2.0 / n)
    m.setflags(write=False)
    return m


def dct2(block: np.ndarray) -> np.ndarray:
    c = dct_matrix(block.shape[0])
    d = dct_matrix(block.shape[1])
    return c @ block @ d.T


def idct2(coeffs: np.ndarray) -> np.ndarray:
    c = dct_matrix(coeffs.shape[0])
    d = dct_matrix(coeffs.shape[1])
    return c.T @ coeffs @ d


@lru_cache(maxsize=8)
def zigzag(n: int, count: int | None = None) -> tuple[tuple[int, int], ...]:
    """(row, col) frequency pairs in JPEG zig-zag order."""
    out = []
    for s in range(2 * n - 1):
        rows = range(max(0, s - n + 1), min(s, n - 1) + 1)
        # odd diagonals run down (row increasing), even ones run up
        order = rows if s % 2 else reversed(rows)
        out.extend((r, s - r) for r in order)
        if count is not None and len(out) >= count:
            break
    return tuple(out[:count] if count is not None else out)


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 2 or img.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise FeatureDimensionError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {img.shape}")


def block_dct_full(img: np.ndarray) -> np.ndarray:
    """All 111x111 coefficients of every block: shape (10, 10, 111, 111)."""
    _check_image(img)
    c = dct_matrix(BLOCK)
    blocks = np.asarray(img, dtype=np.float64).reshape(GRID, BLOCK, GRID, BLOCK)
    return np.einsum("ui,aibj,vj->abuv", c, blocks, c, optimize=True)


def dct_features(img: np.ndarray) -> np.ndarray:
    """(10, 10, 32) float64 tensor of zig-zag-leading DCT coefficients per block."""
    _check_image(img)
    zz = zigzag(BLOCK, COEFFS)
    k = max(max(u, v) for u, v in zz) + 1
    c = dct_matrix(BLOCK)[:k]
    blocks = np.asarray(img, dtype=np.float64).reshape(GRID, BLOCK, GRID, BLOCK)
    rows = np.einsum("ui,aibj->aubj", c, blocks, optimize=True)
    low = np.einsum("aubj,vj->abuv", rows, c, optimize=True)
    u = np.array([p[0] for p in zz])
    v = np.array([p[1] for p in zz])
    return low[:, :, u, v]


@lru_cache(maxsize=1)
def _prefix_basis() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    zz = zigzag(BLOCK, COEFFS)
    k = max(max(u, v) for u, v in zz) + 1
    c = dct_matrix(BLOCK)[:k]
    pref = np.concatenate([np.zeros((k, 1)), np.cumsum(c, axis=1)], axis=1)
    return pref, np.array([p[0] for p in zz]), np.array([p[1] for p in zz])


def _spans(lo: int, hi: int) -> Iterable[tuple[int, int, int]]:
    """(block, start, stop) pieces of the pixel range [lo, hi), local to each block."""
    b = lo // BLOCK
    while lo < hi:
        end = min(hi, (b + 1) * BLOCK)
        yield b, lo - b * BLOCK, end - b * BLOCK
        lo, b = end, b + 1


def clip_features(clip: LayoutClip) -> np.ndarray:
    """Same tensor as ``dct_features(clip_to_image(clip))`` computed from rectangles.

    The DCT of a rectangle indicator is separable, so each block coefficient is
    a product of two basis prefix sums. Requires non-overlapping polygons,
    which every valid clip has.
    """
    pref, u, v = _prefix_basis()
    low = np.zeros((GRID, GRID) + (pref.shape[0],) * 2)
    for poly in clip.polygons:
        for r in poly.rects:
            ys = [(a, pref[:, e] - pref[:, s]) for a, s, e in _spans(max(r.y0, 0), min(r.y1, IMAGE_SIZE))]
            xs = [(b, pref[:, e] - pref[:, s]) for b, s, e in _spans(max(r.x0, 0), min(r.x1, IMAGE_SIZE))]
            for a, fy in ys:
                for b, fx in xs:
                    low[a, b] += np.outer(fy, fx)
    return low[:, :, u, v]


def featurize(clips: Iterable[LayoutClip]) -> np.ndarray:
    """Stack of float32 feature tensors, one per clip, in input order."""
    feats = [clip_features(c).astype(np.float32) for c in clips]
    if not feats:
        return np.zeros((0, GRID, GRID, COEFFS), dtype=np.float32)
    return np.stack(feats)


# -- cache file ---------------------------------------------------------------

# magic, version, config digest (ascii hex, NUL padded), then N and the three tensor dims
_HEADER = struct.Struct("<4sI64sIIII")


def _digest_field(digest: str) -> bytes:
    raw = digest.encode("ascii")
    if len(raw) > DIGEST_BYTES:
        raise FeatureCacheError(f"digest longer than {DIGEST_BYTES} characters")
    return raw.ljust(DIGEST_BYTES, b"\0")


def feature_cache_bytes(features: np.ndarray, digest: str = "") -> bytes:
    f = np.asarray(features)
    if f.ndim != 4:
        raise FeatureDimensionError("feature stack must be 4-D (N, rows, cols, coeffs)")
    n, a, b, c = f.shape
    head = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, _digest_field(digest), n, a, b, c)
    return head + np.ascontiguousarray(f, dtype="<f4").tobytes()


def write_feature_cache(path: Union[str, Path], features: np.ndarray, digest: str = "") -> int:
    data = feature_cache_bytes(features, digest)
    Path(path).write_bytes(data)
    return len(data)


def parse_feature_cache_with_digest(data: bytes) -> tuple[np.ndarray, str]:
    if len(data) < _HEADER.size:
        raise FeatureCacheError("feature cache shorter than its header")
    magic, version, dig, n, a, b, c = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise FeatureCacheError(f"bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FeatureCacheError(f"unsupported cache version {version}")
    need = _HEADER.size + 4 * n * a * b * c
    if len(data) != need:
        raise FeatureCacheError(f"cache holds {len(data)} bytes, header implies {need}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, a, b, c)
    return arr.astype(np.float32), dig.rstrip(b"\0").decode("ascii")


def parse_feature_cache(data: bytes) -> np.ndarray:
    return parse_feature_cache_with_digest(data)[0]


def read_feature_cache(path: Union[str, Path]) -> np.ndarray:
    return parse_feature_cache(Path(path).read_bytes())
