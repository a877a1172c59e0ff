"""Fixed scan-order linearizations of an H x W patch grid.

A grid slot is a flattened cell index j = r * W + c. A linearization is a
permutation over the n = H * W slots: entry k of the mapping is the slot
visited k-th. Permutations use the gather convention throughout the
package: applying p to a sequence places items[p[k]] at position k.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCAN_ORDERS = ("row_major", "column_major", "hilbert", "spiral", "diagonal", "snake")


@dataclass(frozen=True)
class GridSpec:
    """Patch-grid geometry: height rows by width columns."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def n(self) -> int:
        return self.height * self.width

    def slot(self, r: int, c: int) -> int:
        return r * self.width + c


def identity_permutation(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


def random_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n).astype(np.int64)


def is_permutation(p: np.ndarray) -> bool:
    p = np.asarray(p)
    return p.ndim == 1 and np.array_equal(np.sort(p), np.arange(len(p)))


def check_permutation(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    if not is_permutation(p):
        raise ValueError("mapping is not a bijection on 0..n-1")
    return p


def invert(p: np.ndarray) -> np.ndarray:
    """Inverse q with q[p[k]] = k."""
    p = check_permutation(p)
    q = np.empty_like(p)
    q[p] = np.arange(len(p), dtype=np.int64)
    return q


def compose(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """(p o q)[k] = p[q[k]]; applying the result equals applying p then q."""
    p = check_permutation(p)
    q = check_permutation(q)
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    return p[q]


def apply_to_sequence(p: np.ndarray, items):
    """Reorder items so that position k holds items[p[k]].

    Accepts a numpy array (gathered along the first axis) or any sequence
    (returned as a list).
    """
    p = check_permutation(p)
    if isinstance(items, np.ndarray):
        if items.shape[0] != len(p):
            raise ValueError(f"length mismatch: {items.shape[0]} items vs {len(p)}")
        return items[p]
    items = list(items)
    if len(items) != len(p):
        raise ValueError(f"length mismatch: {len(items)} items vs {len(p)}")
    return [items[k] for k in p]


def permutation_digest(p: np.ndarray) -> str:
    """Short stable identifier for a permutation (used in trace files)."""
    data = np.asarray(p, dtype=np.int64).tobytes()
    return hashlib.sha1(data).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def _row_major(grid: GridSpec):
    for r in range(grid.height):
        for c in range(grid.width):
            yield r, c


def _column_major(grid: GridSpec):
    for c in range(grid.width):
        for r in range(grid.height):
            yield r, c


def _anti_diagonals(grid: GridSpec):
    """Cells of each anti-diagonal s = r + c, each listed by increasing r."""
    for s in range(grid.height + grid.width - 1):
        r_lo = max(0, s - grid.width + 1)
        r_hi = min(grid.height - 1, s)
        yield s, [(r, s - r) for r in range(r_lo, r_hi + 1)]


def _diagonal(grid: GridSpec):
    for _, cells in _anti_diagonals(grid):
        yield from cells


def _snake(grid: GridSpec):
    # Within an anti-diagonal, increasing r means decreasing c; even
    # diagonals run by increasing c, odd ones by decreasing c.
    for s, cells in _anti_diagonals(grid):
        yield from (reversed(cells) if s % 2 == 0 else cells)


def _spiral(grid: GridSpec):
    top, bottom = 0, grid.height - 1
    left, right = 0, grid.width - 1
    while top <= bottom and left <= right:
        for c in range(left, right + 1):
            yield top, c
        for r in range(top + 1, bottom + 1):
            yield r, right
        if top < bottom:
            for c in range(right - 1, left - 1, -1):
                yield bottom, c
        if left < right:
            for r in range(bottom - 1, top, -1):
                yield r, left
        top += 1
        bottom -= 1
        left += 1
        right -= 1


def _sgn(x: int) -> int:
    return (x > 0) - (x < 0)


def _gilbert2d(x, y, ax, ay, bx, by):
    """Generalized Hilbert walk over the rectangle spanned by vectors a, b.

    Emits (x, y) points; on 2^k x 2^k grids this degenerates to the classic
    Hilbert curve. Off that case only bijectivity is guaranteed (odd-sided
    rectangles may contain one non-unit step).
    """
    w = abs(ax + ay)
    h = abs(bx + by)
    dax, day = _sgn(ax), _sgn(ay)
    dbx, dby = _sgn(bx), _sgn(by)

    if h == 1:
        for _ in range(w):
            yield x, y
            x, y = x + dax, y + day
        return
    if w == 1:
        for _ in range(h):
            yield x, y
            x, y = x + dbx, y + dby
        return

    ax2, ay2 = ax // 2, ay // 2
    bx2, by2 = bx // 2, by // 2
    w2 = abs(ax2 + ay2)
    h2 = abs(bx2 + by2)

    if 2 * w > 3 * h:
        if w2 % 2 and w > 2:
            ax2, ay2 = ax2 + dax, ay2 + day
        yield from _gilbert2d(x, y, ax2, ay2, bx, by)
        yield from _gilbert2d(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by)
    else:
        if h2 % 2 and h > 2:
            bx2, by2 = bx2 + dbx, by2 + dby
        yield from _gilbert2d(x, y, bx2, by2, ax2, ay2)
        yield from _gilbert2d(x + bx2, y + by2, ax, ay, bx - bx2, by - by2)
        yield from _gilbert2d(
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2,
            -by2,
            -(ax - ax2),
            -(ay - ay2),
        )


def _hilbert(grid: GridSpec):
    h, w = grid.height, grid.width
    if w >= h:
        walk = _gilbert2d(0, 0, w, 0, 0, h)
    else:
        walk = _gilbert2d(0, 0, 0, h, w, 0)
    # _gilbert2d works in (x, y) = (column, row) coordinates.
    for x, y in walk:
        yield y, x


_GENERATORS = {
    "row_major": _row_major,
    "column_major": _column_major,
    "hilbert": _hilbert,
    "spiral": _spiral,
    "diagonal": _diagonal,
    "snake": _snake,
}


def trajectory_points(order: str, grid: GridSpec) -> list[tuple[int, int]]:
    """Visit sequence of (row, col) cells for a scan order."""
    if order not in _GENERATORS:
        raise ValueError(f"unknown scan order {order!r}; expected one of {SCAN_ORDERS}")
    return list(_GENERATORS[order](grid))


def linearize(order: str, grid: GridSpec) -> np.ndarray:
    """Permutation whose entry k is the slot index of the k-th visited cell."""
    points = trajectory_points(order, grid)
    return np.fromiter(
        (r * grid.width + c for r, c in points), dtype=np.int64, count=grid.n
    )


def center_slots(grid: GridSpec) -> np.ndarray:
    """Slot indices of the central block (roughly the middle quarter of cells)."""
    r_lo, r_hi = grid.height // 4, grid.height - grid.height // 4
    c_lo, c_hi = grid.width // 4, grid.width - grid.width // 4
    slots = [
        grid.slot(r, c) for r in range(r_lo, r_hi) for c in range(c_lo, c_hi)
    ]
    return np.asarray(slots, dtype=np.int64)


# ---------------------------------------------------------------------------
# Permutation files
# ---------------------------------------------------------------------------

def save_permutation(
    path,
    mapping: np.ndarray,
    *,
    grid: GridSpec | None = None,
    order: str | None = None,
    extra: dict | None = None,
) -> None:
    """Write a permutation with its metadata as a JSON document."""
    mapping = check_permutation(mapping)
    doc = {
        "mapping": [int(v) for v in mapping],
        "height": grid.height if grid else None,
        "width": grid.width if grid else None,
        "order": order,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_permutation(path) -> tuple[np.ndarray, dict]:
    doc = json.loads(Path(path).read_text())
    mapping = check_permutation(np.asarray(doc["mapping"], dtype=np.int64))
    meta = {k: v for k, v in doc.items() if k != "mapping"}
    return mapping, meta
