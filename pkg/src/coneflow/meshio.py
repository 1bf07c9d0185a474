"""Plain-text ``conemesh`` files.

::

    conemesh 1
    vertices N
    triangles M
    i j k l_ij l_jk l_ki      (M lines)
    cones P
    vertex beta               (P lines)

Blank lines and ``#`` comments are ignored. Floats are written with ``repr``
so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import os

import numpy as np

from .geometry import ConeDivisor, TriSurface


class MeshFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def save_mesh(surface: TriSurface, path: str | os.PathLike) -> None:
    lines = ["conemesh 1", f"vertices {surface.n_vertices}", f"triangles {len(surface.triangles)}"]
    for t, l in zip(surface.triangles.tolist(), surface.lengths.tolist()):
        lines.append(f"{t[0]} {t[1]} {t[2]} {l[0]!r} {l[1]!r} {l[2]!r}")
    lines.append(f"cones {len(surface.divisor)}")
    for p, b in zip(surface.divisor.points, surface.divisor.orders):
        lines.append(f"{p} {b!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path: str | os.PathLike) -> TriSurface:
    with open(path, encoding="ascii") as fh:
        raw = fh.read().splitlines()
    rows = []
    for no, text in enumerate(raw, start=1):
        text = text.split("#", 1)[0].strip()
        if text:
            rows.append((no, text.split()))
    pos = 0

    def take(expect_key: str | None = None, count: int | None = None):
        nonlocal pos
        if pos >= len(rows):
            last = rows[-1][0] if rows else 0
            raise MeshFormatError(path, last + 1, f"unexpected end of file, expected {expect_key or 'data'}")
        no, toks = rows[pos]
        pos += 1
        if expect_key is not None:
            if len(toks) != 2 or toks[0] != expect_key:
                raise MeshFormatError(path, no, f"expected '{expect_key} <int>', got {' '.join(toks)!r}")
            try:
                value = int(toks[1])
            except ValueError:
                raise MeshFormatError(path, no, f"'{toks[1]}' is not an integer") from None
            if value < 0:
                raise MeshFormatError(path, no, f"negative count {value}")
            return no, value
        if count is not None and len(toks) != count:
            raise MeshFormatError(path, no, f"expected {count} fields, got {len(toks)}")
        return no, toks

    no, toks = take()
    if toks != ["conemesh", "1"]:
        raise MeshFormatError(path, no, "missing 'conemesh 1' header")
    _, n = take("vertices")
    _, m = take("triangles")
    tris = np.empty((m, 3), dtype=np.int64)
    lens = np.empty((m, 3))
    for f in range(m):
        no, toks = take(count=6)
        try:
            tris[f] = [int(x) for x in toks[:3]]
            lens[f] = [float(x) for x in toks[3:]]
        except ValueError as exc:
            raise MeshFormatError(path, no, str(exc)) from None
        if tris[f].min() < 0 or tris[f].max() >= n:
            raise MeshFormatError(path, no, f"vertex id out of range 0..{n - 1}")
        a, b, c = lens[f]
        if not (np.all(np.isfinite(lens[f])) and a < b + c and b < c + a and c < a + b and min(a, b, c) > 0):
            raise MeshFormatError(path, no, f"edge lengths {a!r} {b!r} {c!r} violate the strict triangle inequality")
    _, p = take("cones")
    points, orders = [], []
    for _ in range(p):
        no, toks = take(count=2)
        try:
            v, beta = int(toks[0]), float(toks[1])
        except ValueError as exc:
            raise MeshFormatError(path, no, str(exc)) from None
        if not beta > -1.0:
            raise MeshFormatError(path, no, f"cone order {beta!r} must be > -1")
        if not 0 <= v < n:
            raise MeshFormatError(path, no, f"cone vertex {v} out of range")
        if v in points:
            raise MeshFormatError(path, no, f"cone vertex {v} listed twice")
        points.append(v)
        orders.append(beta)
    if pos != len(rows):
        raise MeshFormatError(path, rows[pos][0], "trailing data after cone list")
    try:
        return TriSurface(n, tris, lens, ConeDivisor(tuple(points), tuple(orders)))
    except ValueError as exc:
        raise MeshFormatError(path, 0, str(exc)) from None
