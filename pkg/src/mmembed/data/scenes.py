"""Procedural scenes: up to four coloured shapes on a 4x4 grid.

Canonical string form (used in manifests so images can be re-rendered)::

    scene  := "bg=" BACKGROUND (";" object)*
    object := SHAPE ":" COLOR ":" ROW "," COL ":" SIZE

Objects are listed in row-major cell order, e.g.
``bg=white;circle:red:0,0:large;square:blue:2,3:small``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import BACKGROUNDS, PALETTE

SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")
GRID = 4
MAX_OBJECTS = 4
ROW_WORDS = ("top", "upper", "lower", "bottom")
COL_WORDS = ("left", "midleft", "midright", "right")

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}


class SceneError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SceneObject:
    cell: tuple[int, int]
    shape: str
    color: str
    size: str = "large"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise SceneError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise SceneError(f"unknown size {self.size!r}")
        r, c = self.cell
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise SceneError(f"cell {self.cell} outside the grid")

    @property
    def where(self) -> str:
        return f"{ROW_WORDS[self.cell[0]]} {COL_WORDS[self.cell[1]]}"

    def describe(self) -> str:
        return f"a {self.size} {self.color} {self.shape} at the {self.where}"


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...] = ()
    background: str = "white"

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise SceneError(f"unknown background {self.background!r}")
        if len(self.objects) > MAX_OBJECTS:
            raise SceneError(f"at most {MAX_OBJECTS} objects per scene")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise SceneError("two objects share a cell")
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def occupied(self) -> set[tuple[int, int]]:
        return {o.cell for o in self.objects}

    def free_cells(self) -> list[tuple[int, int]]:
        used = self.occupied()
        return [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in used]

    def replace_object(self, old: SceneObject, new: SceneObject | None) -> "SceneSpec":
        objs = [o for o in self.objects if o != old]
        if new is not None:
            objs.append(new)
        return SceneSpec(tuple(objs), self.background)

    def add_object(self, new: SceneObject) -> "SceneSpec":
        return SceneSpec(self.objects + (new,), self.background)

    def to_string(self) -> str:
        parts = [f"bg={self.background}"]
        for o in self.objects:
            parts.append(f"{o.shape}:{o.color}:{o.cell[0]},{o.cell[1]}:{o.size}")
        return ";".join(parts)

    @classmethod
    def from_string(cls, text: str) -> "SceneSpec":
        parts = text.split(";")
        if not parts[0].startswith("bg="):
            raise SceneError(f"scene string must start with bg=: {text!r}")
        objs = []
        for part in parts[1:]:
            try:
                shape, color, cell, size = part.split(":")
                r, c = (int(v) for v in cell.split(","))
            except ValueError as exc:
                raise SceneError(f"malformed object {part!r}") from exc
            objs.append(SceneObject((r, c), shape, color, size))
        scene = cls(tuple(objs), parts[0][3:])
        if scene.to_string() != text:
            raise SceneError(f"scene string is not canonical: {text!r}")
        return scene

    def caption(self) -> str:
        if not self.objects:
            return f"an empty {self.background} background"
        body = " and ".join(o.describe() for o in self.objects)
        return f"{body} on a {self.background} background"


def random_scene(rng: np.random.Generator, palette=PALETTE, backgrounds=BACKGROUNDS,
                 min_objects: int = 1, max_objects: int = MAX_OBJECTS) -> SceneSpec:
    n = int(rng.integers(min_objects, max_objects + 1))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    objs = tuple(
        SceneObject((int(k) // GRID, int(k) % GRID), SHAPES[rng.integers(len(SHAPES))],
                    palette[rng.integers(len(palette))], SIZES[rng.integers(len(SIZES))])
        for k in cells
    )
    return SceneSpec(objs, backgrounds[rng.integers(len(backgrounds))])


def footprint(obj: SceneObject, image_size: int) -> np.ndarray:
    """Boolean mask of the pixels an object covers."""
    cell = image_size / GRID
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    cy = (obj.cell[0] + 0.5) * cell
    cx = (obj.cell[1] + 0.5) * cell
    r = cell * (0.45 if obj.size == "large" else 0.28)
    dy, dx = yy - cy, xx - cx
    if obj.shape == "circle":
        return dy * dy + dx * dx <= r * r
    if obj.shape == "square":
        half = r * 0.85
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    # triangle, apex up
    depth = dy + r
    return (depth >= 0) & (dy <= r) & (np.abs(dx) <= depth / 2.0)


def render(scene: SceneSpec, image_size: int = 32, channels: int = 3) -> np.ndarray:
    """Rasterise to an ``image_size x image_size x channels`` float32 array in [0, 1].

    No anti-aliasing, so the output is bit-exact across runs.
    """
    if image_size % GRID:
        raise SceneError(f"image_size must be a multiple of {GRID}")
    img = np.empty((image_size, image_size, 3), dtype=np.float32)
    img[:] = RGB[scene.background]
    for obj in scene.objects:
        img[footprint(obj, image_size)] = RGB[obj.color]
    if channels == 3:
        return img
    if channels == 1:
        return img.mean(axis=-1, keepdims=True)
    raise SceneError("channels must be 1 or 3")
