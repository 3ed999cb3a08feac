"""Region proposals built from a grid of cells.

A square feature map is divided into g x g cells and every axis-aligned
rectangle of whole cells with at least ``min_cells`` cells becomes one
proposal, from small multi-cell strips up to the full map.  With g=3 and a
2-cell minimum this yields the canonical 27 proposals; dropping the minimum
to 1 yields all (g(g+1)/2)^2 = 36 rectangles.

Regions are half-open pixel rectangles [x0, x1) x [y0, y1) so pooling code
never has an off-by-one question.  Enumeration order is sizes ascending
(cell_h, then cell_w), positions row-major within a size, which makes ids
deterministic and places the full-image region last.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CellGrid:
    """Square map of ``map_size`` pixels split into cells of ``cell_size``."""

    map_size: int
    cell_size: int

    def __post_init__(self):
        if self.cell_size < 1 or self.map_size < 1:
            raise ValueError("map_size and cell_size must be positive")
        if self.map_size % self.cell_size != 0:
            raise ValueError(
                f"map size {self.map_size} not divisible by cell size {self.cell_size}"
            )

    @property
    def grid_g(self) -> int:
        return self.map_size // self.cell_size


@dataclass(frozen=True)
class Region:
    """Half-open pixel rectangle; one node of the region graph."""

    id: int
    x0: int
    y0: int
    x1: int
    y1: int
    cell_w: int = 1
    cell_h: int = 1

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height


def enumerate_regions(grid: CellGrid, min_cells: int) -> list[Region]:
    """All whole-cell rectangles with >= min_cells cells.

    Ordered by (cell_h, cell_w) ascending, then row-major (y0, x0); the
    full-image region, when present, is therefore always last.
    """
    if min_cells < 1:
        raise ValueError("min_cells must be >= 1")
    g = grid.grid_g
    cs = grid.cell_size
    out = []
    for ch in range(1, g + 1):
        for cw in range(1, g + 1):
            if ch * cw < min_cells:
                continue
            for cy in range(g - ch + 1):
                for cx in range(g - cw + 1):
                    out.append(
                        Region(
                            id=len(out),
                            x0=cx * cs,
                            y0=cy * cs,
                            x1=(cx + cw) * cs,
                            y1=(cy + ch) * cs,
                            cell_w=cw,
                            cell_h=ch,
                        )
                    )
    return out


def uniform_grid_regions(grid_g: int, map_size: int) -> list[Region]:
    """grid_g x grid_g disjoint tiles covering the map.

    When map_size is not divisible, boundaries are floored and the last
    tile in each direction absorbs the remainder.
    """
    if grid_g < 1:
        raise ValueError("grid_g must be >= 1")
    bounds = [(i * map_size) // grid_g for i in range(grid_g + 1)]
    out = []
    for gy in range(grid_g):
        for gx in range(grid_g):
            out.append(
                Region(
                    id=len(out),
                    x0=bounds[gx],
                    y0=bounds[gy],
                    x1=bounds[gx + 1],
                    y1=bounds[gy + 1],
                )
            )
    return out


def save_region_spec(path, regions: list[Region], map_size: int) -> None:
    """Write the one-region-per-line text format."""
    with open(path, "w") as fh:
        fh.write(f"RGNS v1 U={map_size}\n")
        fh.write("# id x0 y0 x1 y1\n")
        for r in regions:
            fh.write(f"{r.id} {r.x0} {r.y0} {r.x1} {r.y1}\n")


def load_region_spec(path) -> tuple[list[Region], int]:
    """Parse and validate a region spec file; returns (regions, map_size)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or not lines[0].startswith("RGNS v1"):
        raise ValueError(f"{path}: missing 'RGNS v1' header")
    header = lines[0]
    try:
        map_size = int(header.split("U=", 1)[1])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: header must carry U=<pixels>") from exc

    regions = []
    seen_ids = set()
    for ln in lines[1:]:
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 5:
            raise ValueError(f"{path}: expected 'id x0 y0 x1 y1', got {ln!r}")
        rid, x0, y0, x1, y1 = (int(p) for p in parts)
        if rid in seen_ids:
            raise ValueError(f"{path}: duplicate region id {rid}")
        seen_ids.add(rid)
        if not (0 <= x0 < x1 <= map_size and 0 <= y0 < y1 <= map_size):
            raise ValueError(
                f"{path}: region {rid} rectangle ({x0},{y0},{x1},{y1}) "
                f"outside map of size {map_size} or zero-area"
            )
        regions.append(Region(id=rid, x0=x0, y0=y0, x1=x1, y1=y1))
    if not regions:
        raise ValueError(f"{path}: no regions")
    return regions, map_size
