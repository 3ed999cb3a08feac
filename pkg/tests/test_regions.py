import pytest

from rgnn.regions import (
    CellGrid,
    Region,
    enumerate_regions,
    load_region_spec,
    save_region_spec,
    uniform_grid_regions,
)


def brute_force_count(g: int, min_cells: int) -> int:
    """Independent rectangle counter over all corner pairs."""
    n = 0
    for y0 in range(g):
        for x0 in range(g):
            for y1 in range(y0 + 1, g + 1):
                for x1 in range(x0 + 1, g + 1):
                    if (y1 - y0) * (x1 - x0) >= min_cells:
                        n += 1
    return n


class TestEnumerate:
    def test_canonical_27(self):
        grid = CellGrid(map_size=42, cell_size=14)
        assert grid.grid_g == 3
        assert len(enumerate_regions(grid, min_cells=2)) == 27

    def test_all_rectangles_36(self):
        grid = CellGrid(map_size=42, cell_size=14)
        assert len(enumerate_regions(grid, min_cells=1)) == 36

    def test_single_cell_grid(self):
        grid = CellGrid(map_size=8, cell_size=8)
        regs = enumerate_regions(grid, min_cells=1)
        assert len(regs) == 1
        assert (regs[0].x0, regs[0].y0, regs[0].x1, regs[0].y1) == (0, 0, 8, 8)

    @pytest.mark.parametrize("g", [1, 2, 3, 4, 5, 6])
    def test_count_law(self, g):
        grid = CellGrid(map_size=g * 4, cell_size=4)
        total = g * (g + 1) // 2
        assert len(enumerate_regions(grid, 1)) == total * total
        assert len(enumerate_regions(grid, 1)) == brute_force_count(g, 1)
        if g >= 2:
            assert len(enumerate_regions(grid, 2)) == total * total - g * g
        assert len(enumerate_regions(grid, 2)) == brute_force_count(g, 2)

    def test_full_image_last(self):
        grid = CellGrid(map_size=24, cell_size=8)
        for mc in (1, 2, 4):
            regs = enumerate_regions(grid, mc)
            last = regs[-1]
            assert (last.x0, last.y0, last.x1, last.y1) == (0, 0, 24, 24)

    def test_cell_alignment_and_ids(self):
        grid = CellGrid(map_size=24, cell_size=8)
        regs = enumerate_regions(grid, 2)
        for i, r in enumerate(regs):
            assert r.id == i
            for edge in (r.x0, r.y0, r.x1, r.y1):
                assert edge % 8 == 0
            assert r.cell_w * r.cell_h >= 2
            assert r.width == r.cell_w * 8 and r.height == r.cell_h * 8

    def test_deterministic_ordering(self):
        grid = CellGrid(map_size=24, cell_size=8)
        assert enumerate_regions(grid, 2) == enumerate_regions(grid, 2)

    def test_indivisible_map_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            CellGrid(map_size=42, cell_size=13)


class TestUniformGrid:
    def test_four_by_four_on_64(self):
        regs = uniform_grid_regions(4, 64)
        assert len(regs) == 16
        assert all(r.width == 16 and r.height == 16 for r in regs)

    def test_single_tile(self):
        regs = uniform_grid_regions(1, 32)
        assert len(regs) == 1
        assert regs[0].area == 32 * 32

    def test_floor_rule_remainder(self):
        regs = uniform_grid_regions(3, 64)
        widths = sorted({r.width for r in regs})
        assert widths == [21, 22]
        row = [r for r in regs if r.y0 == 0]
        assert [r.width for r in row] == [21, 21, 22]
        assert sum(r.width for r in row) == 64

    def test_tiles_cover_map_disjointly(self):
        regs = uniform_grid_regions(5, 33)
        assert sum(r.area for r in regs) == 33 * 33


class TestRegionSpecFile:
    def test_round_trip(self, tmp_path):
        grid = CellGrid(map_size=24, cell_size=8)
        regs = enumerate_regions(grid, 2)
        path = tmp_path / "regions.txt"
        save_region_spec(path, regs, 24)
        loaded, map_size = load_region_spec(path)
        assert map_size == 24
        assert [(r.id, r.x0, r.y0, r.x1, r.y1) for r in loaded] == [
            (r.id, r.x0, r.y0, r.x1, r.y1) for r in regs
        ]

    def test_singleton_file(self, tmp_path):
        path = tmp_path / "one.txt"
        path.write_text("RGNS v1 U=16\n0 0 0 16 16\n")
        regs, map_size = load_region_spec(path)
        assert len(regs) == 1 and map_size == 16

    def test_out_of_bounds_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("RGNS v1 U=16\n0 0 0 17 16\n")
        with pytest.raises(ValueError, match="outside map"):
            load_region_spec(path)

    def test_zero_area_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("RGNS v1 U=16\n0 4 4 4 8\n")
        with pytest.raises(ValueError):
            load_region_spec(path)

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("RGNS v1 U=16\n0 0 0 8 8\n0 8 8 16 16\n")
        with pytest.raises(ValueError, match="duplicate"):
            load_region_spec(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0 8 8\n")
        with pytest.raises(ValueError, match="header"):
            load_region_spec(path)

    def test_comments_ignored(self, tmp_path):
        path = tmp_path / "ok.txt"
        path.write_text("RGNS v1 U=16\n# a comment\n\n3 0 0 8 8\n")
        regs, _ = load_region_spec(path)
        assert regs[0].id == 3
