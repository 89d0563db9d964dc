import json
import math

import numpy as np
import pytest

from demine.geodata import (
    Bounds,
    GeoPoint,
    Grid,
    MetricPoint,
    MinefieldDataset,
    OutOfBoundsError,
    ProjectionRangeError,
    assign_mines,
    build_grid,
    dataset_summary,
    ingest,
    load_dataset,
    load_mines_csv,
    load_mines_geojson,
    load_region,
    project_to_metric,
    save_dataset,
    region_from_dict,
)


ORIGIN = GeoPoint(lon=30.0, lat=0.0)


class TestProjection:
    def test_origin_maps_to_zero(self):
        (p,) = project_to_metric([ORIGIN], ORIGIN)
        assert p.x == 0.0 and p.y == 0.0

    def test_one_degree_lon_at_equator(self):
        (p,) = project_to_metric([GeoPoint(31.0, 0.0)], ORIGIN)
        assert p.x == pytest.approx(111320.0)
        assert p.y == pytest.approx(0.0)

    def test_small_lat_offset(self):
        (p,) = project_to_metric([GeoPoint(30.0, 0.01)], ORIGIN)
        assert p.x == pytest.approx(0.0)
        assert p.y == pytest.approx(1105.74)

    def test_out_of_range_rejected(self):
        with pytest.raises(ProjectionRangeError):
            project_to_metric([GeoPoint(33.0, 0.0)], ORIGIN)

    def test_injective_on_distinct_inputs(self):
        rng = np.random.default_rng(7)
        pts = [GeoPoint(30.0 + dx, 0.0 + dy)
               for dx, dy in rng.uniform(-1.5, 1.5, size=(50, 2))]
        projected = project_to_metric(pts, ORIGIN)
        seen = {(round(p.x, 6), round(p.y, 6)) for p in projected}
        assert len(seen) == len(pts)


class TestBuildGrid:
    def test_exact_multiple(self):
        g = build_grid(Bounds(0, 0, 100, 100), 25)
        assert (g.n_cols, g.n_rows) == (4, 4)
        assert g.n_tiles == 16

    def test_ceiling_rule(self):
        g = build_grid(Bounds(0, 0, 101, 100), 25)
        assert (g.n_cols, g.n_rows) == (5, 4)
        assert g.n_tiles == 20

    def test_single_tile_contains_center(self):
        g = build_grid(Bounds(0, 0, 25, 25), 25)
        assert g.n_tiles == 1
        t = g.tiles[0]
        assert (t.center.x, t.center.y) == (12.5, 12.5)
        assert g.locate(12.5, 12.5) == (0, 0)

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(ValueError):
            Bounds(0, 0, 0, 100)

    def test_tile_center_invariant(self):
        g = build_grid(Bounds(10, -5, 110, 70), 25)
        for t in g.tiles:
            assert t.center.x == pytest.approx(10 + (t.col + 0.5) * 25)
            assert t.center.y == pytest.approx(-5 + (t.row + 0.5) * 25)

    def test_every_point_in_bounds_locates(self):
        g = build_grid(Bounds(0, 0, 101, 77), 25)
        rng = np.random.default_rng(3)
        for x, y in rng.uniform([0, 0], [101, 77], size=(200, 2)):
            col, row = g.locate(x, y)
            assert 0 <= col < g.n_cols and 0 <= row < g.n_rows


class TestAssignMines:
    def grid(self):
        return build_grid(Bounds(0, 0, 100, 100), 25)

    def test_mine_at_tile_center(self):
        ds = MinefieldDataset(mines=[MetricPoint(37.5, 12.5)])
        g = assign_mines(self.grid(), ds)
        assert g.tiles[g.index(1, 0)].mine_indices == (0,)

    def test_shared_edge_goes_to_lower_col(self):
        ds = MinefieldDataset(mines=[MetricPoint(25.0, 10.0)])
        g = assign_mines(self.grid(), ds)
        assert g.tiles[g.index(0, 0)].mine_indices == (0,)
        assert g.tiles[g.index(1, 0)].mine_indices == ()

    def test_three_mines_one_tile(self):
        ds = MinefieldDataset(
            mines=[MetricPoint(10, 10), MetricPoint(11, 10), MetricPoint(10, 11)]
        )
        g = assign_mines(self.grid(), ds)
        assert len(g.tiles[g.index(0, 0)].mine_indices) == 3

    def test_out_of_bounds_lists_indices(self):
        ds = MinefieldDataset(mines=[MetricPoint(10, 10), MetricPoint(500, 10)])
        with pytest.raises(OutOfBoundsError) as exc:
            assign_mines(self.grid(), ds)
        assert exc.value.indices == [1]

    def test_mine_count_preserved(self):
        rng = np.random.default_rng(11)
        mines = [MetricPoint(x, y) for x, y in rng.uniform(0, 100, size=(40, 2))]
        g = assign_mines(self.grid(), MinefieldDataset(mines=mines))
        assert sum(len(t.mine_indices) for t in g.tiles) == 40

    def test_max_edge_belongs_to_last_tile(self):
        ds = MinefieldDataset(mines=[MetricPoint(100.0, 100.0)])
        g = assign_mines(self.grid(), ds)
        assert g.tiles[g.index(3, 3)].mine_indices == (0,)


class TestIO:
    def test_geojson_roundtrip(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [30.001, 0.001]},
                    "properties": {"type": "AP", "depth_m": 0.1},
                },
                {
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [30.002, 0.002]},
                    "properties": {},
                },
            ],
        }
        path = tmp_path / "mines.geojson"
        path.write_text(json.dumps(doc))
        points, attrs = load_mines_geojson(path)
        assert len(points) == 2
        assert attrs[0] == {"type": "AP", "depth_m": 0.1}
        assert attrs[1] is None

    def test_geojson_non_point_named(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [
                {"type": "Feature", "geometry": {"type": "Point", "coordinates": [30, 0]},
                 "properties": {}},
                {"type": "Feature", "geometry": {"type": "LineString", "coordinates": []},
                 "properties": {}},
            ],
        }
        path = tmp_path / "bad.geojson"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="feature 1"):
            load_mines_geojson(path)

    def test_csv_metric(self, tmp_path):
        path = tmp_path / "mines.csv"
        path.write_text("x,y\n10.5,20.5\n30,40\n")
        mode, pts = load_mines_csv(path)
        assert mode == "metric"
        assert pts[0] == MetricPoint(10.5, 20.5)

    def test_csv_geo(self, tmp_path):
        path = tmp_path / "mines.csv"
        path.write_text("lon,lat\n30.0,0.0\n")
        mode, pts = load_mines_csv(path)
        assert mode == "geo"
        assert pts[0] == GeoPoint(30.0, 0.0)

    def test_region_roundtrip(self, tmp_path):
        doc = {
            "mode": "geo",
            "origin": {"lon": 30.0, "lat": 0.0},
            "bounds": {"min_x": 0, "min_y": 0, "max_x": 500, "max_y": 500},
            "tile_size_m": 25,
        }
        path = tmp_path / "region.json"
        path.write_text(json.dumps(doc))
        region = load_region(path)
        assert region.mode == "geo"
        assert region.origin == GeoPoint(30.0, 0.0)
        assert region.tile_size_m == 25

    def test_ingest_geo_pipeline(self, tmp_path):
        mines = {
            "type": "FeatureCollection",
            "features": [
                {"type": "Feature",
                 "geometry": {"type": "Point", "coordinates": [30.0005, 0.0005]},
                 "properties": {}},
            ],
        }
        mpath = tmp_path / "m.geojson"
        mpath.write_text(json.dumps(mines))
        region = region_from_dict({
            "mode": "geo",
            "origin": {"lon": 30.0, "lat": 0.0},
            "bounds": {"min_x": 0, "min_y": 0, "max_x": 200, "max_y": 200},
            "tile_size_m": 25,
        })
        grid, dataset = ingest(region, mpath)
        assert len(dataset) == 1
        assert sum(len(t.mine_indices) for t in grid.tiles) == 1

    def test_dataset_file_roundtrip(self, tmp_path):
        region = region_from_dict({
            "mode": "metric",
            "bounds": {"min_x": 0, "min_y": 0, "max_x": 100, "max_y": 100},
            "tile_size_m": 25,
        })
        grid = build_grid(region.bounds, 25)
        ds = MinefieldDataset(mines=[MetricPoint(10, 10), MetricPoint(60, 60)])
        grid = assign_mines(grid, ds)
        path = tmp_path / "dataset.json"
        summary = save_dataset(path, region, grid, ds)
        assert summary == {"n_tiles": 16, "n_mines": 2, "mined_tile_share": 2 / 16}
        region2, grid2, ds2 = load_dataset(path)
        assert len(ds2) == 2
        assert dataset_summary(grid2, ds2) == summary
