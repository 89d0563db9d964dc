import json
import threading

import pytest
import requests

from demine.cli import main
from demine import service


SYNTH_REGION = {"synthetic": {"pattern": "line", "n_mines": 8, "spacing": 30,
                              "jitter": 2, "region_size": 250, "seed": 1}}
SYNTH_REGION_B = {"synthetic": {"pattern": "line", "n_mines": 8, "spacing": 30,
                                "jitter": 2, "region_size": 250, "seed": 2}}


def run(argv):
    return main(argv)


class TestIngest:
    def test_csv_metric(self, tmp_path, capsys):
        mines = tmp_path / "m.csv"
        mines.write_text("x,y\n10,10\n60,60\n30,30\n110,110\n200,200\n")
        region = tmp_path / "r.json"
        region.write_text(json.dumps({
            "mode": "metric",
            "bounds": {"min_x": 0, "min_y": 0, "max_x": 250, "max_y": 250},
            "tile_size_m": 25,
        }))
        out = tmp_path / "dataset.json"
        rc = run(["ingest", "--input", str(mines), "--region", str(region),
                  "--out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "mines: 5" in printed
        doc = json.loads(out.read_text())
        assert doc["summary"]["n_mines"] == 5
        assert doc["summary"]["n_tiles"] == 100

    def test_bad_geojson_feature_fails(self, tmp_path, capsys):
        mines = tmp_path / "m.geojson"
        mines.write_text(json.dumps({
            "type": "FeatureCollection",
            "features": [{"type": "Feature",
                          "geometry": {"type": "Polygon", "coordinates": []},
                          "properties": {}}],
        }))
        region = tmp_path / "r.json"
        region.write_text(json.dumps({
            "mode": "geo", "origin": {"lon": 30, "lat": 0},
            "bounds": {"min_x": 0, "min_y": 0, "max_x": 100, "max_y": 100},
            "tile_size_m": 25,
        }))
        rc = run(["ingest", "--input", str(mines), "--region", str(region),
                  "--out", str(tmp_path / "d.json")])
        assert rc != 0
        assert "feature 0" in capsys.readouterr().err


class TestTrainSimulateReport:
    def train(self, tmp_path, kind="linear"):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({
            "regions": [SYNTH_REGION, SYNTH_REGION_B],
            "instance": kind,
            "hyperparameters": {"landmine_weight": 30, "cluster_max_distance": 100,
                                "pc_smoothness_factor": 10},
            "seed": 3,
        }))
        model = tmp_path / "model.json"
        rc = run(["train", "--config", str(cfg), "--out", str(model)])
        assert rc == 0
        return model

    def test_train_writes_artifact(self, tmp_path):
        model = self.train(tmp_path)
        doc = json.loads(model.read_text())
        assert doc["kind"] == "linear"
        assert "coefficients" in doc
        assert "scaler" in doc

    def test_simulate_three_kinds(self, tmp_path):
        model = self.train(tmp_path)
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({
            "region": SYNTH_REGION,
            "deminers": ["random", "sequential", "linear"],
            "models": {"linear": str(model)},
            "seed": 9,
        }))
        out = tmp_path / "out"
        rc = run(["simulate", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        cards = json.loads((out / "scorecards.json").read_text())
        assert set(cards["scorecards"]) == {"random", "sequential", "linear"}
        assert (out / "history_random.csv").exists()

    def test_simulate_requires_seed(self, tmp_path, capsys):
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({"region": SYNTH_REGION,
                                   "deminers": ["sequential"]}))
        rc = run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc != 0
        assert "seed" in capsys.readouterr().err

    def test_missing_model_is_actionable(self, tmp_path, capsys):
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({
            "region": SYNTH_REGION,
            "deminers": ["linear"],
            "seed": 4,
        }))
        rc = run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc != 0
        assert "model" in capsys.readouterr().err

    def test_byte_identical_reruns(self, tmp_path):
        model = self.train(tmp_path)
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({
            "region": SYNTH_REGION,
            "deminers": ["random", "sequential", "linear"],
            "models": {"linear": str(model)},
            "seed": 11,
        }))
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert run(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert run(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
        assert (out1 / "scorecards.json").read_bytes() == (out2 / "scorecards.json").read_bytes()
        for kind in ("random", "sequential", "linear"):
            a = (out1 / f"history_{kind}.csv").read_bytes()
            b = (out2 / f"history_{kind}.csv").read_bytes()
            assert a == b

    def test_report_table(self, tmp_path, capsys):
        model = self.train(tmp_path)
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({
            "region": SYNTH_REGION,
            "deminers": ["sequential"],
            "seed": 4,
        }))
        out = tmp_path / "out"
        run(["simulate", "--config", str(cfg), "--out", str(out)])
        report = tmp_path / "report.json"
        rc = run(["report", "--scorecards", str(out / "scorecards.json"),
                  "--out", str(report)])
        assert rc == 0
        doc = json.loads(report.read_text())
        assert set(doc["table"]["sequential"]) == {"demining_score", "t50", "t75",
                                                   "t90", "t100"}
        assert len(doc["plot_data"]["sequential"]) == doc["n_tiles"]


class TestCv:
    def test_single_cell_cv(self, tmp_path):
        cfg = tmp_path / "cv.json"
        cfg.write_text(json.dumps({
            "regions": [SYNTH_REGION, SYNTH_REGION_B],
            "instance": "linear",
            "grid": {"landmine_weights": [30], "cluster_max_distances": [75]},
            "seed": 6,
        }))
        out = tmp_path / "cv_report.json"
        rc = run(["cv", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert len(doc["cells"]) == 1
        assert doc["best"] == {"landmine_weight": 30, "cluster_max_distance": 75}

    def test_env_seed_override(self, tmp_path, monkeypatch):
        cfg = tmp_path / "cv.json"
        cfg.write_text(json.dumps({
            "regions": [SYNTH_REGION, SYNTH_REGION_B],
            "instance": "linear",
            "grid": {"landmine_weights": [30], "cluster_max_distances": [75]},
        }))
        monkeypatch.setenv("DEMINE_SEED", "8")
        out = tmp_path / "cv_report.json"
        rc = run(["cv", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        assert json.loads(out.read_text())["seed"] == 8


class TestServeSmoke:
    def test_health_and_baseline_session(self, tmp_path):
        svc = service.ServiceConfig(models={}, out_dir=tmp_path / "sessions")
        server, _ = service.make_server(svc, host="127.0.0.1", port=0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        try:
            assert requests.get(f"{base}/health").status_code == 200
            r = requests.post(f"{base}/sessions", json={
                "kind": "sequential", "mode": "simulation",
                "synthetic": {"pattern": "line", "n_mines": 4, "spacing": 30,
                              "region_size": 150, "seed": 2},
            })
            assert r.status_code == 201
            r = requests.post(f"{base}/sessions", json={
                "kind": "linear", "mode": "simulation",
                "synthetic": {"pattern": "line", "n_mines": 4, "spacing": 30,
                              "region_size": 150, "seed": 2},
            })
            assert r.status_code == 409  # no model loaded
        finally:
            server.shutdown()
            server.server_close()
