"""Session-oriented HTTP API for live clearance operations.

One session is one clearance in progress: the operator clears tiles,
reports found mines (live mode) or lets the loaded dataset reveal them
(simulation mode), and reads back risk maps and next-tile suggestions.

Contract highlights:
  * optimistic concurrency — every mutation carries the revision it was
    based on; a stale revision gets 410, so exactly one writer wins;
  * event sourcing — every session appends to a JSONL action log, and
    replaying the log reproduces the exact session state;
  * pattern sessions need a trained model; baseline sessions do not.

Endpoints (JSON bodies, errors as {"code", "message"}):
  GET  /health
  POST /sessions
  GET  /sessions/{id}
  POST /sessions/{id}/clear
  GET  /sessions/{id}/risk
  GET  /sessions/{id}/suggestion
  GET  /sessions/{id}/log
"""

from __future__ import annotations

import json
import re
import threading
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import clustering, patterns, risk, simulator, training
from .geodata import (
    Bounds,
    MetricPoint,
    MinefieldDataset,
    assign_mines,
    build_grid,
    region_from_dict,
)

SESSION_KINDS = ("random", "sequential", "linear", "curved", "bayesian")
PATTERN_KINDS = ("linear", "curved", "bayesian")


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message
        super().__init__(message)


@dataclass
class ServiceConfig:
    models: dict[str, training.TrainedInstance] = field(default_factory=dict)
    out_dir: Path = Path("sessions")
    default_recalc_interval: int = 25


class Session:
    """Mutable clearance session; all mutations go through the manager lock."""

    def __init__(self, session_id: str, payload: dict, config: ServiceConfig):
        self.id = session_id
        self.lock = threading.Lock()
        self.kind = payload.get("kind", "sequential")
        if self.kind not in SESSION_KINDS:
            raise ApiError(400, f"unknown session kind {self.kind!r}")
        self.mode = payload.get("mode", "simulation")
        if self.mode not in ("simulation", "live"):
            raise ApiError(400, f"unknown session mode {self.mode!r}")
        self.recalc_interval = int(payload.get("recalc_interval",
                                               config.default_recalc_interval))
        if self.recalc_interval < 1:
            raise ApiError(400, "recalc_interval must be >= 1")
        self.recalc_on_find = bool(payload.get("recalc_on_find", False))
        self.start_side = payload.get("start_side", "south")
        if self.start_side not in simulator.DIRECTIONS:
            raise ApiError(400, f"start_side must be one of {simulator.DIRECTIONS}")

        self.stack: simulator.RiskStack | None = None
        if self.kind in PATTERN_KINDS:
            instance = config.models.get(self.kind)
            if instance is None:
                raise ApiError(409, f"no trained model available for kind {self.kind!r}")
            self.stack = training.make_stack(instance, recalc_interval=self.recalc_interval)

        self.grid, self.dataset = self._build_region(payload)
        if self.mode == "live" and len(self.dataset):
            raise ApiError(400, "live sessions start without known mines")
        self.state = simulator.new_state(self.grid, self.dataset)
        self.route = simulator.serpentine_route(self.grid, self.start_side)
        self.revision = 0
        self.payload = payload
        self.live_found_xy: list[list[float]] = []
        self.found_per_step: list[int] = []
        self.risk_arr: np.ndarray | None = None
        self.patterns: list = []
        self.t_first: int | None = None
        self.rebuilds = 0

    @staticmethod
    def _build_region(payload: dict):
        if "synthetic" in payload:
            raw = dict(payload["synthetic"])
            try:
                spec = simulator.SyntheticSpec(
                    pattern=raw.get("pattern", "line"),
                    n_mines=int(raw["n_mines"]),
                    spacing=float(raw.get("spacing", 30.0)),
                    jitter=float(raw.get("jitter", 0.0)),
                    region_size=float(raw.get("region_size", 500.0)),
                    seed=int(raw["seed"]),
                    arc_radius=float(raw.get("arc_radius", 200.0)),
                )
            except (KeyError, ValueError, TypeError) as e:
                raise ApiError(400, f"invalid synthetic spec: {e}") from e
            return simulator.generate_synthetic_minefield(spec)
        if "region" in payload:
            try:
                region = region_from_dict(payload["region"])
                grid = build_grid(region.bounds, region.tile_size_m)
                mines = [MetricPoint(float(x), float(y))
                         for x, y in payload.get("mines", [])]
            except (KeyError, ValueError, TypeError) as e:
                raise ApiError(400, f"invalid region spec: {e}") from e
            dataset = MinefieldDataset(mines=mines)
            return assign_mines(grid, dataset), dataset
        raise ApiError(400, "session needs a 'synthetic' spec or a 'region' record")

    # -- found mines -------------------------------------------------------

    def found_coords(self) -> np.ndarray:
        if self.mode == "live":
            return np.array(self.live_found_xy, dtype=float).reshape(-1, 2)
        coords = self.dataset.coords()
        return coords[self.state.found] if self.state.found else np.zeros((0, 2))

    def total_mines(self) -> int | None:
        return len(self.dataset) if self.mode == "simulation" else None

    def l_series(self) -> list[float]:
        if self.mode == "simulation":
            return list(self.state.l)
        total = len(self.live_found_xy)
        if total == 0:
            return [0.0] * len(self.found_per_step)
        cum = np.cumsum(self.found_per_step)
        return [c / total for c in cum]

    # -- mutations ---------------------------------------------------------

    def apply_clear(self, tile: int, reported: list[list[float]] | None) -> dict:
        if self.state.cleared[tile]:
            raise ApiError(409, f"tile {tile} already cleared")
        if not simulator.is_reachable(self.state, tile):
            raise ApiError(409, f"tile {tile} is not reachable")
        if self.mode == "simulation":
            if reported:
                raise ApiError(400, "simulation sessions reveal mines from the dataset")
            _, found = simulator.step(self.state, tile)
        else:
            found = len(reported or [])
            self._validate_reported(tile, reported or [])
            simulator.step(self.state, tile)
            self.live_found_xy.extend([float(x), float(y)] for x, y in (reported or []))
        self.found_per_step.append(found)
        risk_changed = self._maybe_recalc(new_finds=found > 0)
        self.revision += 1
        return {
            "revision": self.revision,
            "tile": tile,
            "mines_found": found,
            "risk_changed": risk_changed,
            "timestep": self.state.timestep,
            "done": self.state.done,
        }

    def _validate_reported(self, tile: int, reported: list) -> None:
        t = self.grid.tiles[tile]
        half = self.grid.tile_size / 2
        for x, y in reported:
            if abs(float(x) - t.center.x) > half or abs(float(y) - t.center.y) > half:
                raise ApiError(400, f"reported mine ({x}, {y}) lies outside tile {tile}")

    def _maybe_recalc(self, new_finds: bool) -> bool:
        if self.stack is None:
            return False
        coords = self.found_coords()
        if self.t_first is None:
            if new_finds and simulator.has_multi_mine_cluster(coords, self.stack.cluster_eps):
                self.t_first = self.state.timestep
                self._rebuild(coords)
                return True
            return False
        due = (self.state.timestep - self.t_first) % self.recalc_interval == 0
        if due or (self.recalc_on_find and new_finds):
            self._rebuild(coords)
            return True
        return False

    def _rebuild(self, coords: np.ndarray) -> None:
        cache: dict = {}
        self.patterns = simulator._fit_cluster_patterns(coords, self.stack, cache)
        self.risk_arr = risk.risk_map(self.grid, self.patterns, self.stack.model,
                                      cleared=self.state.cleared)
        self.rebuilds += 1

    # -- snapshots ----------------------------------------------------------

    def snapshot(self) -> dict:
        l = self.l_series()
        return {
            "id": self.id,
            "revision": self.revision,
            "kind": self.kind,
            "mode": self.mode,
            "grid": {
                "n_cols": self.grid.n_cols,
                "n_rows": self.grid.n_rows,
                "tile_size": self.grid.tile_size,
                "origin": [self.grid.origin.x, self.grid.origin.y],
            },
            "timestep": self.state.timestep,
            "done": self.state.done,
            "route": list(self.state.route),
            "cleared": [int(i) for i in np.flatnonzero(self.state.cleared)],
            "found_mines": [[float(x), float(y)] for x, y in self.found_coords()],
            "history_l": l,
            "scorecard_so_far": self._scorecard_so_far(l),
            "pattern_active": self.t_first is not None,
        }

    def _scorecard_so_far(self, l: list[float]) -> dict:
        out: dict = {
            "d_so_far": float(np.mean(l)) if l else 0.0,
            "found": int(sum(self.found_per_step)),
            "total": self.total_mines(),
        }
        n = self.grid.n_tiles
        for x in (50, 75, 90, 100):
            hit = next((i + 1 for i, v in enumerate(l) if v >= x / 100.0 - 1e-12), None)
            out[f"t{x}"] = 100.0 * hit / n if hit is not None else None
        if self.mode == "live":
            out["t50"] = out["t75"] = out["t90"] = out["t100"] = None
        return out

    def risk_snapshot(self) -> dict:
        entries = {}
        if self.risk_arr is not None:
            for i, v in enumerate(self.risk_arr):
                if not self.state.cleared[i] and not np.isnan(v):
                    entries[str(i)] = float(v)
        return {
            "revision": self.revision,
            "risk": entries,
            "patterns": [patterns.pattern_to_dict(p) for p in self.patterns],
        }

    def suggestion(self) -> dict:
        if self.state.done:
            return {"revision": self.revision, "tile": None, "source": "done",
                    "probability": None}
        best = simulator.argmax_risk_tile(self.state, self.risk_arr)
        if best is not None:
            prob = float(self.risk_arr[best])
            source = "risk"
        else:
            best = simulator.serpentine_next(self.state, self.route)
            prob = None
            source = "serpentine"
        return {
            "revision": self.revision,
            "tile": int(best),
            "col": int(best % self.grid.n_cols),
            "row": int(best // self.grid.n_cols),
            "probability": prob,
            "source": source,
        }


class SessionManager:
    """Holds sessions, serializes mutations, and persists action logs."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.sessions: dict[str, Session] = {}
        self.lock = threading.Lock()
        self.config.out_dir.mkdir(parents=True, exist_ok=True)

    def _log_path(self, session_id: str) -> Path:
        return self.config.out_dir / f"{session_id}.jsonl"

    def _append_log(self, session_id: str, event: dict) -> None:
        with open(self._log_path(session_id), "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def create(self, payload: dict, session_id: str | None = None,
               log: bool = True) -> Session:
        session_id = session_id or uuid.uuid4().hex
        session = Session(session_id, payload, self.config)
        with self.lock:
            self.sessions[session_id] = session
        if log:
            self._append_log(session_id, {"event": "create", "id": session_id,
                                          "payload": payload})
        return session

    def get(self, session_id: str) -> Session:
        with self.lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ApiError(404, f"unknown session {session_id!r}")
        return session

    def clear(self, session_id: str, body: dict) -> dict:
        session = self.get(session_id)
        with session.lock:
            if "revision" not in body:
                raise ApiError(400, "clear requires the current revision")
            if int(body["revision"]) != session.revision:
                raise ApiError(410, f"stale revision {body['revision']}, "
                                    f"server at {session.revision}")
            tile = self._tile_index(session, body)
            reported = body.get("mines")
            delta = session.apply_clear(tile, reported)
            # inside the lock so log order matches mutation order
            self._append_log(session_id, {
                "event": "clear", "tile": tile,
                "mines": reported or [], "revision": delta["revision"],
            })
        return delta

    @staticmethod
    def _tile_index(session: Session, body: dict) -> int:
        if "tile" not in body:
            raise ApiError(400, "clear requires a tile")
        t = body["tile"]
        if isinstance(t, list):
            if len(t) != 2:
                raise ApiError(400, "tile must be an index or [col, row]")
            col, row = int(t[0]), int(t[1])
            if not (0 <= col < session.grid.n_cols and 0 <= row < session.grid.n_rows):
                raise ApiError(400, f"tile ({col}, {row}) outside the grid")
            return row * session.grid.n_cols + col
        idx = int(t)
        if not (0 <= idx < session.grid.n_tiles):
            raise ApiError(400, f"tile index {idx} outside the grid")
        return idx

    def read_log(self, session_id: str) -> list[dict]:
        self.get(session_id)  # 404 on unknown
        path = self._log_path(session_id)
        if not path.exists():
            return []
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def replay_log(self, events: list[dict], session_id: str | None = None,
                   log: bool = False) -> Session:
        """Rebuild a session from its action log (event-sourced determinism)."""
        if not events or events[0].get("event") != "create":
            raise ValueError("log must start with a create event")
        session = self.create(events[0]["payload"],
                              session_id=session_id or uuid.uuid4().hex, log=log)
        for ev in events[1:]:
            if ev.get("event") != "clear":
                continue
            with session.lock:
                session.apply_clear(int(ev["tile"]), ev.get("mines") or None)
        return session

    def load_existing(self) -> int:
        """Replay any persisted logs from the output directory (crash recovery)."""
        count = 0
        for path in sorted(self.config.out_dir.glob("*.jsonl")):
            session_id = path.stem
            if session_id in self.sessions:
                continue
            with open(path) as fh:
                events = [json.loads(line) for line in fh if line.strip()]
            try:
                self.replay_log(events, session_id=session_id, log=False)
                count += 1
            except Exception:
                continue  # a corrupt log must not block startup
        return count


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

_SESSION_RE = re.compile(r"^/sessions/([0-9a-zA-Z_-]+)(/(state|risk|suggestion|log))?$")


class _Handler(BaseHTTPRequestHandler):
    manager: SessionManager  # set by make_server

    def log_message(self, *args):  # quiet; the action log is the record
        pass

    def _send(self, status: int, doc) -> None:
        body = json.dumps(doc, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str) -> None:
        self._send(status, {"code": status, "message": message})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ApiError(400, f"invalid JSON body: {e}") from e
        if not isinstance(doc, dict):
            raise ApiError(400, "body must be a JSON object")
        return doc

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()

    def do_GET(self):
        try:
            if self.path == "/health":
                self._send(200, {"status": "ok", "sessions": len(self.manager.sessions)})
                return
            m = _SESSION_RE.match(self.path)
            if not m:
                raise ApiError(404, f"no route for {self.path}")
            session_id, sub = m.group(1), m.group(3)
            session = self.manager.get(session_id)
            with session.lock:
                if sub in (None, "state"):
                    self._send(200, session.snapshot())
                elif sub == "risk":
                    self._send(200, session.risk_snapshot())
                elif sub == "suggestion":
                    self._send(200, session.suggestion())
                elif sub == "log":
                    self._send(200, {"events": self.manager.read_log(session_id)})
        except ApiError as e:
            self._error(e.status, e.message)
        except Exception as e:  # defensive: never leak a stack trace
            self._error(500, f"internal error: {e}")

    def do_POST(self):
        try:
            body = self._read_body()
            if self.path == "/sessions":
                session = self.manager.create(body)
                with session.lock:
                    doc = session.snapshot()
                self._send(201, doc)
                return
            m = re.match(r"^/sessions/([0-9a-zA-Z_-]+)/clear$", self.path)
            if m:
                self._send(200, self.manager.clear(m.group(1), body))
                return
            raise ApiError(404, f"no route for {self.path}")
        except ApiError as e:
            self._error(e.status, e.message)
        except Exception as e:
            self._error(500, f"internal error: {e}")


def make_server(config: ServiceConfig, host: str = "127.0.0.1",
                port: int = 0) -> tuple[ThreadingHTTPServer, SessionManager]:
    manager = SessionManager(config)
    manager.load_existing()
    handler = type("BoundHandler", (_Handler,), {"manager": manager})
    server = ThreadingHTTPServer((host, port), handler)
    return server, manager


def serve_forever(config: ServiceConfig, host: str = "127.0.0.1", port: int = 8775) -> None:
    server, _ = make_server(config, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
