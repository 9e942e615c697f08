"""Minimal HTTP service exposing decompositions and on-demand relighting.

Endpoints:
  GET  /healthz                                   -> 200 "ok"
  GET  /api/decompositions                        -> JSON list of ids
  GET  /api/decompositions/{id}/maps/{name}       -> PNG preview
  POST /api/decompositions/{id}/relight           -> PNG bytes

Relight bodies carry either {"sh": [[9]x3]} or
{"direction": [x,y,z], "intensity": k, "ambient": a}, plus optional
"phong_s". The store is read-only; requests are stateless and safe to issue
concurrently. When a static directory is configured, anything outside /api
is served from it (the studio front end).
"""

from __future__ import annotations

import json
import mimetypes
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .decomposition import DecompositionSet
from .imgcore import ImageBuffer, encode_png_bytes
from .sh import ShLighting, cosine_lobe_light
from .shading import relight

__all__ = ["DecompositionStore", "light_from_spec", "relight_png", "create_server", "serve_forever"]

_MAP_NAMES = {
    "albedo": "albedo",
    "normal": "normal",
    "shading": "shading",
    "specular": "specular",
    "cspec": "cspec",
}


class DecompositionStore:
    """Read-only set of decomposition directories keyed by directory name."""

    def __init__(self, paths):
        self.entries: dict[str, DecompositionSet] = {}
        for p in paths:
            p = Path(p)
            self.entries[p.name] = DecompositionSet.load_dir(p)
        if not self.entries:
            raise ValueError("no decomposition directories given")

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def get(self, dec_id: str) -> DecompositionSet | None:
        return self.entries.get(dec_id)


def light_from_spec(spec: dict) -> ShLighting:
    """Parse a relight request body into lighting coefficients."""
    if "sh" in spec:
        return ShLighting.from_json_dict(spec)
    if "direction" in spec:
        direction = np.asarray(spec["direction"], dtype=np.float64)
        if direction.shape != (3,):
            raise ValueError("direction must be a 3-vector")
        return cosine_lobe_light(
            direction,
            intensity=float(spec.get("intensity", 1.0)),
            ambient=float(spec.get("ambient", 0.0)),
        )
    raise ValueError('light spec needs either "sh" or "direction"')


def relight_png(dec: DecompositionSet, spec: dict) -> bytes:
    """Shared CLI/HTTP code path: relight and encode as sRGB PNG bytes."""
    light = light_from_spec(spec)
    s = float(spec["phong_s"]) if "phong_s" in spec else None
    out = relight(dec, light, s=s)
    return encode_png_bytes(out, transfer="srgb")


def _map_preview(dec: DecompositionSet, name: str) -> bytes | None:
    if name == "albedo":
        return encode_png_bytes(dec.albedo, transfer="srgb")
    if name == "normal":
        return encode_png_bytes(ImageBuffer((dec.normals.vectors + 1.0) * 0.5), transfer="linear")
    if name == "shading":
        return encode_png_bytes(dec.shading, transfer="srgb")
    if name == "specular":
        return encode_png_bytes(dec.specular, transfer="srgb")
    if name == "cspec":
        return encode_png_bytes(ImageBuffer(np.clip(dec.cspec.data / 2.0, 0, 1)), transfer="linear")
    return None


def _make_handler(store: DecompositionStore, static_dir: Path | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, code: int, body: bytes, content_type: str) -> None:
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, code: int, payload: dict | list) -> None:
            self._send(code, json.dumps(payload).encode(), "application/json")

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            try:
                if self.path == "/healthz":
                    self._send(200, b"ok", "text/plain")
                    return
                if self.path == "/api/decompositions":
                    self._send_json(200, [{"id": i} for i in store.ids()])
                    return
                parts = [p for p in self.path.split("/") if p]
                if len(parts) == 4 and parts[:2] == ["api", "decompositions"] and parts[3] in (
                    "meta",
                ):
                    dec = store.get(parts[2])
                    if dec is None:
                        self._send_json(404, {"error": f"unknown decomposition {parts[2]}"})
                        return
                    self._send_json(200, dec.meta)
                    return
                if len(parts) == 5 and parts[:2] == ["api", "decompositions"] and parts[3] == "maps":
                    dec = store.get(parts[2])
                    if dec is None:
                        self._send_json(404, {"error": f"unknown decomposition {parts[2]}"})
                        return
                    png = _map_preview(dec, parts[4])
                    if png is None:
                        self._send_json(404, {"error": f"unknown map {parts[4]}"})
                        return
                    self._send(200, png, "image/png")
                    return
                if static_dir is not None:
                    rel = self.path.lstrip("/") or "index.html"
                    target = (static_dir / rel.split("?")[0]).resolve()
                    if static_dir.resolve() in target.parents or target == static_dir.resolve():
                        if target.is_file():
                            ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
                            self._send(200, target.read_bytes(), ctype)
                            return
                self._send_json(404, {"error": f"no such resource {self.path}"})
            except Exception as exc:  # pragma: no cover - defensive 500
                self._send_json(500, {"error": str(exc)})

        def do_POST(self):
            try:
                parts = [p for p in self.path.split("/") if p]
                if len(parts) != 4 or parts[:2] != ["api", "decompositions"] or parts[3] != "relight":
                    self._send_json(404, {"error": f"no such resource {self.path}"})
                    return
                dec = store.get(parts[2])
                if dec is None:
                    self._send_json(404, {"error": f"unknown decomposition {parts[2]}"})
                    return
                length = int(self.headers.get("Content-Length", "0"))
                try:
                    spec = json.loads(self.rfile.read(length).decode() or "{}")
                    if not isinstance(spec, dict):
                        raise ValueError("body must be a JSON object")
                    png = relight_png(dec, spec)
                except (ValueError, KeyError, TypeError) as exc:
                    self._send_json(400, {"error": str(exc)})
                    return
                self._send(200, png, "image/png")
            except Exception as exc:  # pragma: no cover - defensive 500
                self._send_json(500, {"error": str(exc)})

    return Handler


def create_server(paths, port: int, host: str = "127.0.0.1",
                  static_dir=None) -> ThreadingHTTPServer:
    store = DecompositionStore(paths)
    static = Path(static_dir) if static_dir else None
    handler = _make_handler(store, static)
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(server: ThreadingHTTPServer) -> None:
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def start_background(server: ThreadingHTTPServer) -> threading.Thread:
    """Run the server on a daemon thread (used by tests)."""
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
