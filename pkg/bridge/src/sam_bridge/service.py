"""The HTTP service: request validation, session state, worker pool.

Endpoints:
  GET  /v1/health  -> {"status": "ok", "backend": str}
  GET  /v1/info    -> {"variant": str, "parameter_count": int, "mock": bool}
  POST /v1/refine  -> {"mask": base64 1-bit PNG, "score": float}

Refine requests carry a base64 8-bit grayscale PNG image plus either a
``box`` prompt ([x_min, y_min, x_max, y_max], inclusive pixel coordinates)
or a ``mask`` prompt (base64 1-bit PNG with the image's dimensions).
Status codes: 400 for anything malformed (JSON, base64, PNG, field types,
out-of-order boxes), 422 for well-formed requests whose prompt selects
nothing (missing prompt, all-zero mask, mismatched mask dims, box fully
outside the image), 504 when prediction exceeds the configured timeout.

A non-empty ``session`` string serializes requests that share it and
caches the per-image predictor state, so a box call followed by a mask
call on the same image initializes once. Requests without a session get
fresh state every time. Distinct sessions run concurrently, capped by the
worker pool.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import sys
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .codec import decode_image, decode_mask, encode_mask
from .config import BridgeConfig
from .errors import RequestError, bad_request, empty_prompt
from .predictor import MockPredictor, load_real_predictor

logger = logging.getLogger(__name__)


@dataclass
class _Session:
    lock: threading.Lock = field(default_factory=threading.Lock)
    image_digest: str | None = None
    state: object | None = None
    inits: int = 0


def _check_box(box, dims) -> tuple[int, int, int, int]:
    if not isinstance(box, (list, tuple)) or len(box) != 4:
        raise bad_request("box must be [x_min, y_min, x_max, y_max]")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in box):
        raise bad_request(f"box coordinates must be integers, got {box!r}")
    x_min, y_min, x_max, y_max = box
    if x_min > x_max or y_min > y_max:
        raise bad_request(f"box coordinates out of order: {box!r}")
    h, w = dims
    if x_max < 0 or y_max < 0 or x_min > w - 1 or y_min > h - 1:
        raise empty_prompt(f"box {box!r} lies entirely outside the {w}x{h} image")
    return x_min, y_min, x_max, y_max


class BridgeService:
    """Protocol logic, independent of the HTTP plumbing around it."""

    def __init__(self, cfg: BridgeConfig):
        self.cfg = cfg
        self.predictor = MockPredictor() if cfg.mock else load_real_predictor(cfg)
        self._sessions: dict[str, _Session] = {}
        self._sessions_lock = threading.Lock()
        self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers)
        self._stats_lock = threading.Lock()
        self.health_requests = 0
        self.refine_requests = 0

    @property
    def backend_name(self) -> str:
        return "mock" if self.cfg.mock else f"{self.predictor.backend_id}:{self.cfg.variant}"

    def health(self) -> dict:
        with self._stats_lock:
            self.health_requests += 1
        return {"status": "ok", "backend": self.backend_name}

    def info(self) -> dict:
        return {
            "variant": self.cfg.variant,
            "parameter_count": self.predictor.parameter_count,
            "mock": self.cfg.mock,
        }

    def session(self, name: str) -> _Session:
        with self._sessions_lock:
            return self._sessions.setdefault(name, _Session())

    def _state_for(self, session: _Session | None, image: np.ndarray):
        if session is None:
            return self.predictor.init_state(image)
        digest = hashlib.sha256(image.tobytes()).hexdigest()
        if session.image_digest != digest:
            session.state = self.predictor.init_state(image)
            session.image_digest = digest
            session.inits += 1
        return session.state

    def _predict(self, fn, *args):
        future = self._pool.submit(fn, *args)
        try:
            return future.result(timeout=self.cfg.timeout_s)
        except concurrent.futures.TimeoutError:
            future.cancel()
            raise RequestError(504, f"prediction exceeded {self.cfg.timeout_s}s") from None

    def refine(self, payload) -> dict:
        with self._stats_lock:
            self.refine_requests += 1
        if not isinstance(payload, dict):
            raise bad_request("request body must be a JSON object")
        session_name = payload.get("session", "")
        if not isinstance(session_name, str):
            raise bad_request("session must be a string")
        prompt_type = payload.get("prompt_type")
        if prompt_type not in ("box", "mask"):
            raise bad_request(f"prompt_type must be 'box' or 'mask', got {prompt_type!r}")
        image = decode_image(payload.get("image"))

        if prompt_type == "box":
            if "box" not in payload or payload["box"] is None:
                raise empty_prompt("box prompt missing")
            box = _check_box(payload["box"], image.shape)
            run = lambda state: self.predictor.predict_box(state, box)
        else:
            if "mask" not in payload or payload["mask"] is None:
                raise empty_prompt("mask prompt missing")
            prompt = decode_mask(payload["mask"])
            if prompt.shape != image.shape:
                raise empty_prompt(
                    f"mask prompt dims {prompt.shape} do not match image dims {image.shape}"
                )
            if not prompt.any():
                raise empty_prompt("mask prompt has no positive pixels")
            run = lambda state: self.predictor.predict_mask(state, prompt)

        session = self.session(session_name) if session_name else None
        hold = session.lock if session is not None else threading.Lock()
        with hold:
            state = self._state_for(session, image)
            mask, score = self._predict(run, state)
        if mask.shape != image.shape:  # never send a mask that breaks the contract
            raise RuntimeError(
                f"predictor produced dims {mask.shape} for image dims {image.shape}"
            )
        return {"mask": encode_mask(mask), "score": float(score)}


def build_server(service: BridgeService) -> ThreadingHTTPServer:
    """An HTTP server bound to the configured address, ready to serve."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, doc: dict) -> None:
            body = json.dumps(doc).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/v1/health":
                self._send(200, service.health())
            elif self.path == "/v1/info":
                self._send(200, service.info())
            else:
                self._send(404, {"error": f"no such endpoint: {self.path}"})

        def do_POST(self):
            if self.path != "/v1/refine":
                self._send(404, {"error": f"no such endpoint: {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length))
            except (ValueError, json.JSONDecodeError) as exc:
                self._send(400, {"error": f"malformed JSON body: {exc}"})
                return
            try:
                self._send(200, service.refine(payload))
            except RequestError as exc:
                self._send(exc.status, {"error": str(exc)})
            except Exception as exc:  # contract violations and bugs
                logger.exception("refine failed")
                self._send(500, {"error": f"internal error: {exc}"})

    class Server(ThreadingHTTPServer):
        def handle_error(self, request, client_address):
            # a client hanging up mid-response is routine, not a crash
            if isinstance(sys.exc_info()[1], ConnectionError):
                logger.debug("client %s disconnected mid-response", client_address)
            else:
                super().handle_error(request, client_address)

    return Server((service.cfg.host, service.cfg.port), Handler)


def serve(cfg: BridgeConfig) -> tuple[ThreadingHTTPServer, BridgeService]:
    """Build the service and its server; the caller drives serve_forever()."""
    service = BridgeService(cfg)
    server = build_server(service)
    return server, service
