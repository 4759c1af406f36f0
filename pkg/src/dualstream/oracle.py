"""Knowledge-aware masks and advisor verdicts.

Two backends implement the same three calls (``semantics``, ``mask``,
``judge``):

* :class:`GroundTruthBackend` reads the simulator scene attached to an
  observation.  It is pure and never fails.
* :class:`ExternalBackend` speaks JSON over HTTP to a vision-language /
  segmentation service:

  ``POST /semantics``  ``{"image": <b64 PNG>, "prompt": str}`` -> ``{"phrases": [str]}``
  ``POST /mask``       ``{"image": <b64 PNG>, "phrase": str}`` -> ``{"logits": [float], "height": int, "width": int}``
  ``POST /advisor``    ``{"image": <b64 PNG>, "action": [steer, accel]}`` -> ``{"verdict": "reasonable"|"unreasonable"}``

:class:`OracleServer` is a stub implementation of that service which works
from pixels alone (palette lookup), for protocol testing.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import math
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np
from PIL import Image

from . import worldsim
from .worldsim import Action, Observation

log = logging.getLogger(__name__)

PHRASES = {"pedestrian": "pedestrian", "vehicle": "vehicle", "static": "static obstacle"}
PHRASE_TO_KIND = {v: k for k, v in PHRASES.items()}
REASONABLE, UNREASONABLE = "reasonable", "unreasonable"


class OracleError(RuntimeError):
    """Backend failure; ``diagnostics`` carries whatever the backend said."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnknownPhraseError(OracleError, KeyError):
    def __init__(self, phrase: str):
        OracleError.__init__(self, f"cannot resolve phrase {phrase!r}", {"phrase": phrase})
        self.phrase = phrase

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class KnowledgeMask:
    phrases: tuple[str, ...]
    logits: np.ndarray  # (n_objects, H, W)
    aggregate: np.ndarray  # (H, W)


@dataclass(frozen=True)
class AdvisorVerdict:
    verdict: str
    rationale: str = ""

    @property
    def reasonable(self) -> bool:
        return self.verdict == REASONABLE


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def aggregate_logits(logits: np.ndarray, hard: bool = False) -> np.ndarray:
    """Sum of per-object sigmoid maps.  ``hard`` thresholds each map at 0.5
    before summing (ablation only)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] == 0:
        return np.zeros(logits.shape[1:], dtype=np.float64)
    probs = sigmoid(logits)
    if hard:
        probs = (probs > 0.5).astype(np.float64)
    return probs.sum(axis=0)


def knowledge_mask(backend, obs: Observation, phrases: Sequence[str], hard: bool = False) -> KnowledgeMask:
    h, w = obs.frames.shape[1:3]
    maps = [np.asarray(backend.mask(obs, p), dtype=np.float64) for p in phrases]
    for p, m in zip(phrases, maps):
        if m.shape != (h, w):
            raise OracleError(f"mask for {p!r} has shape {m.shape}, expected {(h, w)}")
    logits = np.stack(maps) if maps else np.zeros((0, h, w))
    return KnowledgeMask(tuple(phrases), logits, aggregate_logits(logits, hard))


def compute_mask(backend, obs: Observation, prompt: str, hard: bool = False) -> KnowledgeMask:
    """Semantics retrieval followed by mask generation for every phrase."""
    return knowledge_mask(backend, obs, backend.semantics(obs, prompt), hard)


# --------------------------------------------------------------------------
# advisor heuristic

def obstacle_in_cone(ego_xy: tuple[float, float], heading: float,
                     obstacles: Sequence[tuple[float, float, float]],
                     length: float, half_angle: float) -> bool:
    """True if any disc (x, y, r) intersects the forward cone of the ego."""
    ex, ey = ego_xy
    for ox, oy, r in obstacles:
        dx, dy = ox - ex, oy - ey
        dist = math.hypot(dx, dy)
        if dist <= r:
            return True
        if dist - r > length:
            continue
        # angle between heading (measured from +y) and the obstacle bearing
        bearing = math.atan2(dx, dy)
        off = abs((bearing - heading + math.pi) % (2 * math.pi) - math.pi)
        if off - math.asin(min(1.0, r / dist)) <= half_angle:
            return True
    return False


def judge_heuristic(blocked: bool, action: Action) -> AdvisorVerdict:
    if action.accel > 0 and blocked:
        return AdvisorVerdict(UNREASONABLE, "accelerating toward an obstacle ahead")
    if abs(action.steer) > 0.8 and not blocked:
        return AdvisorVerdict(UNREASONABLE, "hard steering on a clear road")
    return AdvisorVerdict(REASONABLE, "")


class GroundTruthBackend:
    """Oracle backend reading the simulator scene carried by observations."""

    def __init__(self, cone_length: float = 12.0, cone_half_angle_deg: float = 20.0):
        self.cone_length = cone_length
        self.cone_half_angle = math.radians(cone_half_angle_deg)

    def semantics(self, obs: Observation, prompt: str = "") -> list[str]:
        size = obs.frames.shape[1]
        present = []
        for kind in worldsim.KINDS:
            if worldsim.object_coverage(obs.scene, size, kind).any():
                present.append(PHRASES[kind])
        return present

    def mask(self, obs: Observation, phrase: str) -> np.ndarray:
        kind = PHRASE_TO_KIND.get(phrase.strip().lower())
        if kind is None:
            raise UnknownPhraseError(phrase)
        return worldsim.confidence_logits(obs.scene, kind, obs.frames.shape[1])

    def judge(self, obs: Observation, action: Action) -> AdvisorVerdict:
        sc = obs.scene
        discs = [(o.x, o.y, o.radius) for o in sc.obstacles]
        blocked = obstacle_in_cone((sc.ego_x, sc.ego_y), sc.heading, discs,
                                   self.cone_length, self.cone_half_angle)
        return judge_heuristic(blocked, action)


# --------------------------------------------------------------------------
# wire format helpers

def encode_png(frame: np.ndarray) -> str:
    img = Image.fromarray(worldsim.to_uint8(frame) if frame.dtype != np.uint8 else frame)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
        return np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"))
    except Exception as exc:  # noqa: BLE001 - any decode failure is a bad request
        raise ValueError(f"image is not a base64-encoded PNG: {exc}") from exc


def parse_phrases(payload) -> list[str]:
    if not isinstance(payload, dict) or not isinstance(payload.get("phrases"), list):
        raise OracleError("semantics response lacks a 'phrases' list", {"response": payload})
    phrases = payload["phrases"]
    if not all(isinstance(p, str) for p in phrases):
        raise OracleError("semantics response has non-string phrases", {"response": payload})
    return [p.strip() for p in phrases if p.strip()]


def parse_logits(payload) -> np.ndarray:
    try:
        h, w = int(payload["height"]), int(payload["width"])
        arr = np.asarray(payload["logits"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise OracleError(f"malformed mask response: {exc}", {"response": _clip(payload)}) from exc
    if arr.ndim != 1 or arr.size != h * w:
        raise OracleError(f"mask response has {arr.size} logits for {h}x{w}", {"response": _clip(payload)})
    if not np.all(np.isfinite(arr)):
        raise OracleError("mask response contains non-finite logits")
    return arr.reshape(h, w)


def parse_verdict(payload) -> AdvisorVerdict:
    verdict = payload.get("verdict") if isinstance(payload, dict) else None
    if verdict not in (REASONABLE, UNREASONABLE):
        raise OracleError("advisor response lacks a valid 'verdict'", {"response": _clip(payload)})
    return AdvisorVerdict(verdict, str(payload.get("rationale", "")))


def _clip(payload, limit: int = 200) -> str:
    text = payload if isinstance(payload, str) else json.dumps(payload, default=str)
    return text[:limit]


class ExternalBackend:
    """Client for the JSON-over-HTTP oracle service."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def _post(self, endpoint: str, body: dict):
        req = urllib.request.Request(
            f"{self.url}/{endpoint}", data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json"}, method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                text = resp.read().decode("utf-8", errors="replace")
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", errors="replace")
            raise OracleError(f"{endpoint}: HTTP {exc.code}", {"status": exc.code, "body": detail[:200]}) from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise OracleError(f"{endpoint}: transport failure: {exc}", {"endpoint": endpoint}) from exc
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise OracleError(f"{endpoint}: response is not JSON", {"body": text[:200]}) from exc

    def semantics(self, obs: Observation, prompt: str = "") -> list[str]:
        return parse_phrases(self._post("semantics", {"image": encode_png(obs.latest), "prompt": prompt}))

    def mask(self, obs: Observation, phrase: str) -> np.ndarray:
        payload = self._post("mask", {"image": encode_png(obs.latest), "phrase": phrase})
        if isinstance(payload, dict) and "error" in payload and "logits" not in payload:
            raise UnknownPhraseError(phrase)
        return parse_logits(payload)

    def judge(self, obs: Observation, action: Action) -> AdvisorVerdict:
        body = {"image": encode_png(obs.latest), "action": [action.steer, action.accel]}
        return parse_verdict(self._post("advisor", body))


def make_backend(kind: str, url: str = "", timeout: float = 10.0,
                 cone_length: float = 12.0, cone_half_angle_deg: float = 20.0):
    if kind == "ground_truth":
        return GroundTruthBackend(cone_length, cone_half_angle_deg)
    if kind == "external":
        return ExternalBackend(url, timeout)
    raise ValueError(f"unknown oracle backend {kind!r}")


# --------------------------------------------------------------------------
# stub service

def _palette_coverage(img: np.ndarray, kind: str) -> np.ndarray:
    return np.all(img == np.array(worldsim.PALETTE[kind], dtype=np.uint8), axis=-1)


class PixelOracle:
    """Answers oracle queries from a rendered frame alone, by palette lookup.
    Used behind :class:`OracleServer`."""

    def __init__(self, cone_length: float = 12.0, cone_half_angle_deg: float = 20.0):
        self.cone_length = cone_length
        self.cone_half_angle = math.radians(cone_half_angle_deg)

    def semantics(self, img: np.ndarray) -> list[str]:
        return [PHRASES[k] for k in worldsim.KINDS if _palette_coverage(img, k).any()]

    def mask(self, img: np.ndarray, phrase: str) -> np.ndarray:
        kind = PHRASE_TO_KIND.get(phrase.strip().lower())
        if kind is None:
            raise UnknownPhraseError(phrase)
        cover = _palette_coverage(img, kind)
        return np.where(cover, worldsim.CONFIDENCE_MARGIN, -worldsim.CONFIDENCE_MARGIN)

    def judge(self, img: np.ndarray, action: Action) -> AdvisorVerdict:
        size = img.shape[0]
        gx, gdy = worldsim.pixel_grid(size)
        ego = _palette_coverage(img, "ego")
        ex = float(gx[ego].mean()) if ego.any() else worldsim.ROAD_WIDTH / 2
        px = worldsim.VIEW_SIZE / size
        occupied = np.zeros_like(ego)
        for kind in worldsim.KINDS:
            occupied |= _palette_coverage(img, kind)
        discs = [(float(x), float(dy), 0.5 * px) for x, dy in zip(gx[occupied], gdy[occupied])]
        blocked = obstacle_in_cone((ex, 0.0), 0.0, discs, self.cone_length, self.cone_half_angle)
        return judge_heuristic(blocked, action)


class _Handler(BaseHTTPRequestHandler):
    oracle: PixelOracle

    def log_message(self, fmt, *args):
        log.debug("oracle-serve: " + fmt, *args)

    def _reply(self, status: int, payload: dict):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", 0))
            req = json.loads(self.rfile.read(length) or b"{}")
            img = decode_png(req["image"])
        except (ValueError, KeyError, TypeError) as exc:
            self._reply(400, {"error": f"bad request: {exc}"})
            return
        endpoint = self.path.strip("/")
        try:
            if endpoint == "semantics":
                self._reply(200, {"phrases": self.server.oracle.semantics(img)})
            elif endpoint == "mask":
                logits = self.server.oracle.mask(img, str(req.get("phrase", "")))
                h, w = logits.shape
                self._reply(200, {"logits": logits.ravel().tolist(), "height": h, "width": w})
            elif endpoint == "advisor":
                steer, accel = req["action"]
                v = self.server.oracle.judge(img, Action(float(steer), float(accel)))
                self._reply(200, {"verdict": v.verdict, "rationale": v.rationale})
            else:
                self._reply(404, {"error": f"unknown endpoint {endpoint!r}"})
        except UnknownPhraseError as exc:
            self._reply(200, {"error": str(exc)})
        except (KeyError, TypeError, ValueError) as exc:
            self._reply(400, {"error": f"bad request: {exc}"})


class OracleServer(ThreadingHTTPServer):
    """Stub oracle service.  ``with OracleServer() as srv: srv.url`` runs it on
    a background thread."""

    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, oracle: PixelOracle | None = None):
        super().__init__((host, port), _Handler)
        self.oracle = oracle or PixelOracle()
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
