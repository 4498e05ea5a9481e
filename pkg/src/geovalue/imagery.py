"""Satellite tile requests, a rate-limited caching fetcher, and image decoding.

The map provider is configured through a URL template, e.g. the static-maps
style default below. Tests and demos point the template at a local server.
"""

from __future__ import annotations

import hashlib
import io
import logging
import os
import tempfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = ("https://maps.googleapis.com/maps/api/staticmap?center={lat},{lon}"
                    "&zoom={zoom}&size={w}x{h}&maptype={maptype}&key={key}")
REQUIRED_PLACEHOLDERS = ("lat", "lon", "zoom", "w", "h", "key")
KEY_ENV = "GEOVALUE_MAPS_KEY"
DEFAULT_ZOOM = 19
DEFAULT_SIZE = 640
DEFAULT_DAILY_LIMIT = 25_000
TENSOR_SIZE = 299
TENSOR_SHAPE = (TENSOR_SIZE, TENSOR_SIZE, 3)

_RGB_COMPATIBLE = {"1", "L", "LA", "P", "PA", "RGB", "RGBA", "RGBX", "CMYK", "YCbCr", "La"}
_KEY_SENTINEL = "\x00KEY\x00"


class ImageryError(RuntimeError):
    pass


class BudgetExhausted(ImageryError):
    pass


class FetchError(ImageryError):
    def __init__(self, message: str, attempts: int, status: int | None = None):
        super().__init__(f"{message} (attempts={attempts})")
        self.attempts = attempts
        self.status = status


class NotAnImageError(FetchError):
    pass


class DecodeError(ImageryError):
    pass


@dataclass(frozen=True)
class TileRequest:
    lat: float
    lon: float
    zoom: int = DEFAULT_ZOOM
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE
    maptype: str = "satellite"

    def __post_init__(self):
        if not 1 <= self.zoom <= 24:
            raise ValueError(f"zoom must be in [1, 24], got {self.zoom}")
        if not (-90 <= self.lat <= 90 and -180 <= self.lon <= 180):
            raise ValueError(f"coordinates out of range: {self.lat}, {self.lon}")
        if not (0 < self.width <= 640 and 0 < self.height <= 640):
            raise ValueError(f"tile size must be within 640x640, got {self.width}x{self.height}")


def build_request_url(req: TileRequest, template: str = DEFAULT_TEMPLATE, key: str = "") -> str:
    missing = [p for p in REQUIRED_PLACEHOLDERS if "{" + p + "}" not in template]
    if missing:
        raise ValueError(f"URL template is missing placeholder(s): {missing}")
    return template.format_map({
        "lat": f"{req.lat:.6f}", "lon": f"{req.lon:.6f}", "zoom": req.zoom,
        "w": req.width, "h": req.height, "maptype": req.maptype, "key": key,
    })


def canonical_url(req: TileRequest, template: str = DEFAULT_TEMPLATE) -> str:
    """The request URL with the credential removed, used as the cache identity."""
    url = build_request_url(req, template, _KEY_SENTINEL)
    parts = urllib.parse.urlsplit(url)
    query = [(k, v) for k, v in urllib.parse.parse_qsl(parts.query, keep_blank_values=True)
             if _KEY_SENTINEL not in v]
    stripped = parts._replace(query=urllib.parse.urlencode(query, safe=",")).geturl()
    return stripped.replace(_KEY_SENTINEL, "")


def cache_key(url: str) -> str:
    return hashlib.sha256(url.encode("utf-8")).hexdigest()


@dataclass
class RateBudget:
    """At most ``max_requests`` reservations per ``window`` seconds."""

    max_requests: int = DEFAULT_DAILY_LIMIT
    window: float = 86_400.0
    consumed: int = 0
    window_start: float | None = None
    clock: Callable[[], float] = field(default=time.time, repr=False)

    def __post_init__(self):
        self._lock = threading.Lock()

    def _roll(self, now: float) -> None:
        if self.window_start is None or now - self.window_start >= self.window:
            self.window_start = now
            self.consumed = 0

    def try_reserve(self) -> bool:
        with self._lock:
            self._roll(self.clock())
            if self.consumed >= self.max_requests:
                return False
            self.consumed += 1
            return True

    @property
    def remaining(self) -> int:
        with self._lock:
            self._roll(self.clock())
            return self.max_requests - self.consumed


class TileCache:
    """``<root>/<2-char prefix>/<sha256>.img`` plus a ``.meta`` sidecar line."""

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, url: str) -> Path:
        h = cache_key(url)
        return self.root / h[:2] / f"{h}.img"

    def get(self, url: str) -> bytes | None:
        p = self.path_for(url)
        try:
            return p.read_bytes()
        except FileNotFoundError:
            return None

    def put(self, url: str, data: bytes, timestamp: float | None = None) -> Path:
        p = self.path_for(url)
        p.parent.mkdir(parents=True, exist_ok=True)
        ts = time.time() if timestamp is None else timestamp
        _atomic_write(p, data)
        _atomic_write(p.with_suffix(".meta"), f"{url}\t{ts:.3f}\t{len(data)}\n".encode("utf-8"))
        return p


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class TileFetcher:
    """Fetch tiles through the disk cache, spending the rate budget only on misses.

    Every HTTP attempt (including retries) reserves one unit of budget, so the
    number of requests reaching the provider never exceeds the budget. 5xx
    responses and transport errors are retried with the ``backoff`` delays;
    other HTTP errors fail at once.
    """

    def __init__(self, cache_dir, budget: RateBudget | None = None,
                 template: str = DEFAULT_TEMPLATE, key: str | None = None,
                 attempts: int = 3, backoff: Sequence[float] = (1.0, 2.0, 4.0),
                 timeout: float = 30.0, sleep: Callable[[float], None] = time.sleep):
        self.cache = TileCache(cache_dir)
        self.budget = budget or RateBudget()
        self.template = template
        self.key = os.environ.get(KEY_ENV, "") if key is None else key
        self.attempts = attempts
        self.backoff = tuple(backoff)
        self.timeout = timeout
        self.sleep = sleep

    def cached_path(self, req: TileRequest) -> Path:
        return self.cache.path_for(canonical_url(req, self.template))

    def fetch(self, req: TileRequest) -> bytes:
        canon = canonical_url(req, self.template)
        hit = self.cache.get(canon)
        if hit is not None:
            return hit
        url = build_request_url(req, self.template, self.key)
        last_status = None
        for attempt in range(1, self.attempts + 1):
            if not self.budget.try_reserve():
                raise BudgetExhausted(
                    f"rate budget of {self.budget.max_requests} requests per window is spent")
            try:
                with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                    ctype = resp.headers.get("Content-Type", "")
                    body = resp.read()
                if not ctype.lower().startswith("image/"):
                    raise NotAnImageError(f"provider returned content type {ctype!r}", attempt)
                self.cache.put(canon, body)
                return body
            except urllib.error.HTTPError as exc:
                last_status = exc.code
                if exc.code < 500:
                    raise FetchError(f"HTTP {exc.code} for {canon}", attempt, exc.code) from exc
                logger.debug("HTTP %d on attempt %d for %s", exc.code, attempt, canon)
            except (urllib.error.URLError, OSError) as exc:
                last_status = None
                logger.debug("transport error on attempt %d for %s: %s", attempt, canon, exc)
            if attempt < self.attempts:
                self.sleep(self.backoff[min(attempt - 1, len(self.backoff) - 1)])
        raise FetchError(f"giving up on {canon}", self.attempts, last_status)

    def fetch_many(self, reqs: Sequence[TileRequest], concurrency: int = 8) -> list:
        """Fetch concurrently; each slot holds the bytes or the raised exception."""
        def one(req):
            try:
                return self.fetch(req)
            except ImageryError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
            return list(pool.map(one, reqs))


def fetch_tile(req: TileRequest, budget: RateBudget, cache_dir, template: str = DEFAULT_TEMPLATE,
               key: str | None = None, **kwargs) -> bytes:
    return TileFetcher(cache_dir, budget, template, key, **kwargs).fetch(req)


def _resize_axis(a: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = a.shape[axis]
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_len - 1)
    w = src - i0
    shape = [1] * a.ndim
    shape[axis] = out_len
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resampling with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    return _resize_axis(_resize_axis(img, height, 0), width, 1)


def decode_preprocess(data: bytes) -> np.ndarray:
    """Decode image bytes into a ``299x299x3`` float32 array with values in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode not in _RGB_COMPATIBLE:
                raise DecodeError(f"image mode {im.mode!r} has no RGB mapping")
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    out = bilinear_resize(rgb, TENSOR_SIZE, TENSOR_SIZE) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def check_tensor(t) -> None:
    t = np.asarray(t)
    if t.shape != TENSOR_SHAPE:
        raise ValueError(f"image tensor must have shape {TENSOR_SHAPE}, got {t.shape}")
    if not np.all(np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0:
        raise ValueError("image tensor values must lie in [0, 1]")
