"""Synthetic assessor data whose price-per-square-foot is visible only in the imagery.

Each property sits in one of ``n_neighborhoods`` neighbourhoods. The
neighbourhood fixes the price per square foot and the look of the satellite
tile (a stripe pattern); the tabular features carry floor area and a few
nuisance columns but nothing about the neighbourhood. The label is
``area * ppsf + noise``, so tabular-only models see half the story and
image-only models the other half.
"""

from __future__ import annotations

import csv
import io
import threading
import urllib.parse
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .imagery import bilinear_resize

LA_CENTER = (34.05, -118.25)
USE_TYPES = ("SFR", "Condo", "Duplex", "Townhouse")

SCHEMA_TEXT = """\
# name          kind              flags
AIN             identifier        key
ParcelID        identifier        drop
Situs           identifier        drop
UseType         categorical
RoofType        categorical
SqftMain        numeric
Bedrooms        numeric
Bathrooms       numeric
YearBuilt       numeric
LandValue       label_total_land
PersonalValue   label_personal
TotalValue      label_total
Lat             latitude
Lon             longitude
RecordingDate   redundant         drop
filter UseType in SFR,Condo,Duplex,Townhouse
"""


@dataclass
class SyntheticProperties:
    ids: list[str]
    area: np.ndarray
    neighborhood: np.ndarray
    ppsf: np.ndarray
    price: np.ndarray
    features: np.ndarray  # raw numeric features, area first
    lat: np.ndarray
    lon: np.ndarray
    rng_seed: int


def ppsf_levels(n_neighborhoods: int) -> np.ndarray:
    return np.linspace(150.0, 900.0, n_neighborhoods)


def make_properties(n: int = 3000, seed: int = 0, n_neighborhoods: int = 8,
                    noise_sd: float = 20_000.0) -> SyntheticProperties:
    rng = np.random.default_rng(seed)
    area = rng.uniform(800.0, 4000.0, n)
    hood = rng.integers(0, n_neighborhoods, n)
    ppsf = ppsf_levels(n_neighborhoods)[hood]
    price = area * ppsf + rng.normal(0.0, noise_sd, n)
    bedrooms = np.clip(np.round(area / 700 + rng.normal(0, 0.7, n)), 1, 8)
    bathrooms = np.clip(np.round(bedrooms * 0.75 + rng.normal(0, 0.5, n)), 1, 6)
    year = rng.integers(1920, 2016, n).astype(float)
    features = np.column_stack([area, bedrooms, bathrooms, year])
    angle = 2 * np.pi * hood / n_neighborhoods
    lat = LA_CENTER[0] + 0.1 * np.sin(angle) + rng.normal(0, 0.005, n)
    lon = LA_CENTER[1] + 0.1 * np.cos(angle) + rng.normal(0, 0.005, n)
    ids = [f"P{i:06d}" for i in range(n)]
    return SyntheticProperties(ids, area, hood, ppsf, price, features, lat, lon, seed)


def tile_array(neighborhood: int, size: int = 640) -> np.ndarray:
    """uint8 RGB tile for a neighbourhood: stripes whose period and colour vary with it."""
    period = 8 + 6 * neighborhood
    hue = np.array([(37 * neighborhood) % 256, (91 * neighborhood + 60) % 256,
                    (53 * neighborhood + 120) % 256], dtype=np.float64)
    x = np.arange(size)
    stripe = ((x[None, :] + x[:, None]) // period) % 2
    img = np.where(stripe[..., None] == 1, hue, 255.0 - hue)
    return img.astype(np.uint8)


def tile_png(neighborhood: int, size: int = 640) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(tile_array(neighborhood, size), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def tile_tensor(neighborhood: int, size: int = 640) -> np.ndarray:
    """Same result as decoding ``tile_png`` with the imagery preprocessing."""
    from .imagery import TENSOR_SIZE

    out = bilinear_resize(tile_array(neighborhood, size).astype(np.float64),
                          TENSOR_SIZE, TENSOR_SIZE) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def write_csv(props: SyntheticProperties, path, extra_rows: bool = True) -> None:
    """Write an assessor-style CSV (plus a few rows the cleaner must reject)."""
    rng = np.random.default_rng([props.rng_seed, 7])
    header = ["AIN", "ParcelID", "Situs", "UseType", "RoofType", "SqftMain", "Bedrooms",
              "Bathrooms", "YearBuilt", "LandValue", "PersonalValue", "TotalValue", "Lat", "Lon",
              "RecordingDate"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for i, rid in enumerate(props.ids):
            area, bed, bath, year = props.features[i]
            land = round(float(props.price[i]) * 0.4, 2)
            w.writerow([rid, f"PCL{i:07d}", f"{i} Main St", USE_TYPES[int(rng.integers(4))],
                        ("Tile", "Shingle", "Flat")[int(rng.integers(3))], f"{area:.1f}",
                        int(bed), int(bath), int(year), land, f"{props.price[i]:.2f}",
                        f"{land + props.price[i]:.2f}", f"{props.lat[i]:.6f}",
                        f"{props.lon[i]:.6f}", "2016-01-01"])
        if extra_rows:
            # empty lot, commercial parcel, missing area
            w.writerow(["X000001", "PCLX1", "Lot", "SFR", "Flat", "0", 0, 0, 2000, 90000, "0",
                        90000, "34.1", "-118.2", "2016-01-01"])
            w.writerow(["X000002", "PCLX2", "Mall", "Commercial", "Flat", "90000", 0, 4, 1990,
                        1e6, "2500000", 3.5e6, "34.0", "-118.3", "2016-01-01"])
            w.writerow(["X000003", "PCLX3", "Unknown", "SFR", "Tile", "", 3, 2, 1975, 1e5,
                        "400000", 5e5, "34.0", "-118.3", "2016-01-01"])


def write_schema(path) -> None:
    Path(path).write_text(SCHEMA_TEXT)


class TileServer:
    """Local HTTP tile provider for demos and tests.

    Answers ``/tile?center=<lat>,<lon>&...`` with the PNG of the neighbourhood
    whose centre is nearest, and counts every request it receives.
    """

    def __init__(self, n_neighborhoods: int = 8, size: int = 640, fail_first: int = 0,
                 status: int = 200):
        self.n_neighborhoods = n_neighborhoods
        self.size = size
        self.arrivals = 0
        self.fail_first = fail_first
        self.status = status
        self._lock = threading.Lock()
        self._pngs: dict[int, bytes] = {}
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                with server._lock:
                    server.arrivals += 1
                    fail = server.arrivals <= server.fail_first or server.status >= 400
                if fail:
                    self.send_response(server.status if server.status >= 400 else 500)
                    self.end_headers()
                    return
                query = urllib.parse.parse_qs(urllib.parse.urlsplit(self.path).query)
                lat, lon = (float(v) for v in query["center"][0].split(","))
                body = server.png_for(lat, lon)
                self.send_response(200)
                self.send_header("Content-Type", "image/png")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    def neighborhood_of(self, lat: float, lon: float) -> int:
        angles = 2 * np.pi * np.arange(self.n_neighborhoods) / self.n_neighborhoods
        d = (LA_CENTER[0] + 0.1 * np.sin(angles) - lat) ** 2 + \
            (LA_CENTER[1] + 0.1 * np.cos(angles) - lon) ** 2
        return int(np.argmin(d))

    def png_for(self, lat: float, lon: float) -> bytes:
        hood = self.neighborhood_of(lat, lon)
        with self._lock:
            if hood not in self._pngs:
                self._pngs[hood] = tile_png(hood, self.size)
            return self._pngs[hood]

    @property
    def template(self) -> str:
        host, port = self._httpd.server_address[:2]
        return (f"http://{host}:{port}/tile?center={{lat}},{{lon}}&zoom={{zoom}}"
                f"&size={{w}}x{{h}}&maptype={{maptype}}&key={{key}}")

    def start(self) -> "TileServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
