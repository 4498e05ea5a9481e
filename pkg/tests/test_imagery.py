import io
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image

from geovalue import imagery as im

TEMPLATE = "http://h/x?center={lat},{lon}&zoom={zoom}&size={w}x{h}&maptype={maptype}&key={key}"


def png(arr, mode=None):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode).save(buf, format="PNG")
    return buf.getvalue()


class Scripted:
    """Local server replaying a list of (status, content_type, body) responses."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.hits = 0
        owner = self

        class H(BaseHTTPRequestHandler):
            def do_GET(self):
                i = min(owner.hits, len(owner.responses) - 1)
                owner.hits += 1
                status, ctype, body = owner.responses[i]
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *a):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), H)
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()
        host, port = self.httpd.server_address[:2]
        self.template = f"http://{host}:{port}/t?center={{lat}},{{lon}}&zoom={{zoom}}&size={{w}}x{{h}}&key={{key}}"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def scripted():
    servers = []

    def make(responses):
        s = Scripted(responses)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


class TestRequests:
    def test_default_tile_configuration(self):
        url = im.build_request_url(im.TileRequest(34.05, -118.25, 19, 640, 640), TEMPLATE, "k")
        assert "zoom=19" in url and "size=640x640" in url
        assert "34.050000,-118.250000" in url

    def test_missing_placeholder(self):
        with pytest.raises(ValueError, match="lat"):
            im.build_request_url(im.TileRequest(0, 0), "http://h/?c={lon}&z={zoom}&s={w}x{h}&k={key}")

    def test_six_decimals(self):
        assert "0.000000,0.000000" in im.build_request_url(im.TileRequest(0.0, 0.0), TEMPLATE, "k")

    def test_pure(self):
        req = im.TileRequest(1.5, 2.5, 10, 100, 200, "hybrid")
        assert im.build_request_url(req, TEMPLATE, "k") == im.build_request_url(req, TEMPLATE, "k")

    def test_request_validation(self):
        with pytest.raises(ValueError):
            im.TileRequest(0, 0, zoom=25)
        with pytest.raises(ValueError):
            im.TileRequest(0, 0, width=641)
        with pytest.raises(ValueError):
            im.TileRequest(95, 0)

    def test_canonical_url_drops_key(self):
        req = im.TileRequest(34.05, -118.25)
        a = im.canonical_url(req, TEMPLATE)
        assert "key" not in a and "secret" not in a
        assert im.cache_key(a) == im.cache_key(im.canonical_url(req, TEMPLATE))
        assert "center=34.050000,-118.250000" in a

    def test_default_template(self):
        url = im.build_request_url(im.TileRequest(34.0, -118.0), key="abc")
        assert url.startswith("https://maps.googleapis.com/maps/api/staticmap?")
        assert "maptype=satellite" in url and url.endswith("key=abc")


class TestBudget:
    def test_cap_and_window_roll(self):
        now = [0.0]
        b = im.RateBudget(2, window=10.0, clock=lambda: now[0])
        assert b.try_reserve() and b.try_reserve()
        assert not b.try_reserve()
        assert b.consumed == 2
        now[0] = 10.0
        assert b.try_reserve()
        assert b.consumed == 1 and b.remaining == 1


class TestCache:
    def test_round_trip_and_layout(self, tmp_path):
        cache = im.TileCache(tmp_path)
        data = bytes(range(256)) * 7
        p = cache.put("http://x/y", data, timestamp=12.0)
        h = im.cache_key("http://x/y")
        assert p == tmp_path / h[:2] / f"{h}.img"
        assert cache.get("http://x/y") == data
        assert p.with_suffix(".meta").read_text() == f"http://x/y\t12.000\t{len(data)}\n"
        assert cache.get("http://x/other") is None


class TestFetch:
    def test_cache_hit_keeps_budget(self, tmp_path, tile_server):
        budget = im.RateBudget(10)
        f = im.TileFetcher(tmp_path, budget, tile_server.template, key="k1")
        req = im.TileRequest(34.15, -118.25, 19, 128, 128)
        first = f.fetch(req)
        assert budget.consumed == 1
        # rotating the key must still hit the cache
        f2 = im.TileFetcher(tmp_path, budget, tile_server.template, key="k2")
        assert f2.fetch(req) == first
        assert budget.consumed == 1 and tile_server.arrivals == 1
        assert f.cached_path(req).read_bytes() == first

    def test_budget_exhausted(self, tmp_path, tile_server):
        budget = im.RateBudget(25_000, consumed=25_000, window_start=0.0, clock=lambda: 1.0)
        f = im.TileFetcher(tmp_path, budget, tile_server.template, key="k")
        with pytest.raises(im.BudgetExhausted):
            f.fetch(im.TileRequest(34.0, -118.0))
        assert tile_server.arrivals == 0

    def test_retries_then_fails(self, tmp_path, scripted):
        srv = scripted([(500, "text/plain", b"boom")])
        sleeps = []
        f = im.TileFetcher(tmp_path, im.RateBudget(100), srv.template, key="k", sleep=sleeps.append)
        with pytest.raises(im.FetchError) as info:
            f.fetch(im.TileRequest(1, 2))
        assert info.value.attempts == 3 and info.value.status == 500
        assert srv.hits == 3
        assert sleeps == [1.0, 2.0]

    def test_recovers_after_transient_errors(self, tmp_path, scripted):
        body = png(np.zeros((4, 4, 3)))
        srv = scripted([(503, "text/plain", b""), (502, "text/plain", b""), (200, "image/png", body)])
        f = im.TileFetcher(tmp_path, im.RateBudget(100), srv.template, key="k", sleep=lambda s: None)
        assert f.fetch(im.TileRequest(1, 2)) == body
        assert srv.hits == 3

    def test_client_error_not_retried(self, tmp_path, scripted):
        srv = scripted([(403, "text/plain", b"denied")])
        f = im.TileFetcher(tmp_path, im.RateBudget(100), srv.template, key="k", sleep=lambda s: None)
        with pytest.raises(im.FetchError) as info:
            f.fetch(im.TileRequest(1, 2))
        assert info.value.status == 403 and srv.hits == 1

    def test_non_image_content(self, tmp_path, scripted):
        srv = scripted([(200, "text/html", b"<html/>")])
        f = im.TileFetcher(tmp_path, im.RateBudget(100), srv.template, key="k")
        with pytest.raises(im.NotAnImageError):
            f.fetch(im.TileRequest(1, 2))
        assert list(tmp_path.rglob("*.img")) == []

    def test_transport_error(self, tmp_path):
        sleeps = []
        budget = im.RateBudget(100)
        f = im.TileFetcher(tmp_path, budget, "http://127.0.0.1:9/{lat}{lon}{zoom}{w}{h}{key}",
                           key="k", sleep=sleeps.append, timeout=2)
        with pytest.raises(im.FetchError) as info:
            f.fetch(im.TileRequest(1, 2))
        assert info.value.attempts == 3 and budget.consumed == 3

    def test_fetch_many_keeps_order(self, tmp_path, tile_server):
        f = im.TileFetcher(tmp_path, im.RateBudget(100), tile_server.template, key="k")
        reqs = [im.TileRequest(34.05 + 0.1 * np.sin(a), -118.25 + 0.1 * np.cos(a), 19, 128, 128)
                for a in 2 * np.pi * np.arange(8) / 8]
        out = f.fetch_many(reqs, concurrency=4)
        assert [tile_server.png_for(r.lat, r.lon) for r in reqs] == out


class TestDecode:
    def test_white(self):
        t = im.decode_preprocess(png(np.full((640, 640, 3), 255)))
        assert t.shape == (299, 299, 3) and t.dtype == np.float32
        assert np.all(t == 1.0)

    def test_black(self):
        assert np.all(im.decode_preprocess(png(np.zeros((640, 640, 3)))) == 0.0)

    def test_two_pixel_oracle(self):
        # 1x2 image [0, 255] widened to 4: sample points -0.25, 0.25, 0.75, 1.25
        # clamp to 0, 0.25, 0.75, 1 -> 0, 63.75, 191.25, 255
        out = im.bilinear_resize(np.array([[0.0, 255.0]]), 1, 4)
        np.testing.assert_allclose(out[0], [0.0, 63.75, 191.25, 255.0], atol=1e-12)

    def test_vertical_split(self):
        arr = np.zeros((640, 640, 3))
        arr[:, 320:] = 255
        t = im.decode_preprocess(png(arr))

        def oracle(j):
            x = min(max((j + 0.5) * 640 / 299 - 0.5, 0.0), 639.0)
            x0 = int(np.floor(x))
            x1 = min(x0 + 1, 639)
            px = lambda k: 1.0 if k >= 320 else 0.0
            return px(x0) * (1 - (x - x0)) + px(x1) * (x - x0)

        expected = np.array([oracle(j) for j in range(299)])
        np.testing.assert_allclose(t[150, :, 0], expected, atol=1e-6)
        assert np.all(t[:, :149] == 0.0) and np.all(t[:, 150:] == 1.0)
        assert 0.0 < t[0, 149, 0] < 1.0
        np.testing.assert_array_equal(t[:, :, 0], t[:, :, 2])

    def test_alpha_and_gray(self):
        rgba = np.zeros((10, 10, 4), np.uint8)
        rgba[..., 0] = 255
        rgba[..., 3] = 0
        t = im.decode_preprocess(png(rgba, "RGBA"))
        assert np.all(t[..., 0] == 1.0) and np.all(t[..., 1:] == 0.0)
        g = im.decode_preprocess(png(np.full((8, 8), 128), "L"))
        np.testing.assert_allclose(g, 128 / 255, rtol=1e-6)

    def test_jpeg(self):
        buf = io.BytesIO()
        Image.new("RGB", (640, 640), (255, 255, 255)).save(buf, format="JPEG")
        assert np.allclose(im.decode_preprocess(buf.getvalue()), 1.0)

    def test_undecodable(self):
        with pytest.raises(im.DecodeError):
            im.decode_preprocess(b"not an image")

    def test_unmappable_mode(self):
        buf = io.BytesIO()
        Image.new("I;16", (4, 4)).save(buf, format="PNG")
        with pytest.raises(im.DecodeError):
            im.decode_preprocess(buf.getvalue())

    def test_noise_stays_in_unit_range(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            h, w = rng.integers(1, 48, 2)
            t = im.decode_preprocess(png(rng.integers(0, 256, (h, w, 3))))
            assert t.shape == (299, 299, 3)
            assert t.min() >= 0.0 and t.max() <= 1.0
            im.check_tensor(t)
