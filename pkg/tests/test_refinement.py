"""Refinement: prompt math, morphology oracles, and the remote-client wire contract."""

import base64
import contextlib
import io
import json
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from marginpipe.errors import (
    BackendTimeoutError,
    BackendUnavailableError,
    ConfigError,
    ContractError,
    EmptyMaskError,
    RemoteProtocolError,
    ShapeError,
)
from marginpipe.phantom import PhantomConfig, generate_sample
from marginpipe.refinement import (
    BBoxPrompt,
    RefineResult,
    RefinementConfig,
    RemoteClient,
    _dilate,
    _erode,
    compute_bbox,
    decode_mask_png,
    encode_mask_png,
    morph_refine,
    refine,
)


def full_box(shape):
    return BBoxPrompt(0, 0, shape[1] - 1, shape[0] - 1)


# ---------------------------------------------------------------------------
# mock bridge, built directly on PIL so the wire format is checked against an
# independent encode/decode path


@contextlib.contextmanager
def mock_bridge(mode="standard", sleep_s=0.0, health="ok"):
    state = {"current": 0, "max_concurrent": 0, "lock": threading.Lock()}

    def png_to_array(b64):
        img = Image.open(io.BytesIO(base64.b64decode(b64)))
        return np.array(img.convert("L"))

    def mask_to_png(mask):
        buf = io.BytesIO()
        Image.fromarray((mask * 255).astype(np.uint8), "L").convert("1").save(buf, "PNG")
        return base64.b64encode(buf.getvalue()).decode("ascii")

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, code, body: bytes, ctype="application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/v1/health":
                self._send(200, json.dumps({"status": health, "backend": "mock"}).encode())
            else:
                self._send(404, b"{}")

        def do_POST(self):
            with state["lock"]:
                state["current"] += 1
                state["max_concurrent"] = max(state["max_concurrent"], state["current"])
            try:
                time.sleep(sleep_s)
                payload = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                if mode == "http_504":
                    return self._send(504, b'{"error": "model timeout"}')
                if mode == "http_400":
                    return self._send(400, b'{"error": "malformed"}')
                if mode == "bad_json":
                    return self._send(200, b"this is not json")
                img = png_to_array(payload["image"])
                if mode == "dim_mismatch":
                    out = np.ones((10, 10), dtype=np.uint8)
                elif payload["prompt_type"] == "box":
                    x0, y0, x1, y1 = payload["box"]
                    out = np.zeros(img.shape, dtype=np.uint8)
                    out[y0 : y1 + 1, x0 : x1 + 1] = 1
                else:
                    mask_img = Image.open(io.BytesIO(base64.b64decode(payload["mask"])))
                    out = (np.array(mask_img.convert("1")) > 0).astype(np.uint8)
                self._send(200, json.dumps({"mask": mask_to_png(out), "score": 0.9}).encode())
            finally:
                with state["lock"]:
                    state["current"] -= 1

    class QuietServer(ThreadingHTTPServer):
        def handle_error(self, request, client_address):
            # clients hang up on purpose here (timeouts, inflight caps);
            # late writes then fail and must not spam stderr
            if not isinstance(sys.exc_info()[1], ConnectionError):
                super().handle_error(request, client_address)

    server = QuietServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}", state
    finally:
        server.shutdown()
        server.server_close()


# ---------------------------------------------------------------------------
# bounding box


def test_bbox_exact_hand_case():
    m = np.zeros((64, 64), np.uint8)
    m[10:21, 30:41] = 1
    assert compute_bbox(m, 0, 0).as_xyxy() == (30, 10, 40, 20)


def test_bbox_single_pixel_clamped_low():
    m = np.zeros((32, 32), np.uint8)
    m[0, 0] = 1
    assert compute_bbox(m, 5, 5).as_xyxy() == (0, 0, 5, 5)


def test_bbox_clamped_high():
    m = np.zeros((20, 30), np.uint8)
    m[19, 29] = 1
    assert compute_bbox(m, 10, 10).as_xyxy() == (19, 9, 29, 19)


def test_bbox_empty_mask_rejected():
    with pytest.raises(EmptyMaskError):
        compute_bbox(np.zeros((8, 8), np.uint8))


def test_bbox_negative_padding_rejected():
    m = np.ones((8, 8), np.uint8)
    with pytest.raises(ContractError):
        compute_bbox(m, -1, 0)


def test_bbox_type_invariants():
    with pytest.raises(ContractError):
        BBoxPrompt(5, 0, 2, 9)
    with pytest.raises(ContractError):
        BBoxPrompt(-1, 0, 2, 9)


def test_bbox_contains_all_positives(rng):
    for _ in range(1000):
        h, w = rng.integers(4, 40, size=2)
        m = (rng.random((h, w)) > rng.uniform(0.5, 0.99)).astype(np.uint8)
        if not m.any():
            continue
        dw, dh = rng.integers(0, 15, size=2)
        box = compute_bbox(m, int(dw), int(dh))
        ys, xs = np.nonzero(m)
        assert box.y_min <= ys.min() and ys.max() <= box.y_max
        assert box.x_min <= xs.min() and xs.max() <= box.x_max
        assert 0 <= box.x_min and box.x_max < w and 0 <= box.y_min and box.y_max < h


# ---------------------------------------------------------------------------
# morphology


def test_disk_morphology_matches_binary_ops(rng):
    # dual route: distance-transform thresholds vs scipy structuring-element
    # ops with the matching border values
    def disk(r):
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return yy * yy + xx * xx <= r * r

    for _ in range(50):
        m = rng.random((40, 40)) > 0.6
        r = int(rng.integers(1, 6))
        assert np.array_equal(_dilate(m, r), ndimage.binary_dilation(m, disk(r), border_value=0))
        assert np.array_equal(_erode(m, r), ndimage.binary_erosion(m, disk(r), border_value=1))


def test_morph_empty_and_full_fixed_points():
    empty = np.zeros((64, 64), np.uint8)
    assert morph_refine(empty, full_box(empty.shape)).sum() == 0
    full = np.ones((64, 64), np.uint8)
    assert np.array_equal(morph_refine(full, full_box(full.shape)), full)


def test_morph_speckles_removed_block_preserved(rng):
    m = np.zeros((100, 100), np.uint8)
    m[25:75, 25:75] = 1
    speckles = [(5, 5), (5, 90), (90, 8), (12, 50), (95, 95)]
    for y, x in speckles:
        m[y, x] = 1
    out = morph_refine(m, full_box(m.shape), radius=2, min_area=25)
    for y, x in speckles:
        assert out[y, x] == 0
    assert np.all(out[27:73, 27:73] == 1)  # block interior intact
    assert np.all(out <= m)  # nothing invented outside the block


def test_morph_min_area_drops_small_components():
    m = np.zeros((64, 64), np.uint8)
    m[5:9, 5:9] = 1  # 16 px, below the 25 px floor
    m[30:40, 30:40] = 1
    out = morph_refine(m, full_box(m.shape), radius=1, min_area=25)
    assert out[:15, :15].sum() == 0
    assert np.all(out[31:39, 31:39] == 1)


def test_morph_bbox_filter_drops_outside_components():
    m = np.zeros((64, 64), np.uint8)
    m[5:20, 5:20] = 1
    m[40:60, 40:60] = 1
    box = BBoxPrompt(0, 0, 25, 25)
    out = morph_refine(m, box, radius=1, min_area=25)
    assert out[40:60, 40:60].sum() == 0
    assert out[5:20, 5:20].sum() > 0


def test_morph_thin_structures_vanish():
    m = np.zeros((64, 64), np.uint8)
    m[30:33, 10:50] = 1  # 3 px tall, well under the 10 px erosion diameter
    assert morph_refine(m, full_box(m.shape), radius=5, min_area=25).sum() == 0


def test_morph_idempotent(rng):
    for i in range(200):
        h, w = int(rng.integers(24, 56)), int(rng.integers(24, 56))
        kind = i % 3
        if kind == 0:
            m = ndimage.gaussian_filter(rng.random((h, w)), 3) > rng.uniform(0.45, 0.55)
        elif kind == 1:
            m = rng.random((h, w)) > 0.9
        else:
            m = np.zeros((h, w), bool)
            for _ in range(int(rng.integers(1, 4))):
                y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
                s = int(rng.integers(3, 12))
                m[y : y + s, x : x + s] = True
        box = full_box((h, w))
        once = morph_refine(m.astype(np.uint8), box, radius=3, min_area=10)
        twice = morph_refine(once, box, radius=3, min_area=10)
        assert np.array_equal(once, twice)


def test_morph_radius_validated():
    with pytest.raises(ContractError):
        morph_refine(np.ones((8, 8), np.uint8), full_box((8, 8)), radius=0)


# ---------------------------------------------------------------------------
# orchestration, morphological backend


def test_refine_smooth_mask_is_fixed_point(rng):
    blob = (ndimage.gaussian_filter(rng.random((128, 128)), 6) > 0.5).astype(np.uint8)
    cfg = RefinementConfig()
    smooth = morph_refine(blob, compute_bbox(blob, cfg.delta_w, cfg.delta_h),
                          cfg.radius, cfg.min_area)
    assert smooth.any()
    res = refine(np.ones((128, 128), np.uint8), smooth, cfg)
    assert np.array_equal(res.m2, smooth)


def test_refine_rectangle_rounds_only_corners():
    # Disk opening shaves rectangle corners; everything else must be exact.
    rect = np.zeros((128, 128), np.uint8)
    rect[40:80, 40:80] = 1
    res = refine(np.ones((128, 128), np.uint8), rect, RefinementConfig(radius=5))
    changed = np.argwhere(rect != res.m2)
    assert np.all(res.m2 <= rect)
    corners = np.array([(40, 40), (40, 79), (79, 40), (79, 79)])
    for y, x in changed:
        cheb = np.abs(corners - (y, x)).max(axis=1).min()
        assert cheb <= 5
    assert len(changed) <= 4 * 25


def test_refine_all_ones_fixed_point():
    ones = np.ones((96, 96), np.uint8)
    res = refine(ones * 200, ones, RefinementConfig())
    assert np.array_equal(res.m1, ones)
    assert np.array_equal(res.m2, ones)


def test_refine_result_fields_and_m1_equals_m2(rng):
    mc = (ndimage.gaussian_filter(rng.random((64, 64)), 4) > 0.5).astype(np.uint8)
    if not mc.any():
        mc[30:40, 30:40] = 1
    res = refine(np.zeros((64, 64), np.uint8), mc, RefinementConfig())
    assert isinstance(res, RefineResult)
    assert res.backend == "morphological"
    assert res.m1.shape == res.m2.shape == mc.shape
    assert np.array_equal(res.m1, res.m2)
    assert len(res.latency_ms) == 2 and all(t >= 0 for t in res.latency_ms)


def test_refine_deterministic_and_nonmutating(rng):
    img = rng.integers(0, 255, (64, 64)).astype(np.uint8)
    mc = np.zeros((64, 64), np.uint8)
    mc[10:40, 20:50] = 1
    mc[50, 50] = 1
    img_copy, mc_copy = img.copy(), mc.copy()
    r1 = refine(img, mc, RefinementConfig())
    r2 = refine(img, mc, RefinementConfig())
    assert np.array_equal(r1.m2, r2.m2)
    assert np.array_equal(img, img_copy) and np.array_equal(mc, mc_copy)


def test_refine_input_validation():
    cfg = RefinementConfig()
    with pytest.raises(EmptyMaskError):
        refine(np.zeros((32, 32), np.uint8), np.zeros((32, 32), np.uint8), cfg)
    with pytest.raises(ShapeError):
        refine(np.zeros((32, 32), np.uint8), np.ones((16, 16), np.uint8), cfg)
    with pytest.raises(ContractError):
        refine(np.zeros((32, 32), np.float32), np.ones((32, 32), np.uint8), cfg)


def test_refine_improves_dsc_on_corrupted_phantom_masks(rng):
    from marginpipe.metrics import dsc

    cfg = PhantomConfig(image_size=192, band_width=16, seed=21)
    before, after = [], []
    for i in range(4):
        sample = generate_sample(cfg, i)
        gt = (sample.mask >= 2).astype(np.uint8)
        noisy = gt.copy()
        salt = rng.random(gt.shape) > 0.997
        noisy[salt] = 1
        for _ in range(6):  # punch small holes
            y, x = rng.integers(10, 180, size=2)
            noisy[y : y + 4, x : x + 4] = 0
        res = refine(sample.image, noisy, RefinementConfig())
        before.append(dsc(noisy, gt))
        after.append(dsc(res.m2, gt))
    assert np.mean(after) > np.mean(before)


def test_refinement_config_validation():
    with pytest.raises(ConfigError):
        RefinementConfig(backend="neural")
    with pytest.raises(ConfigError):
        RefinementConfig(radius=0)
    with pytest.raises(ConfigError):
        RefinementConfig(delta_w=-1)
    with pytest.raises(ConfigError):
        RefinementConfig(timeout_ms=0)
    with pytest.raises(ConfigError):
        RefinementConfig(max_inflight=0)


# ---------------------------------------------------------------------------
# wire encoding


def test_wire_mask_round_trip(rng):
    m = (rng.random((33, 47)) > 0.5).astype(np.uint8)
    assert np.array_equal(decode_mask_png(encode_mask_png(m)), m)


def test_wire_garbage_rejected():
    with pytest.raises(RemoteProtocolError):
        decode_mask_png("!!!not base64!!!")
    with pytest.raises(RemoteProtocolError):
        decode_mask_png(base64.b64encode(b"not a png").decode())


# ---------------------------------------------------------------------------
# remote backend


def make_mc(shape=(48, 48)):
    mc = np.zeros(shape, np.uint8)
    mc[10:30, 12:36] = 1
    return mc


def test_remote_echo_returns_mc():
    mc = make_mc()
    img = np.full(mc.shape, 90, np.uint8)
    with mock_bridge() as (endpoint, _):
        cfg = RefinementConfig(backend="remote", endpoint=endpoint, timeout_ms=2000)
        res = refine(img, mc, cfg)
    assert np.array_equal(res.m2, mc)
    assert res.backend == "remote"


def test_remote_box_stage_fills_padded_box():
    mc = make_mc()
    img = np.full(mc.shape, 90, np.uint8)
    with mock_bridge() as (endpoint, _):
        cfg = RefinementConfig(backend="remote", endpoint=endpoint, delta_w=2, delta_h=3)
        res = refine(img, mc, cfg)
    expected = np.zeros(mc.shape, np.uint8)
    expected[7:33, 10:38] = 1
    assert np.array_equal(res.m1, expected)


def test_remote_down_is_refused_by_health_gate():
    client = RemoteClient("http://127.0.0.1:9", timeout_ms=500)
    with pytest.raises(BackendUnavailableError):
        client.refine_box(np.zeros((8, 8), np.uint8), BBoxPrompt(0, 0, 3, 3), "s")


def test_remote_unhealthy_status_is_refused():
    with mock_bridge(health="degraded") as (endpoint, _):
        client = RemoteClient(endpoint, timeout_ms=2000)
        with pytest.raises(BackendUnavailableError):
            client.refine_mask(np.zeros((8, 8), np.uint8), np.ones((8, 8), np.uint8), "s")


def test_remote_dim_mismatch_names_failing_stage():
    mc = make_mc()
    with mock_bridge(mode="dim_mismatch") as (endpoint, _):
        cfg = RefinementConfig(backend="remote", endpoint=endpoint)
        with pytest.raises(RemoteProtocolError, match="box-prompt stage"):
            refine(np.zeros(mc.shape, np.uint8), mc, cfg)


def test_remote_504_maps_to_timeout_error():
    with mock_bridge(mode="http_504") as (endpoint, _):
        client = RemoteClient(endpoint)
        with pytest.raises(BackendTimeoutError):
            client.refine_mask(np.zeros((8, 8), np.uint8), np.ones((8, 8), np.uint8), "s")


def test_remote_400_maps_to_protocol_error():
    with mock_bridge(mode="http_400") as (endpoint, _):
        client = RemoteClient(endpoint)
        with pytest.raises(RemoteProtocolError):
            client.refine_mask(np.zeros((8, 8), np.uint8), np.ones((8, 8), np.uint8), "s")


def test_remote_non_json_body_rejected():
    with mock_bridge(mode="bad_json") as (endpoint, _):
        client = RemoteClient(endpoint)
        with pytest.raises(RemoteProtocolError):
            client.refine_mask(np.zeros((8, 8), np.uint8), np.ones((8, 8), np.uint8), "s")


def test_remote_slow_response_times_out():
    with mock_bridge(sleep_s=1.5) as (endpoint, _):
        client = RemoteClient(endpoint, timeout_ms=300)
        with pytest.raises(BackendTimeoutError):
            client.refine_mask(np.zeros((8, 8), np.uint8), np.ones((8, 8), np.uint8), "s")


def test_remote_inflight_cap_respected():
    img = np.zeros((8, 8), np.uint8)
    mask = np.ones((8, 8), np.uint8)
    with mock_bridge(sleep_s=0.25) as (endpoint, state):
        client = RemoteClient(endpoint, timeout_ms=5000, max_inflight=1)
        client.ensure_healthy()
        threads = [
            threading.Thread(target=client.refine_mask, args=(img, mask, f"s{i}"))
            for i in range(3)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert state["max_concurrent"] == 1
