"""The client package's remote-refine path against a live mock-mode bridge.

These are the cross-package acceptance checks: the bridge is started for
real (HTTP over a loopback socket, ephemeral port) and driven through
``marginpipe``'s remote backend, so both sides of the wire protocol are
the shipped implementations. The client package itself never depends on
this service; its own suite runs with no bridge present, which the last
test pins down.
"""

from pathlib import Path

import numpy as np
import pytest

pytest.importorskip("marginpipe")

from marginpipe.errors import BackendUnavailableError, RemoteProtocolError
from marginpipe.refinement import RefinementConfig, RemoteClient, compute_bbox, refine

from test_bridge_contract import running_bridge

REPO_ROOT = Path(__file__).resolve().parents[2]


@pytest.fixture
def scene():
    """A grayscale image with a blobby coarse mask to refine."""
    rng = np.random.default_rng(5)
    image = rng.integers(0, 255, size=(96, 120), dtype=np.uint8)
    mask = np.zeros((96, 120), dtype=np.uint8)
    yy, xx = np.mgrid[0:96, 0:120]
    mask[(yy - 50) ** 2 + (xx - 70) ** 2 <= 20**2] = 1
    return image, mask


def remote_cfg(endpoint: str) -> RefinementConfig:
    return RefinementConfig(backend="remote", endpoint=endpoint)


def test_remote_refine_echo_and_box_fill_against_live_bridge(scene):
    image, coarse = scene
    with running_bridge() as (endpoint, service):
        cfg = remote_cfg(endpoint)
        result = refine(image, coarse, cfg)

        # stage 2 conditions on the coarse mask, and mock mode echoes it
        np.testing.assert_array_equal(result.m2, coarse)

        # stage 1 must be exactly the padded bounding box, filled
        box = compute_bbox(coarse, cfg.delta_w, cfg.delta_h)
        x_min, y_min, x_max, y_max = box.as_xyxy()
        expected = np.zeros_like(coarse)
        expected[y_min : y_max + 1, x_min : x_max + 1] = 1
        np.testing.assert_array_equal(result.m1, expected)

        assert result.backend == "remote"
        assert service.backend_name == "mock"
        # both stages shared one session, so the bridge initialized once
        assert [s.inits for s in service._sessions.values()] == [1]


def test_bridge_rejects_dim_mismatched_prompt_no_partial_result(scene):
    image, _ = scene
    wrong = np.ones((40, 40), dtype=np.uint8)
    with running_bridge() as (endpoint, _):
        client = RemoteClient(endpoint, timeout_ms=5000, max_inflight=2)
        with pytest.raises(RemoteProtocolError):
            client.refine_mask(image, wrong, session="bad-dims")


def test_health_gating_checked_once_and_refuses_down_bridge(scene):
    image, coarse = scene
    with running_bridge() as (endpoint, service):
        cfg = remote_cfg(endpoint)
        client = RemoteClient(cfg.endpoint, cfg.timeout_ms, cfg.max_inflight)
        for _ in range(3):
            refine(image, coarse, cfg, client=client)
        assert service.health_requests == 1  # gate once, then trust the session

    # the same endpoint after shutdown: refused before any refine call
    with pytest.raises(BackendUnavailableError):
        refine(image, coarse, remote_cfg(endpoint))


def test_primary_package_never_imports_the_bridge():
    sources = list((REPO_ROOT / "src").rglob("*.py"))
    sources += (REPO_ROOT / "tests").glob("*.py")
    assert sources, "expected to find the client package next to bridge/"
    offenders = [p for p in sources if "sam_bridge" in p.read_text()]
    assert offenders == [], f"client code mentions the bridge package: {offenders}"
