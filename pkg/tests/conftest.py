import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparse4d.config import toy_config
from sparse4d.geometry import SE3, CameraModel, FrameClock
from sparse4d.sampling import FeatureQueue

settings.register_profile("ci", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy():
    return toy_config()


def look_at_camera(position, target, image_size=(64, 48), focal=40.0, strides=(4, 8)):
    """Camera at ``position`` (ego frame) looking at ``target``, z world-up."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w, h = image_size
    k = np.array([[focal, 0, (w - 1) / 2], [0, focal, (h - 1) / 2], [0, 0, 1]])
    return CameraModel(k, SE3(rot, -rot @ position), image_size, strides)


def random_queue(rng, frames=2, views=2, channels=4, strides=(4, 8), image_size=(64, 48), dtype=np.float64):
    """Small queue with cameras around the origin and random maps."""
    cams = [look_at_camera((0.0, 0.0, 1.0), (np.cos(a), np.sin(a), 1.0), image_size, strides=strides)
            for a in np.linspace(0, 2 * np.pi, views, endpoint=False)]
    maps = [[[rng.normal(size=cam.feature_shape(s) + (channels,)).astype(dtype) for s in range(len(strides))]
             for cam in cams] for _ in range(frames)]
    poses = [SE3.from_yaw(0.05 * (frames - 1 - t), (0.3 * (frames - 1 - t), 0.1, 0.0)) for t in range(frames - 1)]
    poses.append(SE3.identity())
    clock = FrameClock(tuple(0.5 * t for t in range(frames)))
    return FeatureQueue(maps, [list(cams) for _ in range(frames)], poses, clock)


def tiny_run_config(**train):
    """Toy run shrunk so a training step takes a fraction of a second."""
    cfg = toy_config().replace(model={"num_anchors": 8, "num_stages": 2, "num_learnable_keypoints": 1,
                                      "depth_bins": 8},
                               camera={"image_size": (96, 48)}, eval={"num_scenes": 2})
    return cfg.replace(train={"steps": 3, **train})


# one verdict line per acceptance criterion, echoed again after the run
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
