import math
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.spatial.transform import Rotation

from scmii.geometry import Pose6DoF, RigidTransform, from_pose, to_pose
from scmii.pointcloud import SceneSpec, gen_scene

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(rng: np.random.Generator, trans: float = 10.0, max_pitch: float = 1.2) -> Pose6DoF:
    return Pose6DoF(*rng.uniform(-trans, trans, 3), rng.uniform(-math.pi, math.pi),
                    rng.uniform(-max_pitch, max_pitch), rng.uniform(-math.pi, math.pi))


def calibration_scene(seed: int):
    """Two sensors with a random relative pose (<= 3 m, <= 20 deg yaw) over a dense scene."""
    rng = np.random.default_rng(seed)
    r, a = rng.uniform(0.5, 3.0), rng.uniform(-math.pi, math.pi)
    ref = Pose6DoF(0.0, 0.0, 4.0, 0.0, 0.0, 0.0)
    other = Pose6DoF(r * math.cos(a), r * math.sin(a), 4.0 + rng.uniform(-0.2, 0.2), 0.0, 0.0,
                     math.radians(rng.uniform(-20.0, 20.0)))
    return SceneSpec(sensors=(ref, other), seed=seed, extent=(-25.0, 25.0, -25.0, 25.0), object_count=(20, 30))


def perturbed_guess(truth_pose: Pose6DoF, seed: int, max_t: float = 0.5, max_deg: float = 5.0) -> Pose6DoF:
    """A guess within ``max_t`` metres and ``max_deg`` degrees of the truth."""
    rng = np.random.default_rng(100 + seed)
    d = rng.normal(size=3)
    d *= max_t * rng.uniform(0.5, 1.0) / np.linalg.norm(d)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = Rotation.from_rotvec(axis * math.radians(max_deg) * rng.uniform(0.5, 1.0)).as_matrix()
    t = from_pose(truth_pose)
    g = RigidTransform.from_rt(rot @ t.rotation, t.translation + d)
    return to_pose(g)


@pytest.fixture(scope="session")
def small_scene():
    return gen_scene(SceneSpec(seed=3))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
