import numpy as np
import pytest

from shr.confmap import synth_scene
from shr.geometry import PoseHypothesis, euler_to_rotation, fixture_model


@pytest.fixture(scope="session")
def model():
    return fixture_model()


def frontal_pose(yaw=0.0, pitch=0.0, roll=0.0, scale=48.0, t=(80.0, 80.0)):
    return PoseHypothesis(scale, euler_to_rotation(yaw, pitch, roll), np.array(t))


@pytest.fixture(scope="session")
def clean_scene(model):
    return synth_scene(model, frontal_pose(), 0.0, seed=3, detection_jitter=0.0,
                       amplitude_range=(1.0, 1.0))


def pytest_terminal_summary(terminalreporter):
    from tests_acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_bits(model):
    """Visibility model and reference database fitted on a small scene stream."""
    from shr.confmap import OCCLUSION_LEVELS, random_pose
    from shr.harness import build_reference_db, visibility_training_data
    from shr.visibility import fit_visibility_model

    rng = np.random.default_rng(1234)
    scenes = [synth_scene(model, random_pose(rng), OCCLUSION_LEVELS[i % 6], 5000 + i)
              for i in range(60)]
    vis = fit_visibility_model(*visibility_training_data(scenes))
    db = build_reference_db([s for s in scenes if s.occlusion_fraction == 0])
    return vis, db
