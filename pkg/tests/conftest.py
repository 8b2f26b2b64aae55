import numpy as np
import pytest

from cloudshape import AlphaField, BetaProfile, DetectorLine, GraphCloud

# nominal MISR camera tilts, fore and aft of nadir
MISR_ANGLES = np.sort(np.pi / 2 + np.radians([0.0, 26.1, -26.1, 45.6, -45.6, 60.0, -60.0,
                                              70.5, -70.5]))


def polar11_angles():
    c = np.cos
    vals = [1, -1, c(np.pi / 4), -c(np.pi / 4), c(np.pi / 3), -c(np.pi / 3),
            c(np.pi / 2.3), -c(np.pi / 2.3), c(np.pi / 2.1), -c(np.pi / 2.1), 0]
    return np.sort(np.arccos(np.array(vals)))


def ex4_heights(N=51):
    x = np.linspace(0.0, 10.0, N)
    return 2.5 + 0.8 * np.sin(np.pi * x / 10) + 0.2 * np.sin(2 * np.pi * x / 10 + 0.5)


def smooth_graph_state(rng, N=51, P=10):
    """Random smooth graph state away from grazing geometry."""
    from cloudshape.jacobian import StateVector

    x = np.linspace(0.0, 10.0, N)
    h = 2.5 + rng.uniform(0.3, 0.8) * np.sin(np.pi * x / 10 + rng.uniform(-0.3, 0.3)) \
        + rng.uniform(-0.15, 0.15) * np.sin(3 * np.pi * x / 10)
    xm = 0.5 * (x[1:] + x[:-1])
    a = 1.0 + rng.uniform(0.1, 0.3) * np.sin(xm / 2 + rng.uniform(0, 2 * np.pi))
    alpha = AlphaField(a, rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0))
    return StateVector(GraphCloud(0.0, 10.0, 0.0, h), alpha, BetaProfile.sine(P))


@pytest.fixture
def misr_angles():
    return MISR_ANGLES.copy()


@pytest.fixture
def flat_cloud():
    return GraphCloud(-5.0, 5.0, 0.0, np.ones(21))


@pytest.fixture
def ex4_cloud():
    return GraphCloud(0.0, 10.0, 0.0, ex4_heights())


@pytest.fixture
def desk_detector(ex4_cloud):
    return DetectorLine.covering(ex4_cloud, 6.0, 0.05, MISR_ANGLES)
