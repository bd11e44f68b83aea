import hypothesis
import numpy as np
import pytest

from dynamics import Solenoid, ToralAutomorphism
from leafgeom import build_rectangle
from srb import distortion_constants, srb_tables

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.load_profile("fast")


@pytest.fixture(scope="session")
def cat():
    return ToralAutomorphism()


@pytest.fixture(scope="session")
def solenoid():
    return Solenoid()


@pytest.fixture(scope="session")
def cat_rect(cat):
    """Four uniform leaves with equal weights."""
    rect = build_rectangle(cat, np.array([0.3, 0.4]), 4, 0.05, eps=0.25, h=0.25 / 64)
    return rect.with_weights(np.full(4, 0.25))


@pytest.fixture(scope="session")
def cat_dc(cat):
    return distortion_constants(cat, 0.0, 1.0, 0.25)


@pytest.fixture(scope="session")
def cat_tables(cat, cat_rect, cat_dc):
    return srb_tables(cat, cat_rect, 20, cat_dc)
