import pytest

from carbonserve import carbon, profiles


@pytest.fixture(scope="session")
def bundled():
    return profiles.load_bundled_profiles()


@pytest.fixture(scope="session")
def regions():
    return carbon.load_bundled_regions()
