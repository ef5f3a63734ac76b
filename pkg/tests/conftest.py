import pytest

from thermo.models import DosFamily, DosSpec


@pytest.fixture
def flat():
    return DosSpec(family=DosFamily.FLAT)


@pytest.fixture
def nanowire():
    return DosSpec(family=DosFamily.NANOWIRE)
