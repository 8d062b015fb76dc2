from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fleetplan.geometry import VehicleParams


@pytest.fixture
def params() -> VehicleParams:
    return VehicleParams()
