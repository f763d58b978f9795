"""
Pytest configuration and fixtures
"""
import sys
from pathlib import Path

import pytest

# Add src directory to Python path for all tests
src_path = Path(__file__).parent.parent / "src"
sys.path.insert(0, str(src_path))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def tiny_config():
    """Scaled-down network widths that run in seconds on a CPU"""
    from network import NetworkConfig
    return NetworkConfig.tiny()


@pytest.fixture
def phantom32():
    """Normalized 32^3 phantom with its labels"""
    from volume_io import PhantomSpec, generate_phantom, normalize
    volume, labels = generate_phantom(PhantomSpec(size=(32, 32, 32), seed=3))
    return normalize(volume), labels
