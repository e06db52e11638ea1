import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.config import slow_tests_enabled  # noqa: E402
from src.model import ModelConfig  # noqa: E402
from src.phantom import DomainShift, PhantomConfig, generate_phantom_cohort  # noqa: E402

# torch forward passes make the default 200 ms deadline flaky
settings.register_profile("workbench", deadline=None)
if "CI" in os.environ:
    settings.register_profile("ci", deadline=None, max_examples=settings.default.max_examples * 5)
    settings.load_profile("ci")
else:
    settings.load_profile("workbench")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long phantom runs, enabled with WORKBENCH_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if slow_tests_enabled():
        return
    skip_slow = pytest.mark.skip(reason="set WORKBENCH_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_phantom():
    return PhantomConfig(n_patients=4, slices_per_patient=8, height=16, width=16,
                         b_values=[0.0, 800.0], domain_shift=DomainShift(b_values=[100.0, 800.0]))


@pytest.fixture
def source_cohort(tiny_phantom):
    return generate_phantom_cohort(tiny_phantom, "source")


@pytest.fixture
def target_cohort(tiny_phantom):
    return generate_phantom_cohort(tiny_phantom, "target")


@pytest.fixture
def tiny_model_config():
    return ModelConfig(n_levels=2, base_channels=4, height=16, width=16)
