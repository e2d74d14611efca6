import json
import sys
from pathlib import Path
from typing import Any, Dict

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from services.geometry import build_grid, parse_domain  # noqa: E402
from services.model import Problem, boundary_data_from_preset, coefficients_from_preset  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-resolution acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-resolution acceptance check (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_problem(preset: str = "isotropic_quadratic", data: str = "x1_squared", domain: str = "ball:1",
                 value=None, semilinear=None) -> Problem:
    return Problem(parse_domain(domain), coefficients_from_preset(preset),
                   boundary_data_from_preset(data, value), semilinear)


def config_dict(**overrides: Any) -> Dict[str, Any]:
    """Small, fast experiment config; nested blocks are merged one level deep."""
    base: Dict[str, Any] = {
        "schema_version": 1,
        "experiment": "quasipotential",
        "problem": {"domain": "ball:1", "coefficients": {"preset": "isotropic_quadratic"},
                    "boundary_data": {"preset": "x1_squared"}},
        "grid": {"h": 1.0 / 24.0, "stencil_order": 2},
        "eps": [0.1, 0.07, 0.05],
        "lambdas": [0.3, 0.7],
        "time_grid": {"t_min": 0.01, "n_steps": 60},
        "cache_dir": None,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base


def write_config(path: Path, **overrides: Any) -> Path:
    path.write_text(json.dumps(config_dict(**overrides)), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def ball():
    return parse_domain("ball:1")


@pytest.fixture(scope="session")
def ellipse():
    return parse_domain("ellipse:1,0.7071067811865476")


@pytest.fixture(scope="session")
def iso_problem():
    return make_problem("isotropic_quadratic")


@pytest.fixture(scope="session")
def aniso_problem():
    return make_problem("anisotropic_quadratic")


@pytest.fixture(scope="session")
def coarse_grid(ball):
    return build_grid(ball, 1.0 / 32.0)


@pytest.fixture(scope="session")
def fine_grid(ball):
    return build_grid(ball, 1.0 / 128.0)
