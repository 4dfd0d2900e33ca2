import configparser
import io
import os
import socket

import numpy as np
import pytest

from modules.lindesign import PlantModel
from modules.polyapprox import ALPHAS, NonlinearModel
from modules.scenario import parse_run_config
from modules.simloop import Mode, Scenario

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "static", "scenarios")


@pytest.fixture
def double_integrator():
    return PlantModel(A=[[1, 1], [0, 1]], B=[[0], [1]])


@pytest.fixture
def double_integrator_scenario(double_integrator):
    return Scenario(mode=Mode.LINEAR, plant=double_integrator, K=[[1, 2]], x0=[1, -1], q_sat=200, seed=7)


@pytest.fixture
def scalar_scenario():
    """Factory for the a=2, k=1.5 scalar loop."""

    def build(x0=100.0, **kwargs):
        kwargs.setdefault("q_sat", 10)
        kwargs.setdefault("mode", Mode.LINEAR)
        return Scenario(plant=PlantModel(A=[[2]], B=[[1]]), K=[[1.5]], x0=[x0], **kwargs)

    return build


@pytest.fixture
def square_scenario():
    model = NonlinearModel(a=1.2, b=1.0, alpha=ALPHAS["square"], domain=(-1.0, 1.0), k=0.7)
    return Scenario(mode=Mode.NONLINEAR, plant=model, x0=[0.8], q_sat=20, delta0=0.0525, horizon=200, seed=3)


@pytest.fixture
def scenario_config(tmp_path):
    """Copy a bundled scenario into ``tmp_path`` with its outputs redirected there."""

    def load(name, overrides=None, filename=None):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read(os.path.join(SCENARIO_DIR, name))
        for key in ("trajectory", "metrics"):
            parser["output"][key] = str(tmp_path / "out" / os.path.basename(parser["output"][key]))
        for (section, key), value in (overrides or {}).items():
            if not parser.has_section(section):
                parser.add_section(section)
            parser[section][key] = str(value)

        buffer = io.StringIO()
        parser.write(buffer)
        path = tmp_path / (filename or name)
        path.write_text(buffer.getvalue())
        return str(path), parse_run_config(buffer.getvalue())

    return load


@pytest.fixture
def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
