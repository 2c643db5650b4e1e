import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from adgen.data import TextureSpec, generate_synthetic_domain  # noqa: E402
from adgen.features import ExtractorConfig  # noqa: E402
from adgen.model import ModelConfig, build_model  # noqa: E402

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

TINY_SIZE = 32


def tiny_model_config(size=TINY_SIZE, levels=3, bifpn_repeats=1):
    return ModelConfig(
        ExtractorConfig(input_size=size, width=8, channels=8, levels=levels, bifpn_repeats=bifpn_repeats),
        latent_dim=8,
        hidden=(8, 4),
    )


@pytest.fixture
def tiny_model():
    return build_model(tiny_model_config(), seed=0)


@pytest.fixture
def tiny_model64():
    return build_model(tiny_model_config(size=64), seed=0)


@pytest.fixture(scope="session")
def tiny_domains():
    specs = [
        TextureSpec("stripes", frequency=4.0),
        TextureSpec("checker", frequency=3.0),
        TextureSpec("dots", frequency=4.0),
    ]
    return [
        generate_synthetic_domain(s, 8, 4, seed=i, size=TINY_SIZE, domain=f"d{i}", n_test_normal=3)
        for i, s in enumerate(specs)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# --- acceptance criteria summary -------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "ran": False, "detail": ""})
    if rep.failed:
        entry["ok"] = False
        if rep.when == "call":
            entry["ran"] = True
            entry["detail"] = (rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)).splitlines()[0]
    elif rep.when == "call":
        entry["ran"] = True
        entry["ok"] = entry["ok"] and rep.passed
        entry["detail"] = dict(item.user_properties).get("detail", entry["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] or not e["ok"] else "NOT RUN")
        terminalreporter.write_line(f"criterion {n}: {status}  {e['detail']}")
