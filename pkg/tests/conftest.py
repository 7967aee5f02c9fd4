import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

from bcg2ecg.transformer import ModelConfig, init_params  # noqa: E402


@pytest.fixture
def tiny_config():
    return ModelConfig(seq_len=16, d_model=8, n_layers=1, n_heads=2, d_ff=16)


def perturbed_params(config, seed=0, dtype=np.float64):
    """Glorot weights with random biases and gains so every path carries signal."""
    params = init_params(config, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for name in params.names():
        if name.endswith(("bias", ".b1", ".b2")):
            params[name] = rng.normal(0, 0.1, params[name].shape).astype(dtype)
        elif name.endswith(".gain"):
            params[name] = (1 + rng.normal(0, 0.1, params[name].shape)).astype(dtype)
    return params


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
