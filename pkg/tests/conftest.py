import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from posglab.corpus import PosPartition
from posglab.net import ModelConfig, ModelParams, init_params

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_params(cfg: ModelConfig, seed: int = 0, scale: float = 0.5) -> ModelParams:
    """Parameters with O(1) entries so that every code path carries signal."""
    rng = np.random.default_rng(seed)
    base = init_params(cfg)
    tensors = {k: v + scale * rng.standard_normal(v.shape) for k, v in base.tensors.items()}
    return ModelParams(cfg, tensors)


def random_partition(rng: np.random.Generator, vocab_size: int, n_pos: int,
                     p_extra: float = 0.2) -> PosPartition:
    """Every token gets one tag; some get extra tags; every cell is non-empty."""
    tag_sets = [{int(rng.integers(n_pos))} for _ in range(vocab_size)]
    for rho in range(n_pos):
        tag_sets[rho % vocab_size].add(rho)
    for s in tag_sets:
        for rho in range(n_pos):
            if rng.random() < p_extra:
                s.add(rho)
    return PosPartition.from_tag_sets(tag_sets, n_pos)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=13, pos_count=4, n_layers=2, n_heads=2, d_model=8, d_ff=16,
                       context_len=8, dropout_rate=0.0, seed=3)


@pytest.fixture
def tiny_params(tiny_config):
    return random_params(tiny_config, seed=1)


@pytest.fixture
def tiny_partition(tiny_config):
    return random_partition(np.random.default_rng(5), tiny_config.vocab_size, tiny_config.pos_count)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
