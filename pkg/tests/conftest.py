import pytest
import torch

from retmask.model import ModelConfig, init_params
from retmask.tasks import TaskVocab

torch.set_num_threads(1)


@pytest.fixture
def vocab():
    return TaskVocab()


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=64, n_layers=2, n_heads=4, d_model=32, d_mlp=64, max_seq_len=64, rng_seed=7)


@pytest.fixture
def tiny(tiny_cfg):
    return init_params(tiny_cfg)


def randomize(params, seed=0, scale=0.3):
    """Large random weights so that attention patterns are far from uniform."""
    g = torch.Generator().manual_seed(seed)
    out = params.clone()
    for k, t in out.tensors.items():
        out.tensors[k] = (torch.randn(t.shape, generator=g, dtype=torch.float64) * scale).to(t.dtype)
    return out


@pytest.fixture(scope="session")
def pretrained():
    """Default-architecture model pretrained once per session (about a minute)."""
    from retmask.train import PretrainConfig, pretrain
    v = TaskVocab()
    params = init_params(ModelConfig(vocab_size=v.size, rng_seed=0))
    out, report = pretrain(params, v, PretrainConfig(rng_seed=0))
    return out, report


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
