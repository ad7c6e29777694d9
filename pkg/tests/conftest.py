import pytest
import torch

from maskanim.core import PipelineConfig
from maskanim.data import ToySpec, generate_toy_dataset
from maskanim.networks import build_models


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    generate_toy_dataset(ToySpec(4, 8, 64, "square", "solid", "drift", seed=7), root, "train")
    generate_toy_dataset(ToySpec(2, 8, 64, "square", "solid", "drift", seed=8), root, "test")
    return root


@pytest.fixture()
def toy_config():
    return PipelineConfig.toy(seed=5)


@pytest.fixture(scope="session")
def toy_bundle():
    # untrained tiny bundle for contract tests; never mutated
    return build_models(PipelineConfig.toy(seed=5))
