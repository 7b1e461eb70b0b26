import pytest
import torch

from dskd.backbone import build_teacher

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def teacher():
    return build_teacher("random", seed=1234)
