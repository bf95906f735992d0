import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from helpers import make_naturals  # noqa: E402

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def naturals_dir(tmp_path_factory):
    """40 synthetic 128px natural images with a manifest."""
    d = tmp_path_factory.mktemp("naturals")
    make_naturals(d, 40, size=128, seed=0)
    return d


@pytest.fixture(scope="session")
def tiny_zoo(tmp_path_factory):
    """Small zoo for unit tests: 2 architectures x 2 seeds x 12 images."""
    from archtrace.zoo import builtin_specs, make_zoo_dataset
    d = tmp_path_factory.mktemp("tiny_zoo")
    specs = [s for s in builtin_specs(64) if s.name in ("ProGAN", "InfoMaxGAN")]
    manifest = make_zoo_dataset(specs, seeds_per_arch=2, n_per_model=12, out_dir=d)
    return d, manifest
