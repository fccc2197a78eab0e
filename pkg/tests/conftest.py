import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dualview_fuse.core import BBox, Detection, Source, Vocabulary  # noqa: E402
from dualview_fuse.synth import SceneSpec, generate_dataset, occlusion_benchmark_spec  # noqa: E402


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth10")
    return generate_dataset(SceneSpec(rng_seed=11), 10, root)


@pytest.fixture(scope="session")
def occlusion_ds(tmp_path_factory):
    """40 scenes, one UM each, UM hidden from the main view half the time."""
    root = tmp_path_factory.mktemp("occ40")
    return generate_dataset(occlusion_benchmark_spec(seed=5), 40, root)


@pytest.fixture
def det(vocab):
    def make(x1, y1, x2, y2, cat="UM", score=0.9, source=Source.MAIN_VIEW):
        return Detection(BBox(x1, y1, x2, y2), vocab.get(cat), score, source)

    return make
