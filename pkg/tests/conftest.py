import sys

import numpy as np
import pytest

from mres_seg.pyramid import SynthSpec, synth_slide
from mres_seg.sampler import SlideData


@pytest.fixture(scope="session")
def slide7():
    return synth_slide(SynthSpec(seed=7))


@pytest.fixture(scope="session")
def data7(slide7):
    return SlideData(*slide7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    out = {}
    for seed in (100, 101, 102):
        s, m = synth_slide(SynthSpec(seed=seed))
        out[s.id] = SlideData(s, m)
    return out


@pytest.fixture(scope="session")
def trained_small(small_corpus):
    """Dual-branch small net briefly trained at patch 64 (shared by several tests)."""
    from mres_seg import trainer as T

    cfg = T.TrainConfig(patch_size=64, max_batches_per_epoch=20)
    plan = T.StagePlan("fixture", "small", "annotated_only", ("basic_geometric",), 0.9, 6, 0.01,
                       weight_mode="static")
    pool = T.build_pool(small_corpus, cfg)
    net = T.build_network(T.network_config(plan, cfg, seed=0, dual=True))
    net, rec = T.train_stage(net, small_corpus, pool, plan, 0, cfg)
    return net, rec, cfg


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
