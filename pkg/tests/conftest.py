import numpy as np
import pytest

from ballseg import model as mdl
from ballseg.data import synth_dataset
from ballseg.training import TrainConfig, _epoch_batches, mean_loss, split_train_val, train

from fixtures import SMOKE, SMOKE_NET


@pytest.fixture(scope="session")
def smoke():
    return split_train_val(synth_dataset(20, 4, seed=0), 0)


@pytest.fixture(scope="session")
def smoke_run(smoke):
    """(initial train loss, best weights, history) of the smoke training run."""
    tr, va = smoke
    cfg = TrainConfig(**SMOKE)
    w0 = mdl.build_network(SMOKE_NET, cfg.seed)
    initial = float(np.mean([mean_loss(w0, x, m, 4) for x, m in _epoch_batches(tr, cfg, 0)]))
    weights, history = train(tr, va, SMOKE_NET, cfg)
    return initial, weights, history


def pytest_terminal_summary(terminalreporter):
    import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
