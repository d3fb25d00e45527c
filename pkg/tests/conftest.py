import sys
import time

import pytest

from sqdf_lab.consistency import ConsistencyModel, distill
from sqdf_lab.diffcalc import MlpParams, OptimizerState, seed_rng, spawn_rng
from sqdf_lab.diffusion import DiffusionModel, default_gmm, make_schedule, pretrain

PRETRAIN_STEPS = 6000
DISTILL_STEPS = 8000


@pytest.fixture
def sched():
    return make_schedule()


@pytest.fixture
def spec():
    return default_gmm()


@pytest.fixture
def rng():
    return seed_rng(1234)


def micro_model(sched, seed=0, hidden=2, role="pretrained-reference", scale=0.5):
    """Tiny eps-network (5 -> hidden -> 2) with non-zero biases, for finite-difference checks."""
    r = seed_rng(seed)
    net = MlpParams.init((5, hidden, 2), r)
    net.weights = [w * scale * 2 for w in net.weights]
    net.biases = [r.standard_normal(b.shape) * 0.1 for b in net.biases]
    return DiffusionModel(sched, net, role)


def micro_consistency(sched, spec, seed=5, hidden=3):
    r = seed_rng(seed)
    cm = ConsistencyModel.init(sched, spec.data_std, r, widths=(5, hidden, 2))
    cm.net.biases = [r.standard_normal(b.shape) * 0.1 for b in cm.net.biases]
    return cm


class Trained:
    """Pretrained reference + distilled consistency model, built once per session."""

    def __init__(self):
        t0 = time.perf_counter()
        self.sched = make_schedule()
        self.spec = default_gmm()
        self.model = DiffusionModel.init(self.sched, spawn_rng(0, "pretrain", "init"))
        self.pretrain_losses = pretrain(self.model, self.spec, PRETRAIN_STEPS, 256, spawn_rng(0, "pretrain", "train"),
                                        OptimizerState(lr=2e-3, weight_decay=0.0), lr_final=1e-4)
        cm = ConsistencyModel.init(self.sched, self.spec.data_std, spawn_rng(0, "distill", "init"))
        self.cm, self.distill_losses = distill(cm, self.model, self.spec, DISTILL_STEPS, 256,
                                               spawn_rng(0, "distill", "train"),
                                               OptimizerState(lr=1e-3, weight_decay=0.0), lr_final=1e-4)
        self.build_seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained():
    return Trained()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
