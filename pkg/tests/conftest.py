import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def desk_weights():
    """Fitted blobs2d INRs from the desk profile, keyed by class label (0, 1, 2)."""
    from weightforge import config as C
    from weightforge.datasets import item_seeds, make_signal
    from weightforge.inr import fit_many

    cfg = C.desk_profile()
    d = cfg.dataset
    arch = cfg.architecture()
    signals, labels, seeds = [], [], []
    for c in range(d.classes):
        for j in range(d.per_class):
            s_sig, s_fit = item_seeds(cfg.seed, c, j, d.shared_init)
            signals.append(make_signal(d.kind, c, d.classes, np.random.default_rng(s_sig), d.resolution))
            labels.append(str(c))
            seeds.append(s_fit)
    res = fit_many(signals, arch, d.fit_steps, d.fit_lr, seeds, labels)
    out = {c: [] for c in range(d.classes)}
    for w in res.weights:
        out[int(w.class_label)].append(w)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance") and hasattr(m, "RESULTS")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
