from pathlib import Path

import numpy as np
import pytest

from bfscnn import model
from bfscnn.spectra import SimRanges, SweepRange

DESK_CHECKPOINT = Path(__file__).resolve().parents[1] / "checkpoints" / "desk.bfsn"


def units(net):
    return [net.stem] + [u for b in net.blocks for u in b.units] + list(net.head)


def calibrate(net, seed=0, traces=16, batch=2):
    """Set running BN statistics to those of one simulated batch so activations stay alive."""
    cfg = model.TrainConfig(batch_size=batch, traces=traces)
    x, _ = model.sample_batch(cfg, SimRanges(), SweepRange(n_points=net.spec.n_freq),
                              np.random.default_rng([seed, 9]))
    saved = [(u.bn, u.bn.momentum) for u in units(net) if u.bn is not None]
    for bn, _ in saved:
        bn.momentum = 0.0
    net.forward(x, "train")
    for bn, m in saved:
        bn.momentum = m
    return net


@pytest.fixture(scope="session")
def desk_checkpoint():
    if not DESK_CHECKPOINT.exists():
        pytest.fail(f"missing trained checkpoint {DESK_CHECKPOINT}; run scripts/train_desk.sh")
    return model.load_checkpoint(DESK_CHECKPOINT)


ACCEPTANCE = []


def record(criterion, ok, detail):
    """Keep one verdict line per acceptance criterion for the end-of-run summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
