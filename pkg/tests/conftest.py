import numpy as np
import pytest

from slackbench.devices import Bimodal, Deterministic, DeviceModel, Normal, OperationSpec
from slackbench.power import IODVSPolicy


def random_model(seed: int) -> DeviceModel:
    """A small device with random timing family, currents and wait shape."""
    rng = np.random.default_rng(seed)
    wc = float(rng.uniform(0.5e-3, 8e-3))
    kind = rng.integers(3)
    if kind == 0:
        completion = Deterministic(float(rng.uniform(0.05, 0.95)) * wc)
    elif kind == 1:
        completion = Normal(float(rng.uniform(0.2, 0.8)) * wc, float(rng.uniform(0.0, 0.3)) * wc)
    else:
        hit = float(rng.uniform(0.05, 0.4)) * wc
        completion = Bimodal(hit, float(rng.uniform(hit / wc + 0.05, 1.1)) * wc, float(rng.uniform(0.05, 0.95)))
    idle = float(rng.uniform(0.5e-3, 5e-3))
    spec = OperationSpec(
        worst_case_wait=wc,
        completion=completion,
        active_duration=float(rng.uniform(0.05e-3, 0.4e-3)),
        verify_duration=float(rng.uniform(0.05e-3, 0.4e-3)),
        active_current=idle * float(rng.uniform(1.0, 4.0)),
        wait_current=idle * float(rng.uniform(1.3, 6.0)),
        verify_current=idle * float(rng.uniform(1.0, 4.0)),
        wait_shape=str(rng.choice(["constant", "stepped", "decaying"])),
        noise_stddev=idle * float(rng.uniform(0.0, 0.1)),
        wait_overhead=float(rng.uniform(0, 0.1e-3)),
    )
    v = float(rng.uniform(1.8, 5.0))
    return DeviceModel(f"random{seed}", {"op": spec}, idle, v,
                       workload=(("op", int(rng.integers(1, 4))),),
                       iodvs=IODVSPolicy(v, v * float(rng.uniform(0.5, 1.0))))


@pytest.fixture
def corpus():
    return [random_model(s) for s in range(12)]
