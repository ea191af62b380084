import hypothesis
import numpy as np
import pytest
import torch

from covmon import nn

torch.set_num_threads(1)
hypothesis.settings.register_profile("ci", deadline=None, max_examples=40)
hypothesis.settings.load_profile("ci")

ACCEPTANCE = {}  # criterion number -> (passed, detail); filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def small_net(class_count=4, seed=0):
    """A cheap network with two taps (a conv map and an fc layer)."""
    layers = [
        nn.LayerSpec("conv", {"out_channels": 3, "kernel": 5, "stride": 3}),
        nn.LayerSpec("relu"),
        nn.LayerSpec("tap", {"tap_id": 1}),
        nn.LayerSpec("maxpool", {"window": 2, "stride": 2}),
        nn.LayerSpec("fc", {"out_units": 12}),
        nn.LayerSpec("relu"),
        nn.LayerSpec("tap", {"tap_id": 2}),
        nn.LayerSpec("fc", {"out_units": class_count}),
        nn.LayerSpec("softmax"),
    ]
    model = nn.NetworkModel(layers, class_count)
    nn.init_weights(model, seed)
    return model


@pytest.fixture
def tiny_model():
    return small_net()


@pytest.fixture(scope="session")
def lenet():
    return nn.build_lenet4(10, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
