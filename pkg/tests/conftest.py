import os

import pytest
import torch
import torch.nn as nn

from margin_rl.data import dataset_available
from margin_rl.margin import ClassifierHandle

EXTENDED = os.environ.get("MARGIN_RL_EXTENDED") == "1"


class FixedProbs(nn.Module):
    """Ignores its input and returns log-probabilities of a fixed vector."""

    def __init__(self, probs):
        super().__init__()
        self.register_buffer("logp", torch.log(torch.as_tensor(probs, dtype=torch.float64)))

    def forward(self, x):
        # zero-weight input term keeps x in the autograd graph
        return (self.logp.expand(x.shape[0], -1) + 0 * x.flatten(1).sum(1, keepdim=True)).to(x.dtype)


def fixed_handle(probs):
    return ClassifierHandle(FixedProbs(probs))


@pytest.fixture
def tiny_cnn():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Conv2d(1, 4, 3, padding=1), nn.Softplus(), nn.Flatten(), nn.Linear(4 * 6 * 6, 3))
    return net.double()


requires_mnist = pytest.mark.skipif(not dataset_available("mnist"), reason="MNIST files not present")


# criterion id -> (status, detail); filled by the acceptance tests
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
