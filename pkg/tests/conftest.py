import sys

import numpy as np
import pytest

from mlwc.backbone import BackboneConfig
from mlwc.data import SynthSpec, synth_generate
from mlwc.heads import HeadConfig
from mlwc.model import MultiLevelNet
from mlwc.trainer import TrainConfig

TINY_SPEC = SynthSpec(image_size=16, jitter=2, samples_per_class=8, test_per_class=4, n_base_classes=4, n_novel_classes=3)
TINY_BACKBONE = BackboneConfig(stage_channels=(4, 8, 8))
TINY_HEADS = HeadConfig(embed_dim=8, mid_channels=4, relation_hidden=8)
TINY_TRAIN = TrainConfig(batch_size=8, stage1_epochs=3, stage2_epochs=2, stage2_lr=0.01, plateau_stop=False)


@pytest.fixture(scope="session")
def tiny_pair():
    return synth_generate(TINY_SPEC)


def tiny_net(seed=0, n_classes=4, label_space=()):
    return MultiLevelNet.init(TINY_BACKBONE, TINY_HEADS, n_classes, np.random.default_rng(seed), label_space)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
