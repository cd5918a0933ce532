from functools import cached_property

import numpy as np
import pytest

from mkdt import datagen as dg
from mkdt import models
from mkdt import trajectories as tr

DESK_DATA = dg.SparseCodingConfig(d=32, num_classes=10, n=2000, sigma_noise=0.3)


class Desk:
    """Desk-scale dataset, teacher, representations and KD experts (built once per session)."""

    def __init__(self):
        self.data = dg.generate_sparse_coding(DESK_DATA)
        self.teacher = tr.train_teacher_ssl(self.data, models.teacher_arch(32), tr.TEACHER_DEFAULTS, seed=0)
        self.Z = tr.compute_teacher_reps(self.teacher.encoder, self.data).Z
        self.arch = models.student_arch(32)
        self.experts = tr.train_experts(self.data, self.Z, self.arch, tr.EXPERT_DEFAULTS, k=10)

    @cached_property
    def ssl_experts(self):
        return tr.train_experts(self.data, self.Z, self.arch, tr.EXPERT_DEFAULTS, k=10, objective="ssl")


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance():
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'} ({detail})")
