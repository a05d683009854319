"""Shared fixtures: pretrained checkpoints are expensive, so build them once."""

from __future__ import annotations

import numpy as np
import pytest

from edgedistill.distill import AlgoParams
from edgedistill.models import build_student, pretrain_student
from edgedistill.videogen import generate, make_corpus, preset


@pytest.fixture(scope="session")
def corpus():
    return make_corpus(64, seed=7)


@pytest.fixture(scope="session")
def strong_checkpoint(corpus) -> bytes:
    """Well-pretrained student: clears the metric threshold on fresh scenes."""
    student = build_student(seed=1)
    return pretrain_student(student, corpus, epochs=15, lr=0.003)


@pytest.fixture(scope="session")
def weak_checkpoint(corpus) -> bytes:
    """Lightly-pretrained student: starts below threshold, so distillation runs."""
    student = build_student(seed=1)
    return pretrain_student(student, corpus, epochs=3, lr=0.003)


@pytest.fixture(scope="session")
def stationary_stream():
    return generate(preset("stationary", seed=42), 64)


@pytest.fixture()
def params():
    return AlgoParams()


def assert_bit_equal(a: np.ndarray, b: np.ndarray, what: str = "arrays"):
    assert a.dtype == b.dtype and a.shape == b.shape, f"{what}: dtype/shape differ"
    assert np.array_equal(a, b), f"{what}: values differ"
