"""Shared fixtures plus a suite-wide registry of matrices and test results.

Every SimilarityMatrix, KernelMatrix and TwoSampleResult constructed while
the suite runs is recorded, so the acceptance checks can make statements
about everything the suite produced. Acceptance tests run last.
"""

from __future__ import annotations

import numpy as np
import pytest

from phylokern import mmdtest, samplekernel, seqkernel

REGISTRY = {"matrices": [], "results": []}
CRITERIA: dict[int, tuple[bool, str]] = {}


def _min_eig_ratio(values: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(values)
    top = np.abs(eig).max() if eig.size else 0.0
    return 0.0 if top == 0 else float(eig.min() / top)


def _wrap(cls, record):
    original = cls.__post_init__

    def __post_init__(self):
        original(self)
        record(self)

    cls.__post_init__ = __post_init__


def _record_similarity(S):
    REGISTRY["matrices"].append(("SimilarityMatrix", len(S.otu_ids), _min_eig_ratio(S.values),
                                 True))


def _record_kernel(K):
    REGISTRY["matrices"].append(("KernelMatrix:" + K.kind, len(K.sample_ids),
                                 _min_eig_ratio(K.values), K.psd_required))


def _record_result(res):
    REGISTRY["results"].append((res.p_value, res.n_perm))


_wrap(seqkernel.SimilarityMatrix, _record_similarity)
_wrap(samplekernel.KernelMatrix, _record_kernel)
_wrap(mmdtest.TwoSampleResult, _record_result)


def pytest_collection_modifyitems(config, items):
    items.sort(key=lambda item: "test_acceptance" in item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def toy_tree_text():
    return "((a:1,b:2):0.5,c:3);"
