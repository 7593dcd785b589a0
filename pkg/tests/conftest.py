from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from adaensemble.model import AdaEnsembleModel, ModelConfig

settings.register_profile("repo", max_examples=60, deadline=None, derandomize=True)
settings.load_profile("repo")


def tiny_model(num_layers: int = 2, experts=("pin", "cross", "dense"), fields: int = 3, dim: int = 4, **kw) -> AdaEnsembleModel:
    cfg = ModelConfig(
        vocab_sizes=(5,) * fields,
        embedding_dim=dim,
        num_layers=num_layers,
        experts=tuple(experts),
        k_final=kw.pop("k_final", min(2, len(experts))),
        gate_dim=kw.pop("gate_dim", 6),
        dense_hidden=kw.pop("dense_hidden", 6),
        **kw,
    )
    return AdaEnsembleModel(cfg)


def random_indices(rng: np.random.Generator, batch: int, fields: int = 3, vocab: int = 5) -> np.ndarray:
    return rng.integers(0, vocab + 1, size=(batch, fields))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
