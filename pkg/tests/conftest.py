import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from typeaware.model import ItemRecord, ModelParams, TypePair

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def affine(W, b):
    return [(np.asarray(W, dtype=float), np.asarray(b, dtype=float))]


def identity_params(d=2, pairs=(), masks=(), kind="diag", score_mode="negative_distance",
                    metric=None, bias=0.0, text=True):
    """Single affine identity encoders so embeddings equal raw features."""
    eye = affine(np.eye(d), np.zeros(d))
    slots = {p: n for n, p in enumerate(pairs)}
    bank = [np.asarray(w, dtype=float) for w in masks]
    return ModelParams(eye, affine(np.eye(d), np.zeros(d)) if text else None, kind, bank, slots,
                       None if metric is None else np.asarray(metric, dtype=float),
                       None if metric is None else np.array([bias]), score_mode)


def item(item_id, type_id, image, text=None):
    return ItemRecord(item_id, type_id, np.asarray(image, dtype=float),
                      None if text is None else np.asarray(text, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PAIR12 = TypePair(1, 2)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[name] = (ok, detail)
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
