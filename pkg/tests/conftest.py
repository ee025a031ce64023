from dataclasses import dataclass

import pytest

from srnlab.data import SyntheticSpec, build_impressions, simulate_synthetic, split_events, time_split
from srnlab.graphembed import GraphConfig, build_graph, train_link_prediction


@dataclass
class TinyWorld:
    data: object
    train: object
    test: object
    graph: object


@pytest.fixture(scope="session")
def tiny():
    """Small planted dataset with 8-dim graph embeddings, shared by model tests."""
    spec = SyntheticSpec(n_users=80, n_items=120, n_categories=8, categories_per_group=2,
                         events_per_user=60, recent_k=10, anchor_window=10, seed=3)
    d = simulate_synthetic(spec)
    imp = build_impressions(d.events, max_len=30, seed=3)
    train, test = time_split(imp, spec.test_boundary)
    train_ev, _ = split_events(d.events, spec.test_boundary)
    ge = train_link_prediction(build_graph(train_ev), GraphConfig(dim=8, attn_dim=8, epochs=2, seed=3))
    return TinyWorld(d, train, test, ge.embeddings)


_LINES = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, store, number, title):
        self.store, self.number, self.title = store, number, title
        self.notes = []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        status = "PASS" if kind is None else "FAIL"
        detail = "; ".join(self.notes)
        if exc is not None:
            detail = (detail + "; " if detail else "") + (str(exc).splitlines() or [kind.__name__])[0]
        self.store[self.number] = f"criterion {self.number:>2} {status}  {self.title}: {detail}"
        return False


@pytest.fixture
def criterion(request):
    """Context manager that records one pass/fail line per acceptance criterion."""
    store = request.config.stash.setdefault(_LINES, {})
    return lambda number, title: _Criterion(store, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
