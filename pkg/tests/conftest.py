import time

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory):
    """Eight-image, two-class synthetic dataset shared across tests."""
    from qaclims.synthetic import generate_synthetic

    out = tmp_path_factory.mktemp("synth")
    manifest = generate_synthetic(8, 2, seed=3, out_dir=out, size=32, n_eval=2)
    return out, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_bundle(tiny_synth):
    """(manifest, samples, mock corpus store, mock encoders) for the tiny dataset."""
    from qaclims.datasets import load_samples
    from qaclims.encoders import MockEncoders
    from qaclims.qape import MockVqaBackend, generate_corpus
    from qaclims.synthetic import lexicon_for, vqa_scenes

    _, manifest = tiny_synth
    samples = load_samples(manifest)
    store = generate_corpus(
        [(s.image_id, s.image, s.labels) for s in samples], manifest.classes, MockVqaBackend(scenes=vqa_scenes(manifest))
    )
    return manifest, samples, store, MockEncoders(lexicon_for(manifest))


# --- acceptance reporting -----------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


class Criterion:
    def __init__(self):
        self.number, self.title, self.details = None, "", []
        self.t0 = time.perf_counter()

    def __call__(self, number, title):
        self.number, self.title = number, title
        self.t0 = time.perf_counter()
        return self

    def note(self, text):
        self.details.append(text)

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0


@pytest.fixture
def criterion(request):
    """Collects one pass/fail line per acceptance criterion for the summary."""
    rec = Criterion()
    yield rec
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    detail = "; ".join(rec.details)
    ACCEPTANCE_LINES.append(
        (rec.number, f"criterion {rec.number} {status}: {rec.title} [{rec.elapsed:.1f} s] {detail}".rstrip())
    )


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
