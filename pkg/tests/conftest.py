import numpy as np
import pytest

from doczsl import corpus, synth, wordvec
from doczsl.model import ModelConfig, init_params


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A tiny synthetic dataset on disk plus the in-memory generator output."""
    cfg = synth.SynthConfig(n_seen=6, n_unseen=3, train_per_class=4, heldout_per_class=2, test_per_class=3,
                            n_patches=4, r0=8, visual_vocab=12, noise_vocab=20, words_per_doc=10,
                            discriminative_words=3, seed=11)
    out = tmp_path_factory.mktemp("small")
    paths, data = synth.generate(cfg, str(out))
    wv = wordvec.parse_wordvec_file(paths["wordvecs"])
    ds = corpus.load_dataset(paths["documents"], paths["features"], paths["split"], wv)
    return {"config": cfg, "paths": paths, "data": data, "wv": wv, "dataset": ds, "dir": out}


@pytest.fixture
def tiny_params():
    return init_params(ModelConfig(r0=8, r=8, heads=2, blocks=1), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_default(tmp_path_factory):
    out = tmp_path_factory.mktemp("default")
    paths, data = synth.generate(synth.SynthConfig(seed=0), str(out))
    wv = wordvec.parse_wordvec_file(paths["wordvecs"])
    ds = corpus.load_dataset(paths["documents"], paths["features"], paths["split"], wv)
    return {"paths": paths, "data": data, "wv": wv, "dataset": ds, "dir": out}


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Tests append one ``(criterion, passed, detail)`` line; printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
