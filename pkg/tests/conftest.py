import numpy as np
import pytest
import torch

from reactgen.synth import CLASS_NAMES, generate_split
from reactgen.tasks import load_templates
from reactgen.vocab import build_vocabulary

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_split():
    return generate_split(CLASS_NAMES, 2, 0, 64)


@pytest.fixture(scope="session")
def templates():
    return load_templates()


@pytest.fixture(scope="session")
def vocab(small_split, templates):
    corpus = [c for s in small_split for c in s.captions]
    corpus += [t for pool in templates.values() for t in pool]
    return build_vocabulary(corpus, n_pose=16, n_bins=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_tok(small_split):
    """Untrained width-8 tokenizer with an initialized codebook and fitted bins."""
    from reactgen.space import fit_bins
    from reactgen.vqvae import MotionTokenizer, PoseTokenizerConfig, PoseVQVAE
    torch.manual_seed(0)
    model = PoseVQVAE(PoseTokenizerConfig.tiny())
    tok = MotionTokenizer(model, fit_bins([s.action_space for s in small_split] +
                                          [s.reaction_space for s in small_split]))
    feats = tok.normalize_features(np.stack([tok.features_of(s.action)[0] for s in small_split]))
    model.train()
    model(feats, generator=torch.Generator().manual_seed(0))
    model.eval()
    return tok


@pytest.fixture(scope="session")
def tokenized(small_split, tiny_tok):
    from reactgen.tasks import tokenize_corpus
    return tokenize_corpus(small_split, tiny_tok)


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    prev = _criteria.get(n, (title, "PASS"))[1]
    _criteria[n] = (title, "FAIL" if rep.failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}  {status}  {title}")
