import numpy as np
import pytest

from vlmtrace.autodiff import ParamStore
from vlmtrace.model import ModelConfig, init_model
from vlmtrace.vocab import Vocabulary


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(image_size=8, patch_size=4, d_model=8, n_blocks=1, n_heads=2, max_seq_len=24,
                       mlp_ratio=2, seed=3)


@pytest.fixture
def tiny_params(tiny_cfg) -> ParamStore:
    return init_model(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    """Pretraining cache shared by every test that needs a trained model."""
    import os
    from pathlib import Path

    env = os.environ.get("VLMTRACE_CACHE")
    return Path(env) if env else tmp_path_factory.mktemp("pretrain-cache")


@pytest.fixture(scope="session")
def pretrained(cache_dir, tmp_path_factory):
    """(params, loss curve, model config) of the default released model."""
    from vlmtrace.pipeline import ExperimentConfig, Run, _cached_pretrain

    cfg = ExperimentConfig()
    run = Run(cfg, tmp_path_factory.mktemp("pretrained"), cache_dir=cache_dir)
    params, losses = _cached_pretrain(run, cfg.model, cfg.pretrain, "released")
    return params, losses, cfg.model


# -- acceptance reporting --------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else ("ERROR" if rep.when == "setup" else "FAIL")
    _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {title}: {status}" + (f" ({detail})" if detail else ""))
