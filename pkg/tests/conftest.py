import numpy as np
import pytest

from poftlab.model import ModelConfig, init_model
from poftlab.tokenizers import char_tokenizer


def random_model(seed=0, dim=8, n_layers=2, n_heads=2, max_seq=32, scale=0.3, tokenizer=None):
    """A small model whose every parameter (head included) is random, so no
    gradient is structurally zero."""
    tok = tokenizer or char_tokenizer()
    cfg = ModelConfig(tok.vocab_size, dim, n_layers, n_heads, max_seq)
    model = init_model(cfg, seed, tok)
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        if name.endswith(".g"):
            p.data = 1.0 + 0.1 * rng.standard_normal(p.shape)
        else:
            p.data = scale * rng.standard_normal(p.shape)
    return model


@pytest.fixture
def tiny_model():
    return random_model()


@pytest.fixture
def zero_model():
    tok = char_tokenizer()
    return init_model(ModelConfig(tok.vocab_size, 8, 2, 2, 32), 0, tok)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    """Remember (and print) one acceptance line; the terminal summary lists
    them in criterion order after the run."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
