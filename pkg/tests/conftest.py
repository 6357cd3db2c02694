import numpy as np
import pytest

from mmembed.config import ModelConfig


def tiny_config(**kw):
    base = dict(d_model=8, n_text_layers=1, n_vit_layers=1, n_heads=2, max_seq_len=24,
                vocab_size=16, image_size=8, patch_size=4, max_text_len=8, init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


def finite_difference_error(loss_fn, arrays, grads, h=1e-3):
    """Worst relative error between ``grads`` and central differences of ``loss_fn``.

    Relative to the largest finite-difference entry of each array, so that
    near-zero entries do not blow up the ratio.
    """
    worst = 0.0
    for name, g in grads.items():
        a = arrays[name]
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = loss_fn()
            a[idx] = orig - h
            down = loss_fn()
            a[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        scale = max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - g).max() / scale))
    return worst


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture
def acceptance(request):
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_lines[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
