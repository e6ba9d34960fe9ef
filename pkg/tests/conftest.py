import re

import numpy as np
import pytest

from iqeclip import autodiff as ad
from iqeclip.config import RunConfig


ZERO_GRAD = 1e-9


def rel_err(analytic, numeric):
    # Structurally zero gradients (e.g. key-projection bias under softmax shift
    # invariance) only carry finite-difference noise; compare those absolutely.
    if abs(analytic) < ZERO_GRAD and abs(numeric) < ZERO_GRAD:
        return 0.0
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def param_grad_error(loss_fn, params, seed=0, h=1e-5, entries=None):
    """Worst relative error between backprop and central differences.

    Checks ``entries`` random coordinates per parameter (all when None).
    ``loss_fn()`` must rebuild the graph from the current parameter data.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        coords = list(np.ndindex(p.shape))
        if entries is not None and len(coords) > entries:
            coords = [coords[i] for i in rng.choice(len(coords), entries, replace=False)]
        for c in coords:
            orig = p.data[c]
            p.data[c] = orig + h
            plus = loss_fn().item()
            p.data[c] = orig - h
            minus = loss_fn().item()
            p.data[c] = orig
            worst = max(worst, rel_err(g[c], (plus - minus) / (2 * h)))
    return worst


def directional_grad_error(loss_fn, params, seed=0, h=1e-5, atol=0.0):
    """Relative error of the gradient projected on one random unit direction over all params."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    dirs = [rng.normal(size=p.shape) for p in params]
    norm = np.sqrt(sum(float((u * u).sum()) for u in dirs))
    dirs = [u / norm for u in dirs]
    analytic = sum(float((p.grad * u).sum()) for p, u in zip(params, dirs) if p.grad is not None)
    origs = [p.data.copy() for p in params]
    for p, o, u in zip(params, origs, dirs):
        p.data = o + h * u
    plus = loss_fn().item()
    for p, o, u in zip(params, origs, dirs):
        p.data = o - h * u
    minus = loss_fn().item()
    for p, o in zip(params, origs):
        p.data = o
    numeric = (plus - minus) / (2 * h)
    if abs(analytic - numeric) < atol:
        return 0.0
    return rel_err(analytic, numeric)


def tiny_config(**overrides) -> RunConfig:
    """16x16 images, 4x4 grid, narrow widths: fast enough for finite differences."""
    base = dict(image_size=16, patch=4, d=16, C=16, img_layers=4, taps=(1, 2, 3, 4),
                img_heads=2, txt_layers=3, txt_heads=2, D=2, M=2, r=3, heads=2,
                epochs=2, batch=4)
    base.update(overrides)
    return RunConfig.from_mapping(base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def f64():
    with ad.verification_mode():
        yield


@pytest.fixture(scope="session")
def default_data(tmp_path_factory):
    """The default three-domain benchmark, generated once per session."""
    from iqeclip.data import generate_dataset

    root = tmp_path_factory.mktemp("bench")
    generate_dataset(root, seed=0)
    return root


SMALL_COUNTS = {("train", 0): 6, ("train", 1): 4, ("test", 0): 4, ("test", 1): 4}


def small_config(**overrides) -> RunConfig:
    """tiny_config at 32x32 to match the small benchmark."""
    return tiny_config(image_size=32, patch=8, **overrides)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Three 32x32 domains with a handful of samples each."""
    from dataclasses import replace

    from iqeclip.data import default_domains, generate_dataset

    root = tmp_path_factory.mktemp("small")
    specs = [replace(s, counts=dict(SMALL_COUNTS)) for s in default_domains()]
    generate_dataset(root, specs, seed=0, size=32)
    return root


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary
# ---------------------------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m or (rep.when != "call" and not rep.failed):
        return
    detail = getattr(item, "detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else rep.when + " error"
    _CRITERIA[int(m.group(1))] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
