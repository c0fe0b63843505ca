import json

import numpy as np
import pytest
import torch

import jmvr
from jmvr.config import RunConfig
from jmvr.data import gen_synthetic

jmvr.use_float64()


@pytest.fixture(autouse=True)
def _float64():
    # some tests flip the default dtype; always restore it
    jmvr.use_float64()
    yield
    jmvr.use_float64()


def tiny_config(dataset: str = "", **kw) -> RunConfig:
    """A model small enough for sub-second training steps."""
    base = dict(dataset=dataset, C=4, T=32, D=16, n_blocks=1, n_heads=2, n_eeg_tokens=4,
                n_txt_tokens=4, patch=4, image_size=16, view_width=8, n_filters=2,
                steps=3, ae_steps=3, sample_steps=4, metric_size=32, deep_grid=8, lab_bins=4,
                window_ms=500.0, stride_ms=500.0, n_way=2)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    gen_synthetic(root, seed=3, n_classes=2, n_per_class=2, C=4, T=32, image_size=16,
                  n_test_per_class=1)
    return root


@pytest.fixture
def tiny_cfg(tiny_dataset):
    return tiny_config(str(tiny_dataset))


def write_config(path, cfg: RunConfig):
    path.write_text(json.dumps(cfg.to_json()), encoding="utf-8")
    return path


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def gradcheck_params(loss_fn, params, n_coords=10, h=1e-6, seed=0):
    """Central finite differences on ``n_coords`` random parameter coordinates.

    Returns the worst relative error against autograd.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    params = [p for p in params if p.grad is not None]
    rng = np.random.default_rng(seed)
    worst = 0.0
    sizes = np.array([p.numel() for p in params], dtype=float)
    for _ in range(n_coords):
        i = rng.choice(len(params), p=sizes / sizes.sum())
        p = params[i]
        j = int(rng.integers(p.numel()))
        analytic = float(p.grad.reshape(-1)[j])
        flat = p.data.reshape(-1)
        orig = float(flat[j])
        with torch.no_grad():
            flat[j] = orig + h
            up = float(loss_fn())
            flat[j] = orig - h
            down = float(loss_fn())
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        if max(abs(analytic), abs(numeric)) < 1e-7:
            continue
        worst = max(worst, rel_err(analytic, numeric))
    return worst


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    n, name = mark.args
    entry = _CRITERIA.setdefault(n, [name, True, 0.0])
    entry[1] = entry[1] and report.passed
    entry[2] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, ok, secs = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}  ({secs:.1f} s)")
