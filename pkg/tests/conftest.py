"""Shared fixtures and the acceptance-criteria summary hook."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from statt.data import ClassSignature, SceneConfig, build_dataset
from statt.model import gradcheck_model_config

# ---------------------------------------------------------------------------
# acceptance reporting: tests marked @pytest.mark.criterion(n, "title") are
# aggregated into one PASS/FAIL line per criterion at the end of the run.
# ---------------------------------------------------------------------------


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, title): acceptance criterion this test belongs to",
    )
    config._criterion_results = {}
    config._criterion_titles = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is None:
            continue
        num, title = marker.args
        config._criterion_titles[num] = title


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num = marker.args[0]
    results = item.config._criterion_results.setdefault(num, [])
    if report.when == "call":
        results.append(report.outcome)
    elif report.outcome in ("failed", "skipped"):
        # setup/teardown error or skip counts against the criterion
        results.append(report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criterion_results", {})
    if not results:
        return
    titles = config._criterion_titles
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        outcomes = results[num]
        if all(o == "passed" for o in outcomes):
            verdict = "PASS"
        elif any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(
            f"criterion {num}: {verdict}  {titles.get(num, '')}"
        )


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------

TINY_CLASSES = (
    ClassSignature("early", onset=0.4, offset=1.8),
    ClassSignature("mid", onset=1.2, offset=2.6, amplitude=0.8),
    ClassSignature("late", onset=1.8, offset=3.4, amplitude=1.1),
)


def tiny_scene_config(seed: int = 3, **overrides) -> SceneConfig:
    """An 80x80, T=4, C=2, 3-class scene whose 8-px grid cells align with
    the tiny model's label windows, so every window survives splitting."""
    base = dict(
        height=80,
        width=80,
        time_steps=4,
        channels=2,
        classes=TINY_CLASSES,
        mean_field_size=16,
        noise_sigma=0.05,
        seed=seed,
    )
    base.update(overrides)
    return SceneConfig(**base)


@pytest.fixture(scope="session")
def tiny_model_config():
    """T=4, C=2, L=3, in 16 -> out 8; matches tiny_scene_config."""
    return gradcheck_model_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small normalized clean dataset; treat as read-only."""
    return build_dataset(tiny_scene_config(seed=3))


@pytest.fixture(scope="session")
def tiny_noisy_dataset():
    """Same scene with a quarter of the steps replaced by noise frames."""
    return build_dataset(tiny_scene_config(seed=3), noise_fraction=0.25)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def replace(config, **kw):
    return dataclasses.replace(config, **kw)
