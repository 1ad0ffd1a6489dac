"""Shared fixtures and the acceptance summary hook.

The acceptance tests in test_acceptance.py are named test_cNN_<slug>; after
the run a one-line PASS/FAIL verdict per criterion is printed in the terminal
summary so the checklist can be read without scrolling through pytest output.
"""

import re

import numpy as np
import pytest

from markov_scale_gen import Codebook, MarkovModel, ModelConfig, ResidualPyramid, ScaleSchedule

_ACCEPTANCE_RE = re.compile(r"test_c(\d+)_([a-z0-9_]+)")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_setup():
    """A small markov model plus codebook and pyramids on schedule (1, 2, 3)."""
    sch = ScaleSchedule((1, 2, 3))
    cfg = ModelConfig(
        schedule=sch,
        depth=2,
        width=32,
        heads=2,
        vocab_size=9,
        code_dim=5,
        num_classes=4,
        window=2,
    )
    model = MarkovModel(cfg, seed=2)
    r = np.random.default_rng(7)
    entries = r.normal(size=(9, 5))
    entries[0] = 0.0
    codebook = Codebook(entries)
    pyramids = [
        ResidualPyramid(tuple(r.integers(0, 9, size=(s, s)) for s in sch.sizes))
        for _ in range(4)
    ]
    return model, codebook, pyramids


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in str(getattr(rep, "nodeid", "")):
                continue
            if getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            m = _ACCEPTANCE_RE.search(rep.nodeid)
            if not m:
                continue
            num = int(m.group(1))
            slug = m.group(2).replace("_", "-")
            ok = outcome == "passed"
            # setup errors count as failures; never upgrade FAIL back to PASS
            if num in verdicts and not verdicts[num][1]:
                continue
            verdicts[num] = (slug, ok)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(verdicts):
        slug, ok = verdicts[num]
        terminalreporter.write_line(
            f"[acceptance] criterion {num} ({slug}): {'PASS' if ok else 'FAIL'}"
        )
