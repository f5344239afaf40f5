import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))


def input_families(rng: np.random.Generator, n: int, d: int, tiny: float, scale: float = 1.0):
    """Five families of test vectors, n rows each: Gaussian, uniform, sparse,
    sub-threshold (entries <= tiny) and zero. Gaussian/uniform/sparse rows get
    a random log-uniform magnitude up to ``scale``."""
    mags = scale * np.exp(rng.uniform(np.log(1e-6), 0.0, size=(n, 1)))
    gauss = rng.standard_normal((n, d))
    gauss *= mags / np.max(np.abs(gauss), axis=1, keepdims=True)
    unif = rng.uniform(-1.0, 1.0, (n, d)) * mags
    sparse = rng.standard_normal((n, d)) * (rng.uniform(size=(n, d)) < 0.05)
    sparse[:, 0] += 1.0
    sparse *= mags / np.max(np.abs(sparse), axis=1, keepdims=True)
    sub = rng.uniform(-tiny, tiny, (n, d))
    zero = np.zeros((n, d))
    return {"gaussian": gauss, "uniform": unif, "sparse": sparse, "sub_threshold": sub, "zero": zero}


# one (criterion, passed, detail) entry per acceptance criterion, printed at the end
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
