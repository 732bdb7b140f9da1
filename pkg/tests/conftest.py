import os

import numpy as np
import pytest

from duoformer.serialize import load_tensor, save_tensor

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture
def golden():
    """Compare an array against a recorded golden tensor file.

    Run with DUOFORMER_REGEN_GOLDENS=1 to (re)record. Comparison is
    max|diff| <= 1e-10, which is bitwise on the producing platform and
    tolerant of last-bit libm variation elsewhere.
    """

    def check(name: str, array):
        array = np.asarray(array, dtype=np.float64)
        path = os.path.join(GOLDEN_DIR, name + ".mstf")
        if os.environ.get("DUOFORMER_REGEN_GOLDENS") == "1":
            os.makedirs(GOLDEN_DIR, exist_ok=True)
            save_tensor(path, array)
            return
        if not os.path.exists(path):
            raise AssertionError(
                f"missing golden file {path}; run with DUOFORMER_REGEN_GOLDENS=1"
            )
        expected = load_tensor(path)
        assert expected.shape == array.shape, (
            f"golden {name}: shape {array.shape} != recorded {expected.shape}"
        )
        worst = float(np.abs(expected - array).max()) if array.size else 0.0
        assert worst <= 1e-10, f"golden {name}: max abs diff {worst:.3e}"

    return check
