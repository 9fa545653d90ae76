import numpy as np
import pytest

from kdaug import _backend, _kernels_py

compiled = pytest.importorskip("kdaug._kernels")


def test_backend_selected():
    assert _backend.BACKEND in ("cython", "python")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_removal_parity(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3, 40)).astype(dtype)
    n = rng.integers(0, 21, 50)
    s = (rng.random(50) * (40 - n + 1)).astype(np.int64)
    a, b = x.copy(), x.copy()
    compiled.removal_fill(a, s, n.astype(np.int64))
    _kernels_py.removal_fill(b, s, n.astype(np.int64))
    np.testing.assert_array_equal(a, b)


def test_removal_bounds_error_both():
    for mod in (compiled, _kernels_py):
        with pytest.raises((ValueError, IndexError)):
            mod.removal_fill(np.zeros((1, 1, 5)), np.array([4], np.int64), np.array([3], np.int64))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_roll_parity(dtype):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 3, 40)).astype(dtype)
    k = rng.integers(0, 40, 50).astype(np.int64)
    np.testing.assert_array_equal(compiled.roll_time(x, k), _kernels_py.roll_time(x, k))


def test_binning_parity():
    rng = np.random.default_rng(2)
    conf = np.r_[rng.random(5000), np.linspace(0, 1, 16), [0.0, 1.0]]
    correct = (rng.random(len(conf)) < 0.5).astype(np.uint8)
    edges = np.linspace(0, 1, 16)
    for a, b in zip(compiled.calibration_bins(conf, correct, edges),
                    _kernels_py.calibration_bins(conf, correct, edges)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def _digest_in_subprocess(pure):
    import os
    import subprocess
    import sys
    code = ("import hashlib, numpy as np\n"
            "from kdaug import BACKEND\n"
            "from kdaug.augment import AugmentationPolicy, apply_policy\n"
            "X = np.random.default_rng(0).normal(size=(64, 3, 50)).astype(np.float32)\n"
            "out = apply_policy(X, AugmentationPolicy('mix2'), 3, 5)\n"
            "print(BACKEND, hashlib.sha256(out.tobytes()).hexdigest())\n")
    env = dict(os.environ)
    env.pop("KDAUG_PURE_PYTHON", None)
    if pure:
        env["KDAUG_PURE_PYTHON"] = "1"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                          check=True).stdout.split()


def test_fallback_selected_by_env_and_bit_equal():
    compiled_backend, a = _digest_in_subprocess(False)
    pure_backend, b = _digest_in_subprocess(True)
    assert (compiled_backend, pure_backend) == ("cython", "python")
    assert a == b
