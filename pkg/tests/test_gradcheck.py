import numpy as np
import pytest

from occlusynth.kernels.gradcheck import KERNELS, grad_check, rel_error
from occlusynth.rng import SeededRng


def test_rel_error():
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
    assert rel_error(np.zeros(3), np.full(3, 1e-12)) == pytest.approx(1e-4)
    assert rel_error(np.zeros(0), np.zeros(0)) == 0.0


@pytest.mark.parametrize("kernel", KERNELS)
def test_few_trials_pass(kernel):
    report = grad_check([kernel], trials=5, rng=SeededRng(17))
    assert set(report) == {kernel}
    assert report[kernel] < 1e-4


def test_folding_is_tight():
    assert grad_check(["folding"], trials=5, rng=SeededRng(4))["folding"] < 1e-6


def test_deterministic():
    a = grad_check(["gridding"], trials=3, rng=SeededRng(2))
    b = grad_check(["gridding"], trials=3, rng=SeededRng(2))
    assert a == b


@pytest.mark.parametrize("kwargs", [{"eps": 0.0}, {"eps": -1e-6}, {"trials": 0},
                                    {"kernels": ["conv3d"]}])
def test_invalid_requests(kwargs):
    with pytest.raises(ValueError):
        grad_check(**kwargs)


def test_broken_gradient_is_caught(monkeypatch):
    import occlusynth.kernels.gradcheck as gc
    real = gc.gridding_grad
    monkeypatch.setattr(gc, "gridding_grad", lambda p, up: real(p, up) * 1.001)
    assert grad_check(["gridding"], trials=2)["gridding"] > 1e-4
