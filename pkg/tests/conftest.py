import numpy as np
import pytest

from promptdt import autodiff as ad
from promptdt.autodiff import Tensor


def gradcheck(fn, arrays, h=1e-5, tol=1e-4):
    """Central finite differences vs the tape's analytic gradients, at f64.

    Relative error uses max(1, |fd|) in the denominator.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    ad.clear_tape()
    loss = fn(*tensors)
    assert loss.data.size == 1
    ad.backward(loss, leaves=tensors)
    for t in tensors:
        flat = t.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with ad.no_grad():
                lp = fn(*tensors).item()
            flat[i] = orig - h
            with ad.no_grad():
                lm = fn(*tensors).item()
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * h)
        analytic = t.grad.reshape(-1)
        err = np.abs(analytic - num) / np.maximum(1.0, np.abs(num))
        assert err.max() < tol, f"gradcheck failed: max rel err {err.max():.3e}"


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()
