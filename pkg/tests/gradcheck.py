"""Central finite-difference gradient checker shared by the test modules."""
import numpy as np

from glidetrack.autodiff import Tensor


def numeric_grad(f, arrays, eps=1e-4):
    """Central differences of scalar f(*arrays) w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f(*arrays)
            a[i] = old - eps
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check(build, arrays, rng=None, eps=1e-4):
    """build(*tensors) -> Tensor (any shape). A fixed random projection makes it scalar.

    Returns the worst relative error over all inputs.
    """
    rng = rng or np.random.default_rng(0)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    proj = rng.standard_normal(out.shape)
    loss = (out * Tensor(proj)).sum()
    loss.backward()
    analytic = [t.grad for t in ts]

    def f(*arrs):
        return float((build(*[Tensor(x) for x in arrs]).data * proj).sum())

    numeric = numeric_grad(f, [a.copy() for a in arrays], eps)
    return max(rel_error(x, y) for x, y in zip(analytic, numeric))
