import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def random_rotation(rng):
    """Uniform-ish rotation from a random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def finite_difference_agreement(loss_fn, parameters, n_samples=200,
                                step=1e-3, rtol=1e-3, seed=0):
    """Fraction of sampled parameter entries whose analytic gradient
    matches a central finite difference within rtol relative error.

    loss_fn: () -> scalar tensor, recomputed from current parameters.
    Entries where both gradients are tiny count as agreeing.
    """
    rng = np.random.default_rng(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, parameters, allow_unused=True)
    flat = []
    for p, g in zip(parameters, grads):
        if g is None:
            continue
        for _ in range(max(1, n_samples // len(parameters))):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            flat.append((p, idx, float(g[idx])))
    rng.shuffle(flat)
    flat = flat[:n_samples]
    agree = 0
    for p, idx, g_analytic in flat:
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + step
            up = float(loss_fn())
            p[idx] = orig - step
            down = float(loss_fn())
            p[idx] = orig
        g_fd = (up - down) / (2 * step)
        denom = max(abs(g_analytic), abs(g_fd))
        if denom < 1e-7 or abs(g_analytic - g_fd) / denom < rtol:
            agree += 1
    return agree / max(len(flat), 1)
