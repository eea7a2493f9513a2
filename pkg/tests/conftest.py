import numpy as np
import pytest

from debiaspose.geometry import CameraParams, h36m_skeleton
from debiaspose.synthetic import look_at_camera


def ring_cameras(n=4, radius=3000.0, height=1200.0, target=(0.0, 0.0, 900.0), size=1000):
    cams = []
    for c in range(n):
        a = 2 * np.pi * c / n + 0.3
        cams.append(look_at_camera(c, (radius * np.cos(a), radius * np.sin(a), height + 200 * (c % 2)),
                                   target, 1000.0, size, size))
    return cams


def random_point(rng, spread=400.0):
    return np.array([0.0, 0.0, 900.0]) + rng.uniform(-spread, spread, size=3)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""

    def record(number, title, ok, detail):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def cams4():
    return ring_cameras(4)


@pytest.fixture
def skel():
    return h36m_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def canonical_camera(width=640, height=480):
    return CameraParams(0, np.hstack([np.eye(3), np.zeros((3, 1))]), width, height)


def random_small_model(rng, dropout_rate=0.0):
    from debiaspose.neuralnet import MlpModel

    i, h, o = int(rng.integers(2, 13)), int(rng.integers(2, 9)), int(rng.integers(1, 5))
    model = MlpModel.init(i, o, hidden_dim=h, dropout_rate=dropout_rate, seed=int(rng.integers(2**31)))
    # move batch norm away from the identity so its gradients are exercised
    for blk in (model.block1, model.block2):
        blk.bn_gamma = rng.uniform(0.5, 1.5, h)
        blk.bn_beta = rng.normal(0, 0.3, h)
        blk.b = rng.normal(0, 0.3, h)
    model.b_out = rng.normal(0, 0.3, o)
    return model


def gradcheck(model, x, dout, rng, h=1e-5, zero_tol=1e-8):
    """Max relative error between backward and central differences of sum(out * dout).

    Dropout masks sampled on the first forward are replayed for every
    perturbed evaluation. Entries where both values are below ``zero_tol``
    in magnitude count as agreeing zeros: biases feeding batch norm have an
    exactly zero gradient and finite differences return rounding noise there.
    """
    from debiaspose.neuralnet import backward, forward

    out, tape = forward(model, x, "train", rng=rng)
    masks = tuple(bt.drop_mask for bt in tape.blocks)
    grads = backward(model, tape, dout)
    params = {k: v.copy() for k, v in model.params().items()}

    def loss(p):
        o, _ = forward(model.with_params(p), x, "train", dropout_masks=masks)
        return float(np.sum(o * dout))

    worst = 0.0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (loss(plus) - loss(minus)) / (2 * h)
            a = grads[name][idx]
            if abs(a) < zero_tol and abs(fd) < zero_tol:
                continue
            worst = max(worst, abs(a - fd) / max(abs(a) + abs(fd), 1e-6))
    return worst


def adam_oracle(theta, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-unrolled Adam on plain floats, one gradient per step."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (vh**0.5 + eps)
    return theta
