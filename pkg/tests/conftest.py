import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b, stride, pad):
    """Quadruple-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, o, r, s] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def naive_max_pool3d(x, kernel, stride, padding):
    n, c, h, w = x.shape
    kc, kh, kw = kernel
    sc, sh, sw = stride
    pc, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pc, pc), (ph, ph), (pw, pw)), constant_values=-np.inf)
    oc = (c + 2 * pc - kc) // sc + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(n):
        for a in range(oc):
            for b in range(oh):
                for d in range(ow):
                    out[i, a, b, d] = xp[i, a * sc:a * sc + kc, b * sh:b * sh + kh,
                                         d * sw:d * sw + kw].max()
    return out


def fd_grad(f, x, step=1e-6):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + step
        hi = f(x)
        flat[i] = o - step
        lo = f(x)
        flat[i] = o
        gf[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def directional_check(fn, leaves, rng, step=1e-5):
    """Relative error between <grad, d> and a central difference along ``d``.

    ``fn()`` must rebuild the scalar output from the current ``leaves``
    data.  Checking along random directions keeps whole-network checks
    cheap while still exercising every parameter.  Relu masks and pooling
    choices are replayed from the unperturbed pass so the difference stays
    on one linear piece.
    """
    from relmimic.tensor import grad, record_selections, replay_selections

    with record_selections() as tape:
        out = fn()
    grads = grad(out, leaves)
    dirs = [rng.normal(size=t.shape) for t in leaves]
    analytic = sum(float(np.sum(g.data * d)) for g, d in zip(grads, dirs))
    orig = [t.data.copy() for t in leaves]
    vals = []
    for sign in (1.0, -1.0):
        for t, o, d in zip(leaves, orig, dirs):
            t.data = o + sign * step * d
        with replay_selections(tape):
            vals.append(fn().item())
    for t, o in zip(leaves, orig):
        t.data = o
    numeric = (vals[0] - vals[1]) / (2 * step)
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
