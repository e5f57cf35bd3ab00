"""Central finite-difference gradient check shared by the neural tests and the acceptance suite."""

import numpy as np

from fcvp.neural import build_model

H = 1e-5


def relative_error(a, b, floor=1e-12):
    """Elementwise |a-b| / max(|a|, |b|), with differences below ``floor`` counted as exact."""
    a, b = np.asarray(a), np.asarray(b)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(diff < floor, 0.0, diff / np.maximum(scale, 1e-300))


def random_case(seed):
    """A random model (with or without encoder, random activation) and a batch of inputs."""
    rng = np.random.default_rng(seed)
    act = ("relu", "tanh")[seed % 2]
    with_encoder = seed % 3 != 2
    extra = int(rng.integers(0, 5)) if with_encoder else int(rng.integers(1, 5))
    enc = tuple(int(x) for x in rng.integers(3, 8, size=2)) if with_encoder else ()
    head = tuple(int(x) for x in rng.integers(3, 8, size=int(rng.integers(1, 3))))
    out = int(rng.integers(1, 4))
    model = build_model(rng, 4, enc, head, extra, out, activation=act,
                        out_activation=("identity", "tanh")[seed % 2])
    B, P = 3, 6
    points = rng.normal(size=(B, P, 4)) if with_encoder else None
    extras = rng.normal(size=(B, extra))
    weights = rng.normal(size=(B, out))
    return model, points, extras, weights


def check_gradients(seed) -> float:
    """Max relative error between backprop and central differences for L = sum(w * out)."""
    model, points, extras, w = random_case(seed)
    out, cache = model.forward(points, extras)
    grads = model.backward(cache, w)
    worst = 0.0
    for p, g in zip(model.params(), grads):
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + H
            up = np.sum(w * model.predict(points, extras))
            p[i] = old - H
            down = np.sum(w * model.predict(points, extras))
            p[i] = old
            fd[i] = (up - down) / (2 * H)
        worst = max(worst, float(np.max(relative_error(g, fd))))
    return worst
