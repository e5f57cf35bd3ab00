"""Small numpy network stack: dense layers, a max-pool set encoder, manual backprop and Adam."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_MAGIC = b"FCVPNET\x00"
CHECKPOINT_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, y, dy):
    if name == "relu":
        return dy * (z > 0)
    if name == "tanh":
        return dy * (1.0 - y * y)
    return dy


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError("inconsistent layer shapes")

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator):
        bound = np.sqrt(1.0 / n_in)
        return cls(rng.uniform(-bound, bound, (n_out, n_in)),
                   rng.uniform(-bound, bound, n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def forward(self, x):
        z = x @ self.weights.T + self.biases
        y = _act(self.activation, z)
        return y, (x, z, y)

    def backward(self, cache, dy):
        x, z, y = cache
        dz = _act_grad(self.activation, z, y, dy)
        flat_x = x.reshape(-1, x.shape[-1])
        flat_dz = dz.reshape(-1, dz.shape[-1])
        dW = flat_dz.T @ flat_x
        db = flat_dz.sum(axis=0)
        return dz @ self.weights, dW, db


@dataclass
class SetEncoder:
    """Shared per-point MLP followed by a max over points."""

    per_point_layers: list[DenseLayer]

    def __post_init__(self):
        for a, b in zip(self.per_point_layers, self.per_point_layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError("per-point layer sizes do not chain")

    @property
    def input_dim(self) -> int:
        return self.per_point_layers[0].n_in

    @property
    def output_dim(self) -> int:
        return self.per_point_layers[-1].n_out

    def forward(self, points):
        # points: (B, P, F)
        h, caches = points, []
        for layer in self.per_point_layers:
            h, c = layer.forward(h)
            caches.append(c)
        idx = np.argmax(h, axis=1)  # first index on ties
        latent = np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0, :]
        return latent, (caches, idx, h.shape)

    def backward(self, cache, dlatent):
        caches, idx, shape = cache
        dh = np.zeros(shape)
        np.put_along_axis(dh, idx[:, None, :], dlatent[:, None, :], axis=1)
        grads = []
        for layer, c in zip(reversed(self.per_point_layers), reversed(caches)):
            dh, dW, db = layer.backward(c, dh)
            grads.append((dW, db))
        return grads[::-1]


@dataclass
class MlpModel:
    """Optional set encoder whose latent is concatenated with extra features, then an MLP head."""

    head_layers: list[DenseLayer]
    encoder: SetEncoder | None = None
    extra_dim: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        latent = self.encoder.output_dim if self.encoder else 0
        if self.head_layers[0].n_in != latent + self.extra_dim:
            raise ValueError(f"head expects {self.head_layers[0].n_in} inputs, "
                             f"got latent {latent} + extras {self.extra_dim}")
        for a, b in zip(self.head_layers, self.head_layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError("head layer sizes do not chain")

    @property
    def layers(self) -> list[DenseLayer]:
        return (self.encoder.per_point_layers if self.encoder else []) + self.head_layers

    @property
    def output_dim(self) -> int:
        return self.head_layers[-1].n_out

    @property
    def point_dim(self) -> int:
        return self.encoder.input_dim if self.encoder else 0

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.biases]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong size")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> MlpModel:
        def cp(layers):
            return [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in layers]
        enc = SetEncoder(cp(self.encoder.per_point_layers)) if self.encoder else None
        return MlpModel(cp(self.head_layers), enc, self.extra_dim, dict(self.meta))

    def encode(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim == 2:
            points = points[None]
        return self.encoder.forward(points)

    def forward(self, points, extras):
        """Batched forward. ``points`` (B, P, F) or None; ``extras`` (B, E).

        Unbatched inputs ((P, F), (E,)) give an unbatched output.
        """
        extras = np.asarray(extras, dtype=float)
        single = extras.ndim == 1
        if single:
            extras = extras[None]
        if extras.shape[-1] != self.extra_dim:
            raise ValueError(f"expected {self.extra_dim} extra features, got {extras.shape[-1]}")
        enc_cache = None
        if self.encoder is not None:
            latent, enc_cache = self.encode(points)
            if latent.shape[0] == 1 and extras.shape[0] > 1:
                # one observation scored against many extras
                latent = np.broadcast_to(latent, (extras.shape[0], latent.shape[1]))
            h = np.concatenate([latent, extras], axis=1)
        else:
            h = extras
        caches = []
        for layer in self.head_layers:
            h, c = layer.forward(h)
            caches.append(c)
        out = h[0] if single else h
        return out, (enc_cache, caches, single)

    def predict(self, points, extras):
        return self.forward(points, extras)[0]

    def backward(self, cache, dout) -> list[np.ndarray]:
        """Gradients for ``params()`` given dLoss/dOutput."""
        enc_cache, caches, single = cache
        dh = np.asarray(dout, dtype=float)
        if single:
            dh = dh[None]
        head_grads = []
        for layer, c in zip(reversed(self.head_layers), reversed(caches)):
            dh, dW, db = layer.backward(c, dh)
            head_grads.append((dW, db))
        head_grads = head_grads[::-1]
        grads = []
        if self.encoder is not None:
            dlatent = dh[:, :self.encoder.output_dim]
            if enc_cache[1].shape[0] == 1 and dlatent.shape[0] > 1:
                dlatent = dlatent.sum(axis=0, keepdims=True)
            for dW, db in self.encoder.backward(enc_cache, dlatent):
                grads += [dW, db]
        for dW, db in head_grads:
            grads += [dW, db]
        return grads

    # --- checkpoints ----------------------------------------------------
    def save(self, path, meta: dict | None = None) -> None:
        header = {
            "version": CHECKPOINT_VERSION,
            "extra_dim": self.extra_dim,
            "encoder": [[l.n_in, l.n_out, l.activation] for l in self.encoder.per_point_layers]
            if self.encoder else None,
            "head": [[l.n_in, l.n_out, l.activation] for l in self.head_layers],
            "meta": {**self.meta, **(meta or {})},
        }
        raw = json.dumps(header, sort_keys=True).encode()
        blob = self.get_flat().astype("<f8").tobytes()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(blob)

    @classmethod
    def load(cls, path) -> MlpModel:
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC or len(data) < 12:
            raise CheckpointError(f"{path}: not a model checkpoint")
        (n,) = struct.unpack("<I", data[8:12])
        try:
            header = json.loads(data[12:12 + n])
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise CheckpointError(f"{path}: corrupt checkpoint header") from None
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version "
                                  f"{header.get('version')}")

        def build(spec):
            return [DenseLayer(np.zeros((o, i)), np.zeros(o), a) for i, o, a in spec]

        enc = SetEncoder(build(header["encoder"])) if header["encoder"] else None
        model = cls(build(header["head"]), enc, header["extra_dim"], header["meta"])
        blob = data[12 + n:]
        if len(blob) != 8 * model.n_params:
            raise CheckpointError(f"{path}: parameter blob holds {len(blob)} bytes, "
                                  f"expected {8 * model.n_params}")
        model.set_flat(np.frombuffer(blob, dtype="<f8").astype(float))
        return model


def build_model(rng: np.random.Generator, point_dim: int, encoder_sizes, head_sizes,
                extra_dim: int, out_dim: int, activation: str = "relu",
                out_activation: str = "identity") -> MlpModel:
    encoder = None
    latent = 0
    if encoder_sizes:
        layers, n = [], point_dim
        for size in encoder_sizes:
            layers.append(DenseLayer.init(n, size, activation, rng))
            n = size
        encoder = SetEncoder(layers)
        latent = n
    head, n = [], latent + extra_dim
    for size in head_sizes:
        head.append(DenseLayer.init(n, size, activation, rng))
        n = size
    head.append(DenseLayer.init(n, out_dim, out_activation, rng))
    return MlpModel(head, encoder, extra_dim, {"activation": activation})


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def mse_loss(model: MlpModel, points, extras, targets):
    """Mean squared error of a scalar-output model and its parameter gradients."""
    pred, cache = model.forward(points, extras)
    err = pred[:, 0] - targets
    loss = float(np.mean(err ** 2))
    dout = (2.0 / len(targets)) * err[:, None]
    return loss, model.backward(cache, dout)


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def train_mse(model: MlpModel, dataset, epochs: int, lr: float, batch_size: int, seed,
              validation=None, patience: int | None = None):
    """Fit a scalar-output model by mini-batch Adam on mean squared error.

    ``dataset`` and ``validation`` are (points, extras, targets) array triples
    (points may be None for encoder-less models). With ``validation`` and
    ``patience`` training stops once validation loss has not improved for
    ``patience`` epochs and the best parameters are restored.

    Returns a dict with per-epoch ``loss`` and, if given, ``val_loss``.
    """
    points, extras, targets = dataset
    extras = np.asarray(extras, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n = len(targets)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    opt = AdamState(lr=lr)
    params = model.params()
    history = {"loss": [], "val_loss": []}
    best, best_val, stale = None, np.inf, 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            pts = points[b] if points is not None else None
            loss, grads = mse_loss(model, pts, extras[b], targets[b])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            adam_step(params, grads, opt)
            total += loss * len(b)
        history["loss"].append(total / n)
        if validation is not None:
            vp, ve, vt = validation
            pred = model.predict(vp, ve)[:, 0]
            val = float(np.mean((pred - np.asarray(vt)) ** 2))
            history["val_loss"].append(val)
            if val < best_val:
                best_val, best, stale = val, model.get_flat(), 0
            else:
                stale += 1
            if patience is not None and stale >= patience:
                log.debug("early stop at epoch %d (best val %.4g)", epoch, best_val)
                break
    if best is not None:
        model.set_flat(best)
    return history
