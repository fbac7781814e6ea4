"""Small feed-forward networks with hand-written reverse-mode gradients.

Parameters of an :class:`Mlp` live in one flat float64 vector; weight
matrices and bias vectors are views into it.  That keeps Adam, snapshots
for early stopping and serialization trivial.

A *loss adapter* is any object with

``loss_and_grad(outputs, idx) -> (loss, dloss_doutputs)``

where ``outputs`` is the ``(b, d)`` network output for the training rows
``idx`` and the adapter holds whatever per-row targets or features it
needs.  The trainer only ever sees per-sample losses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .numeric import RngStream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_loss: float):
        super().__init__(
            f"training diverged at epoch {epoch} (last finite loss {last_finite_loss:.6g})"
        )
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


class LossAdapter(Protocol):
    def loss_and_grad(self, outputs: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ...


class Mlp:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    Hidden layers use ``activation`` ("relu" or "tanh"); the output layer
    is linear.
    """

    def __init__(self, widths, activation: str = "relu", params: np.ndarray | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self._shapes = list(zip(widths[:-1], widths[1:]))
        n = sum(i * o + o for i, o in self._shapes)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=float)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {params.shape}")
        self.params = params.copy()
        self._bind()

    def _bind(self):
        self.weights, self.biases = [], []
        pos = 0
        for i, o in self._shapes:
            self.weights.append(self.params[pos:pos + i * o].reshape(i, o))
            pos += i * o
            self.biases.append(self.params[pos:pos + o])
            pos += o

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def weight_mask(self) -> np.ndarray:
        """1 for weight-matrix entries, 0 for biases, in flat parameter order."""
        mask = np.zeros(self.params.size)
        pos = 0
        for i, o in self._shapes:
            mask[pos:pos + i * o] = 1.0
            pos += i * o + o
        return mask

    def copy(self) -> "Mlp":
        return Mlp(self.widths, self.activation, self.params)

    def set_params(self, flat: np.ndarray):
        self.params[:] = flat

    def init(self, rng: RngStream, out_scale: float = 0.1) -> "Mlp":
        """Uniform fan-in initialisation; the output layer is shrunk by ``out_scale``."""
        g = rng.generator()
        last = len(self._shapes) - 1
        for layer, ((i, o), W, b) in enumerate(zip(self._shapes, self.weights, self.biases)):
            bound = np.sqrt(6.0 / i) if self.activation == "relu" else np.sqrt(3.0 / i)
            if layer == last:
                bound *= out_scale
            W[:] = g.uniform(-bound, bound, size=(i, o))
            b[:] = 0.0
        return self

    # -- forward / backward ------------------------------------------------

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.n_in:
            raise ValueError(f"input width {h.shape[1]} != {self.n_in}")
        last = len(self.weights) - 1
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if layer < last:
                h = self._act(h)
        return h[0] if single else h

    def forward_cache(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if layer < last:
                h = self._act(h)
            acts.append(h)
        return acts

    def backward(self, acts, dout: np.ndarray) -> np.ndarray:
        """Flat gradient given cached activations and dL/d(outputs)."""
        grad = np.empty_like(self.params)
        pos_end = grad.size
        delta = dout
        for layer in range(len(self.weights) - 1, -1, -1):
            i, o = self._shapes[layer]
            a_in = acts[layer]
            gb = delta.sum(axis=0)
            gW = a_in.T @ delta
            grad[pos_end - o:pos_end] = gb
            pos_end -= o
            grad[pos_end - i * o:pos_end] = gW.ravel()
            pos_end -= i * o
            if layer > 0:
                delta = delta @ self.weights[layer].T
                if self.activation == "relu":
                    delta = delta * (a_in > 0.0)
                else:
                    delta = delta * (1.0 - a_in * a_in)
        return grad

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "crrr.mlp",
            "version": FORMAT_VERSION,
            "widths": self.widths,
            "activation": self.activation,
            "params": [float(v) for v in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != "crrr.mlp" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a crrr.mlp v1 dump")
        return cls(d["widths"], d["activation"], np.asarray(d["params"], dtype=float))


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def weighted_loss_and_grad(net: Mlp, X: np.ndarray, adapter: LossAdapter, idx: np.ndarray,
                           weights: np.ndarray, denom: float):
    """Return (sum_i w_i loss_i / denom, gradient) over rows ``idx``."""
    acts = net.forward_cache(X[idx])
    loss, dout = adapter.loss_and_grad(acts[-1], idx)
    w = weights[idx]
    total = float(w @ loss) / denom
    if not np.isfinite(total):
        return total, None
    grad = net.backward(acts, dout * (w / denom)[:, None])
    return total, grad


def grad_nll(net: Mlp, X: np.ndarray, adapter: LossAdapter, weights=None):
    """Gradient of the weighted mean loss sum(w l) / sum(w) over all rows of ``X``."""
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    idx = np.arange(n)
    s = w.sum()
    if s <= 0:
        return 0.0, np.zeros(net.n_params)
    return weighted_loss_and_grad(net, X, adapter, idx, w, s)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    # Optional plateau schedule: multiply the learning rate by this factor after
    # `decay_patience` epochs without improvement.  None keeps it constant.
    decay_factor: float | None = None
    decay_patience: int = 3
    # Optional exponential moving average of the iterates; validation and the
    # returned snapshot then use the averaged parameters.
    average: float | None = 0.99
    # Decoupled weight decay on the weight matrices (biases are not shrunk).
    weight_decay: float = 0.0

    def validate(self, n: int):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("invalid TrainConfig")
        if self.decay_factor is not None and not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.average is not None and not 0.0 < self.average < 1.0:
            raise ValueError("average must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        n_val = max(1, int(round(self.val_fraction * n)))
        if n - n_val < min(self.batch_size, n - 1) or n - n_val < 1:
            raise ValueError("validation split leaves no full training batch")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainLog:
    epochs: int = 0
    best_epoch: int = 0
    best_val: float = float("inf")
    val_history: list[float] = field(default_factory=list)
    train_history: list[float] = field(default_factory=list)
    floored: int = 0


def check_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights must have shape ({n},)")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.mean() <= 0:
        raise ValueError("sample weights must be finite, nonnegative, with positive mean")
    return w


def train(net: Mlp, X: np.ndarray, adapter: LossAdapter, cfg: TrainConfig, rng: RngStream,
          weights=None) -> tuple[Mlp, TrainLog]:
    """Adam with shuffled mini-batches and early stopping on validation loss.

    The validation rows are a random ``cfg.val_fraction`` of the rows of
    ``X``.  Returns a copy of ``net`` holding the best validation snapshot.
    """
    n = X.shape[0]
    cfg.validate(n)
    w = check_weights(weights, n)
    g = rng.child("split").generator()
    perm = g.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, tr_idx = np.sort(perm[:n_val]), perm[n_val:]
    val_denom = max(w[val_idx].sum(), 1e-300)
    tr_scale = max(w[tr_idx].mean(), 1e-300)

    net = net.copy()
    theta = net.params
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, cfg.learning_rate
    t = 0
    decay = cfg.weight_decay * net.weight_mask() if cfg.weight_decay > 0 else None

    def val_loss():
        acts = net.forward(X[val_idx])
        loss, _ = adapter.loss_and_grad(acts, val_idx)
        return float(w[val_idx] @ loss) / val_denom

    tlog = TrainLog()
    best = theta.copy()
    tlog.best_val = val_loss()
    tlog.val_history.append(tlog.best_val)
    last_finite = tlog.best_val
    since = 0
    stall = 0
    avg = None if cfg.average is None else theta.copy()
    shuffler = rng.child("shuffle").generator()
    bs = min(cfg.batch_size, tr_idx.size)
    for epoch in range(1, cfg.max_epochs + 1):
        order = tr_idx[shuffler.permutation(tr_idx.size)]
        run = 0.0
        for start in range(0, order.size - bs + 1, bs):
            idx = order[start:start + bs]
            loss, grad = weighted_loss_and_grad(net, X, adapter, idx, w, bs * tr_scale)
            if grad is None or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(epoch, last_finite)
            run += loss
            t += 1
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            theta -= lr * mhat / (np.sqrt(vhat) + eps)
            if decay is not None:
                theta -= lr * decay * theta
            if avg is not None:
                avg += (1.0 - cfg.average) * (theta - avg)
        if avg is not None:
            raw = theta.copy()
            theta[:] = avg
        cur = val_loss()
        if not np.isfinite(cur):
            raise TrainingDiverged(epoch, last_finite)
        last_finite = cur
        tlog.epochs = epoch
        tlog.val_history.append(cur)
        tlog.train_history.append(run / max(1, order.size // bs))
        improved = cur < tlog.best_val
        if improved:
            tlog.best_val, tlog.best_epoch = cur, epoch
            best[:] = theta
            since = stall = 0
        if avg is not None:
            theta[:] = raw
        if not improved:
            since += 1
            stall += 1
            if since >= cfg.patience:
                break
            if cfg.decay_factor is not None and stall >= cfg.decay_patience:
                lr *= cfg.decay_factor
                stall = 0
    net.set_params(best)
    tlog.floored = int(getattr(adapter, "floored", 0))
    log.debug("trained %d epochs, best %.6f at %d", tlog.epochs, tlog.best_val, tlog.best_epoch)
    return net, tlog


def dumps(header: dict, net: Mlp) -> str:
    return json.dumps({"header": header, "net": net.to_dict()}, sort_keys=True)


def loads(text: str) -> tuple[dict, Mlp]:
    d = json.loads(text)
    return d["header"], Mlp.from_dict(d["net"])
