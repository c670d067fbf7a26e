"""Desk-scale multi-exit MLP and interval ensemble, trained with plain SGD.

The classifier is a chain of tanh blocks with one linear head per block, so
the parameters reachable from exit m are exactly those of blocks 1..m plus
head m: perturbing a later block can never change an earlier exit.  Keeping
the optimizer to hand-rolled mini-batch SGD makes training deterministic on
one thread and keeps the analytic gradients easy to check against finite
differences.

Two objectives are supported: the per-exit weighted softmax NLL, and a
product objective where each exit's likelihood multiplies the softplus scores
of all exits so far (softplus keeps every factor strictly positive, so the
product can never collapse to zero mass during training).

The regression side mirrors the classification setup with independent small
regressors, each predicting an interval as (center, log half-width); interval
products intersect member intervals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .logit_store import LogitDataset, read_header, write_header, _read_exact

MAGIC_MODEL = b"AEXM"


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float
    batch_size: int = 64
    exit_loss_weights: tuple | None = None  # None -> all ones
    objective: str = "standard_nll"  # or "pa_finetune"
    finetune_fraction: float = 1.0 / 3.0
    seed: int = 0
    momentum: float = 0.0
    finetune_lr_scale: float = 0.1  # product phase runs at lr * this
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.finetune_fraction < 1.0:
            raise ValueError("finetune_fraction must be in (0, 1)")
        if self.objective not in ("standard_nll", "pa_finetune"):
            raise ValueError(f"unknown objective {self.objective!r}")


class MultiExitMLP:
    """Tanh-block trunk with a linear classifier head after every block."""

    def __init__(self, input_dim: int, widths, n_classes: int, seed: int = 0):
        if not widths:
            raise ValueError("need at least one block")
        self.input_dim = int(input_dim)
        self.widths = [int(w) for w in widths]
        self.n_classes = int(n_classes)
        rng = np.random.default_rng(seed)
        self.blocks = []  # (W, b) per block
        fan_in = self.input_dim
        for width in self.widths:
            s = 1.0 / np.sqrt(fan_in)
            self.blocks.append(
                (rng.uniform(-s, s, size=(fan_in, width)), rng.uniform(-s, s, size=width))
            )
            fan_in = width
        self.heads = []  # (A, c) per block
        for width in self.widths:
            s = 1.0 / np.sqrt(width)
            self.heads.append(
                (rng.uniform(-s, s, size=(width, self.n_classes)),
                 rng.uniform(-s, s, size=self.n_classes))
            )

    @property
    def n_exits(self) -> int:
        return len(self.blocks)

    # -- forward / backward ------------------------------------------------

    def forward_all_exits(self, x: np.ndarray) -> np.ndarray:
        """Raw head outputs f_1(x)..f_M(x) as an (B, M, K) array."""
        return self._forward_cached(x)[1]

    def _forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.input_dim}")
        hiddens = []
        h = x
        logits = np.empty((x.shape[0], self.n_exits, self.n_classes))
        for m, ((w, b), (a, c)) in enumerate(zip(self.blocks, self.heads)):
            h = np.tanh(h @ w + b)
            hiddens.append(h)
            logits[:, m, :] = h @ a + c
        return hiddens, logits

    def _backward(self, x, hiddens, logit_grads):
        """Parameter gradients given dLoss/dlogits per exit."""
        block_grads = [None] * self.n_exits
        head_grads = [None] * self.n_exits
        carry = np.zeros_like(hiddens[-1])
        for m in range(self.n_exits - 1, -1, -1):
            g = logit_grads[:, m, :]
            a, _ = self.heads[m]
            head_grads[m] = (hiddens[m].T @ g, g.sum(axis=0))
            dh = g @ a.T + carry
            dpre = dh * (1.0 - hiddens[m] ** 2)
            inp = x if m == 0 else hiddens[m - 1]
            block_grads[m] = (inp.T @ dpre, dpre.sum(axis=0))
            carry = dpre @ self.blocks[m][0].T
        return block_grads, head_grads

    # -- flat parameter access (for optimizers and gradient checks) ---------

    def parameters(self):
        for w, b in self.blocks:
            yield w
            yield b
        for a, c in self.heads:
            yield a
            yield c

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.parameters():
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        assert pos == flat.size

    def _apply_grads(self, block_grads, head_grads, velocities, lr, momentum,
                     max_grad_norm=0.0):
        grads = []
        for gw, gb in block_grads:
            grads.extend((gw, gb))
        for ga, gc in head_grads:
            grads.extend((ga, gc))
        if max_grad_norm > 0.0:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if total > max_grad_norm:
                scale = max_grad_norm / total
                grads = [g * scale for g in grads]
        for p, g, v in zip(self.parameters(), grads, velocities):
            v *= momentum
            v -= lr * g
            p += v


def flat_grads(block_grads, head_grads) -> np.ndarray:
    parts = []
    for gw, gb in block_grads:
        parts.extend((gw.ravel(), gb.ravel()))
    for ga, gc in head_grads:
        parts.extend((ga.ravel(), gc.ravel()))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _onehot(y, k):
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def standard_loss_and_grads(model: MultiExitMLP, x, y, weights=None):
    """Mean per-sample sum of weighted per-exit softmax NLLs, plus gradients.

    The total decomposes exactly into per-exit weighted NLLs; a zero weight
    removes that exit's head from the gradient entirely.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    w = np.ones(model.n_exits) if weights is None else np.asarray(weights, dtype=np.float64)
    hiddens, logits = model._forward_cached(x)
    b = x.shape[0]
    probs = _softmax(logits)
    gt = probs[np.arange(b)[:, None], np.arange(model.n_exits)[None, :], y[:, None]]
    with np.errstate(divide="ignore"):  # a zero prob shows up as inf loss -> divergence
        loss = float(np.sum(-np.log(gt) * w[None, :]) / b)
    oh = _onehot(y, model.n_classes)
    logit_grads = (probs - oh[:, None, :]) * w[None, :, None] / b
    return loss, model._backward(x, hiddens, logit_grads)


def standard_loss(model, x, y, weights=None) -> float:
    return standard_loss_and_grads(model, x, y, weights)[0]


def _log_softplus(z):
    # log(log(1 + e^z)) with the z -> -inf asymptote handled explicitly
    sp = np.logaddexp(z, 0.0)
    return np.where(z < -30.0, z, np.log(np.where(z < -30.0, 1.0, sp)))


def _dlog_softplus(z):
    # sigmoid(z) / softplus(z); tends to 1 as z -> -inf
    sp = np.logaddexp(z, 0.0)
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return np.where(z < -30.0, 1.0, sig / np.where(z < -30.0, 1.0, sp))


def product_loss_and_grads(model: MultiExitMLP, x, y):
    """NLL of the running softplus product at every exit, plus gradients.

    The exit-m likelihood is proportional to prod_{i<=m} softplus(f_i)_y with
    unit weights; gradients flow through the whole product, so every exit's
    loss term trains all blocks and heads at or below it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    hiddens, logits = model._forward_cached(x)
    b = x.shape[0]
    s = _log_softplus(logits)  # (B, M, K)
    cum = np.cumsum(s, axis=1)
    mx = cum.max(axis=2, keepdims=True)
    lse = mx[:, :, 0] + np.log(np.exp(cum - mx).sum(axis=2))
    gt = cum[np.arange(b)[:, None], np.arange(model.n_exits)[None, :], y[:, None]]
    loss = float(np.sum(lse - gt) / b)
    probs = np.exp(cum - lse[:, :, None])
    diff = probs - _onehot(y, model.n_classes)[:, None, :]
    suffix = np.flip(np.cumsum(np.flip(diff, axis=1), axis=1), axis=1)
    logit_grads = suffix * _dlog_softplus(logits) / b
    return loss, model._backward(x, hiddens, logit_grads)


def product_loss(model, x, y) -> float:
    return product_loss_and_grads(model, x, y)[0]


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _sgd_epochs(model, x, y, cfg: TrainConfig, loss_and_grads, lr):
    rng = np.random.default_rng(cfg.seed)
    velocities = [np.zeros_like(p) for p in model.parameters()]
    n = x.shape[0]
    curve = [loss_and_grads(model, x, y)[0]]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, (bg, hg) = loss_and_grads(model, x[batch], y[batch])
            model._apply_grads(bg, hg, velocities, lr, cfg.momentum, cfg.max_grad_norm)
        epoch_loss = loss_and_grads(model, x, y)[0]
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        curve.append(epoch_loss)
    return curve


def train_standard(model: MultiExitMLP, x, y, cfg: TrainConfig):
    """Mini-batch SGD on the weighted per-exit NLL; returns the loss curve.

    curve[0] is the pre-training loss, then one entry per epoch.
    """
    w = (np.ones(model.n_exits) if cfg.exit_loss_weights is None
         else np.asarray(cfg.exit_loss_weights, dtype=np.float64))
    return _sgd_epochs(
        model, np.asarray(x, dtype=np.float64), np.asarray(y), cfg,
        lambda m_, x_, y_: standard_loss_and_grads(m_, x_, y_, w),
        cfg.learning_rate,
    )


def finetune_pa(model: MultiExitMLP, x, y, cfg: TrainConfig):
    """Continue training on the softplus-product objective with unit weights.

    Expects a model already trained with :func:`train_standard`; runs at
    cfg.learning_rate * cfg.finetune_lr_scale for cfg.epochs epochs.
    """
    return _sgd_epochs(
        model, np.asarray(x, dtype=np.float64), np.asarray(y), cfg,
        product_loss_and_grads, cfg.learning_rate * cfg.finetune_lr_scale,
    )


def train(model: MultiExitMLP, x, y, cfg: TrainConfig):
    """Dispatch on cfg.objective; pa_finetune splits the epoch budget.

    The standard phase takes the first (1 - finetune_fraction) of the epochs,
    the product phase the rest.
    """
    if cfg.objective == "standard_nll":
        return train_standard(model, x, y, cfg)
    n_std = max(1, int(round(cfg.epochs * (1.0 - cfg.finetune_fraction))))
    n_ft = max(1, cfg.epochs - n_std)
    curve = train_standard(model, x, y, replace(cfg, epochs=n_std))
    curve += finetune_pa(model, x, y, replace(cfg, epochs=n_ft, seed=cfg.seed + 1))
    return curve


def export_logits(model: MultiExitMLP, x, y) -> LogitDataset:
    """Run every exit over x and package the raw logits as a dataset."""
    logits = model.forward_all_exits(np.asarray(x, dtype=np.float64))
    return LogitDataset.from_arrays(logits, np.asarray(y, dtype=np.int32))


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

def generate_spirals(n_per_class: int, n_classes: int, noise: float, seed: int,
                     turns: float = 1.75):
    """Interleaved spiral arms in 2-D: radius grows linearly with angle.

    Class c's arm is r(t) = t, theta(t) = 2*pi*(turns*t + c/n_classes) for
    t in (0, 1], plus isotropic Gaussian jitter of scale ``noise``.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(n_classes):
        t = (np.arange(n_per_class) + 1.0) / n_per_class
        theta = 2.0 * np.pi * (turns * t + c / n_classes)
        pts = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1)
        pts = pts + noise * rng.standard_normal(pts.shape)
        xs.append(pts)
        ys.append(np.full(n_per_class, c, dtype=np.int32))
    return np.concatenate(xs), np.concatenate(ys)


def generate_simple1d(n: int, seed: int, cluster_ranges=((-1.0, -0.35), (0.35, 1.0)),
                      noise: float = 0.05):
    """1-D regression inputs in two separated clusters; the gap is left empty.

    Targets follow a smooth curve plus Gaussian noise.  Inputs come back with
    shape (n, 1) ready for the MLP members.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    n_left = n // 2
    (l0, l1), (r0, r1) = cluster_ranges
    x = np.concatenate([
        rng.uniform(l0, l1, size=n_left),
        rng.uniform(r0, r1, size=n - n_left),
    ])
    y = np.sin(4.0 * x) + 0.3 * x + noise * rng.standard_normal(n)
    return x[:, None], y


# ---------------------------------------------------------------------------
# Interval ensemble (regression)
# ---------------------------------------------------------------------------

@dataclass
class IntervalMember:
    """A 1-block regressor emitting (center, log half-width) per input."""

    net: MultiExitMLP

    def intervals(self, x):
        out = self.net.forward_all_exits(np.asarray(x, dtype=np.float64))[:, -1, :]
        center = out[:, 0]
        half = np.exp(np.clip(out[:, 1], -20.0, 20.0))
        return center - half, center + half


class IntervalEnsemble:
    """Independent interval regressors trained to tightly contain targets.

    Each member minimizes log interval width plus a hinge penalty for targets
    left outside; exp-parameterized half-widths keep every interval non-empty.
    Members differ only by seed, which is what makes the later interval
    product informative.
    """

    def __init__(self, members):
        self.members = list(members)

    @classmethod
    def fit(cls, x, y, n_members: int = 5, width: int = 16, epochs: int = 1500,
            lr: float = 0.02, penalty: float = 10.0, seed: int = 0) -> "IntervalEnsemble":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        members = []
        for i in range(n_members):
            net = MultiExitMLP(x.shape[1], [width], 2, seed=seed + i)
            _fit_interval_member(net, x, y, epochs, lr, penalty)
            members.append(IntervalMember(net))
        return cls(members)

    def member_intervals(self, x):
        return [m.intervals(x) for m in self.members]

    def product_intervals(self, x):
        """Per-input running intersection over members: (lo, hi, empty) arrays."""
        lo = None
        for m in self.members:
            a, b = m.intervals(x)
            if lo is None:
                lo, hi = a.copy(), b.copy()
            else:
                lo = np.maximum(lo, a)
                hi = np.minimum(hi, b)
        return lo, hi, lo >= hi


def _fit_interval_member(net, x, y, epochs, lr, penalty):
    # Shrink log-width while penalizing the *relative* overshoot
    # |residual| / half - 1; a linear hinge would lose to the log term as the
    # width collapses, this one grows exponentially in -log(half) instead.
    velocities = [np.zeros_like(p) for p in net.parameters()]
    n = x.shape[0]
    for epoch in range(epochs):
        hiddens, out = net._forward_cached(x)
        center, log_half = out[:, -1, 0], out[:, -1, 1]
        half = np.exp(np.clip(log_half, -20.0, 20.0))
        res = y - center
        ratio = np.abs(res) / half
        viol = ratio > 1.0
        loss = np.mean(np.log(2.0 * half) + penalty * np.maximum(ratio - 1.0, 0.0))
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch)
        g = np.zeros_like(out)
        g[:, -1, 0] = penalty * (-np.sign(res) / half) * viol / n
        g[:, -1, 1] = (1.0 - penalty * ratio * viol) / n
        bg, hg = net._backward(x, hiddens, g)
        net._apply_grads(bg, hg, velocities, lr, 0.9, max_grad_norm=5.0)


def intersect_intervals(members):
    """(max lower, min upper) over (a, b) pairs, or None when they miss.

    Appending members can only shrink the result, and the outcome is the same
    under any member ordering.
    """
    members = list(members)
    if not members:
        raise ValueError("need at least one interval")
    for a, b in members:
        if not a < b:
            raise ValueError(f"invalid interval ({a}, {b})")
    lo = max(a for a, _ in members)
    hi = min(b for _, b in members)
    return (lo, hi) if lo < hi else None


# ---------------------------------------------------------------------------
# Model serialization (flat binary with layer shapes, magic "AEXM")
# ---------------------------------------------------------------------------

def save_model(model: MultiExitMLP, path) -> None:
    import struct

    with open(path, "wb") as f:
        write_header(f, MAGIC_MODEL, model.input_dim, model.n_exits, model.n_classes)
        f.write(struct.pack(f"<{model.n_exits}I", *model.widths))
        for p in model.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> MultiExitMLP:
    import struct

    with open(path, "rb") as f:
        input_dim, m, k = read_header(f, MAGIC_MODEL)
        widths = struct.unpack(f"<{m}I", _read_exact(f, 4 * m, "widths"))
        model = MultiExitMLP(input_dim, widths, k, seed=0)
        for p in model.parameters():
            raw = _read_exact(f, 8 * p.size, "parameters")
            p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
    return model
