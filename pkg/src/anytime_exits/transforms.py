"""Anytime predictive-distribution constructions over early-exit logits.

Every transform maps a :class:`LogitDataset` to a :class:`ProbTrajectory`:
one categorical distribution per (sample, exit).  The product family combines
the current exit with all preceding ones, so its support can only shrink with
depth; the caching transform instead serves the highest-confidence softmax
distribution seen so far.

Products are accumulated as sums of ``w_i * log a(f_i)`` over the classes
still in the running support, with the support itself tracked by an explicit
boolean mask.  This avoids multiplicative underflow on long exit chains.
A (sample, exit) whose running support is empty is flagged degenerate and
falls back to the softmax of that exit's own logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .logit_store import (
    MAGIC_PROBS,
    FormatError,
    LogitDataset,
    _read_exact,
    read_header,
    write_header,
)

PRODUCT_ACTIVATIONS = ("relu", "clipped", "softplus", "shifted_relu", "gated_relu")


@dataclass(frozen=True)
class ExitWeights:
    """Per-exit ensemble weights, all strictly positive."""

    scheme: str  # "linear_over_m" | "uniform_one" | "custom"
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or np.any(values <= 0):
            raise ValueError("exit weights must be a 1-d array of positive reals")
        object.__setattr__(self, "values", values)

    @classmethod
    def linear_over_m(cls, n_exits: int) -> "ExitWeights":
        """w_i = i / M: later exits weigh more (the product-family default)."""
        return cls("linear_over_m", np.arange(1, n_exits + 1) / n_exits)

    @classmethod
    def uniform_one(cls, n_exits: int) -> "ExitWeights":
        return cls("uniform_one", np.ones(n_exits))

    @classmethod
    def custom(cls, values) -> "ExitWeights":
        return cls("custom", np.asarray(values, dtype=np.float64))

    @classmethod
    def for_scheme(cls, scheme: str, n_exits: int, values=None) -> "ExitWeights":
        if scheme == "linear_over_m":
            return cls.linear_over_m(n_exits)
        if scheme == "uniform_one":
            return cls.uniform_one(n_exits)
        if scheme == "custom":
            return cls.custom(values)
        raise ValueError(f"unknown weight scheme {scheme!r}")


@dataclass(frozen=True)
class ActivationSpec:
    """How member logits map to nonnegative scores before combining.

    kinds: "softmax", "relu", "heaviside" (0/1 above b), "gated_relu"
    (f * [f > b]), "clipped" (max(1, 1/b) * max(min(f, b), 0)), "softplus",
    "shifted_relu" (max(f + shift, 0), shift defaulting to 1/K).
    """

    kind: str
    b: float = 0.0
    shift: float | None = None

    def __post_init__(self):
        if self.kind == "clipped" and not self.b > 0:
            raise ValueError("clipped activation requires b > 0")
        if self.kind in ("heaviside", "gated_relu") and self.b < 0:
            raise ValueError(f"{self.kind} requires b >= 0")

    def scores(self, logits: np.ndarray, n_classes: int) -> np.ndarray:
        """Elementwise nonnegative scores for an array of logits."""
        x = np.asarray(logits, dtype=np.float64)
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        if self.kind == "heaviside":
            return (x > self.b).astype(np.float64)
        if self.kind == "gated_relu":
            return np.where(x > self.b, x, 0.0)
        if self.kind == "clipped":
            return clipped_activation(x, self.b)
        if self.kind == "softplus":
            return _softplus(x)
        if self.kind == "shifted_relu":
            shift = self.shift if self.shift is not None else 1.0 / n_classes
            return np.maximum(x + shift, 0.0)
        if self.kind == "softmax":
            raise ValueError("softmax is not a product-member activation; use softmax_latest")
        raise ValueError(f"unknown activation kind {self.kind!r}")


@dataclass
class ProbTrajectory:
    """Per-sample sequence of categorical distributions, one per exit.

    ``degenerate[n, m]`` marks rows whose pre-fallback unnormalized mass was
    exactly zero; ``probs`` then holds the fallback distribution actually
    served.  ``served_exit[n, m] <= m`` records which exit's distribution is
    served at step m (differs from m only for the caching transform).
    """

    probs: np.ndarray  # (N, M, K) float64
    degenerate: np.ndarray  # (N, M) bool
    served_exit: np.ndarray  # (N, M) int32
    method: str = ""

    @property
    def n_samples(self) -> int:
        return self.probs.shape[0]

    @property
    def n_exits(self) -> int:
        return self.probs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[2]

    def validate(self, atol: float = 1e-9) -> None:
        n, m, _ = self.probs.shape
        if self.degenerate.shape != (n, m) or self.served_exit.shape != (n, m):
            raise ValueError("flag shapes do not match probs")
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        sums = self.probs.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=atol, rtol=0):
            raise ValueError(f"row sums deviate from 1 by up to {np.abs(sums - 1).max():.3g}")
        if np.any(self.served_exit > np.arange(m)[None, :]):
            raise ValueError("served_exit points past the current exit")

    def support(self) -> np.ndarray:
        """Pre-fallback support mask: empty on degenerate rows."""
        return (self.probs > 0) & ~self.degenerate[:, :, None]


def _own_exits(n: int, m: int) -> np.ndarray:
    return np.broadcast_to(np.arange(m, dtype=np.int32), (n, m)).copy()


def _softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), overflow-safe on both tails
    return np.logaddexp(x, 0.0)


def clipped_activation(x, b: float):
    """max(1, 1/b) * max(min(x, b), 0): interpolates ramp and step maps.

    Large b leaves positive logits untouched (plain ramp); b -> 0+ approaches
    the 0/1 step on inputs bounded away from 0.
    """
    if not b > 0:
        raise ValueError(f"clipped activation requires b > 0, got {b}")
    c = max(1.0, 1.0 / b)
    return c * np.maximum(np.minimum(x, b), 0.0)


def softmax_latest(ds: LogitDataset) -> ProbTrajectory:
    """Baseline: serve the softmax of the newest exit's logits."""
    n, m, _ = ds.logits.shape
    return ProbTrajectory(
        probs=_softmax(ds.logits),
        degenerate=np.zeros((n, m), dtype=bool),
        served_exit=_own_exits(n, m),
        method="softmax",
    )


def _finish_product(cum_log: np.ndarray, alive: np.ndarray, ds: LogitDataset,
                    method: str, fallback: str = "softmax") -> ProbTrajectory:
    """Normalize running log-scores on the alive mask, filling fallbacks."""
    n, m, k = ds.logits.shape
    degenerate = ~alive.any(axis=2)
    masked = np.where(alive, cum_log, -np.inf)
    with np.errstate(invalid="ignore"):
        mx = masked.max(axis=2, keepdims=True)
        e = np.exp(masked - mx)
        e[~alive] = 0.0
        probs = e / e.sum(axis=2, keepdims=True)
    if np.any(degenerate):
        if fallback == "softmax":
            fb = _softmax(ds.logits[degenerate])
        elif fallback == "uniform":
            fb = np.full((int(degenerate.sum()), k), 1.0 / k)
        else:
            raise ValueError(f"unknown fallback {fallback!r}")
        probs[degenerate] = fb
    return ProbTrajectory(probs, degenerate, _own_exits(n, m), method)


def hard_poe(ds: LogitDataset, b: float = 0.0, w: ExitWeights | None = None,
             fallback: str = "softmax") -> ProbTrajectory:
    """0/1 product across exits: uniform over classes above b at every exit so far.

    The running support is the intersection of per-exit supports, so class
    probabilities for surviving classes are non-decreasing in the exit index
    and the support size is non-increasing.  The weights only appear as
    exponents of 0/1 factors, so they never change the result; the parameter
    is accepted for symmetry with the soft product.
    """
    del w  # 0/1 factors make weights inert
    n, m, k = ds.logits.shape
    alive = np.logical_and.accumulate(ds.logits > b, axis=1)
    counts = alive.sum(axis=2)
    degenerate = counts == 0
    with np.errstate(divide="ignore"):
        probs = alive / np.where(counts[:, :, None] == 0, 1, counts[:, :, None])
    if np.any(degenerate):
        if fallback == "softmax":
            probs[degenerate] = _softmax(ds.logits[degenerate])
        elif fallback == "uniform":
            probs[degenerate] = 1.0 / k
        else:
            raise ValueError(f"unknown fallback {fallback!r}")
    return ProbTrajectory(probs.astype(np.float64), degenerate, _own_exits(n, m), "hard_product")


def product_anytime(ds: LogitDataset, w: ExitWeights | None = None,
                    act: ActivationSpec | None = None,
                    fallback: str = "softmax") -> ProbTrajectory:
    """Weighted product of activated exits 1..m, renormalized at each m.

    probs[n, m] is proportional to  prod_{i<=m} a(f_i(x_n))^{w_i}; rows whose
    running support empties are flagged degenerate and served the fallback.
    Unlike the softmax baseline this is *not* invariant to adding a constant
    to the logits of an exit: the activation pins zero as the survival
    threshold.
    """
    n, m, k = ds.logits.shape
    w = w or ExitWeights.linear_over_m(m)
    act = act or ActivationSpec("relu")
    if act.kind not in PRODUCT_ACTIVATIONS:
        raise ValueError(f"activation {act.kind!r} is not usable in a product")
    if len(w.values) != m:
        raise ValueError(f"got {len(w.values)} weights for {m} exits")
    scores = act.scores(ds.logits, k)
    member_alive = scores > 0
    alive = np.logical_and.accumulate(member_alive, axis=1)
    with np.errstate(divide="ignore"):
        logs = np.where(member_alive, np.log(np.where(member_alive, scores, 1.0)), 0.0)
    cum_log = np.cumsum(logs * w.values[None, :, None], axis=1)
    traj = _finish_product(cum_log, alive, ds, _product_method_name(act), fallback)
    return traj


def _product_method_name(act: ActivationSpec) -> str:
    if act.kind == "relu":
        return "product"
    return f"product_{act.kind}"


def caching_anytime(traj: ProbTrajectory) -> ProbTrajectory:
    """Serve the highest-max-probability distribution seen so far.

    The cache is overwritten only on a strict confidence increase, so ties
    keep the earliest (cheapest) exit.  The served max-confidence sequence is
    non-decreasing by construction, and applying the transform twice changes
    nothing.
    """
    n, m, _ = traj.probs.shape
    conf = traj.probs.max(axis=2)
    served = np.zeros((n, m), dtype=np.int32)
    best = conf[:, 0].copy()
    best_idx = np.zeros(n, dtype=np.int32)
    for j in range(m):
        better = conf[:, j] > best
        best[better] = conf[better, j]
        best_idx[better] = j
        served[:, j] = best_idx
    probs = traj.probs[np.arange(n)[:, None], served]
    degenerate = traj.degenerate[np.arange(n)[:, None], served]
    return ProbTrajectory(probs, degenerate, served, "cached")


def mixture_anytime(ds: LogitDataset, act: ActivationSpec | None = None) -> ProbTrajectory:
    """Uniform average of the first m per-exit normalized members.

    Members whose activation row is all zero contribute a uniform
    distribution, which keeps every mixture a valid distribution without
    discarding exits.  Support grows with m (union), so this is the
    averaging counterpart of the shrinking-support product.
    """
    n, m, k = ds.logits.shape
    act = act or ActivationSpec("relu")
    if act.kind == "softmax":
        members = _softmax(ds.logits)
    else:
        scores = act.scores(ds.logits, k)
        mass = scores.sum(axis=2, keepdims=True)
        members = np.where(mass > 0, scores / np.where(mass == 0, 1, mass), 1.0 / k)
    probs = np.cumsum(members, axis=1) / np.arange(1, m + 1)[None, :, None]
    return ProbTrajectory(
        probs=probs,
        degenerate=np.zeros((n, m), dtype=bool),
        served_exit=_own_exits(n, m),
        method="mixture",
    )


def shifted_relu_member(f: np.ndarray, k_classes: int) -> np.ndarray:
    """max(f + 1/K, 0): the small-label-set member map.

    The shift makes all-zero member rows much rarer when K is small; a logit
    exactly at -1/K still maps to score 0.
    """
    if k_classes < 2:
        raise ValueError("need at least 2 classes")
    return np.maximum(np.asarray(f, dtype=np.float64) + 1.0 / k_classes, 0.0)


# ---------------------------------------------------------------------------
# Adaptive thresholds: a correctness probe sets a per-sample score floor.
# ---------------------------------------------------------------------------

@dataclass
class ThresholdModel:
    """Logistic regression over the top-3 sorted logits, times a scale.

    tau(f) = scale_c * sigmoid(w . top3(f) + bias) >= 0 floors every class
    score, so member distributions can never degenerate while scale_c > 0.
    Fitted once on first-exit logits and reused at all exits.
    """

    weights: np.ndarray  # (3,)
    bias: float
    scale_c: float = 0.0

    def predict_proba(self, logits_2d: np.ndarray) -> np.ndarray:
        feats = _top3_features(logits_2d)
        z = feats @ self.weights + self.bias
        return _sigmoid(z)

    def tau(self, logits_2d: np.ndarray) -> np.ndarray:
        return self.scale_c * self.predict_proba(logits_2d)


def _top3_features(logits_2d: np.ndarray) -> np.ndarray:
    if logits_2d.shape[1] < 3:
        raise ValueError("adaptive thresholds need K >= 3")
    return -np.sort(-logits_2d, axis=1)[:, :3]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_logistic(features: np.ndarray, targets: np.ndarray, lr: float = 0.5,
                 max_iter: int = 5000, tol: float = 1e-8):
    """Full-batch gradient-descent logistic regression.

    Returns (weights, bias).  All-0 or all-1 targets yield a constant model
    (zero weights, saturated bias) with a warning.
    """
    import warnings

    targets = np.asarray(targets, dtype=np.float64)
    n, d = features.shape
    rate = float(np.mean(targets))
    if rate == 0.0 or rate == 1.0:
        warnings.warn("degenerate correctness labels; threshold probe is constant")
        return np.zeros(d), 25.0 if rate == 1.0 else -25.0
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd[sd == 0] = 1.0
    z = (features - mu) / sd
    w = np.zeros(d)
    b = math.log(rate / (1.0 - rate))
    for _ in range(max_iter):
        p = _sigmoid(z @ w + b)
        err = p - targets
        gw = z.T @ err / n
        gb = err.mean()
        w -= lr * gw
        b -= lr * gb
        if max(np.abs(gw).max(), abs(gb)) < tol:
            break
    # fold the standardization back into raw-logit coefficients
    w_raw = w / sd
    b_raw = b - float(w_raw @ mu)
    return w_raw, b_raw


def fit_threshold_model(ds: LogitDataset, full_model_preds: np.ndarray,
                        labels: np.ndarray, c_grid, w: ExitWeights | None = None,
                        validation_indices=None, ece_bins: int = 15) -> ThresholdModel:
    """Fit the correctness probe on exit-1 logits and pick the scale from a grid.

    The probe is trained on (top-3 sorted exit-1 logits -> [pred == label]).
    scale_c is chosen to minimize the mean-over-exits ECE of the adaptive
    trajectory on the validation samples, subject to its count of samples
    with a ground-truth probability drop >= 0.1 staying within 2x the plain
    relu product's count.  If no grid point satisfies the constraint, the one
    with the fewest drops wins.
    """
    from . import metrics as _metrics

    feats = _top3_features(ds.logits[:, 0, :])
    targets = (np.asarray(full_model_preds) == np.asarray(labels)).astype(np.float64)
    weights, bias = fit_logistic(feats, targets)
    model = ThresholdModel(weights=weights, bias=bias, scale_c=0.0)

    idx = np.arange(ds.n_samples) if validation_indices is None else np.asarray(validation_indices)
    val = LogitDataset.from_arrays(ds.logits[idx], np.asarray(labels)[idx])
    w = w or ExitWeights.linear_over_m(ds.n_exits)

    base = product_anytime(val, w=w)
    base_quality = _metrics.quality(base, val.labels)
    base_drops = int(np.sum(_metrics.max_drop_rows(base_quality.gt_prob) >= 0.1))

    best = None
    for c in c_grid:
        cand = replace(model, scale_c=float(c))
        traj = adaptive_threshold_transform(val, cand, w)
        q = _metrics.quality(traj, val.labels)
        drops = int(np.sum(_metrics.max_drop_rows(q.gt_prob) >= 0.1))
        conf = traj.probs.max(axis=2)
        eces = [
            _metrics.ece(conf[:, m], q.correct[:, m], n_bins=ece_bins)
            for m in range(traj.n_exits)
        ]
        mean_ece = float(np.mean(eces))
        ok = drops <= 2 * base_drops
        key = (not ok, mean_ece if ok else drops)
        if best is None or key < best[0]:
            best = (key, float(c))
    model.scale_c = best[1]
    return model


def adaptive_threshold_transform(ds: LogitDataset, model: ThresholdModel,
                                 w: ExitWeights | None = None) -> ProbTrajectory:
    """Product of floored members: each class gets at least tau(f) score.

    Member m uses max(f_m(x)_y, tau(f_m(x))) before normalization, so with a
    positive floor no row can degenerate; tau == 0 reduces each member to the
    plain relu score only when all logits are positive.
    """
    n, m, k = ds.logits.shape
    w = w or ExitWeights.linear_over_m(m)
    taus = np.stack(
        [model.tau(ds.logits[:, j, :]) for j in range(m)], axis=1
    )  # (N, M)
    scores = np.maximum(ds.logits, taus[:, :, None])
    member_alive = scores > 0
    alive = np.logical_and.accumulate(member_alive, axis=1)
    with np.errstate(divide="ignore"):
        logs = np.where(member_alive, np.log(np.where(member_alive, scores, 1.0)), 0.0)
    cum_log = np.cumsum(logs * w.values[None, :, None], axis=1)
    return _finish_product(cum_log, alive, ds, "adaptive", "softmax")


# ---------------------------------------------------------------------------
# Config-driven dispatch and the AEXP on-disk format.
# ---------------------------------------------------------------------------

METHOD_ALIASES = {
    "softmax": "softmax",
    "softmax_latest": "softmax",
    "hard_product": "hard_product",
    "hard_poe": "hard_product",
    "product": "product",
    "pa": "product",
    "cached": "cached",
    "ca": "cached",
    "caching": "cached",
    "mixture": "mixture",
    "moe": "mixture",
    "clipped": "clipped",
    "adaptive": "adaptive",
    "shifted": "shifted_relu",
    "shifted_relu": "shifted_relu",
}


@dataclass
class TransformSpec:
    """JSON-serializable recipe: which method, activation, and weights.

    method: softmax | hard_product | product | cached | mixture | clipped |
    adaptive | shifted_relu.  ``b`` is the hard/gating/clipping threshold,
    ``shift`` the shifted-relu offset (None -> 1/K), ``weights_scheme`` one of
    linear_over_m / uniform_one / custom, ``fallback`` softmax | uniform.
    """

    method: str
    activation: str | None = None
    b: float = 0.0
    shift: float | None = None
    weights_scheme: str = "linear_over_m"
    weights: list | None = None
    fallback: str = "softmax"
    c_grid: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0, 5.0])

    def __post_init__(self):
        try:
            self.method = METHOD_ALIASES[self.method.lower()]
        except KeyError:
            raise ValueError(f"unknown transform method {self.method!r}") from None
        if self.fallback not in ("softmax", "uniform"):
            raise ValueError(f"unknown fallback {self.fallback!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        allowed = {"method", "activation", "b", "shift", "weights_scheme",
                   "weights", "fallback", "c_grid"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown TransformSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "activation": self.activation,
            "b": self.b,
            "shift": self.shift,
            "weights_scheme": self.weights_scheme,
            "weights": self.weights,
            "fallback": self.fallback,
            "c_grid": list(self.c_grid),
        }

    def tag(self) -> str:
        """Short filesystem-safe identifier for output naming."""
        parts = [self.method]
        if self.activation and self.activation != "relu":
            parts.append(self.activation)
        if self.method in ("hard_product", "clipped") and self.b:
            parts.append(f"b{self.b:g}")
        return "-".join(parts).replace(".", "p")

    def apply(self, ds: LogitDataset) -> ProbTrajectory:
        w = ExitWeights.for_scheme(self.weights_scheme, ds.n_exits, self.weights)
        if self.method == "softmax":
            return softmax_latest(ds)
        if self.method == "hard_product":
            return hard_poe(ds, b=self.b, fallback=self.fallback)
        if self.method == "cached":
            return caching_anytime(softmax_latest(ds))
        if self.method == "mixture":
            act = ActivationSpec(self.activation or "relu", b=self.b, shift=self.shift)
            return mixture_anytime(ds, act)
        if self.method == "product":
            act = ActivationSpec(self.activation or "relu", b=self.b, shift=self.shift)
            return product_anytime(ds, w=w, act=act, fallback=self.fallback)
        if self.method == "clipped":
            act = ActivationSpec("clipped", b=self.b if self.b > 0 else 1.0)
            return product_anytime(ds, w=w, act=act, fallback=self.fallback)
        if self.method == "shifted_relu":
            act = ActivationSpec("shifted_relu", shift=self.shift)
            return product_anytime(ds, w=w, act=act, fallback=self.fallback)
        if self.method == "adaptive":
            if not np.all(ds.is_labeled()):
                raise ValueError("adaptive thresholds require a fully labeled dataset")
            preds = np.argmax(_softmax(ds.logits[:, -1, :]), axis=1)
            model = fit_threshold_model(ds, preds, ds.labels, self.c_grid, w=w)
            traj = adaptive_threshold_transform(ds, model, w)
            return traj
        raise AssertionError(self.method)


def save_trajectory(traj: ProbTrajectory, path) -> None:
    """Write the AEXP layout: header, f32 probs, one degeneracy byte per row."""
    n, m, k = traj.probs.shape
    with open(path, "wb") as f:
        write_header(f, MAGIC_PROBS, n, m, k)
        f.write(traj.probs.astype("<f4").tobytes())
        f.write(traj.degenerate.astype(np.uint8).tobytes())


def load_trajectory(path, method: str = "") -> ProbTrajectory:
    """Read an AEXP file back (served_exit is not stored; defaults to own exit)."""
    with open(path, "rb") as f:
        n, m, k = read_header(f, MAGIC_PROBS)
        probs = np.frombuffer(_read_exact(f, 4 * n * m * k, "probabilities"), dtype="<f4")
        flags = np.frombuffer(_read_exact(f, n * m, "degeneracy flags"), dtype=np.uint8)
        if f.read(1):
            raise FormatError("trailing bytes after degeneracy flags")
    return ProbTrajectory(
        probs=probs.astype(np.float64).reshape(n, m, k),
        degenerate=flags.reshape(n, m).astype(bool),
        served_exit=_own_exits(n, m),
        method=method,
    )
