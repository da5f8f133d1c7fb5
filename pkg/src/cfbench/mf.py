"""Latent factor models trained by per-observation gradient descent.

Four variants share one training loop:

* ``exp``  - squared error on explicit ratings, prediction ``x_u . y_i``
* ``imp``  - confidence-weighted squared error on binarized implicit data
* ``bias`` - adds a global mean and per-user / per-item offsets
* ``side`` - couples the rating factorization with user-attribute and
  item-attribute factorizations that share ``x_u`` and ``y_i``

All regularization terms sit inside the sums over observations, so an entity
is regularized once per observation it takes part in. The per-pair updates
are exactly the gradients of the per-pair summands.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit

from .dataset import FeedbackKind, ImplicitDataset, RatingDataset, SideInfo, natural_key
from .errors import (
    ConfigurationError,
    KindMismatchError,
    ParseError,
    ReferentialError,
    TrainingDivergedError,
)

log = logging.getLogger(__name__)

MODEL_TAG = "cfbench-model"
MODEL_VERSION = 1


class Variant(str, enum.Enum):
    EXP = "exp"
    IMP = "imp"
    BIAS = "bias"
    SIDE = "side"


@dataclass(frozen=True)
class TrainConfig:
    d: int = 5
    lam: float = 0.3
    eta: float = 0.05
    epochs: int = 100
    seed: int = 0
    alpha: float = 1e-4
    init_scale: float = 0.1
    tol: float = 1e-6

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError("d must be >= 1")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.eta < 0:
            raise ConfigurationError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.init_scale < 0:
            raise ConfigurationError("init_scale must be >= 0")


@dataclass(eq=False)
class FactorModel:
    """Trained parameters. Rows of ``x``/``y``/``w``/``z`` follow the id tuples."""

    variant: Variant
    d: int
    users: tuple[str, ...]
    items: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray
    mu: float = 0.0
    b_user: np.ndarray | None = None
    b_item: np.ndarray | None = None
    user_attrs: tuple[str, ...] = ()
    w: np.ndarray | None = None
    item_attrs: tuple[str, ...] = ()
    z: np.ndarray | None = None
    implicit: bool = False
    history: tuple[float, ...] = field(default=(), repr=False)
    rejected: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        for name in ("x", "y", "w", "z"):
            arr = getattr(self, name)
            if arr is not None and arr.ndim == 2 and arr.shape[1] != self.d:
                raise ValueError(f"{name} has {arr.shape[1]} columns, expected d={self.d}")
        self._upos = {u: k for k, u in enumerate(self.users)}
        self._ipos = {i: k for k, i in enumerate(self.items)}

    @property
    def has_bias(self):
        return self.variant is Variant.BIAS

    def params(self) -> dict[str, np.ndarray]:
        out = {"x": self.x, "y": self.y}
        if self.has_bias:
            out["b_user"] = self.b_user
            out["b_item"] = self.b_item
        if self.w is not None and len(self.user_attrs):
            out["w"] = self.w
        if self.z is not None and len(self.item_attrs):
            out["z"] = self.z
        return out

    def copy(self) -> FactorModel:
        cp = lambda a: None if a is None else a.copy()
        return FactorModel(self.variant, self.d, self.users, self.items, cp(self.x), cp(self.y),
                           self.mu, cp(self.b_user), cp(self.b_item), self.user_attrs, cp(self.w),
                           self.item_attrs, cp(self.z), self.implicit, self.history, self.rejected)

    def score_pairs(self, uidx, iidx) -> np.ndarray:
        """Vectorized prediction for index pairs into ``users``/``items``."""
        s = np.einsum("ij,ij->i", self.x[uidx], self.y[iidx])
        if self.has_bias:
            s = s + self.mu + self.b_user[uidx] + self.b_item[iidx]
        return s


class Prediction(NamedTuple):
    score: float
    cold: bool


def predict(model: FactorModel, user: str, item: str) -> Prediction:
    """Predicted preference; unknown ids fall back to the bias terms (or 0)."""
    u = model._upos.get(user)
    i = model._ipos.get(item)
    if u is not None and i is not None:
        return Prediction(float(model.score_pairs([u], [i])[0]), False)
    if not model.has_bias:
        return Prediction(0.0, True)
    score = model.mu
    if u is not None:
        score += model.b_user[u]
    if i is not None:
        score += model.b_item[i]
    return Prediction(float(score), True)


# ---------------------------------------------------------------------------
# observations in index form

@dataclass(frozen=True)
class _Terms:
    r_u: np.ndarray
    r_i: np.ndarray
    r_target: np.ndarray
    r_weight: np.ndarray
    a_u: np.ndarray
    a_s: np.ndarray
    a_val: np.ndarray
    b_t: np.ndarray
    b_i: np.ndarray
    b_val: np.ndarray


_EMPTY_I = np.zeros(0, dtype=np.int64)
_EMPTY_F = np.zeros(0, dtype=np.float64)


def _side_index(side, users, items, user_attrs=None, item_attrs=None):
    upos = {u: k for k, u in enumerate(users)}
    ipos = {i: k for k, i in enumerate(items)}
    uobs = side.user_observations(include_social=True) if side is not None else []
    iobs = list(side.item_attributes) if side is not None else []
    if user_attrs is None:
        user_attrs = tuple(sorted({s for _, s, _ in uobs}, key=natural_key))
    if item_attrs is None:
        item_attrs = tuple(sorted({t for t, _, _ in iobs}, key=natural_key))
    spos = {s: k for k, s in enumerate(user_attrs)}
    tpos = {t: k for k, t in enumerate(item_attrs)}
    try:
        a_u = np.array([upos[u] for u, _, _ in uobs], dtype=np.int64)
        a_s = np.array([spos[s] for _, s, _ in uobs], dtype=np.int64)
        b_t = np.array([tpos[t] for t, _, _ in iobs], dtype=np.int64)
        b_i = np.array([ipos[i] for _, i, _ in iobs], dtype=np.int64)
    except KeyError as exc:
        raise ReferentialError(f"side information references unknown id {exc.args[0]!r}") from None
    a_val = np.array([v for _, _, v in uobs], dtype=np.float64)
    b_val = np.array([v for _, _, v in iobs], dtype=np.float64)
    return user_attrs, item_attrs, (a_u, a_s, a_val, b_t, b_i, b_val)


def _rating_arrays(data, variant: Variant):
    if isinstance(data, ImplicitDataset):
        weight = np.ones(len(data)) if variant is Variant.BIAS else data.confidence
        return data.base, data.binarized.copy(), np.asarray(weight, dtype=np.float64).copy()
    if not isinstance(data, RatingDataset):
        raise TypeError(f"expected a rating dataset, got {type(data).__name__}")
    if data.feedback_kind is FeedbackKind.IMPLICIT:
        raise KindMismatchError("implicit counts must be binarized first (binarize_and_confidence)")
    if variant is Variant.IMP:
        raise KindMismatchError("the implicit variant needs an ImplicitDataset")
    return data, data.values.copy(), np.ones(len(data))


def _terms(model: FactorModel, data, side: SideInfo | None) -> _Terms:
    base, target, weight = _rating_arrays(data, model.variant)
    if base.users != model.users or base.items != model.items:
        raise ConfigurationError("dataset universe differs from the model's")
    if model.variant is Variant.SIDE:
        _, _, side_arrays = _side_index(side, model.users, model.items, model.user_attrs, model.item_attrs)
    else:
        if side is not None and not side.is_empty():
            raise ConfigurationError(f"variant {model.variant.value} takes no side information")
        side_arrays = (_EMPTY_I, _EMPTY_I, _EMPTY_F, _EMPTY_I, _EMPTY_I, _EMPTY_F)
    return _Terms(base.user_idx, base.item_idx, target, weight, *side_arrays)


# ---------------------------------------------------------------------------
# objective and gradient (full batch, vectorized)

def _rating_residual(model, t):
    pred = np.einsum("ij,ij->i", model.x[t.r_u], model.y[t.r_i])
    if model.has_bias:
        pred = pred + model.mu + model.b_user[t.r_u] + model.b_item[t.r_i]
    return t.r_target - pred


def _check_variant(model, data):
    if isinstance(data, ImplicitDataset):
        ok = model.variant in (Variant.IMP, Variant.SIDE, Variant.BIAS)
    else:
        ok = model.variant is not Variant.IMP
    if not ok or (model.variant is Variant.SIDE and model.implicit != isinstance(data, ImplicitDataset)):
        raise KindMismatchError(f"variant {model.variant.value} does not match {type(data).__name__}")


def objective(model: FactorModel, data, side: SideInfo | None = None, lam: float = 0.3) -> float:
    """Exact training loss, regularization included."""
    _check_variant(model, data)
    t = _terms(model, data, side)
    return _objective(model, t, lam)


def _objective(model, t: _Terms, lam: float) -> float:
    x, y = model.x, model.y
    sqx = np.einsum("ij,ij->i", x, x)
    sqy = np.einsum("ij,ij->i", y, y)
    e = _rating_residual(model, t)
    reg = sqx[t.r_u] + sqy[t.r_i]
    if model.has_bias:
        reg = reg + model.b_user[t.r_u] ** 2 + model.b_item[t.r_i] ** 2
    total = np.sum(t.r_weight * e * e) + lam * np.sum(reg)
    if len(t.a_u):
        w = model.w
        ea = t.a_val - np.einsum("ij,ij->i", x[t.a_u], w[t.a_s])
        total += np.sum(ea * ea) + lam * np.sum(sqx[t.a_u] + np.einsum("ij,ij->i", w, w)[t.a_s])
    if len(t.b_t):
        z = model.z
        eb = t.b_val - np.einsum("ij,ij->i", z[t.b_t], y[t.b_i])
        total += np.sum(eb * eb) + lam * np.sum(np.einsum("ij,ij->i", z, z)[t.b_t] + sqy[t.b_i])
    return 0.5 * float(total)


def gradient(model: FactorModel, data, side: SideInfo | None = None, lam: float = 0.3) -> dict[str, np.ndarray]:
    """Analytic full-batch gradient, keyed like ``FactorModel.params()``."""
    _check_variant(model, data)
    t = _terms(model, data, side)
    x, y = model.x, model.y
    g = {k: np.zeros_like(v) for k, v in model.params().items()}
    we = t.r_weight * _rating_residual(model, t)
    np.add.at(g["x"], t.r_u, -we[:, None] * y[t.r_i] + lam * x[t.r_u])
    np.add.at(g["y"], t.r_i, -we[:, None] * x[t.r_u] + lam * y[t.r_i])
    if model.has_bias:
        np.add.at(g["b_user"], t.r_u, -we + lam * model.b_user[t.r_u])
        np.add.at(g["b_item"], t.r_i, -we + lam * model.b_item[t.r_i])
    if "w" in g and len(t.a_u):
        w = model.w
        ea = t.a_val - np.einsum("ij,ij->i", x[t.a_u], w[t.a_s])
        np.add.at(g["x"], t.a_u, -ea[:, None] * w[t.a_s] + lam * x[t.a_u])
        np.add.at(g["w"], t.a_s, -ea[:, None] * x[t.a_u] + lam * w[t.a_s])
    if "z" in g and len(t.b_t):
        z = model.z
        eb = t.b_val - np.einsum("ij,ij->i", z[t.b_t], y[t.b_i])
        np.add.at(g["z"], t.b_t, -eb[:, None] * y[t.b_i] + lam * z[t.b_t])
        np.add.at(g["y"], t.b_i, -eb[:, None] * z[t.b_t] + lam * y[t.b_i])
    return g


def gradient_check(model: FactorModel, data, side: SideInfo | None = None, epsilon: float = 1e-5,
                   lam: float = 0.3, max_params: int = 100) -> float:
    """Worst relative gap between analytic and central-difference gradients."""
    n_params = sum(p.size for p in model.params().values())
    if n_params > max_params:
        raise ConfigurationError(f"{n_params} parameters; gradient_check is meant for <= {max_params}")
    t = _terms(model, data, side)
    analytic = gradient(model, data, side, lam)
    probe = model.copy()
    worst = 0.0
    for name, arr in probe.params().items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = _objective(probe, t, lam)
            flat[k] = orig - epsilon
            down = _objective(probe, t, lam)
            flat[k] = orig
            num = (up - down) / (2 * epsilon)
            scale = max(abs(ga[k]), abs(num), 1e-6)
            worst = max(worst, abs(ga[k] - num) / scale)
    return worst


# ---------------------------------------------------------------------------
# training

@njit(cache=True)
def _sgd_sweep(P, Q, rows, cols, target, weight, order, eta, lam, mu, bp, bq, use_bias):
    d = P.shape[1]
    for k in order:
        u = rows[k]
        i = cols[k]
        pred = 0.0
        for f in range(d):
            pred += P[u, f] * Q[i, f]
        if use_bias:
            pred += mu + bp[u] + bq[i]
        g = weight[k] * (target[k] - pred)
        for f in range(d):
            pu = P[u, f]
            qi = Q[i, f]
            P[u, f] = pu + eta * (g * qi - lam * pu)
            Q[i, f] = qi + eta * (g * pu - lam * qi)
        if use_bias:
            bu = bp[u]
            bi = bq[i]
            bp[u] = bu + eta * (g - lam * bu)
            bq[i] = bi + eta * (g - lam * bi)


def _fit(variant: Variant, data, side: SideInfo | None, cfg: TrainConfig, init: FactorModel | None = None):
    base, target, weight = _rating_arrays(data, variant)
    implicit = isinstance(data, ImplicitDataset)
    rng = np.random.default_rng(cfg.seed)
    s = cfg.init_scale
    user_attrs, item_attrs = (), ()
    if variant is Variant.SIDE:
        user_attrs, item_attrs, _ = _side_index(side, base.users, base.items)
    if init is None:
        model = FactorModel(
            variant, cfg.d, base.users, base.items,
            x=rng.uniform(-s, s, (base.n_users, cfg.d)),
            y=rng.uniform(-s, s, (base.n_items, cfg.d)),
            user_attrs=user_attrs, item_attrs=item_attrs,
            w=rng.uniform(-s, s, (len(user_attrs), cfg.d)),
            z=rng.uniform(-s, s, (len(item_attrs), cfg.d)),
            implicit=implicit,
        )
        if variant is Variant.BIAS:
            model.mu = float(np.mean(target)) if len(target) else 0.0
            model.b_user = np.zeros(base.n_users)
            model.b_item = np.zeros(base.n_items)
    else:
        model = init.copy()
        if model.variant is not variant:
            raise ConfigurationError("initial model has a different variant")
        model.implicit = implicit
    t = _terms(model, data, side)
    zeros_u = model.b_user if model.has_bias else np.zeros(base.n_users)
    zeros_i = model.b_item if model.has_bias else np.zeros(base.n_items)
    no_bias_u, no_bias_a = np.zeros(base.n_users), np.zeros(len(model.user_attrs))
    no_bias_t, no_bias_i = np.zeros(len(model.item_attrs)), np.zeros(base.n_items)
    ones_a, ones_b = np.ones(len(t.a_u)), np.ones(len(t.b_t))

    history = [_objective(model, t, cfg.lam)]
    rejected = None
    for epoch in range(1, cfg.epochs + 1):
        saved = {k: v.copy() for k, v in model.params().items()}
        _sgd_sweep(model.x, model.y, t.r_u, t.r_i, t.r_target, t.r_weight,
                   rng.permutation(len(t.r_u)), cfg.eta, cfg.lam, model.mu,
                   zeros_u, zeros_i, model.has_bias)
        if len(t.a_u):
            _sgd_sweep(model.x, model.w, t.a_u, t.a_s, t.a_val, ones_a,
                       rng.permutation(len(t.a_u)), cfg.eta, cfg.lam, 0.0, no_bias_u, no_bias_a, False)
        if len(t.b_t):
            _sgd_sweep(model.z, model.y, t.b_t, t.b_i, t.b_val, ones_b,
                       rng.permutation(len(t.b_t)), cfg.eta, cfg.lam, 0.0, no_bias_t, no_bias_i, False)
        with np.errstate(over="ignore", invalid="ignore"):
            loss = _objective(model, t, cfg.lam)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in model.params().values()):
            raise TrainingDivergedError(epoch, f"objective {loss}")
        prev = history[-1]
        if loss > prev:
            # A sweep that makes things worse ends training; its parameters are
            # discarded so the returned model is the best one seen.
            for k, v in saved.items():
                getattr(model, k)[...] = v
            rejected = loss
            break
        history.append(loss)
        if prev <= 0 or (prev - loss) / prev < cfg.tol:
            break
    log.debug("%s: %d epochs, objective %.6g -> %.6g", variant.value, len(history) - 1, history[0], history[-1])
    model.history = tuple(history)
    model.rejected = rejected
    return model


def train_mf_exp(train: RatingDataset, cfg: TrainConfig, init: FactorModel | None = None) -> FactorModel:
    return _fit(Variant.EXP, train, None, cfg, init)


def train_mf_imp(train: ImplicitDataset, cfg: TrainConfig, init: FactorModel | None = None) -> FactorModel:
    if not isinstance(train, ImplicitDataset):
        raise KindMismatchError("train_mf_imp needs an ImplicitDataset")
    return _fit(Variant.IMP, train, None, cfg, init)


def train_mf_bias(train, cfg: TrainConfig, init: FactorModel | None = None) -> FactorModel:
    return _fit(Variant.BIAS, train, None, cfg, init)


def train_mf_side(train, side: SideInfo, cfg: TrainConfig, init: FactorModel | None = None) -> FactorModel:
    if side is None or side.is_empty():
        raise ConfigurationError("the side-information variant needs at least one attribute or link")
    return _fit(Variant.SIDE, train, side, cfg, init)


# ---------------------------------------------------------------------------
# serialization

def _vec(values) -> str:
    return "\t".join(repr(float(v)) for v in values)


def save_model(model: FactorModel, path) -> None:
    lines = [f"{MODEL_TAG}\t{MODEL_VERSION}", f"variant\t{model.variant.value}", f"d\t{model.d}",
             f"mu\t{float(model.mu)!r}", f"implicit\t{int(model.implicit)}"]
    bu = model.b_user if model.has_bias else np.zeros(len(model.users))
    bi = model.b_item if model.has_bias else np.zeros(len(model.items))
    sections = [("users", model.users, model.x, bu), ("items", model.items, model.y, bi),
                ("user_attrs", model.user_attrs, model.w, None),
                ("item_attrs", model.item_attrs, model.z, None)]
    for label, ids, mat, bias in sections:
        lines.append(f"{label}\t{len(ids)}")
        for k, ident in enumerate(ids):
            row = [ident]
            if bias is not None:
                row.append(repr(float(bias[k])))
            row.append(_vec(mat[k]))
            lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> FactorModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    it = iter(enumerate(lines, 1))

    def field_(name):
        lineno, line = next(it)
        parts = line.split("\t")
        if parts[0] != name:
            raise ParseError(f"expected {name!r}", path, lineno)
        return parts[1:]

    if field_(MODEL_TAG) != [str(MODEL_VERSION)]:
        raise ParseError("unsupported model format version", path, 1)
    variant = Variant(field_("variant")[0])
    d = int(field_("d")[0])
    mu = float(field_("mu")[0])
    implicit = bool(int(field_("implicit")[0]))

    def section(name, with_bias):
        n = int(field_(name)[0])
        ids, bias, rows = [], [], []
        for _ in range(n):
            _, line = next(it)
            parts = line.split("\t")
            ids.append(parts[0])
            if with_bias:
                bias.append(float(parts[1]))
            rows.append([float(v) for v in parts[2 if with_bias else 1:]])
        return tuple(ids), np.array(bias), np.array(rows, dtype=np.float64).reshape(n, d)

    users, bu, x = section("users", True)
    items, bi, y = section("items", True)
    uattrs, _, w = section("user_attrs", False)
    iattrs, _, z = section("item_attrs", False)
    has_bias = variant is Variant.BIAS
    return FactorModel(variant, d, users, items, x, y, mu, bu if has_bias else None,
                       bi if has_bias else None, uattrs, w, iattrs, z, implicit)
