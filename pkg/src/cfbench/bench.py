"""Experiment orchestration: configs, fold runs, comparison tables, report files.

A run is fully determined by its :class:`ExperimentConfig`. Every random
choice (fold shuffle, cold-user sample, model initialization, SGD order,
precision tie-breaks) draws from a sub-seed derived from the master seed and
a tuple of labels, so adding a method or a dataset never shifts the seeds of
existing ones.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import (
    EPINIONS,
    FILMTRUST,
    LASTFM,
    EdgeListSchema,
    FeedbackKind,
    RatingDataset,
    SideInfo,
    binarize_and_confidence,
    cold_start_split,
    kfold_split,
    load_edge_list,
    load_movielens,
    load_social_links,
)
from .errors import (
    ConfigurationError,
    DatasetMissingError,
    FoldFailedError,
    KindMismatchError,
)
from .metrics import DEFAULT_KS, FoldMetrics, RankedPrediction, evaluate_users, format_user_rows
from .mf import TrainConfig, train_mf_bias, train_mf_exp, train_mf_imp, train_mf_side
from .rwr import (
    augment_graph,
    bias_vector,
    build_graph,
    global_mean_vector,
    row_normalize,
    rwr_bias_scores_many,
    rwr_scores_many,
)

log = logging.getLogger(__name__)

DATA_ENV = "CFBENCH_DATA_DIR"

METHODS = ("mf_exp", "mf_imp", "mf_bias", "mf_side", "rwr_exp", "rwr_imp", "rwr_bias", "rwr_side")
METHOD_LABELS = {
    "mf_exp": "MF_Exp", "mf_imp": "MF_Imp", "mf_bias": "MF_Bias", "mf_side": "MF_Side",
    "rwr_exp": "RWR_Exp", "rwr_imp": "RWR_Imp", "rwr_bias": "RWR_Bias", "rwr_side": "RWR_Side",
}
_EXPLICIT_ONLY = {"mf_exp", "rwr_exp"}
_IMPLICIT_ONLY = {"mf_imp", "rwr_imp"}
_NEEDS_SIDE = {"mf_side", "rwr_side"}

RWR_BLOCK = 128


def data_dir(override=None) -> Path:
    """Explicit argument, then the ``CFBENCH_DATA_DIR`` variable, then ``./data``."""
    if override is not None:
        return Path(override)
    env = os.environ.get(DATA_ENV)
    return Path(env) if env else Path("data")


# ---------------------------------------------------------------------------
# dataset registry

@dataclass(frozen=True)
class DatasetSpec:
    name: str
    kind: FeedbackKind
    files: tuple[tuple[str, str], ...]
    large: bool = False
    load_only: bool = False

    def default_paths(self, root: Path) -> dict[str, Path]:
        return {role: root / rel for role, rel in self.files}


DATASETS = {
    "movielens": DatasetSpec("movielens", FeedbackKind.EXPLICIT,
                             (("ratings", "ml-100k/u.data"), ("users", "ml-100k/u.user"))),
    "filmtrust": DatasetSpec("filmtrust", FeedbackKind.EXPLICIT,
                             (("ratings", "filmtrust/ratings.txt"), ("links", "filmtrust/trust.txt"))),
    "epinions": DatasetSpec("epinions", FeedbackKind.EXPLICIT,
                            (("ratings", "epinions/ratings_data.txt"), ("links", "epinions/trust_data.txt")),
                            large=True),
    "lastfm": DatasetSpec("lastfm", FeedbackKind.IMPLICIT,
                          (("ratings", "hetrec2011-lastfm-2k/user_artists.dat"),
                           ("links", "hetrec2011-lastfm-2k/user_friends.dat"))),
    "audioscrobbler": DatasetSpec("audioscrobbler", FeedbackKind.IMPLICIT,
                                  (("ratings", "audioscrobbler/user_artist_data.txt"),), load_only=True),
}


def _dataset_spec(name: str) -> DatasetSpec:
    try:
        return DATASETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown dataset {name!r}; known: {', '.join(DATASETS)}") from None


def missing_files(paths: Mapping[str, Path]) -> list[str]:
    return [str(p) for _, p in sorted(paths.items()) if not Path(p).is_file()]


def load_named(name: str, paths: Mapping[str, Path]) -> tuple[RatingDataset, SideInfo]:
    """Load a registered dataset; side information is restricted to known users/items."""
    spec = _dataset_spec(name)
    missing = missing_files(paths)
    if missing:
        raise DatasetMissingError(f"{name}: missing {', '.join(missing)}")
    if name == "movielens":
        ds, side = load_movielens(paths["ratings"], paths["users"])
        return ds, side
    if name == "filmtrust":
        ds = load_edge_list(paths["ratings"], FILMTRUST, spec.kind, (0.5, 4.0, 0.5), name)
        side = load_social_links(paths["links"])
    elif name == "epinions":
        ds = load_edge_list(paths["ratings"], EPINIONS, spec.kind, (1.0, 5.0, 1.0), name)
        side = load_social_links(paths["links"])
    elif name == "lastfm":
        ds = load_edge_list(paths["ratings"], LASTFM, spec.kind, None, name)
        side = load_social_links(paths["links"], "\t", skip_header=True)
    else:
        ds = load_edge_list(paths["ratings"], EdgeListSchema(), spec.kind, None, name)
        side = SideInfo()
    return ds, side.restricted_to(ds.users, ds.items)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class Hyperparameters:
    d: int = 5
    lam: float = 0.3
    eta: float = 0.05
    epochs: int = 100
    alpha: float = 1e-4
    c: float = 0.2
    beta: float = 0.4
    gamma: float = 0.3
    delta: float = 2.0
    eps: float = 1e-9
    max_iter: int = 1000
    init_scale: float = 0.1
    tol: float = 1e-6

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def used_by(self, method: str, kind: FeedbackKind) -> dict[str, float]:
        if method.startswith("mf_"):
            keys = ["d", "lam", "eta", "epochs", "init_scale", "tol"]
        else:
            keys = ["c", "eps", "max_iter"]
            if method == "rwr_bias":
                keys += ["beta", "gamma"]
            if method == "rwr_side":
                keys.append("delta")
        if kind is FeedbackKind.IMPLICIT:
            keys.append("alpha")
        return {k: getattr(self, k) for k in sorted(keys)}


# Per-dataset values from the published grid; other datasets use the MovieLens row.
_MF_SIDE = {"movielens": (0.3, 0.01), "filmtrust": (0.25, 0.02), "epinions": (0.25, 0.03),
            "lastfm": (0.3, 0.05)}
_RWR_EXP_C = {"movielens": 0.2, "filmtrust": 0.2, "epinions": 0.5}
_RWR_IMP_C = {"lastfm": 0.1, "audioscrobbler": 0.1}
_RWR_BIAS = {"movielens": (0.4, 0.3, 0.2), "filmtrust": (0.25, 0.1, 0.2), "epinions": (0.5, 0.3, 0.2)}
_RWR_SIDE = {"movielens": (2.0, 0.2), "filmtrust": (1.0, 0.2), "epinions": (1.0, 0.2), "lastfm": (1.0, 0.2)}


def default_hyperparameters(method: str, dataset: str) -> Hyperparameters:
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    hp = Hyperparameters()
    if method == "mf_side":
        lam, eta = _MF_SIDE.get(dataset, _MF_SIDE["movielens"])
        hp = replace(hp, lam=lam, eta=eta)
    elif method == "rwr_exp":
        hp = replace(hp, c=_RWR_EXP_C.get(dataset, _RWR_EXP_C["movielens"]))
    elif method == "rwr_imp":
        hp = replace(hp, c=_RWR_IMP_C.get(dataset, _RWR_IMP_C["lastfm"]))
    elif method == "rwr_bias":
        beta, gamma, c = _RWR_BIAS.get(dataset, _RWR_BIAS["movielens"])
        hp = replace(hp, beta=beta, gamma=gamma, c=c)
    elif method == "rwr_side":
        delta, c = _RWR_SIDE.get(dataset, _RWR_SIDE["movielens"])
        hp = replace(hp, delta=delta, c=c)
    return hp


@dataclass(frozen=True)
class Protocol:
    kind: str = "kfold"
    k: int = 5
    fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("kfold", "cold_start"):
            raise ConfigurationError(f"protocol must be 'kfold' or 'cold_start', got {self.kind!r}")
        if self.kind == "kfold" and self.k < 2:
            raise ConfigurationError("kfold needs k >= 2")
        if self.kind == "cold_start" and not 0 < self.fraction < 1:
            raise ConfigurationError("cold_start fraction must lie in (0, 1)")

    @property
    def label(self) -> str:
        return f"kfold{self.k}" if self.kind == "kfold" else f"cold{self.fraction:g}"

    def to_dict(self) -> dict:
        if self.kind == "kfold":
            return {"kind": "kfold", "k": self.k}
        return {"kind": "cold_start", "fraction": self.fraction}

    @classmethod
    def from_dict(cls, d) -> Protocol:
        if isinstance(d, str):
            return cls(d)
        _reject_unknown(d, {"kind", "k", "fraction"}, "protocol")
        kind = d.get("kind", "kfold")
        allowed = {"kind", "k"} if kind == "kfold" else {"kind", "fraction"}
        _reject_unknown(d, allowed, f"{kind} protocol")
        return cls(kind, int(d.get("k", 5)), float(d.get("fraction", 0.2)))


def _reject_unknown(d, allowed, where):
    if not isinstance(d, Mapping):
        raise ConfigurationError(f"{where} must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(extra)}")


CONFIG_KEYS = ("dataset", "method", "protocol", "hyperparameters", "seed", "ks", "tiebreak")


@dataclass(frozen=True)
class ExperimentConfig:
    """One method on one dataset under one protocol.

    ``paths`` maps file roles (``ratings``, ``users``, ``links``) to paths;
    roles left out resolve against the data directory. ``tiebreak`` selects
    how equal scores are ordered in top-k lists: ``"id"`` (default) uses the
    item order, ``"random"`` uses a seeded permutation of the item universe
    shared by all methods, which keeps id order (often correlated with
    popularity) out of the actual top-k sets.
    """

    dataset: str
    method: str
    protocol: Protocol = Protocol()
    hyperparameters: Hyperparameters | None = None
    seed: int = 0
    ks: tuple[int, ...] = DEFAULT_KS
    paths: tuple[tuple[str, str], ...] = ()
    tiebreak: str = "id"

    def __post_init__(self):
        spec = _dataset_spec(self.dataset)
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; known: {', '.join(METHODS)}")
        if self.method in _EXPLICIT_ONLY and spec.kind is not FeedbackKind.EXPLICIT:
            raise KindMismatchError(f"{self.method} needs explicit ratings; {self.dataset} is implicit")
        if self.method in _IMPLICIT_ONLY and spec.kind is not FeedbackKind.IMPLICIT:
            raise KindMismatchError(f"{self.method} needs implicit feedback; {self.dataset} is explicit")
        if self.hyperparameters is None:
            object.__setattr__(self, "hyperparameters", default_hyperparameters(self.method, self.dataset))
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if not self.ks or any(k < 1 for k in self.ks) or len(set(self.ks)) != len(self.ks):
            raise ConfigurationError("ks must be distinct positive integers")
        if self.tiebreak not in ("random", "id"):
            raise ConfigurationError("tiebreak must be 'random' or 'id'")
        roles = {r for r, _ in spec.files}
        bad = sorted({r for r, _ in self.paths} - roles)
        if bad:
            raise ConfigurationError(f"unknown file role(s) for {self.dataset}: {', '.join(bad)}")
        object.__setattr__(self, "paths", tuple(sorted((r, str(p)) for r, p in self.paths)))

    @property
    def kind(self) -> FeedbackKind:
        return DATASETS[self.dataset].kind

    def resolved_paths(self, root=None) -> dict[str, Path]:
        out = DATASETS[self.dataset].default_paths(data_dir(root))
        out.update({r: Path(p) for r, p in self.paths})
        return out

    def check_files(self, root=None) -> None:
        missing = missing_files(self.resolved_paths(root))
        if missing:
            raise DatasetMissingError(f"{self.dataset}: missing {', '.join(missing)}")

    def to_dict(self) -> dict:
        ds = {"name": self.dataset}
        if self.paths:
            ds["paths"] = dict(self.paths)
        return {
            "dataset": ds,
            "method": self.method,
            "protocol": self.protocol.to_dict(),
            "hyperparameters": asdict(self.hyperparameters),
            "seed": self.seed,
            "ks": list(self.ks),
            "tiebreak": self.tiebreak,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ExperimentConfig:
        _reject_unknown(d, CONFIG_KEYS, "config")
        for key in ("dataset", "method"):
            if key not in d:
                raise ConfigurationError(f"config is missing {key!r}")
        ds = d["dataset"]
        paths = ()
        if isinstance(ds, Mapping):
            _reject_unknown(ds, {"name", "paths"}, "dataset")
            paths = tuple((ds.get("paths") or {}).items())
            ds = ds.get("name")
        method = d["method"]
        hp = default_hyperparameters(method, ds)
        overrides = d.get("hyperparameters") or {}
        _reject_unknown(overrides, Hyperparameters.names(), "hyperparameters")
        types = {f.name: f.type for f in fields(Hyperparameters)}
        hp = replace(hp, **{k: (int(v) if types[k] in ("int", int) else float(v)) for k, v in overrides.items()})
        return cls(
            dataset=ds,
            method=method,
            protocol=Protocol.from_dict(d.get("protocol", {"kind": "kfold", "k": 5})),
            hyperparameters=hp,
            seed=int(d.get("seed", 0)),
            ks=tuple(d.get("ks", DEFAULT_KS)),
            paths=paths,
            tiebreak=d.get("tiebreak", "id"),
        )


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# seeds

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *labels) -> int:
    """Fold each label (hashed with BLAKE2b) into a splitmix64 chain."""
    state = splitmix64(int(master) & _MASK)
    for label in labels:
        h = int.from_bytes(hashlib.blake2b(str(label).encode(), digest_size=8).digest(), "little")
        state = splitmix64(state ^ h)
    return state


# ---------------------------------------------------------------------------
# running one fold

@dataclass(frozen=True, eq=False)
class FoldJob:
    fold: int
    method: str
    kind: FeedbackKind
    hp: Hyperparameters
    train: RatingDataset
    test: RatingDataset
    side: SideInfo | None
    seed: int
    ks: tuple[int, ...]
    tiebreak: np.ndarray | None


Scorer = Callable[[np.ndarray, Sequence[np.ndarray]], list]


def _mf_scorer(job: FoldJob) -> Scorer:
    hp = job.hp
    cfg = TrainConfig(d=hp.d, lam=hp.lam, eta=hp.eta, epochs=hp.epochs, seed=job.seed,
                      alpha=hp.alpha, init_scale=hp.init_scale, tol=hp.tol)
    data = binarize_and_confidence(job.train, hp.alpha) if job.kind is FeedbackKind.IMPLICIT else job.train
    if job.method == "mf_exp":
        model = train_mf_exp(data, cfg)
    elif job.method == "mf_imp":
        model = train_mf_imp(data, cfg)
    elif job.method == "mf_bias":
        model = train_mf_bias(data, cfg)
    else:
        model = train_mf_side(data, job.side, cfg)

    def score(users, item_groups):
        uidx = np.repeat(users, [len(g) for g in item_groups])
        flat = model.score_pairs(uidx, np.concatenate(item_groups))
        return np.split(flat, np.cumsum([len(g) for g in item_groups])[:-1])

    return score


def _rwr_scorer(job: FoldJob) -> Scorer:
    hp = job.hp
    data = binarize_and_confidence(job.train, hp.alpha) if job.kind is FeedbackKind.IMPLICIT else job.train
    g = build_graph(data)
    if job.method == "rwr_side":
        g = augment_graph(g, job.side, hp.delta)
    adj = row_normalize(g)
    if job.method == "rwr_bias":
        b = bias_vector(adj, global_mean_vector(g), hp.c, hp.eps, hp.max_iter)

        def block(q):
            return rwr_bias_scores_many(adj, q, hp.beta, hp.gamma, b, hp.eps, hp.max_iter)[0]
    else:
        def block(q):
            return rwr_scores_many(adj, q, hp.c, hp.eps, hp.max_iter)[0]

    def score(users, item_groups):
        out = []
        for start in range(0, len(users), RWR_BLOCK):
            r = block([g.user_node(int(u)) for u in users[start:start + RWR_BLOCK]])
            for j, items in enumerate(item_groups[start:start + RWR_BLOCK]):
                out.append(r[g.n_users + items, j])
        return out

    return score


def _group_by_user(test: RatingDataset):
    order = np.lexsort((test.item_idx, test.user_idx))
    users, starts = np.unique(test.user_idx[order], return_index=True)
    return users, np.split(order, starts[1:])


def run_fold(job: FoldJob) -> FoldMetrics:
    """Train on ``job.train``, rank each test user's held-out items, score them."""
    try:
        scorer = _mf_scorer(job) if job.method.startswith("mf_") else _rwr_scorer(job)
        users, rows = _group_by_user(job.test)
        items = [job.test.item_idx[r] for r in rows]
        scores = scorer(users, items)
        preds = []
        for u, r, it, s in zip(users, rows, items, scores):
            key = None if job.tiebreak is None else job.tiebreak[it]
            preds.append(RankedPrediction(job.test.users[u], it, s, job.test.values[r], key))
        return evaluate_users(preds, job.ks, job.fold)
    except Exception as exc:
        raise FoldFailedError(job.fold, exc) from exc


# ---------------------------------------------------------------------------
# experiments

def metric_names(ks: Sequence[int]) -> tuple[str, ...]:
    return ("rho",) + tuple(f"p@{k}" for k in ks)


@dataclass(frozen=True, eq=False)
class EvalReport:
    config: ExperimentConfig
    folds: tuple[FoldMetrics, ...]

    @property
    def metrics(self) -> tuple[str, ...]:
        return metric_names(self.config.ks)

    def fold_values(self, fold: FoldMetrics) -> dict[str, float]:
        out = {"rho": fold.spearman_rho}
        out.update({f"p@{k}": fold.precision_at[k] for k in self.config.ks})
        return out

    @property
    def aggregate(self) -> dict[str, float]:
        """Mean over folds of the per-fold means."""
        vals = [self.fold_values(f) for f in self.folds]
        return {m: float(np.mean([v[m] for v in vals])) for m in self.metrics}


@dataclass
class _Prepared:
    ds: RatingDataset
    side: SideInfo
    splits: list[tuple[RatingDataset, RatingDataset, SideInfo]]
    tiebreak: np.ndarray


def _prepare(cfg: ExperimentConfig, root, cache: dict | None) -> _Prepared:
    key = ("prep", cfg.dataset, cfg.paths, str(data_dir(root)), cfg.protocol, cfg.seed)
    if cache is not None and key in cache:
        return cache[key]
    ds, side = load_named(cfg.dataset, cfg.resolved_paths(root))
    split_seed = derive_seed(cfg.seed, "split", cfg.dataset, cfg.protocol.label)
    if cfg.protocol.kind == "kfold":
        splits = [(tr, te, side) for tr, te in kfold_split(ds, cfg.protocol.k, split_seed)]
    else:
        cs = cold_start_split(ds, side, cfg.protocol.fraction, split_seed)
        splits = [(cs.train, cs.test, cs.side)]
    perm = np.random.default_rng(derive_seed(cfg.seed, "tiebreak", cfg.dataset)).permutation(ds.n_items)
    prep = _Prepared(ds, side, splits, perm)
    if cache is not None:
        cache[key] = prep
    return prep


def _jobs_for(cfg: ExperimentConfig, prep: _Prepared) -> list[FoldJob]:
    if cfg.method in _NEEDS_SIDE and prep.side.is_empty():
        raise ConfigurationError(f"{cfg.method} needs side information; {cfg.dataset} has none")
    tb = prep.tiebreak if cfg.tiebreak == "random" else None
    return [FoldJob(k, cfg.method, cfg.kind, cfg.hyperparameters, tr, te, side,
                    derive_seed(cfg.seed, cfg.method, cfg.dataset, cfg.protocol.label, k), cfg.ks, tb)
            for k, (tr, te, side) in enumerate(prep.splits)]


def _run_jobs(jobs: list[FoldJob], workers: int) -> list[FoldMetrics]:
    if workers <= 1 or len(jobs) <= 1:
        return [run_fold(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_fold, jobs))


def run_experiment(cfg: ExperimentConfig, data_root=None, jobs: int = 1,
                   cache: dict | None = None) -> EvalReport:
    """Load, split, train and evaluate every fold; deterministic for a fixed config.

    ``cache`` (any dict) lets several experiments share loaded datasets,
    splits and finished reports.
    """
    key = ("report", cfg, str(data_dir(data_root)))
    if cache is not None and key in cache:
        return cache[key]
    cfg.check_files(data_root)
    prep = _prepare(cfg, data_root, cache)
    folds = _run_jobs(_jobs_for(cfg, prep), jobs)
    report = EvalReport(cfg, tuple(sorted(folds, key=lambda f: f.fold)))
    log.info("%s on %s (%s): %s", cfg.method, cfg.dataset, cfg.protocol.label,
             {k: round(v, 4) for k, v in report.aggregate.items()})
    if cache is not None:
        cache[key] = report
    return report


# ---------------------------------------------------------------------------
# scenarios and comparison tables

@dataclass(frozen=True)
class ImprovementRow:
    """``with_method`` relative to a baseline chosen by the dataset's feedback kind."""

    label: str
    with_method: str
    without: tuple[tuple[str, str], ...]

    def baseline(self, kind: FeedbackKind) -> str | None:
        return dict(self.without).get(kind.value)


@dataclass(frozen=True)
class Scenario:
    name: str
    question: str
    methods: tuple[str, ...]
    datasets: tuple[str, ...]
    protocol: Protocol = Protocol()
    improvements: tuple[ImprovementRow, ...] = ()


SCENARIOS = {
    "explicit": Scenario(
        "explicit", "Which method ranks better with explicit ratings?",
        ("mf_exp", "rwr_exp"), ("movielens", "filmtrust", "epinions")),
    "implicit": Scenario(
        "implicit", "Which method ranks better with implicit feedback?",
        ("mf_imp", "rwr_imp"), ("lastfm", "audioscrobbler")),
    "bias": Scenario(
        "bias", "Do global bias terms help?",
        ("mf_exp", "mf_bias", "rwr_exp", "rwr_bias"), ("movielens", "filmtrust", "epinions"),
        improvements=(
            ImprovementRow("MF improvement through bias", "mf_bias", (("explicit", "mf_exp"),)),
            ImprovementRow("RWR improvement through bias", "rwr_bias", (("explicit", "rwr_exp"),)),
        )),
    "side": Scenario(
        "side", "Does side information help?",
        ("mf_exp", "mf_imp", "mf_side", "rwr_exp", "rwr_imp", "rwr_side"),
        ("movielens", "filmtrust", "epinions", "lastfm"),
        improvements=(
            ImprovementRow("MF improvement through side info", "mf_side",
                           (("explicit", "mf_exp"), ("implicit", "mf_imp"))),
            ImprovementRow("RWR improvement through side info", "rwr_side",
                           (("explicit", "rwr_exp"), ("implicit", "rwr_imp"))),
        )),
    "cold_start": Scenario(
        "cold_start", "Which method copes better with cold-start users?",
        ("mf_side", "rwr_side"), ("movielens", "filmtrust", "epinions", "lastfm"),
        protocol=Protocol("cold_start", fraction=0.2)),
}


def _applicable(method: str, kind: FeedbackKind) -> bool:
    if method in _EXPLICIT_ONLY:
        return kind is FeedbackKind.EXPLICIT
    if method in _IMPLICIT_ONLY:
        return kind is FeedbackKind.IMPLICIT
    return True


def improvement_percent(with_value: float, without_value: float) -> float:
    """(with - without) / without in percent, one decimal; NaN if undefined."""
    if not (math.isfinite(with_value) and math.isfinite(without_value)) or without_value == 0:
        return math.nan
    return round(100.0 * (with_value - without_value) / without_value, 1)


def round3(x: float) -> float:
    return round(float(x), 3) if math.isfinite(x) else math.nan


@dataclass(eq=False)
class ComparisonTable:
    name: str
    rows: tuple[str, ...]
    datasets: tuple[str, ...]
    metrics: tuple[str, ...]
    cells: dict[tuple[str, str], dict[str, float]]
    improvements: tuple[ImprovementRow, ...] = ()
    kinds: dict[str, FeedbackKind] = field(default_factory=dict)
    skipped: tuple[tuple[str, str, str], ...] = ()
    reports: dict[tuple[str, str], EvalReport] = field(default_factory=dict, repr=False)

    @property
    def columns(self) -> list[tuple[str, str]]:
        return [(m, d) for m in self.metrics for d in self.datasets]

    def cell(self, method: str, dataset: str, metric: str) -> float:
        return self.cells.get((method, dataset), {}).get(metric, math.nan)

    def improvement(self, row: ImprovementRow) -> dict[tuple[str, str], float]:
        """Computed from the table's own (3-decimal) cells."""
        out = {}
        for metric, ds in self.columns:
            base = row.baseline(self.kinds.get(ds, FeedbackKind.EXPLICIT))
            if base is None:
                out[(metric, ds)] = math.nan
                continue
            out[(metric, ds)] = improvement_percent(round3(self.cell(row.with_method, ds, metric)),
                                                    round3(self.cell(base, ds, metric)))
        return out


def run_scenario(name: str, data_root=None, seed: int = 0, large: bool = False, jobs: int = 1,
                 ks: Sequence[int] = DEFAULT_KS, cache: dict | None = None,
                 datasets: Iterable[str] | None = None, tiebreak: str = "id") -> ComparisonTable:
    """Run every applicable (method, dataset) pair of a scenario.

    Pairs that cannot run (missing files, ``--large`` not given, load-only
    datasets) are listed in ``skipped`` instead of failing the scenario.
    """
    try:
        sc = SCENARIOS[name]
    except KeyError:
        raise ConfigurationError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None
    cache = {} if cache is None else cache
    wanted = sc.datasets if datasets is None else tuple(d for d in sc.datasets if d in set(datasets))
    cells, reports, skipped, kinds = {}, {}, [], {}
    for ds_name in wanted:
        spec = DATASETS[ds_name]
        kinds[ds_name] = spec.kind
        methods = [m for m in sc.methods if _applicable(m, spec.kind)]
        reason = None
        if spec.load_only:
            reason = "load-only dataset"
        elif spec.large and not large:
            reason = "large dataset; pass --large"
        else:
            missing = missing_files(spec.default_paths(data_dir(data_root)))
            if missing:
                reason = "missing " + ", ".join(missing)
        if reason:
            skipped.extend((m, ds_name, reason) for m in methods)
            continue
        for method in methods:
            cfg = ExperimentConfig(ds_name, method, sc.protocol, seed=seed, ks=tuple(ks), tiebreak=tiebreak)
            rep = run_experiment(cfg, data_root, jobs, cache)
            reports[(method, ds_name)] = rep
            cells[(method, ds_name)] = rep.aggregate
    rows = tuple(m for m in sc.methods if any((m, d) in cells for d in wanted))
    return ComparisonTable(sc.name, rows, tuple(wanted), metric_names(ks), cells,
                           sc.improvements, kinds, tuple(skipped), reports)


# ---------------------------------------------------------------------------
# report files

FORMATS = ("csv", "json-lines", "pretty")


def _fmt3(v: float) -> str:
    return f"{v:.3f}" if math.isfinite(v) else ""


def _fmt1(v: float) -> str:
    return f"{v:.1f}" if math.isfinite(v) else ""


def _as_table(obj) -> ComparisonTable:
    if isinstance(obj, ComparisonTable):
        return obj
    cfg = obj.config
    return ComparisonTable(cfg.protocol.label, (cfg.method,), (cfg.dataset,), obj.metrics,
                           {(cfg.method, cfg.dataset): obj.aggregate}, (), {cfg.dataset: cfg.kind},
                           (), {(cfg.method, cfg.dataset): obj})


def _result_rows(t: ComparisonTable):
    for ds in t.datasets:
        for m in t.rows:
            if (m, ds) in t.cells:
                yield m, ds, t.cells[(m, ds)]


def render_csv(obj, metrics: Sequence[str] | None = None) -> str:
    t = _as_table(obj)
    metrics = t.metrics if metrics is None else metrics
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "dataset", *metrics])
    for m, ds, vals in _result_rows(t):
        w.writerow([m, ds, *(_fmt3(vals.get(k, math.nan)) for k in metrics)])
    return buf.getvalue()


def render_improvement_csv(obj) -> str:
    t = _as_table(obj)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["improvement", "dataset", *t.metrics])
    for row in t.improvements:
        imp = t.improvement(row)
        for ds in t.datasets:
            vals = [imp[(m, ds)] for m in t.metrics]
            if all(math.isnan(v) for v in vals):
                continue
            w.writerow([row.label, ds, *(_fmt1(v) for v in vals)])
    return buf.getvalue()


def _json_num(v: float, digits: int):
    return round(v, digits) if math.isfinite(v) else None


def render_json_lines(obj) -> str:
    t = _as_table(obj)
    lines = []
    for m, ds, vals in _result_rows(t):
        rec = {"method": m, "dataset": ds}
        rec.update({k: _json_num(vals.get(k, math.nan), 3) for k in t.metrics})
        lines.append(json.dumps(rec, sort_keys=True))
    for row in t.improvements:
        imp = t.improvement(row)
        for ds in t.datasets:
            rec = {"improvement": row.label, "dataset": ds}
            rec.update({k: _json_num(imp[(k, ds)], 1) for k in t.metrics})
            if any(rec[k] is not None for k in t.metrics):
                lines.append(json.dumps(rec, sort_keys=True))
    for m, ds, reason in t.skipped:
        lines.append(json.dumps({"dataset": ds, "method": m, "skipped": reason}, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def render_pretty(obj) -> str:
    t = _as_table(obj)
    head1 = ["", *(m for m, _ in t.columns)]
    head2 = ["", *(d for _, d in t.columns)]
    body = []
    for m in t.rows:
        body.append([METHOD_LABELS.get(m, m), *(_fmt3(t.cell(m, d, k)) or "-" for k, d in t.columns)])
    for row in t.improvements:
        imp = t.improvement(row)
        body.append([row.label, *((_fmt1(imp[c]) + "%") if math.isfinite(imp[c]) else "-"
                                  for c in t.columns)])
    grid = [head1, head2, *body]
    widths = [max(len(r[j]) for r in grid) for j in range(len(head1))]
    out = []
    for n, r in enumerate(grid):
        out.append("  ".join(c.ljust(widths[0]) if j == 0 else c.rjust(widths[j])
                             for j, c in enumerate(r)).rstrip())
        if n == 1:
            out.append("-" * len(out[-1]))
    for m, ds, reason in t.skipped:
        out.append(f"skipped: {METHOD_LABELS.get(m, m)} on {ds} ({reason})")
    return "\n".join(out) + "\n"


def emit_report(obj, fmt: str, path) -> list[Path]:
    """Write ``obj`` (an :class:`EvalReport` or :class:`ComparisonTable`) to ``path``.

    CSV output puts improvement rows in a sibling ``<stem>_improvement.csv``.
    Returns the written paths.
    """
    path = Path(path)
    if fmt == "csv":
        written = [path]
        path.write_text(render_csv(obj), encoding="utf-8")
        t = _as_table(obj)
        if t.improvements:
            imp_path = path.with_name(path.stem + "_improvement.csv")
            imp_path.write_text(render_improvement_csv(t), encoding="utf-8")
            written.append(imp_path)
        return written
    if fmt == "json-lines":
        path.write_text(render_json_lines(obj), encoding="utf-8")
        return [path]
    if fmt == "pretty":
        path.write_text(render_pretty(obj), encoding="utf-8")
        return [path]
    raise ConfigurationError(f"unknown report format {fmt!r}; choose from {', '.join(FORMATS)}")


def write_audit(obj, out_dir) -> list[Path]:
    """Per-fold and per-user dumps behind every cell.

    ``folds.csv`` holds each fold's means (which average into the table cell);
    ``users/<dataset>_<method>_<protocol>_fold<k>.tsv`` holds the per-user
    values each fold mean is computed from.
    """
    t = _as_table(obj)
    out_dir = Path(out_dir)
    (out_dir / "users").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    written = []
    header_done = False
    for key in sorted(t.reports):
        rep = t.reports[key]
        cfg = rep.config
        metrics = rep.metrics
        if not header_done:
            w.writerow(["method", "dataset", "protocol", "fold", *metrics, "n_users", "excluded_rho"])
            header_done = True
        for f in rep.folds:
            vals = rep.fold_values(f)
            w.writerow([cfg.method, cfg.dataset, cfg.protocol.label, f.fold,
                        *(repr(vals[m]) for m in metrics), f.n_users, f.excluded_rho])
            p = out_dir / "users" / f"{cfg.dataset}_{cfg.method}_{cfg.protocol.label}_fold{f.fold}.tsv"
            p.write_text(format_user_rows(f.per_user, cfg.ks), encoding="utf-8")
            written.append(p)
    folds = out_dir / "folds.csv"
    folds.write_text(buf.getvalue() or "method,dataset,protocol,fold\n", encoding="utf-8")
    return [folds, *written]


# ---------------------------------------------------------------------------
# verification against a reference table

@dataclass(frozen=True)
class Mismatch:
    method: str
    dataset: str
    metric: str
    expected: float
    actual: float | None

    def __str__(self):
        got = "missing" if self.actual is None else f"{self.actual:.3f}"
        return f"{self.method} {self.dataset} {self.metric}: expected {self.expected:.3f}, got {got}"


def read_table(path) -> dict[tuple[str, str], dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["method", "dataset"]:
            raise ConfigurationError(f"{path}: expected a 'method,dataset,...' header")
        out = {}
        for row in reader:
            out[(row["method"], row["dataset"])] = {
                k: float(v) for k, v in row.items() if k not in ("method", "dataset") and v not in ("", None)}
    return out


def verify_tables(table_path, against_path, tol: float) -> list[Mismatch]:
    """Every value in ``against`` must appear in ``table`` within ``tol``."""
    if tol < 0:
        raise ConfigurationError("tolerance must be non-negative")
    got = read_table(table_path)
    want = read_table(against_path)
    bad = []
    for key in sorted(want):
        for metric, expected in sorted(want[key].items()):
            actual = got.get(key, {}).get(metric)
            if actual is None or abs(actual - expected) > tol + 1e-12:
                bad.append(Mismatch(key[0], key[1], metric, expected, actual))
    return bad
