"""Rating datasets, side information, file loaders and train/test splitting.

Identifiers are kept as strings. Users and items are stored in "natural"
order (numeric ids compare as numbers, everything else lexically), and that
order is the one used whenever a deterministic tie-break by id is needed.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DomainError,
    DuplicatePairError,
    KindMismatchError,
    ParseError,
    ReferentialError,
)

__all__ = [
    "FeedbackKind", "RatingDataset", "ImplicitDataset", "SideInfo", "LinkReport",
    "FoldSplit", "ColdStartSplit", "EdgeListSchema",
    "load_movielens", "load_edge_list", "load_social_links",
    "binarize_and_confidence", "kfold_split", "cold_start_split",
    "dump_dataset", "load_dataset", "natural_key", "age_bin",
]

FORMAT_TAG = "cfbench-dataset"
FORMAT_VERSION = 1


class FeedbackKind(str, enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


def natural_key(ident: str):
    return (0, int(ident), "") if ident.isdigit() else (1, 0, ident)


def _sorted_ids(ids: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(ids), key=natural_key))


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Observed (user, item, value) triples over a fixed user/item universe.

    ``user_idx``/``item_idx`` index into ``users``/``items``. Subsets produced
    by the splitters keep the parent's universe, so a fold's training set still
    knows about users and items that only appear in its test set.
    """

    users: tuple[str, ...]
    items: tuple[str, ...]
    user_idx: np.ndarray
    item_idx: np.ndarray
    values: np.ndarray
    feedback_kind: FeedbackKind = FeedbackKind.EXPLICIT
    rating_range: tuple[float, float, float] | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "feedback_kind", FeedbackKind(self.feedback_kind))
        object.__setattr__(self, "user_idx", _frozen(self.user_idx, np.int64))
        object.__setattr__(self, "item_idx", _frozen(self.item_idx, np.int64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        self._validate()

    def _validate(self):
        n = len(self.values)
        if not (len(self.user_idx) == len(self.item_idx) == n):
            raise ValueError("index and value arrays differ in length")
        if len(set(self.users)) != len(self.users) or len(set(self.items)) != len(self.items):
            raise ValueError("duplicate identifiers in the user or item universe")
        if n == 0:
            return
        if self.user_idx.min() < 0 or self.user_idx.max() >= len(self.users):
            raise ReferentialError("triple references a user outside the universe")
        if self.item_idx.min() < 0 or self.item_idx.max() >= len(self.items):
            raise ReferentialError("triple references an item outside the universe")
        keys = self.user_idx * len(self.items) + self.item_idx
        uniq, counts = np.unique(keys, return_counts=True)
        if len(uniq) != n:
            k = uniq[np.argmax(counts > 1)]
            u, i = divmod(int(k), len(self.items))
            raise DuplicatePairError(f"duplicate rating for pair ({self.users[u]}, {self.items[i]})")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("non-finite rating value")
        if self.feedback_kind is FeedbackKind.IMPLICIT:
            if np.any(self.values <= 0):
                raise DomainError("implicit feedback counts must be positive")
        elif self.rating_range is not None:
            lo, hi, _ = self.rating_range
            if self.values.min() < lo or self.values.max() > hi:
                raise DomainError(f"explicit rating outside [{lo}, {hi}]")

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, float]],
                     feedback_kind=FeedbackKind.EXPLICIT, rating_range=None, name="",
                     users: Sequence[str] | None = None, items: Sequence[str] | None = None):
        triples = [(str(u), str(i), float(v)) for u, i, v in triples]
        users = _sorted_ids(u for u, _, _ in triples) if users is None else tuple(users)
        items = _sorted_ids(i for _, i, _ in triples) if items is None else tuple(items)
        upos = {u: k for k, u in enumerate(users)}
        ipos = {i: k for k, i in enumerate(items)}
        try:
            uidx = [upos[u] for u, _, _ in triples]
            iidx = [ipos[i] for _, i, _ in triples]
        except KeyError as exc:
            raise ReferentialError(f"unknown identifier {exc.args[0]!r}") from None
        return cls(users, items, np.array(uidx, dtype=np.int64), np.array(iidx, dtype=np.int64),
                   np.array([v for _, _, v in triples], dtype=np.float64),
                   feedback_kind, rating_range, name)

    def __len__(self):
        return len(self.values)

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @cached_property
    def user_pos(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.users)}

    @cached_property
    def item_pos(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.items)}

    def triples(self) -> Iterator[tuple[str, str, float]]:
        for u, i, v in zip(self.user_idx.tolist(), self.item_idx.tolist(), self.values.tolist()):
            yield self.users[u], self.items[i], v

    def subset(self, selector) -> RatingDataset:
        """Rows picked by a boolean mask or index array, same universe."""
        return RatingDataset(self.users, self.items, self.user_idx[selector], self.item_idx[selector],
                             self.values[selector], self.feedback_kind, self.rating_range, self.name)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.user_idx, minlength=self.n_users)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.item_idx, minlength=self.n_items)


@dataclass(frozen=True, eq=False)
class ImplicitDataset:
    """Implicit counts plus their binarized preference and confidence.

    ``binarized`` and ``confidence`` are aligned with ``base``'s triples.
    """

    base: RatingDataset
    alpha: float
    binarized: np.ndarray
    confidence: np.ndarray

    def __len__(self):
        return len(self.base)

    @property
    def users(self):
        return self.base.users

    @property
    def items(self):
        return self.base.items

    @property
    def user_idx(self):
        return self.base.user_idx

    @property
    def item_idx(self):
        return self.base.item_idx

    @property
    def name(self):
        return self.base.name

    def confidence_of(self, user: str, item: str) -> float:
        u, i = self.base.user_pos[user], self.base.item_pos[item]
        hit = np.flatnonzero((self.base.user_idx == u) & (self.base.item_idx == i))
        if len(hit) == 0:
            raise KeyError((user, item))
        return float(self.confidence[hit[0]])

    def preference_of(self, user: str, item: str) -> int:
        self.confidence_of(user, item)
        return 1


def binarize_and_confidence(ds: RatingDataset, alpha: float) -> ImplicitDataset:
    """p_ui = 1 on every observed pair, c_ui = 1 + alpha * r_ui."""
    if ds.feedback_kind is not FeedbackKind.IMPLICIT:
        raise KindMismatchError("confidence levels are only defined for implicit feedback")
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    p = _frozen((ds.values > 0).astype(np.float64), np.float64)
    c = _frozen(1.0 + alpha * ds.values, np.float64)
    return ImplicitDataset(ds, float(alpha), p, c)


@dataclass(frozen=True)
class LinkReport:
    rows: int = 0
    duplicates: int = 0
    self_loops: tuple[tuple[str, str], ...] = ()
    dropped_unknown: int = 0


@dataclass(frozen=True)
class SideInfo:
    """Auxiliary observations used by the side-information methods.

    user_attributes: (user, attribute id, value); item_attributes: (attribute
    id, item, value); social_links: directed (user, user) pairs. Attribute ids
    carry a kind prefix such as ``"gender:F"``.
    """

    user_attributes: tuple[tuple[str, str, float], ...] = ()
    item_attributes: tuple[tuple[str, str, float], ...] = ()
    social_links: tuple[tuple[str, str], ...] = ()
    report: LinkReport = field(default_factory=LinkReport)

    def is_empty(self) -> bool:
        return not (self.user_attributes or self.item_attributes or self.social_links)

    def users_with_side_info(self) -> set[str]:
        users = {u for u, _, _ in self.user_attributes}
        for a, b in self.social_links:
            users.add(a)
            users.add(b)
        return users

    def merge(self, other: SideInfo) -> SideInfo:
        return SideInfo(self.user_attributes + other.user_attributes,
                        self.item_attributes + other.item_attributes,
                        self.social_links + other.social_links,
                        LinkReport(self.report.rows + other.report.rows,
                                   self.report.duplicates + other.report.duplicates,
                                   self.report.self_loops + other.report.self_loops,
                                   self.report.dropped_unknown + other.report.dropped_unknown))

    def restricted_to(self, users: Iterable[str], items: Iterable[str] = ()) -> SideInfo:
        """Drop records that mention users/items outside the given universe."""
        users, items = set(users), set(items)
        ua = tuple(r for r in self.user_attributes if r[0] in users)
        ia = tuple(r for r in self.item_attributes if r[1] in items)
        links = tuple(p for p in self.social_links if p[0] in users and p[1] in users)
        dropped = (len(self.user_attributes) - len(ua) + len(self.item_attributes) - len(ia)
                   + len(self.social_links) - len(links))
        rep = self.report
        return SideInfo(ua, ia, links, LinkReport(rep.rows, rep.duplicates, rep.self_loops,
                                                  rep.dropped_unknown + dropped))

    def check_references(self, users: Iterable[str], items: Iterable[str] = ()):
        users, items = set(users), set(items)
        for u, s, _ in self.user_attributes:
            if u not in users:
                raise ReferentialError(f"attribute {s!r} references unknown user {u!r}")
        for t, i, _ in self.item_attributes:
            if i not in items:
                raise ReferentialError(f"attribute {t!r} references unknown item {i!r}")
        for a, b in self.social_links:
            if a not in users or b not in users:
                raise ReferentialError(f"social link ({a}, {b}) references an unknown user")

    def user_observations(self, include_social: bool = True) -> list[tuple[str, str, float]]:
        """User-attribute observations, with each social neighbour acting as an attribute.

        Links are symmetrised: (u, v) contributes (u, "user:v") and (v, "user:u").
        Self-loops are skipped.
        """
        obs = list(self.user_attributes)
        if include_social:
            seen = set()
            for a, b in self.social_links:
                if a == b:
                    continue
                for u, v in ((a, b), (b, a)):
                    if (u, v) not in seen:
                        seen.add((u, v))
                        obs.append((u, f"user:{v}", 1.0))
        return obs

    def undirected_links(self) -> list[tuple[str, str]]:
        pairs = {tuple(sorted((a, b), key=natural_key)) for a, b in self.social_links if a != b}
        return sorted(pairs, key=lambda p: (natural_key(p[0]), natural_key(p[1])))


# ---------------------------------------------------------------------------
# file loaders

AGE_BINS = ((0, 17, "under18"), (18, 24, "18-24"), (25, 34, "25-34"), (35, 44, "35-44"),
            (45, 49, "45-49"), (50, 55, "50-55"), (56, math.inf, "56+"))


def age_bin(age: float) -> str:
    for lo, hi, label in AGE_BINS:
        if lo <= age <= hi:
            return label
    raise DomainError(f"age {age} outside all bins")


def _rows(path, delimiter=None, skip_header=False):
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            if skip_header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delimiter) if delimiter is not None else line.split()
            yield lineno, [p.strip() for p in parts]


def _number(text, path, lineno):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", path, lineno) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text!r}", path, lineno)
    return v


def load_movielens(ratings_path, users_path) -> tuple[RatingDataset, SideInfo]:
    """MovieLens 100K ``u.data`` plus demographics from ``u.user``."""
    triples = []
    for lineno, parts in _rows(ratings_path, "\t"):
        if len(parts) < 3:
            raise ParseError(f"expected 'user item rating timestamp', got {len(parts)} fields",
                             ratings_path, lineno)
        triples.append((parts[0], parts[1], _number(parts[2], ratings_path, lineno)))
    ds = RatingDataset.from_triples(triples, FeedbackKind.EXPLICIT, (1.0, 5.0, 1.0), "movielens")

    known = ds.user_pos
    attrs = []
    for lineno, parts in _rows(users_path, "|"):
        if len(parts) != 5:
            raise ParseError(f"expected 'user|age|gender|occupation|zip', got {len(parts)} fields",
                             users_path, lineno)
        user, age, gender, occupation, zipcode = parts
        if user not in known:
            raise ReferentialError(f"{users_path}:{lineno}: unknown user {user!r}")
        attrs.append((user, "age:" + age_bin(_number(age, users_path, lineno)), 1.0))
        attrs.append((user, "gender:" + gender, 1.0))
        attrs.append((user, "occupation:" + occupation, 1.0))
        if zipcode:
            attrs.append((user, "zip:" + zipcode[0].upper(), 1.0))
    return ds, SideInfo(user_attributes=tuple(attrs))


@dataclass(frozen=True)
class EdgeListSchema:
    delimiter: str | None = None
    user_col: int = 0
    item_col: int = 1
    value_col: int = 2
    skip_header: bool = False


FILMTRUST = EdgeListSchema()
EPINIONS = EdgeListSchema()
LASTFM = EdgeListSchema(delimiter="\t", skip_header=True)


def load_edge_list(path, schema: EdgeListSchema = EdgeListSchema(),
                   feedback_kind=FeedbackKind.EXPLICIT, rating_range=None,
                   name: str = "") -> RatingDataset:
    kind = FeedbackKind(feedback_kind)
    need = max(schema.user_col, schema.item_col, schema.value_col) + 1
    triples = []
    for lineno, parts in _rows(path, schema.delimiter, schema.skip_header):
        if len(parts) < need:
            raise ParseError(f"expected at least {need} fields, got {len(parts)}", path, lineno)
        v = _number(parts[schema.value_col], path, lineno)
        if kind is FeedbackKind.IMPLICIT and v <= 0:
            raise DomainError(f"{path}:{lineno}: implicit count must be positive, got {v}")
        if kind is FeedbackKind.EXPLICIT and rating_range is not None:
            if not rating_range[0] <= v <= rating_range[1]:
                raise DomainError(f"{path}:{lineno}: rating {v} outside {rating_range[:2]}")
        triples.append((parts[schema.user_col], parts[schema.item_col], v))
    return RatingDataset.from_triples(triples, kind, rating_range, name or Path(path).stem)


def load_social_links(path, delimiter: str | None = None, skip_header: bool = False) -> SideInfo:
    """Directed ``user user`` rows; extra columns (e.g. trust values) are ignored.

    Repeated pairs are collapsed and counted; self-loops are kept but listed
    in the report.
    """
    counts = Counter()
    order = []
    for lineno, parts in _rows(path, delimiter, skip_header):
        if len(parts) < 2 or not parts[0] or not parts[1]:
            raise ParseError("expected 'user user'", path, lineno)
        pair = (parts[0], parts[1])
        if pair not in counts:
            order.append(pair)
        counts[pair] += 1
    dups = sum(c - 1 for c in counts.values())
    loops = tuple(p for p in order if p[0] == p[1])
    return SideInfo(social_links=tuple(order),
                    report=LinkReport(sum(counts.values()), dups, loops))


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[RatingDataset, RatingDataset], ...]
    seed: int

    @property
    def k(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def kfold_split(ds: RatingDataset, k: int, seed: int) -> FoldSplit:
    """Shuffle triples with a seeded PRNG, then cut into k near-equal test sets."""
    if k < 2:
        raise ConfigurationError(f"k must be at least 2, got {k}")
    if len(ds) == 0:
        raise ConfigurationError("cannot split an empty dataset")
    if k > len(ds):
        raise ConfigurationError(f"k={k} exceeds the number of ratings ({len(ds)})")
    perm = np.random.default_rng(seed).permutation(len(ds))
    folds = []
    for chunk in np.array_split(perm, k):
        mask = np.zeros(len(ds), dtype=bool)
        mask[chunk] = True
        folds.append((ds.subset(~mask), ds.subset(mask)))
    return FoldSplit(tuple(folds), seed)


@dataclass(frozen=True)
class ColdStartSplit:
    cold_users: tuple[str, ...]
    train: RatingDataset
    test: RatingDataset
    side: SideInfo


def cold_start_split(ds: RatingDataset, side: SideInfo, fraction: float, seed: int) -> ColdStartSplit:
    """Hold out every rating of a random ``floor(fraction * |U|)`` user sample.

    Only users with at least one rating and at least one side-information
    record are eligible. Side information of all users stays in training.
    """
    if not 0 < fraction < 1:
        raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
    if side.is_empty():
        raise ConfigurationError("cold-start protocol needs side information")
    n_cold = int(math.floor(fraction * ds.n_users))
    if n_cold == 0:
        raise ConfigurationError(f"fraction {fraction} of {ds.n_users} users selects nobody")
    with_side = side.users_with_side_info()
    counts = ds.user_counts()
    eligible = [u for k, u in enumerate(ds.users) if counts[k] >= 1 and u in with_side]
    if len(eligible) < n_cold:
        raise ConfigurationError(
            f"need {n_cold} cold users but only {len(eligible)} are eligible "
            f"(short by {n_cold - len(eligible)})")
    picked = np.random.default_rng(seed).choice(len(eligible), size=n_cold, replace=False)
    cold = tuple(sorted((eligible[p] for p in picked), key=natural_key))
    cold_idx = np.array([ds.user_pos[u] for u in cold], dtype=np.int64)
    in_test = np.isin(ds.user_idx, cold_idx)
    return ColdStartSplit(cold, ds.subset(~in_test), ds.subset(in_test), side)


# ---------------------------------------------------------------------------
# canonical serialization

def _check_ident(ident):
    if not ident or any(ch in ident for ch in "\t\n\r"):
        raise ValueError(f"identifier {ident!r} cannot be serialized")


def dump_dataset(ds: RatingDataset, path) -> None:
    """Versioned line format; rows sorted by (user, item) so output is canonical."""
    lines = [f"{FORMAT_TAG}\t{FORMAT_VERSION}", f"name\t{ds.name}", f"kind\t{ds.feedback_kind.value}"]
    if ds.rating_range is None:
        lines.append("range\tnone")
    else:
        lines.append("range\t" + "\t".join(repr(float(x)) for x in ds.rating_range))
    for label, ids in (("users", ds.users), ("items", ds.items)):
        lines.append(f"{label}\t{len(ids)}")
        for ident in ids:
            _check_ident(ident)
            lines.append(ident)
    order = np.lexsort((ds.item_idx, ds.user_idx))
    lines.append(f"ratings\t{len(ds)}")
    for k in order.tolist():
        lines.append(f"{ds.users[ds.user_idx[k]]}\t{ds.items[ds.item_idx[k]]}\t{float(ds.values[k])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> RatingDataset:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    pos = 0

    def take(expected=None):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError("unexpected end of file", path, pos + 1)
        parts = lines[pos].split("\t")
        pos += 1
        if expected is not None and parts[0] != expected:
            raise ParseError(f"expected {expected!r} section, got {parts[0]!r}", path, pos)
        return parts

    head = take(FORMAT_TAG)
    if len(head) != 2 or head[1] != str(FORMAT_VERSION):
        raise ParseError(f"unsupported format version {head[1:]}", path, 1)
    name = take("name")[1]
    kind = FeedbackKind(take("kind")[1])
    rng = take("range")
    rating_range = None if rng[1:] == ["none"] else tuple(float(x) for x in rng[1:4])
    users = [take()[0] for _ in range(int(take("users")[1]))]
    items = [take()[0] for _ in range(int(take("items")[1]))]
    n = int(take("ratings")[1])
    triples = []
    for _ in range(n):
        parts = take()
        if len(parts) != 3:
            raise ParseError("malformed rating row", path, pos)
        triples.append((parts[0], parts[1], _number(parts[2], path, pos)))
    return RatingDataset.from_triples(triples, kind, rating_range, name, users=users, items=items)
