"""MovieLens 100K / 1M ingestion, cross-validation folds and label encodings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .rbm import TrainingCase

K_LEVELS = 5
AGE_GROUPS = ((7, 14), (14, 21), (22, 28), (29, 36), (37, 48), (49, 55), (56, 65), (66, 73))
_AGE_UPPER = np.array([hi for _, hi in AGE_GROUPS], dtype=np.float64)
GENDERS = ("M", "F")
GENRES_100K = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
)
# 1M age codes -> representative age (midpoint of the coded range, 7..73 span)
AGE_CODE_MIDPOINTS_1M = {1: 12.0, 18: 21.0, 25: 29.5, 35: 39.5, 45: 47.0, 50: 52.5, 56: 64.5}

FILES_100K = ("u.data", "u.item", "u.user", "u.occupation")
FILES_1M = ("ratings.dat", "movies.dat", "users.dat")


class DataError(ValueError):
    """Base class for dataset problems."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class ValidationError(DataError):
    pass


class RatingTriple(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class RatingDataset:
    """Ratings as parallel arrays plus per-user and per-item metadata.

    ``occupation``, ``age`` and ``gender`` are one-hot matrices with one row
    per dense user index; ``item_genres`` has one 0/1 row per dense item.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    item_genres: np.ndarray
    occupation: np.ndarray
    age: np.ndarray
    gender: np.ndarray
    user_ids: np.ndarray  # dense index -> raw id
    item_ids: np.ndarray
    genre_names: tuple
    occupation_vocab: tuple
    name: str = "custom"
    K: int = K_LEVELS

    def __len__(self):
        return self.ratings.size

    def __iter__(self):
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield RatingTriple(int(u), int(i), int(r), int(t))

    @property
    def user_id_map(self):
        return {int(raw): dense for dense, raw in enumerate(self.user_ids)}

    @property
    def item_id_map(self):
        return {int(raw): dense for dense, raw in enumerate(self.item_ids)}

    def subset(self, index):
        return replace(self, users=self.users[index], items=self.items[index],
                       ratings=self.ratings[index], timestamps=self.timestamps[index])

    def with_ratings(self, users, items, ratings, timestamps):
        return replace(self, users=users, items=items, ratings=ratings, timestamps=timestamps)

    def demographics(self, user):
        return (self.occupation[user], self.age[user], self.gender[user])

    def pair_keys(self):
        return self.users.astype(np.int64) * self.num_items + self.items

    def checksum(self):
        h = hashlib.sha256()
        for a in (self.users, self.items, self.ratings):
            h.update(np.ascontiguousarray(a, dtype=np.int64).tobytes())
        return h.hexdigest()

    def summary(self):
        return {
            "dataset": self.name,
            "users": self.num_users,
            "items": self.num_items,
            "ratings": len(self),
            "genre_dim": len(self.genre_names),
            "occupation_dim": len(self.occupation_vocab),
        }

    def vocabularies(self):
        return {
            "user_ids": [int(v) for v in self.user_ids],
            "item_ids": [int(v) for v in self.item_ids],
            "genres": list(self.genre_names),
            "occupations": list(self.occupation_vocab),
            "age_groups": [list(g) for g in AGE_GROUPS],
            "genders": list(GENDERS),
        }


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train: RatingDataset
    test: RatingDataset


def encode_age(age_years):
    """One-hot over the 8 age groups; shared endpoints go to the lower group, out-of-range ages clamp."""
    group = int(np.searchsorted(_AGE_UPPER, float(age_years), side="left"))
    out = np.zeros(len(AGE_GROUPS))
    out[min(group, len(AGE_GROUPS) - 1)] = 1.0
    return out


def encode_gender(code):
    if code not in GENDERS:
        raise ValidationError(f"gender code must be M or F, got {code!r}")
    out = np.zeros(2)
    out[GENDERS.index(code)] = 1.0
    return out


def encode_occupation(label, vocabulary):
    try:
        idx = list(vocabulary).index(label)
    except ValueError:
        raise ValidationError(f"occupation {label!r} not in vocabulary") from None
    out = np.zeros(len(vocabulary))
    out[idx] = 1.0
    return out


def encode_genres(names, vocabulary):
    """0/1 vector over ``vocabulary``; unknown names raise."""
    out = np.zeros(len(vocabulary))
    for name in names:
        if name not in vocabulary:
            raise ValidationError(f"genre {name!r} not in vocabulary")
        out[list(vocabulary).index(name)] = 1.0
    return out


def _read_lines(path):
    with open(path, encoding="latin-1") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if line.strip():
                yield no, line


def _int(path, no, text, what):
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, no, f"bad {what} {text!r}") from None


def _require(directory, names):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise DataError(f"{directory}: missing files {', '.join(missing)}")
    return directory


def _read_triples(path, sep, user_map, item_map, K=K_LEVELS):
    users, items, ratings, stamps = [], [], [], []
    for no, line in _read_lines(path):
        parts = line.split(sep)
        if len(parts) != 4:
            raise ParseError(path, no, f"expected 4 fields, found {len(parts)}")
        u, i, r, t = (_int(path, no, p.strip(), w) for p, w in zip(parts, ("user", "item", "rating", "timestamp")))
        if not 1 <= r <= K:
            raise ValidationError(f"{path}:{no}: rating {r} outside 1..{K}")
        if u not in user_map:
            raise ValidationError(f"{path}:{no}: unknown user id {u}")
        if i not in item_map:
            raise ValidationError(f"{path}:{no}: unknown item id {i}")
        users.append(user_map[u])
        items.append(item_map[i])
        ratings.append(r)
        stamps.append(t)
    return (np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
            np.array(ratings, dtype=np.int64), np.array(stamps, dtype=np.int64))


def _check_unique_pairs(ds, where):
    keys = ds.pair_keys()
    if np.unique(keys).size != keys.size:
        raise ValidationError(f"{where}: duplicated (user, item) pair")


def parse_100k(data_path):
    """Parse ``u.data``, ``u.item``, ``u.user`` and ``u.occupation``."""
    root = _require(data_path, FILES_100K)

    occupations = tuple(line.strip() for _, line in _read_lines(root / "u.occupation"))
    genre_names = GENRES_100K
    genre_file = root / "u.genre"
    if genre_file.is_file():
        named = [line.split("|")[0] for _, line in _read_lines(genre_file)]
        if named:
            genre_names = tuple(named)

    item_ids, genres = [], []
    for no, line in _read_lines(root / "u.item"):
        parts = line.split("|")
        if len(parts) < 6:
            raise ParseError(root / "u.item", no, "too few fields")
        item_ids.append(_int(root / "u.item", no, parts[0], "item id"))
        flags = parts[5:]
        if genre_file.is_file() and len(flags) != len(genre_names):
            raise ParseError(root / "u.item", no, f"{len(flags)} genre flags, expected {len(genre_names)}")
        row = [_int(root / "u.item", no, f, "genre flag") for f in flags]
        if any(v not in (0, 1) for v in row):
            raise ParseError(root / "u.item", no, "genre flags must be 0 or 1")
        genres.append(row)
    if genres and len({len(r) for r in genres}) != 1:
        raise ValidationError("u.item rows disagree on the number of genre flags")
    if genres and not genre_file.is_file():
        genre_names = GENRES_100K if len(genres[0]) == len(GENRES_100K) else tuple(
            f"genre_{k}" for k in range(len(genres[0])))

    user_ids, occ, age, gender = [], [], [], []
    for no, line in _read_lines(root / "u.user"):
        parts = line.split("|")
        if len(parts) != 5:
            raise ParseError(root / "u.user", no, f"expected 5 fields, found {len(parts)}")
        user_ids.append(_int(root / "u.user", no, parts[0], "user id"))
        years = _int(root / "u.user", no, parts[1], "age")
        if years < 0:
            raise ValidationError(f"{root / 'u.user'}:{no}: negative age")
        age.append(encode_age(years))
        try:
            gender.append(encode_gender(parts[2]))
            occ.append(encode_occupation(parts[3], occupations))
        except ValidationError as err:
            raise ValidationError(f"{root / 'u.user'}:{no}: {err}") from None

    ratings = _read_triples(root / "u.data", "\t",
                            {u: k for k, u in enumerate(user_ids)},
                            {i: k for k, i in enumerate(item_ids)})
    if ratings[0].size == 0 and not user_ids and not item_ids:
        raise DataError(f"{root}: no ratings and no metadata")
    ds = _assemble(ratings, user_ids, item_ids, genres, len(genre_names), occ, age, gender,
                   genre_names, occupations, "ml100k")
    _check_unique_pairs(ds, root / "u.data")
    return ds


def _assemble(ratings, user_ids, item_ids, genres, n_genres, occ, age, gender, genre_names,
              occupations, name):
    users, items, r, t = ratings
    return RatingDataset(
        users=users, items=items, ratings=r, timestamps=t,
        num_users=len(user_ids), num_items=len(item_ids),
        item_genres=np.array(genres, dtype=np.float64).reshape(len(item_ids), n_genres),
        occupation=np.array(occ, dtype=np.float64).reshape(len(user_ids), len(occupations)),
        age=np.array(age, dtype=np.float64).reshape(len(user_ids), len(AGE_GROUPS)),
        gender=np.array(gender, dtype=np.float64).reshape(len(user_ids), len(GENDERS)),
        user_ids=np.array(user_ids, dtype=np.int64), item_ids=np.array(item_ids, dtype=np.int64),
        genre_names=tuple(genre_names), occupation_vocab=tuple(occupations), name=name,
    )


def parse_1m(data_path):
    """Parse ``ratings.dat``, ``movies.dat`` and ``users.dat`` (``::``-separated)."""
    root = _require(data_path, FILES_1M)

    raw_users = []
    for no, line in _read_lines(root / "users.dat"):
        parts = line.split("::")
        if len(parts) != 5:
            raise ParseError(root / "users.dat", no, f"expected 5 fields, found {len(parts)}")
        uid = _int(root / "users.dat", no, parts[0], "user id")
        code = _int(root / "users.dat", no, parts[2], "age code")
        if code not in AGE_CODE_MIDPOINTS_1M:
            raise ValidationError(f"{root / 'users.dat'}:{no}: unknown age code {code}")
        occ_code = _int(root / "users.dat", no, parts[3], "occupation code")
        if parts[1] not in GENDERS:
            raise ValidationError(f"{root / 'users.dat'}:{no}: gender code must be M or F")
        raw_users.append((uid, parts[1], code, occ_code))
    n_occ = max((u[3] for u in raw_users), default=-1) + 1
    occupations = tuple(str(c) for c in range(n_occ))
    user_ids = [u[0] for u in raw_users]
    gender = [encode_gender(g) for _, g, _, _ in raw_users]
    age = [encode_age(AGE_CODE_MIDPOINTS_1M[c]) for _, _, c, _ in raw_users]
    occ = [encode_occupation(str(o), occupations) for *_, o in raw_users]

    vocab = list(GENRES_100K)
    item_ids, item_genres = [], []
    for no, line in _read_lines(root / "movies.dat"):
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(root / "movies.dat", no, f"expected 3 fields, found {len(parts)}")
        item_ids.append(_int(root / "movies.dat", no, parts[0], "movie id"))
        names = [g for g in parts[2].split("|") if g]
        for g in names:
            if g not in vocab:
                vocab.append(g)
        item_genres.append(names)
    genres = [encode_genres(names, vocab) for names in item_genres]

    ratings = _read_triples(root / "ratings.dat", "::",
                            {u: k for k, u in enumerate(user_ids)},
                            {i: k for k, i in enumerate(item_ids)})
    if ratings[0].size == 0 and not user_ids and not item_ids:
        raise DataError(f"{root}: no ratings and no metadata")
    ds = _assemble(ratings, user_ids, item_ids, genres, len(vocab), occ, age, gender, vocab,
                   occupations, "ml1m")
    _check_unique_pairs(ds, root / "ratings.dat")
    return ds


def load_standard_folds_100k(data_path, base=None):
    """The five shipped ``uN.base`` / ``uN.test`` splits."""
    root = Path(data_path)
    base = base if base is not None else parse_100k(root)
    user_map, item_map = base.user_id_map, base.item_id_map
    folds = []
    for n in range(1, 6):
        parts = []
        for kind in ("base", "test"):
            path = root / f"u{n}.{kind}"
            if not path.is_file():
                raise DataError(f"fold {n}: missing {path.name}")
            ds = base.with_ratings(*_read_triples(path, "\t", user_map, item_map))
            _check_unique_pairs(ds, path)
            parts.append(ds)
        train, test = parts
        if np.intersect1d(train.pair_keys(), test.pair_keys()).size:
            raise ValidationError(f"fold {n}: train and test share (user, item) pairs")
        folds.append(FoldSplit(n, train, test))
    return folds


def make_folds(dataset, n_folds, seed):
    """Seeded uniform partition of the ratings into ``n_folds`` test sets."""
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if len(dataset) == 0:
        raise ValueError("cannot fold an empty dataset")
    if n_folds > len(dataset):
        raise ValueError(f"{n_folds} folds requested for {len(dataset)} ratings")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    folds = []
    for n, test_idx in enumerate(np.array_split(perm, n_folds), 1):
        mask = np.ones(len(dataset), dtype=bool)
        mask[test_idx] = False
        folds.append(FoldSplit(n, dataset.subset(np.flatnonzero(mask)), dataset.subset(np.sort(test_idx))))
    return folds


def _group_cases(owner, other, ratings, n_owner, labels_of):
    order = np.lexsort((other, owner))
    owner, other, ratings = owner[order], other[order], ratings[order]
    bounds = np.searchsorted(owner, np.arange(n_owner + 1))
    cases = []
    for o in range(n_owner):
        lo, hi = bounds[o], bounds[o + 1]
        if hi > lo:
            cases.append(TrainingCase(other[lo:hi], ratings[lo:hi], labels_of(o), owner=o))
    return cases


def build_user_cases(split):
    """One case per user with training ratings; visible units are movies."""
    train = split.train if isinstance(split, FoldSplit) else split
    if len(train) == 0:
        raise ValueError("training set is empty")
    return _group_cases(train.users, train.items, train.ratings, train.num_users, train.demographics)


def build_item_cases(split):
    """One case per movie with training ratings; visible units are users."""
    train = split.train if isinstance(split, FoldSplit) else split
    if len(train) == 0:
        raise ValueError("training set is empty")
    return _group_cases(train.items, train.users, train.ratings, train.num_items,
                        lambda i: (train.item_genres[i],))
