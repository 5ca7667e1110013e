import os
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]


def ml100k_dir():
    return Path(os.environ.get("LCRBM_ML100K", REPO / "data" / "ml-100k"))


def ml1m_dir():
    return Path(os.environ.get("LCRBM_ML1M", REPO / "data" / "ml-1m"))


@pytest.fixture(scope="session")
def ml100k_path():
    path = ml100k_dir()
    if not (path / "u.data").is_file():
        pytest.skip(f"MovieLens 100K not found at {path} (see scripts/materialize_ml100k.py)")
    return path


@pytest.fixture(scope="session")
def ml100k_folds(ml100k_path):
    from lcrbm.dataset import load_standard_folds_100k

    return load_standard_folds_100k(ml100k_path)


OCCUPATIONS = ["administrator", "artist", "student"]
GENRES = ["unknown", "Crime", "Drama"]
USERS = [(10, 30, "M", "student"), (11, 7, "F", "artist"), (12, 90, "M", "administrator")]
ITEMS = [(20, (0, 1, 1)), (21, (0, 0, 1)), (22, (1, 0, 0))]


def write_ml100k(root, ratings, users=USERS, items=ITEMS):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "u.data").write_text("".join(f"{u}\t{i}\t{r}\t{t}\n" for u, i, r, t in ratings))
    (root / "u.occupation").write_text("".join(f"{o}\n" for o in OCCUPATIONS))
    (root / "u.genre").write_text("".join(f"{g}|{k}\n" for k, g in enumerate(GENRES)) + "\n")
    (root / "u.user").write_text("".join(f"{u}|{a}|{g}|{o}|00000\n" for u, a, g, o in users))
    (root / "u.item").write_text("".join(
        f"{i}|Movie {i} (1995)|01-Jan-1995||http://x|" + "|".join(map(str, flags)) + "\n"
        for i, flags in items))
    return root


THREE_RATINGS = [(10, 20, 3, 881250949), (11, 21, 5, 881250950), (10, 21, 1, 881250951)]


@pytest.fixture
def tiny100k(tmp_path):
    return write_ml100k(tmp_path / "ml-100k", THREE_RATINGS)


def synthetic_ratings(n_users=30, n_items=20, density=0.5, seed=0):
    """Low-rank-ish ratings in 1..5 for end-to-end fixtures."""
    rng = np.random.default_rng(seed)
    taste = rng.normal(size=(n_users, 2))
    style = rng.normal(size=(n_items, 2))
    score = 3 + taste @ style.T
    rows = []
    t = 880000000
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                r = int(np.clip(np.rint(score[u, i] + rng.normal(0, 0.3)), 1, 5))
                rows.append((u + 1, i + 1, r, t))
                t += 1
    return rows


@pytest.fixture
def synthetic100k(tmp_path):
    rng = np.random.default_rng(1)
    n_users, n_items = 30, 20
    users = [(u + 1, int(rng.integers(7, 74)), "MF"[u % 2], OCCUPATIONS[u % 3]) for u in range(n_users)]
    items = [(i + 1, tuple(int(v) for v in rng.integers(0, 2, 3))) for i in range(n_items)]
    return write_ml100k(tmp_path / "syn-100k", synthetic_ratings(n_users, n_items), users, items)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
