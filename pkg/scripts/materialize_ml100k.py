"""Rebuild the raw MovieLens 100K directory from the copy bundled in the
``pytorch-widedeep`` wheel.

Useful on machines that can reach PyPI but not files.grouplens.org.  The
wheel stores ``u.data`` in its original line order, so the standard
``u1``..``u5`` splits are regenerated with the same recipe as the upstream
``mku.sh`` (consecutive 20000-line chunks, sorted by user then item).

    python scripts/materialize_ml100k.py data/ml-100k
"""

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

WHEEL_PREFIX = "pytorch_widedeep/datasets/data/MovieLens100k_"


def fetch_wheel(workdir):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "pytorch-widedeep==1.7.0",
         "--no-deps", "-q", "-d", str(workdir)],
        check=True,
    )
    return next(Path(workdir).glob("pytorch_widedeep-*.whl"))


def _write_lines(path, lines):
    with open(path, "w", encoding="latin-1", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _tsv(frame):
    return [f"{u}\t{i}\t{r}\t{t}" for u, i, r, t in frame.itertuples(index=False)]


def materialize(wheel, out):
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as zf, tempfile.TemporaryDirectory() as tmp:
        frames = {}
        for name in ("data", "items", "users"):
            member = f"{WHEEL_PREFIX}{name}.parquet.brotli"
            zf.extract(member, tmp)
            frames[name] = pd.read_parquet(Path(tmp) / member)

    data = frames["data"][["user_id", "movie_id", "rating", "timestamp"]]
    _write_lines(out / "u.data", _tsv(data))

    items = frames["items"]
    genres = list(items.columns[5:])
    lines = []
    for row in items.itertuples(index=False):
        video = "" if pd.isna(row[3]) else str(row[3])
        release = "" if pd.isna(row[2]) else str(row[2])
        url = "" if pd.isna(row[4]) else str(row[4])
        flags = "|".join(str(int(v)) for v in row[5:])
        lines.append(f"{row[0]}|{row[1]}|{release}|{video}|{url}|{flags}")
    _write_lines(out / "u.item", lines)
    _write_lines(out / "u.genre", [f"{g}|{k}" for k, g in enumerate(genres)] + [""])

    users = frames["users"]
    _write_lines(
        out / "u.user",
        [f"{r.user_id}|{r.age}|{r.gender}|{r.occupation}|{r.zip_code}" for r in users.itertuples()],
    )
    _write_lines(out / "u.occupation", sorted(users["occupation"].unique()))

    # mku.sh: fold i tests on lines (i-1)*20000+1 .. i*20000 of u.data
    for i in range(1, 6):
        lo, hi = (i - 1) * 20000, i * 20000
        test = data.iloc[lo:hi].sort_values(["user_id", "movie_id"], kind="mergesort")
        base = pd.concat([data.iloc[:lo], data.iloc[hi:]]).sort_values(
            ["user_id", "movie_id"], kind="mergesort")
        _write_lines(out / f"u{i}.test", _tsv(test))
        _write_lines(out / f"u{i}.base", _tsv(base))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path)
    parser.add_argument("--wheel", type=Path, default=None)
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        materialize(wheel, args.out)
    print(f"wrote MovieLens 100K files to {args.out}")


if __name__ == "__main__":
    main()
