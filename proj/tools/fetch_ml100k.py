#!/usr/bin/env python3
"""Prepare MovieLens-100k in the `user::item::rating::timestamp` format.

Sources, in order of preference:
  --from-dir DIR   an unpacked official ml-100k directory (u.data, u.item)
  --from-wheel     the copy bundled with the pytorch-widedeep wheel, fetched
                   with `pip download` (needs pandas + pyarrow to read parquet)

Writes <out>/ratings.dat and <out>/movies.dat.
"""
import argparse
import glob
import io
import os
import subprocess
import sys
import tempfile
import zipfile

GENRES = ["unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
          "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
          "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western"]


def write_outputs(out, ratings, movies):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "ratings.dat"), "w") as f:
        for u, i, r, t in ratings:
            f.write(f"{u}::{i}::{r}::{t}\n")
    with open(os.path.join(out, "movies.dat"), "w", encoding="utf-8") as f:
        for mid, title, genres in movies:
            f.write(f"{mid}::{title}::{'|'.join(genres) or 'unknown'}\n")
    print(f"wrote {len(ratings)} ratings, {len(movies)} movies to {out}")


def from_dir(path):
    ratings = []
    with open(os.path.join(path, "u.data")) as f:
        for line in f:
            u, i, r, t = line.split("\t")
            ratings.append((int(u), int(i), int(r), int(t)))
    movies = []
    with open(os.path.join(path, "u.item"), encoding="latin-1") as f:
        for line in f:
            parts = line.rstrip("\n").split("|")
            flags = parts[5:5 + len(GENRES)]
            movies.append((int(parts[0]), parts[1],
                           [g for g, x in zip(GENRES, flags) if x == "1"]))
    return ratings, movies


def from_wheel():
    import pandas as pd
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q",
                        "-d", tmp, "pytorch-widedeep"], check=True)
        wheel = glob.glob(os.path.join(tmp, "pytorch_widedeep-*.whl"))[0]
        z = zipfile.ZipFile(wheel)
        base = "pytorch_widedeep/datasets/data/"
        data = pd.read_parquet(io.BytesIO(z.read(base + "MovieLens100k_data.parquet.brotli")))
        items = pd.read_parquet(io.BytesIO(z.read(base + "MovieLens100k_items.parquet.brotli")))
    ratings = list(data[["user_id", "movie_id", "rating", "timestamp"]]
                   .itertuples(index=False, name=None))
    movies = [(int(r["movie_id"]), r["movie_title"], [g for g in GENRES if r[g] == 1])
              for _, r in items.iterrows()]
    return ratings, movies


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "ml-100k"))
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--from-dir")
    src.add_argument("--from-wheel", action="store_true")
    args = ap.parse_args()
    if args.from_dir:
        ratings, movies = from_dir(args.from_dir)
    else:
        ratings, movies = from_wheel()
    write_outputs(os.path.abspath(args.out), ratings, movies)


if __name__ == "__main__":
    main()
