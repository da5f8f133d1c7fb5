"""Rebuild MovieLens 100K ``u.data``/``u.user`` from the copy bundled in the
pytorch-widedeep wheel (useful when grouplens.org is unreachable).

    pip download --no-deps pytorch-widedeep -d /tmp/wd
    python scripts/extract_movielens.py /tmp/wd/pytorch_widedeep-*.whl data/ml-100k
"""
import io
import sys
import zipfile
from pathlib import Path

import pandas as pd

PREFIX = "pytorch_widedeep/datasets/data/MovieLens100k_"


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        data = pd.read_parquet(io.BytesIO(z.read(PREFIX + "data.parquet.brotli")))
        users = pd.read_parquet(io.BytesIO(z.read(PREFIX + "users.parquet.brotli")))
    data[["user_id", "movie_id", "rating", "timestamp"]].to_csv(
        out / "u.data", sep="\t", header=False, index=False)
    users[["user_id", "age", "gender", "occupation", "zip_code"]].to_csv(
        out / "u.user", sep="|", header=False, index=False)
    print(f"wrote {len(data)} ratings, {len(users)} users to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
