"""Fetch MovieLens 100K into a directory holding ``u.data`` and ``u.item``.

Tries the GroupLens archive first. Offline mirrors without it can fall back to the
copy bundled in the ``pytorch-widedeep`` wheel (needs pandas and pyarrow).

    python scripts/fetch_ml100k.py /root/data/ml-100k
"""

import argparse
import glob
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def from_grouplens(out: Path) -> None:
    with urllib.request.urlopen(URL, timeout=60) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    for name in ("u.data", "u.item"):
        (out / name).write_bytes(archive.read(f"ml-100k/{name}"))


def from_widedeep(out: Path) -> None:
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        proc = subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--timeout", "120",
                               "pytorch-widedeep", "-d", tmp], capture_output=True, text=True)
        if proc.returncode:
            raise SystemExit(f"pip download failed:\n{proc.stderr}")
        wheel = zipfile.ZipFile(glob.glob(f"{tmp}/*.whl")[0])
        prefix = "pytorch_widedeep/datasets/data/MovieLens100k"
        data = pd.read_parquet(io.BytesIO(wheel.read(f"{prefix}_data.parquet.brotli")))
        items = pd.read_parquet(io.BytesIO(wheel.read(f"{prefix}_items.parquet.brotli")))

    with open(out / "u.data", "w") as f:
        for r in data.itertuples(index=False):
            f.write(f"{r.user_id}\t{r.movie_id}\t{r.rating}\t{r.timestamp}\n")

    def text(v):
        return "" if v is None or isinstance(v, float) else str(v)

    with open(out / "u.item", "w", encoding="latin-1") as f:
        for r in items.itertuples(index=False):
            video = "" if pd.isna(r[3]) else str(r[3])
            f.write("|".join([str(r[0]), r[1], text(r[2]), video, text(r[4])] + [str(int(x)) for x in r[5:]]) + "\n")


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", type=Path)
    args = p.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        from_grouplens(args.out)
        print("fetched from grouplens")
    except OSError as exc:
        print(f"grouplens unavailable ({exc}); using the pytorch-widedeep copy")
        from_widedeep(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
