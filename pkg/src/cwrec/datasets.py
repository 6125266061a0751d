"""Locating bundled and public datasets."""

from __future__ import annotations

import os
import subprocess
import sys
import tempfile
import zipfile
from importlib import resources
from pathlib import Path

__all__ = ["toy_path", "movielens_100k", "cache_dir"]

# MovieLens-100k ships inside the RecBole wheel as an atomic ".inter" file
_ML100K_WHEEL = "recbole==1.2.1"
_ML100K_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def toy_path() -> Path:
    """The bundled 200-interaction toy log (tsv: user, item, rating, timestamp)."""
    return Path(str(resources.files("cwrec") / "resources" / "toy.tsv"))


def cache_dir() -> Path:
    root = os.environ.get("CWREC_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "cwrec")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _inter_to_tsv(lines, out: Path) -> int:
    n = 0
    tmp = out.with_suffix(".part")
    with open(tmp, "w", encoding="utf-8") as fh:
        for k, line in enumerate(lines):
            if k == 0:  # "user_id:token  item_id:token  rating:float  timestamp:float"
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) < 4:
                continue
            fh.write(f"{fields[0]}\t{fields[1]}\t{fields[2]}\t{fields[3]}\n")
            n += 1
    tmp.replace(out)
    return n


def movielens_100k(download: bool = True) -> Path:
    """Path to MovieLens-100k as ``user\\titem\\trating\\ttimestamp``.

    Looks in the cache first; otherwise fetches the RecBole wheel with pip
    and extracts the interaction file from it. Raises ``FileNotFoundError``
    when neither works.
    """
    out = cache_dir() / "ml-100k.tsv"
    if out.exists():
        return out
    if not download:
        raise FileNotFoundError(f"{out} not present and download disabled")
    with tempfile.TemporaryDirectory() as tmp:
        proc = subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet", "-d", tmp, _ML100K_WHEEL],
            capture_output=True, text=True,
        )
        wheels = list(Path(tmp).glob("*.whl"))
        if proc.returncode != 0 or not wheels:
            raise FileNotFoundError(f"could not fetch {_ML100K_WHEEL}: {proc.stderr.strip()[-300:]}")
        with zipfile.ZipFile(wheels[0]) as zf, zf.open(_ML100K_MEMBER) as fh:
            lines = (raw.decode("utf-8") for raw in fh)
            _inter_to_tsv(lines, out)
    return out
