#!/usr/bin/env python3
"""Build data/adult.csv from the UCI Adult files (adult.data + adult.test).

The raw files are taken from the `responsibly` wheel on PyPI, which ships an
unmodified copy of both UCI files. Pass --raw-dir to use files you already have.

Output: header row, 48,842 rows, income mapped to 0/1, "?" kept as a category.
"""
import argparse
import csv
import pathlib
import subprocess
import sys
import tempfile
import zipfile

COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num",
    "marital_status", "occupation", "relationship", "race", "sex",
    "capital_gain", "capital_loss", "hours_per_week", "native_country", "income",
]


def fetch_raw(dest: pathlib.Path) -> pathlib.Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "responsibly==0.1.2",
         "--no-deps", "-d", str(dest)],
        check=True,
    )
    wheel = next(dest.glob("responsibly-*.whl"))
    with zipfile.ZipFile(wheel) as z:
        for name in ("adult.data", "adult.test"):
            (dest / name).write_bytes(z.read(f"responsibly/dataset/adult/{name}"))
    return dest


def rows(path: pathlib.Path):
    with path.open() as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("|"):
                continue
            fields = [v.strip() for v in line.split(",")]
            if len(fields) != len(COLUMNS):
                raise SystemExit(f"{path}: bad row {line!r}")
            label = fields[-1].rstrip(".")
            fields[-1] = {">50K": "1", "<=50K": "0"}[label]
            yield fields


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--raw-dir", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path,
                    default=pathlib.Path(__file__).resolve().parent.parent / "data" / "adult.csv")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        raw = args.raw_dir or fetch_raw(pathlib.Path(tmp))
        out_rows = list(rows(raw / "adult.data")) + list(rows(raw / "adult.test"))

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS)
        w.writerows(out_rows)
    print(f"wrote {len(out_rows)} rows to {args.out}")


if __name__ == "__main__":
    main()
