"""Convert the raw UCI Adult files (adult.data, adult.test) to one headered CSV.

Usage: python tools/prepare_adult.py ADULT_DATA ADULT_TEST OUT.csv[.gz]

The raw files have no header, pad fields with a space, use '?' for missing
values, and the test file starts with a junk line and ends labels with '.'.
Rows are written in file order: adult.data first, then adult.test.
"""
import csv
import gzip
import io
import sys

COLUMNS = ["age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
           "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
           "hours-per-week", "native-country", "income"]


def rows(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("|"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if len(cells) != len(COLUMNS):
                raise ValueError(f"{path}: unexpected field count in {line!r}")
            cells[-1] = cells[-1].rstrip(".")
            yield cells


def main(data, test, out):
    n = 0
    # mtime=0 keeps the gzip bytes reproducible
    with (gzip.GzipFile(out, "wb", mtime=0) if out.endswith(".gz") else open(out, "wb")) as raw:
        fh = io.TextIOWrapper(raw, encoding="utf-8", newline="")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for path in (data, test):
            for r in rows(path):
                w.writerow(r)
                n += 1
        fh.flush()
        fh.detach()
    print(f"wrote {n} rows to {out}")


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])
