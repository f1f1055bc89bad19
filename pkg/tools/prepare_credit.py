"""Convert the UCI "default of credit card clients" data to data/credit-default.csv.

Usage: python tools/prepare_credit.py SOURCE OUT.csv

SOURCE is either the original UCI spreadsheet (.xls, read with pandas; it has
a two-line header) or a CSV export of it, such as the common Kaggle copy
UCI_Credit_Card.csv. The output keeps 30,000 rows in source order, drops the
ID column, names the label column `default`, and writes SEX as male/female.
"""
import csv
import sys

FEATURES = (["LIMIT_BAL", "SEX", "EDUCATION", "MARRIAGE", "AGE", "PAY_0"]
            + [f"PAY_{i}" for i in range(2, 7)]
            + [f"BILL_AMT{i}" for i in range(1, 7)]
            + [f"PAY_AMT{i}" for i in range(1, 7)])
LABEL_ALIASES = ("default payment next month", "default.payment.next.month", "default")
SEX = {"1": "male", "2": "female"}


def read_rows(path):
    if path.lower().endswith((".xls", ".xlsx")):
        import pandas as pd

        frame = pd.read_excel(path, header=1)
        header = [str(c) for c in frame.columns]
        return header, [[str(v) for v in row] for row in frame.itertuples(index=False)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def canonical_int(text):
    value = float(text)
    return str(int(value)) if value.is_integer() else repr(value)


def main(src, out):
    header, rows = read_rows(src)
    pos = {h.strip(): i for i, h in enumerate(header)}
    if "PAY_0" not in pos and "PAY_1" in pos:
        pos["PAY_0"] = pos["PAY_1"]
    label = next((a for a in LABEL_ALIASES if a in pos), None)
    missing = [c for c in FEATURES if c not in pos] + ([] if label else ["<label>"])
    if missing:
        sys.exit(f"{src}: missing columns {missing}")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURES + ["default"])
        for r in rows:
            cells = [canonical_int(r[pos[c]]) for c in FEATURES]
            cells[1] = SEX[cells[1]]
            w.writerow(cells + [canonical_int(r[pos[label]])])
    print(f"wrote {len(rows)} rows to {out}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(*sys.argv[1:])
