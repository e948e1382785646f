"""Dataset ingestion, the synthetic benchmark and train/test splitting."""

from __future__ import annotations

import csv
from typing import Optional, Sequence

import numpy as np

from vfboost import rng
from vfboost.boost import Dataset
from vfboost.errors import SchemaError


def _as_float(text: str) -> Optional[float]:
    try:
        return float(text)
    except ValueError:
        return None


def load_csv(path: str, label_column: str = "label") -> Dataset:
    """Reads a headed CSV file.

    A column is numeric when its first data cell parses as a number; every
    other column is categorical and encoded by first appearance.

    Raises:
        SchemaError: Missing label column, labels outside {0, 1}, a short or
            long row, or an unparsable or non-finite numeric cell. Row errors
            name the file line.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration as err:
            raise SchemaError(f"{path}: empty file") from err
        if label_column not in header:
            raise SchemaError(f"{path}: no label column {label_column!r}")
        label_at = header.index(label_column)
        feature_at = [j for j in range(len(header)) if j != label_at]
        numeric: Optional[list[bool]] = None
        codes: dict[int, dict[str, int]] = {}
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{line}: expected {len(header)} cells, "
                                  f"got {len(row)}")
            row = [cell.strip() for cell in row]
            if row[label_at] not in ("0", "1", "0.0", "1.0"):
                raise SchemaError(f"{path}:{line}: label {row[label_at]!r} is "
                                  "not 0 or 1")
            labels.append(int(float(row[label_at])))
            if numeric is None:
                numeric = [_as_float(row[j]) is not None for j in feature_at]
            values = []
            for is_num, j in zip(numeric, feature_at):
                if is_num:
                    value = _as_float(row[j])
                    if value is None or not np.isfinite(value):
                        raise SchemaError(f"{path}:{line}: cannot parse "
                                          f"{header[j]}={row[j]!r}")
                else:
                    table = codes.setdefault(j, {})
                    value = table.setdefault(row[j], len(table))
                values.append(float(value))
            rows.append(values)
    if len(rows) < 2:
        raise SchemaError(f"{path}: need at least two data rows")
    return Dataset(np.array(rows, dtype=np.float64).reshape(len(rows), -1),
                   np.array(labels), tuple(header[j] for j in feature_at))


def write_csv(path: str, data: Dataset, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*data.feature_names, label_column])
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def gen_synthetic(n: int, d_ap: int, d_pp: int, balance: float = 0.5,
                  label_noise: float = 0.0, seed: int = 0,
                  separation: float = 4.0) -> Dataset:
    """Two Gaussian classes separated along a direction spread over all columns.

    Class means sit at +-separation/2 along the unit vector with equal weight on
    every column, so both parties' features carry signal. Columns are named
    ap0.., pp0.. in that order.

    Args:
        n: Instance count, at least 10.
        d_ap: Columns for the labelled party.
        d_pp: Columns for the passive party.
        balance: Probability of the positive class, in (0, 1).
        label_noise: Probability of flipping each label, in [0, 0.5].
        seed: Seed of the data stream.
        separation: Distance between the class means.
    """
    if n < 10:
        raise ValueError("need n >= 10")
    if not 0 < balance < 1:
        raise ValueError("class balance must lie in (0, 1)")
    if not 0 <= label_noise <= 0.5:
        raise ValueError("label noise must lie in [0, 0.5]")
    d = d_ap + d_pp
    if d_ap < 0 or d_pp < 0 or d < 1:
        raise ValueError("need at least one feature column")
    gen = rng.stream(seed, "data", 0)
    labels = (gen.random(n) < balance).astype(np.int8)
    direction = np.ones(d) / np.sqrt(d)
    features = gen.standard_normal((n, d)) + np.outer(
        (2.0 * labels - 1.0) * separation / 2, direction)
    flip = gen.random(n) < label_noise
    labels = np.where(flip, 1 - labels, labels)
    names = tuple(f"ap{j}" for j in range(d_ap)) + tuple(
        f"pp{j}" for j in range(d_pp))
    return Dataset(features, labels, names)


def stratified_split(labels: np.ndarray, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted (train, test) row indices with class proportions kept."""
    if not 0 < test_fraction < 1:
        raise ValueError("test fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    gen = rng.stream(seed, "split", 0)
    test = []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        members = members[gen.permutation(members.size)]
        test.append(members[:int(round(test_fraction * members.size))])
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(labels.size), test)
    return train, test


def vertical_split(data: Dataset, ap_columns: Sequence[int],
                   pp_columns: Sequence[int]) -> tuple[Dataset, np.ndarray]:
    """AP partition (with labels) and PP feature matrix."""
    ap_columns, pp_columns = list(ap_columns), list(pp_columns)
    if set(ap_columns) & set(pp_columns):
        raise ValueError("AP and PP columns must be disjoint")
    if sorted(ap_columns + pp_columns) != list(range(data.d)):
        raise ValueError("AP and PP columns must cover every feature")
    return data.columns(ap_columns), data.features[:, pp_columns]
