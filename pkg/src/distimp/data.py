"""Wide-format longitudinal trial data with monotone dropout."""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MISSING_TOKENS = ("", "NA")
CONTROL, TREATMENT = 1, 2


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DropoutPattern:
    k: int
    is_complete: bool


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Subjects x visits outcome matrix plus baseline covariates and arm labels.

    ``y`` holds NaN where ``r`` is False. Arrays are made read-only on
    construction so a validated dataset can be shared between workers.
    """

    x: np.ndarray
    group: np.ndarray
    y: np.ndarray
    r: np.ndarray
    ids: tuple = field(default=())

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((len(self.group), 0))
        elif x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float)
        r = np.asarray(self.r, dtype=bool)
        g = np.asarray(self.group, dtype=int)
        ids = tuple(self.ids) if len(self.ids) else tuple(range(1, len(g) + 1))
        y = np.where(r, y, np.nan)
        for name, arr in (("x", x), ("group", g), ("y", y), ("r", r)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "ids", ids)
        _validate(self)

    @property
    def n_subjects(self) -> int:
        return self.y.shape[0]

    @property
    def n_visits(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    @property
    def last_observed(self) -> np.ndarray:
        """Per-subject k, the index (1-based) of the last observed visit."""
        return self.r.sum(axis=1)

    @property
    def design(self) -> np.ndarray:
        """Intercept-first design rows (1, x)."""
        return np.column_stack([np.ones(self.n_subjects), self.x])

    def subset(self, mask) -> "TrialDataset":
        mask = np.asarray(mask)
        ids = tuple(np.asarray(self.ids, dtype=object)[mask])
        return TrialDataset(self.x[mask], self.group[mask], self.y[mask], self.r[mask], ids)

    def pattern_counts(self) -> Counter:
        return Counter(zip(self.group.tolist(), self.last_observed.tolist()))


def pattern_of(dataset: TrialDataset, i: int) -> DropoutPattern:
    k = int(dataset.r[i].sum())
    return DropoutPattern(k=k, is_complete=k == dataset.n_visits)


def _validate(ds: TrialDataset):
    n, T = ds.y.shape
    if ds.r.shape != (n, T) or ds.x.shape[0] != n or ds.group.shape != (n,):
        raise DatasetError("inconsistent array shapes")
    if len(ds.ids) != n:
        raise DatasetError("ids length does not match number of subjects")
    if not np.all(np.isfinite(ds.x)):
        bad = int(np.argwhere(~np.isfinite(ds.x))[0, 0])
        raise DatasetError(f"subject {ds.ids[bad]}: covariates must be complete and finite")
    bad_group = ~np.isin(ds.group, (CONTROL, TREATMENT))
    if bad_group.any():
        i = int(np.flatnonzero(bad_group)[0])
        raise DatasetError(f"subject {ds.ids[i]}: unknown group label {ds.group[i]}")
    for g in (CONTROL, TREATMENT):
        if not np.any(ds.group == g):
            raise DatasetError(f"group {g} has no subjects")
    if T and not ds.r[:, 0].all():
        i = int(np.flatnonzero(~ds.r[:, 0])[0])
        raise DatasetError(f"subject {ds.ids[i]}: baseline visit y1 is missing")
    gaps = ~ds.r[:, :-1] & ds.r[:, 1:]
    if gaps.any():
        i, k = np.argwhere(gaps)[0]
        raise DatasetError(
            f"subject {ds.ids[i]} (row {i}): non-monotone missingness, "
            f"visit y{k + 2} observed after y{k + 1} missing"
        )
    obs = ds.y[ds.r]
    if not np.all(np.isfinite(obs)):
        raise DatasetError("observed outcomes must be finite")


def _outcome_columns(header, prefix):
    pat = re.compile(rf"^{prefix}(\d+)$")
    cols = sorted((int(m.group(1)), h) for h in header if (m := pat.match(h)))
    return [h for _, h in cols]


def _parse_outcome(cell, row_idx, col):
    if cell in MISSING_TOKENS:
        return np.nan, False
    try:
        return float(cell), True
    except ValueError:
        raise DatasetError(f"row {row_idx}: column {col} has non-numeric value {cell!r}") from None


def load_dataset(path, schema: dict | None = None) -> TrialDataset:
    """Read a wide CSV (columns ``x1..xp``, ``group``, ``y1..yT``, optional ``id``).

    Lines starting with ``#`` are skipped, so self-describing outputs load back.

    ``schema`` may rename columns: keys ``group``, ``id``, ``covariates`` (list),
    ``outcomes`` (list). Missing outcomes are empty cells or ``NA``.
    """
    schema = schema or {}
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        header = reader.fieldnames or []
        rows = list(reader)
    gcol = schema.get("group", "group")
    idcol = schema.get("id", "id")
    xcols = schema.get("covariates") or _outcome_columns(header, "x")
    ycols = schema.get("outcomes") or _outcome_columns(header, "y")
    if gcol not in header:
        raise DatasetError(f"missing column {gcol!r}")
    if not ycols:
        raise DatasetError("no outcome columns y1..yT found")
    for c in list(xcols) + list(ycols):
        if c not in header:
            raise DatasetError(f"missing column {c!r}")

    n = len(rows)
    x = np.empty((n, len(xcols)))
    y = np.empty((n, len(ycols)))
    r = np.zeros((n, len(ycols)), dtype=bool)
    g = np.empty(n, dtype=int)
    ids = []
    for i, row in enumerate(rows):
        for j, c in enumerate(xcols):
            cell = row[c]
            if cell in MISSING_TOKENS:
                raise DatasetError(f"row {i}: covariate {c} is missing")
            try:
                x[i, j] = float(cell)
            except ValueError:
                raise DatasetError(f"row {i}: covariate {c} has non-numeric value {cell!r}") from None
        try:
            g[i] = int(row[gcol])
        except ValueError:
            raise DatasetError(f"row {i}: unknown group label {row[gcol]!r}") from None
        for j, c in enumerate(ycols):
            y[i, j], r[i, j] = _parse_outcome(row[c], i, c)
        ids.append(row[idcol] if idcol in header else i + 1)
    return TrialDataset(x, g, y, r, tuple(ids))


def _fmt(v, precision):
    if precision is None:
        return repr(float(v))
    return f"{v:.{precision}g}"


def write_dataset(dataset: TrialDataset, path, precision: int | None = None, with_ids: bool = True):
    """Write ``dataset`` in the wide layout accepted by :func:`load_dataset`.

    ``precision=None`` writes shortest round-trip reprs, so reading back is exact.
    """
    p, T = dataset.n_covariates, dataset.n_visits
    header = (["id"] if with_ids else []) + [f"x{j + 1}" for j in range(p)] + ["group"]
    header += [f"y{k + 1}" for k in range(T)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n_subjects):
            row = [dataset.ids[i]] if with_ids else []
            row += [_fmt(v, precision) for v in dataset.x[i]]
            row.append(int(dataset.group[i]))
            row += [_fmt(v, precision) if ok else "NA" for v, ok in zip(dataset.y[i], dataset.r[i])]
            w.writerow(row)


def long_to_wide(path, out_path, id_col="id", visit_col="visit", value_col="y"):
    """Pivot a long CSV (one row per subject-visit) into the wide layout.

    Covariate columns ``x*`` and ``group`` must be constant within subject.
    Visits are sorted numerically; absent visits become ``NA``.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        header = reader.fieldnames or []
        rows = list(reader)
    xcols = _outcome_columns(header, "x")
    subjects: dict = {}
    visits = set()
    for i, row in enumerate(rows):
        sid = row[id_col]
        v = int(row[visit_col])
        visits.add(v)
        rec = subjects.setdefault(sid, {"x": [row[c] for c in xcols], "group": row["group"], "y": {}})
        if rec["x"] != [row[c] for c in xcols] or rec["group"] != row["group"]:
            raise DatasetError(f"row {i}: subject {sid} has inconsistent baseline fields")
        rec["y"][v] = row[value_col]
    visits = sorted(visits)
    with Path(out_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + xcols + ["group"] + [f"y{k + 1}" for k in range(len(visits))])
        for sid, rec in subjects.items():
            ys = [rec["y"].get(v, "NA") or "NA" for v in visits]
            w.writerow([sid] + rec["x"] + [rec["group"]] + ys)
