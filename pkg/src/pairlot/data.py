"""Longitudinal trial data with intercurrent events.

Outcomes live in an ``n x (tau + 1)`` float array whose cells after each
subject's ICE time are NaN; the boolean ``observed`` mask is derived from the
ICE times, so downstream code multiplies by indicators instead of reading
masked cells.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Raised when a trial-data file cannot be parsed."""


@dataclass(frozen=True, eq=False)
class TrialDataset:
    covariates: np.ndarray  # (n, d)
    arm: np.ndarray  # (n,) int 0/1
    ice_time: np.ndarray  # (n,) int in 0..tau
    outcomes: np.ndarray  # (n, tau + 1), NaN after ice_time
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        arm = np.asarray(self.arm).astype(int)
        ice = np.asarray(self.ice_time).astype(int)
        y = np.asarray(self.outcomes, dtype=float)
        n = arm.shape[0]
        cov = np.asarray(self.covariates, dtype=float)
        if cov.size == 0:
            cov = np.zeros((n, 0))
        elif cov.ndim == 1:
            cov = cov[:, None]
        ids = np.arange(1, n + 1) if self.ids is None else np.asarray(self.ids)
        for name, value in (("covariates", cov), ("arm", arm), ("ice_time", ice),
                            ("outcomes", y), ("ids", ids)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if not (cov.shape[0] == ice.shape[0] == y.shape[0] == ids.shape[0] == n):
            raise ValueError("inconsistent subject counts")

    @property
    def n(self) -> int:
        return self.arm.shape[0]

    @property
    def tau(self) -> int:
        return self.outcomes.shape[1] - 1

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Boolean (n, tau + 1) mask, True where t <= T_i."""
        return np.arange(self.tau + 1)[None, :] <= self.ice_time[:, None]

    def filled_outcomes(self) -> np.ndarray:
        """Outcomes with masked cells replaced by 0 (safe under indicator weights)."""
        return np.where(self.observed, self.outcomes, 0.0)

    def last_observed(self) -> np.ndarray:
        return self.outcomes[np.arange(self.n), self.ice_time]

    def subset(self, idx) -> "TrialDataset":
        idx = np.asarray(idx)
        return TrialDataset(self.covariates[idx], self.arm[idx], self.ice_time[idx],
                            self.outcomes[idx], self.ids[idx])

    def with_outcomes(self, outcomes) -> "TrialDataset":
        y = np.where(self.observed, outcomes, np.nan)
        return TrialDataset(self.covariates, self.arm, self.ice_time, y, self.ids)

    def equals(self, other: "TrialDataset") -> bool:
        return (
            self.covariates.shape == other.covariates.shape
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.ice_time, other.ice_time)
            and np.array_equal(self.outcomes, other.outcomes, equal_nan=True)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True, eq=False)
class CounterfactualPanel:
    """Potential outcomes and ICE times under both arms.

    ``outcomes[a]`` is the full (n, tau + 1) trajectory under arm ``a``
    without masking; ``ice_time[a]`` is T^a.
    """

    covariates: np.ndarray
    outcomes: tuple[np.ndarray, np.ndarray]
    ice_time: tuple[np.ndarray, np.ndarray]

    @property
    def n(self) -> int:
        return self.ice_time[0].shape[0]

    @property
    def tau(self) -> int:
        return self.outcomes[0].shape[1] - 1

    def factual(self, arm) -> TrialDataset:
        """Filter the panel through the assigned arms."""
        arm = np.asarray(arm).astype(int)
        ice = np.where(arm == 1, self.ice_time[1], self.ice_time[0])
        y = np.where(arm[:, None] == 1, self.outcomes[1], self.outcomes[0])
        mask = np.arange(self.tau + 1)[None, :] <= ice[:, None]
        return TrialDataset(self.covariates, arm, ice, np.where(mask, y, np.nan))


@dataclass
class ValidationReport:
    violations: list[tuple[str, list[int]]]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "pass"
        lines = []
        for message, subjects in self.violations:
            shown = ", ".join(str(s) for s in subjects[:10])
            more = "" if len(subjects) <= 10 else f" (+{len(subjects) - 10} more)"
            lines.append(f"{message}: subjects [{shown}]{more}" if subjects else message)
        return "\n".join(lines)

    def messages(self) -> list[str]:
        return [m for m, _ in self.violations]


def validate(dataset: TrialDataset) -> ValidationReport:
    """Check the data-model invariants, reporting offending subject indices."""
    violations = []
    T, tau = dataset.ice_time, dataset.tau
    bad = np.flatnonzero((T < 0) | (T > tau))
    if bad.size:
        violations.append(("ICE time out of range", bad.tolist()))
    present = ~np.isnan(dataset.outcomes)
    observed = dataset.observed
    bad = np.flatnonzero((present & ~observed).any(axis=1))
    if bad.size:
        violations.append(("outcome present after ICE", bad.tolist()))
    bad = np.flatnonzero((~present & observed).any(axis=1))
    if bad.size:
        violations.append(("outcome missing before or at ICE", bad.tolist()))
    bad = np.flatnonzero(~np.isin(dataset.arm, (0, 1)))
    if bad.size:
        violations.append(("arm not binary", bad.tolist()))
    arms = set(np.unique(dataset.arm).tolist())
    if not {0, 1} <= arms:
        violations.append(("single-arm dataset", []))
    bad = np.flatnonzero(~np.isfinite(dataset.covariates).all(axis=1))
    if bad.size:
        violations.append(("non-finite covariate", bad.tolist()))
    return ValidationReport(violations)


# ---------------------------------------------------------------- CSV I/O


def _header(d: int, tau: int) -> list[str]:
    return (["id", "A", "T"] + [f"L{k + 1}" for k in range(d)]
            + [f"Y{t}" for t in range(tau + 1)])


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "NA"
    return repr(float(x))


def save_csv(dataset: TrialDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_header(dataset.d, dataset.tau))
        for i in range(dataset.n):
            row = [str(dataset.ids[i]), str(int(dataset.arm[i])), str(int(dataset.ice_time[i]))]
            row += [_fmt(v) for v in dataset.covariates[i]]
            row += [_fmt(v) for v in dataset.outcomes[i]]
            writer.writerow(row)


def _parse_header(header: list[str]) -> tuple[int, int]:
    if header[:3] != ["id", "A", "T"]:
        raise DataFormatError("header must start with id,A,T")
    rest = header[3:]
    d = 0
    while d < len(rest) and rest[d] == f"L{d + 1}":
        d += 1
    ys = rest[d:]
    if not ys or ys != [f"Y{t}" for t in range(len(ys))]:
        raise DataFormatError("header must end with Y0..Ytau")
    return d, len(ys) - 1


def load_csv(path) -> TrialDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d, tau = _parse_header(header)
    ids, arms, times, covs, ys = [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        cells = [c.strip() for c in row]

        def number(col, integer=False):
            text = cells[col]
            if text == "NA":
                raise DataFormatError(f"row {lineno}, column {header[col]}: NA not allowed")
            try:
                value = float(text)
            except ValueError:
                raise DataFormatError(f"row {lineno}, column {header[col]}: not a number: {text!r}")
            if integer and value != int(value):
                raise DataFormatError(f"row {lineno}, column {header[col]}: non-integer {text!r}")
            return value

        a = number(1, integer=True)
        if a not in (0, 1):
            raise DataFormatError(f"row {lineno}, column A: arm must be 0 or 1")
        t = int(number(2, integer=True))
        if not 0 <= t <= tau:
            raise DataFormatError(f"row {lineno}, column T: T out of range 0..{tau}")
        ids.append(cells[0])
        arms.append(int(a))
        times.append(t)
        covs.append([number(3 + k) for k in range(d)])
        ys.append([np.nan if c == "NA" else number(3 + d + k)
                   for k, c in enumerate(cells[3 + d:])])
    n = len(arms)
    id_arr = np.array(ids)
    try:
        id_arr = id_arr.astype(int)
    except ValueError:
        pass
    return TrialDataset(np.array(covs, dtype=float).reshape(n, d), np.array(arms),
                        np.array(times), np.array(ys, dtype=float).reshape(n, tau + 1), id_arr)


def save_counterfactual_csv(panel: CounterfactualPanel, path) -> None:
    """Long-by-arm layout: one row per (subject, arm) with columns id, a, T, L*, Y*."""
    d = panel.covariates.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "a", "T"] + [f"L{k + 1}" for k in range(d)]
                        + [f"Y{t}" for t in range(panel.tau + 1)])
        for i in range(panel.n):
            for a in (0, 1):
                writer.writerow([str(i + 1), str(a), str(int(panel.ice_time[a][i]))]
                                + [_fmt(v) for v in panel.covariates[i]]
                                + [_fmt(v) for v in panel.outcomes[a][i]])


def load_counterfactual_csv(path) -> CounterfactualPanel:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d = sum(1 for h in header if h.startswith("L"))
    body = np.array([[float(c) for c in r] for r in rows[1:] if r])
    arms = body[:, 1].astype(int)
    parts = [body[arms == a] for a in (0, 1)]
    return CounterfactualPanel(
        parts[0][:, 3:3 + d],
        (parts[0][:, 3 + d:], parts[1][:, 3 + d:]),
        (parts[0][:, 2].astype(int), parts[1][:, 2].astype(int)),
    )
