"""Two-period cohorts: ingestion, the pooled difference-in-differences view and
construction of a practice-preference instrument."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadValue,
    DimensionMismatch,
    EmptyCohort,
    MissingColumn,
    MissingInstrument,
    MissingPriorOutcome,
    UnknownCluster,
)
from .glm import DesignSpec, fit_ols

BINARY = "binary"
CONTINUOUS = "continuous"

def _py(v):
    """Plain Python scalar from a numpy element (ids may be numbers or strings)."""
    return v.item() if isinstance(v, np.generic) else v


DEFAULT_SCHEMA = {
    "patient_id": "patient_id",
    "cluster_id": "practice_id",
    "x": "x",
    "y0": "y0",
    "y1": "y1",
    "z": "z",
    "index_date": "index_date",
    "w0_prefix": "w0_",
    "w1_prefix": "w1_",
}


@dataclass(frozen=True)
class ObservationRecord:
    patient_id: object
    cluster_id: object
    x: int
    y0: float | None
    y1: float
    w0: tuple[float, ...] = ()
    w1: tuple[float, ...] = ()
    z: int | None = None
    index_date: int | None = None


@dataclass(frozen=True, eq=False)
class Cohort:
    """Column-oriented cohort of patients observed over a prior and a study period.

    ``w0``/``w1`` are ``(n, k0)``/``(n, k1)`` confounder matrices. ``y0``, ``z``
    and ``index_date`` may be absent (``None``).
    """

    patient_id: np.ndarray
    cluster_id: np.ndarray
    x: np.ndarray
    y1: np.ndarray
    y0: np.ndarray | None = None
    w0: np.ndarray | None = None
    w1: np.ndarray | None = None
    z: np.ndarray | None = None
    index_date: np.ndarray | None = None
    outcome_kind: str = BINARY
    w0_names: tuple[str, ...] = ()
    w1_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.x)
        if n == 0:
            raise EmptyCohort("cohort has no records")
        s = object.__setattr__
        s(self, "x", np.asarray(self.x, dtype=float))
        s(self, "y1", np.asarray(self.y1, dtype=float))
        s(self, "patient_id", np.asarray(self.patient_id))
        s(self, "cluster_id", np.asarray(self.cluster_id))
        for name in ("y0", "z"):
            v = getattr(self, name)
            if v is not None:
                s(self, name, np.asarray(v, dtype=float))
        if self.index_date is not None:
            s(self, "index_date", np.asarray(self.index_date, dtype=np.int64))
        for name, names_attr in (("w0", "w0_names"), ("w1", "w1_names")):
            m = getattr(self, name)
            m = np.empty((n, 0)) if m is None else np.asarray(m, dtype=float)
            if m.ndim == 1:
                m = m[:, None]
            s(self, name, m)
            labels = tuple(getattr(self, names_attr))
            if not labels:
                labels = tuple(f"{name}_{j + 1}" for j in range(m.shape[1]))
            if len(labels) != m.shape[1]:
                raise DimensionMismatch(f"{name} has {m.shape[1]} columns but {len(labels)} names")
            s(self, names_attr, labels)
        if self.outcome_kind not in (BINARY, CONTINUOUS):
            raise ValueError(f"unknown outcome kind {self.outcome_kind!r}")
        for name in ("patient_id", "cluster_id", "y1", "y0", "w0", "w1", "z", "index_date"):
            v = getattr(self, name)
            if v is not None and v.shape[0] != n:
                raise DimensionMismatch(f"column {name} has {v.shape[0]} rows, expected {n}")
        self._check_domain()

    def _check_domain(self):
        def first_bad(mask):
            return int(np.flatnonzero(mask)[0]) + 1

        if not np.all((self.x == 0) | (self.x == 1)):
            raise BadValue(first_bad(~((self.x == 0) | (self.x == 1))), "x")
        if self.z is not None and not np.all((self.z == 0) | (self.z == 1)):
            raise BadValue(first_bad(~((self.z == 0) | (self.z == 1))), "z")
        outcomes = [("y1", self.y1)] + ([("y0", self.y0)] if self.y0 is not None else [])
        for name, v in outcomes:
            if not np.all(np.isfinite(v)):
                raise BadValue(first_bad(~np.isfinite(v)), name)
            if self.outcome_kind == BINARY and not np.all((v == 0) | (v == 1)):
                raise BadValue(first_bad(~((v == 0) | (v == 1))), name)
        for name in ("w0", "w1"):
            m = getattr(self, name)
            if not np.all(np.isfinite(m)):
                raise BadValue(first_bad(~np.all(np.isfinite(m), axis=1)), name)

    # -- accessors --------------------------------------------------------

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def records(self) -> list[ObservationRecord]:
        out = []
        for i in range(self.n):
            out.append(
                ObservationRecord(
                    patient_id=_py(self.patient_id[i]),
                    cluster_id=_py(self.cluster_id[i]),
                    x=int(self.x[i]),
                    y0=None if self.y0 is None else float(self.y0[i]),
                    y1=float(self.y1[i]),
                    w0=tuple(map(float, self.w0[i])),
                    w1=tuple(map(float, self.w1[i])),
                    z=None if self.z is None else int(self.z[i]),
                    index_date=None if self.index_date is None else int(self.index_date[i]),
                )
            )
        return out

    @classmethod
    def from_records(
        cls,
        records: Sequence[ObservationRecord],
        outcome_kind: str = BINARY,
        w0_names: Sequence[str] = (),
        w1_names: Sequence[str] = (),
    ) -> "Cohort":
        if not records:
            raise EmptyCohort("cohort has no records")
        k0 = len(records[0].w0)
        k1 = len(records[0].w1)
        for i, r in enumerate(records, start=1):
            if len(r.w0) != k0:
                raise BadValue(i, "w0", r.w0)
            if len(r.w1) != k1:
                raise BadValue(i, "w1", r.w1)

        def col(attr):
            vals = [getattr(r, attr) for r in records]
            if all(v is None for v in vals):
                return None
            for i, v in enumerate(vals, start=1):
                if v is None:
                    raise BadValue(i, attr, None)
            return np.array(vals)

        return cls(
            patient_id=np.array([r.patient_id for r in records]),
            cluster_id=np.array([r.cluster_id for r in records]),
            x=np.array([r.x for r in records], dtype=float),
            y1=np.array([r.y1 for r in records], dtype=float),
            y0=col("y0"),
            w0=np.array([r.w0 for r in records], dtype=float).reshape(len(records), k0),
            w1=np.array([r.w1 for r in records], dtype=float).reshape(len(records), k1),
            z=col("z"),
            index_date=col("index_date"),
            outcome_kind=outcome_kind,
            w0_names=tuple(w0_names),
            w1_names=tuple(w1_names),
        )

    def subset(self, rows) -> "Cohort":
        """Cohort restricted to (or resampled at) the given row positions."""
        rows = np.asarray(rows)

        def take(v):
            return None if v is None else v[rows]

        return replace(
            self,
            patient_id=self.patient_id[rows],
            cluster_id=self.cluster_id[rows],
            x=self.x[rows],
            y1=self.y1[rows],
            y0=take(self.y0),
            w0=self.w0[rows],
            w1=self.w1[rows],
            z=take(self.z),
            index_date=take(self.index_date),
        )

    def with_z(self, z) -> "Cohort":
        return replace(self, z=np.asarray(z, dtype=float))

    @property
    def link(self) -> str:
        return "logit" if self.outcome_kind == BINARY else "identity"

    def require_z(self) -> np.ndarray:
        if self.z is None:
            raise MissingInstrument("cohort has no instrument column z")
        return self.z

    def require_y0(self) -> np.ndarray:
        if self.y0 is None:
            raise MissingPriorOutcome("cohort has no prior-period outcome y0")
        return self.y0


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_date(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return dt.date.fromisoformat(text).toordinal()


def _parse_float(text, row, column):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise BadValue(row, column, text) from None
    if not np.isfinite(v):
        raise BadValue(row, column, text)
    return v


def _parse_binary(text, row, column):
    v = _parse_float(text, row, column)
    if v not in (0.0, 1.0):
        raise BadValue(row, column, text)
    return v


def load_cohort(
    path,
    schema: Mapping[str, str] | None = None,
    outcome_kind: str = BINARY,
) -> Cohort:
    """Read a UTF-8 CSV with a header row into a validated :class:`Cohort`.

    ``schema`` maps logical fields to CSV column names (see ``DEFAULT_SCHEMA``);
    confounders are every column starting with the ``w0_prefix``/``w1_prefix``.
    Row numbers in :class:`BadValue` count data rows from 1.
    """
    sch = {**DEFAULT_SCHEMA, **(schema or {})}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for key in ("patient_id", "cluster_id", "x", "y1"):
            if sch[key] not in header:
                raise MissingColumn(sch[key])
        w0_cols = [c for c in header if c.startswith(sch["w0_prefix"])]
        w1_cols = [c for c in header if c.startswith(sch["w1_prefix"])]
        has = {k: sch[k] in header for k in ("y0", "z", "index_date")}
        cols = {k: [] for k in ("pid", "cid", "x", "y0", "y1", "z", "date", "w0", "w1")}
        outcome = _parse_binary if outcome_kind == BINARY else _parse_float
        for row, rec in enumerate(reader, start=1):
            for key in ("patient_id", "cluster_id"):
                if not (rec.get(sch[key]) or "").strip():
                    raise BadValue(row, sch[key], rec.get(sch[key]))
            cols["pid"].append(rec[sch["patient_id"]].strip())
            cols["cid"].append(rec[sch["cluster_id"]].strip())
            cols["x"].append(_parse_binary(rec[sch["x"]], row, sch["x"]))
            cols["y1"].append(outcome(rec[sch["y1"]], row, sch["y1"]))
            if has["y0"]:
                cols["y0"].append(outcome(rec[sch["y0"]], row, sch["y0"]))
            if has["z"]:
                cols["z"].append(_parse_binary(rec[sch["z"]], row, sch["z"]))
            if has["index_date"]:
                text = rec[sch["index_date"]]
                try:
                    cols["date"].append(_parse_date(text))
                except (TypeError, ValueError):
                    raise BadValue(row, sch["index_date"], text) from None
            cols["w0"].append([_parse_float(rec[c], row, c) for c in w0_cols])
            cols["w1"].append([_parse_float(rec[c], row, c) for c in w1_cols])
    n = len(cols["x"])
    if n == 0:
        raise EmptyCohort(f"{path} contains no data rows")
    return Cohort(
        patient_id=np.array(cols["pid"], dtype=object),
        cluster_id=np.array(cols["cid"], dtype=object),
        x=np.array(cols["x"]),
        y1=np.array(cols["y1"]),
        y0=np.array(cols["y0"]) if has["y0"] else None,
        w0=np.array(cols["w0"], dtype=float).reshape(n, len(w0_cols)),
        w1=np.array(cols["w1"], dtype=float).reshape(n, len(w1_cols)),
        z=np.array(cols["z"]) if has["z"] else None,
        index_date=np.array(cols["date"]) if has["index_date"] else None,
        outcome_kind=outcome_kind,
        w0_names=tuple(w0_cols),
        w1_names=tuple(w1_cols),
    )


def _fmt(v: float) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def write_cohort(cohort: Cohort, path) -> None:
    """Write ``cohort`` in the layout read by :func:`load_cohort` with default schema."""
    w0_names = [n if n.startswith("w0_") else f"w0_{n}" for n in cohort.w0_names]
    w1_names = [n if n.startswith("w1_") else f"w1_{n}" for n in cohort.w1_names]
    header = ["patient_id", "practice_id", "x"]
    if cohort.y0 is not None:
        header.append("y0")
    header.append("y1")
    if cohort.z is not None:
        header.append("z")
    if cohort.index_date is not None:
        header.append("index_date")
    header += w0_names + w1_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(cohort.n):
            row = [cohort.patient_id[i], cohort.cluster_id[i], _fmt(cohort.x[i])]
            if cohort.y0 is not None:
                row.append(_fmt(cohort.y0[i]))
            row.append(_fmt(cohort.y1[i]))
            if cohort.z is not None:
                row.append(_fmt(cohort.z[i]))
            if cohort.index_date is not None:
                row.append(int(cohort.index_date[i]))
            row += [_fmt(v) for v in cohort.w0[i]] + [_fmt(v) for v in cohort.w1[i]]
            w.writerow(row)


# ---------------------------------------------------------------------------
# pooled difference-in-differences layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PooledDiDView:
    """Two stacked rows per patient: prior period (p=0) first, then study period."""

    y: np.ndarray
    p: np.ndarray
    x_star: np.ndarray
    w: np.ndarray
    w_names: tuple[str, ...]
    z: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def w_by_p(self) -> np.ndarray:
        return self.w * self.p[:, None]

    @property
    def x_star_by_p(self) -> np.ndarray:
        return self.x_star * self.p

    def design(self, link: str, include_z: bool = False) -> DesignSpec:
        """Regression layout ``y ~ p + x* + x*:p + w + w:p`` (plus ``z + z:p``)."""
        cols = {"p": self.p, "x_star": self.x_star, "x_star:p": self.x_star_by_p}
        for j, name in enumerate(self.w_names):
            cols[name] = self.w[:, j]
        for j, name in enumerate(self.w_names):
            cols[f"{name}:p"] = self.w[:, j] * self.p
        if include_z:
            if self.z is None:
                raise MissingInstrument("include_z requested but cohort has no z")
            cols["z"] = self.z
            cols["z:p"] = self.z * self.p
        return DesignSpec.from_columns(self.y, cols, link=link)

    def unstack(self):
        """Inverse of the stacking: ``(y0, y1, x, w0, w1)``."""
        n = self.n_rows // 2
        return self.y[:n], self.y[n:], self.x_star[:n], self.w[:n], self.w[n:]


def pool_for_did(cohort: Cohort) -> PooledDiDView:
    y0 = cohort.require_y0()
    if cohort.w0.shape[1] != cohort.w1.shape[1]:
        raise DimensionMismatch(
            f"prior and study confounder sets differ in size ({cohort.w0.shape[1]} vs "
            f"{cohort.w1.shape[1]})"
        )
    n = cohort.n
    k = cohort.w0.shape[1]
    w_names = tuple(f"w{j + 1}" for j in range(k))
    return PooledDiDView(
        y=np.concatenate([y0, cohort.y1]),
        p=np.concatenate([np.zeros(n), np.ones(n)]),
        x_star=np.concatenate([cohort.x, cohort.x]),
        w=np.concatenate([cohort.w0, cohort.w1]),
        w_names=w_names,
        z=None if cohort.z is None else np.concatenate([cohort.z, cohort.z]),
    )


# ---------------------------------------------------------------------------
# preference instrument
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class PrescriptionEvent:
    date: int
    patient_id: object
    cluster_id: object = field(compare=False)
    drug: int = field(compare=False)


def load_history(path) -> list[PrescriptionEvent]:
    """Prescription history CSV: ``practice_id, patient_id, date, drug``."""
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("practice_id", "patient_id", "date", "drug"):
            if col not in header:
                raise MissingColumn(col)
        for row, rec in enumerate(reader, start=1):
            try:
                date = _parse_date(rec["date"])
            except (TypeError, ValueError):
                raise BadValue(row, "date", rec["date"]) from None
            drug = _parse_binary(rec["drug"], row, "drug")
            events.append(
                PrescriptionEvent(date, rec["patient_id"].strip(), rec["practice_id"].strip(), int(drug))
            )
    return events


@dataclass(frozen=True)
class PreferenceIV:
    cohort: Cohort | None
    excluded: list
    mode: str


def _event_key(e: PrescriptionEvent):
    return (e.date, str(e.patient_id))


def build_preference_iv(
    events: Iterable[PrescriptionEvent],
    cohort: Cohort,
    mode: str = "static",
    burn_in_end: int | None = None,
) -> PreferenceIV:
    """Assign each patient the drug last prescribed at their practice.

    ``mode="static"``: one value per practice, the drug of the final event
    dated strictly before ``burn_in_end`` (default: the earliest cohort
    index date). Cohort patients indexed before the cutoff, or whose own
    event fixed their practice's value, are excluded.

    ``mode="dynamic"``: per patient, the drug of the latest practice event
    strictly before the patient's own index date.

    Patients without a determining event are excluded rather than failing.
    Same-day events are ordered by patient id.
    """
    if cohort.index_date is None:
        raise MissingColumn("index_date")
    by_cluster: dict = {}
    for e in sorted(events, key=_event_key):
        by_cluster.setdefault(str(e.cluster_id), []).append(e)
    clusters = {str(c) for c in cohort.cluster_id}
    unknown = clusters - set(by_cluster)
    if unknown:
        raise UnknownCluster(unknown)

    n = cohort.n
    z = np.full(n, np.nan)
    keep = np.ones(n, dtype=bool)
    if mode == "dynamic":
        dates = {c: np.array([e.date for e in evs]) for c, evs in by_cluster.items()}
        for i in range(n):
            c = str(cohort.cluster_id[i])
            k = int(np.searchsorted(dates[c], cohort.index_date[i], side="left"))
            if k == 0:
                keep[i] = False
            else:
                z[i] = by_cluster[c][k - 1].drug
    elif mode == "static":
        cutoff = int(cohort.index_date.min()) if burn_in_end is None else int(burn_in_end)
        pref = {}
        determining = set()
        for c, evs in by_cluster.items():
            prior = [e for e in evs if e.date < cutoff]
            if prior:
                pref[c] = prior[-1].drug
                determining.add(str(prior[-1].patient_id))
        for i in range(n):
            c = str(cohort.cluster_id[i])
            if (
                c not in pref
                or cohort.index_date[i] < cutoff
                or str(cohort.patient_id[i]) in determining
            ):
                keep[i] = False
            else:
                z[i] = pref[c]
    else:
        raise ValueError(f"unknown IV mode {mode!r}")

    excluded = [_py(cohort.patient_id[i]) for i in np.flatnonzero(~keep)]
    rows = np.flatnonzero(keep)
    retained = cohort.subset(rows).with_z(z[rows]) if rows.size else None
    return PreferenceIV(retained, excluded, mode)


# ---------------------------------------------------------------------------
# instrument strength
# ---------------------------------------------------------------------------


def partial_f_statistic(response, base: Mapping[str, np.ndarray], added: Mapping[str, np.ndarray]) -> float:
    """F statistic for adding ``added`` columns to an OLS model with ``base`` columns."""
    restricted = fit_ols(DesignSpec.from_columns(response, base))
    full = fit_ols(DesignSpec.from_columns(response, {**base, **added}))
    q = len(added)
    dof = full.n_obs - len(full.names)
    if full.rss <= 0.0:
        return float("inf")
    return ((restricted.rss - full.rss) / q) / (full.rss / dof)


def confounder_columns(m: np.ndarray, names: Sequence[str]) -> dict[str, np.ndarray]:
    return {name: m[:, j] for j, name in enumerate(names)}


def first_stage_f_statistic(cohort: Cohort) -> float:
    """Partial F of the instrument in the regression of X on Z and W1."""
    z = cohort.require_z()
    base = confounder_columns(cohort.w1, cohort.w1_names)
    return partial_f_statistic(cohort.x, base, {"z": z})
