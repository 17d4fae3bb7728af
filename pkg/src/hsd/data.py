"""Core data containers, CSV ingestion and the seeding contract."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


class HsdError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(HsdError, ValueError):
    """Input violates a documented contract (bad values, bad arguments)."""


class SchemaError(ValidationError):
    """Column roles or feature names do not match."""


class DataError(HsdError):
    """The data cannot support the requested operation (empty strata, exhausted pools)."""


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves away from zero (non-negative inputs)."""
    return int(math.floor(x + 0.5 + 1e-9))


def ceil_count(share: float, n: int) -> int:
    """``ceil(share * n)`` robust against float noise such as 0.93 * 100 = 93.00000000000001."""
    return int(math.ceil(share * n - 1e-9))


# --------------------------------------------------------------------------- seeds


@dataclass(frozen=True)
class SeedSpec:
    """Deterministic source of random streams.

    Identical ``(master_seed, stream_label, index)`` triples always produce
    identical generators; ``child`` derives labelled sub-streams.
    """

    master_seed: int
    stream_label: str = "main"

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValidationError("master_seed must be a 64-bit unsigned integer")

    def _label_words(self) -> list[int]:
        digest = hashlib.sha256(self.stream_label.encode("utf-8")).digest()
        return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]

    def sequence(self, index: int = 0) -> np.random.SeedSequence:
        seed = int(self.master_seed)
        entropy = [seed & 0xFFFFFFFF, seed >> 32, *self._label_words()]
        return np.random.SeedSequence(entropy, spawn_key=(int(index),))

    def rng(self, index: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.sequence(index))

    def child(self, label: str) -> "SeedSpec":
        return SeedSpec(self.master_seed, f"{self.stream_label}/{label}")

    def int_seed(self, index: int = 0) -> int:
        """A 32-bit integer seed for libraries that only take ints."""
        return int(self.sequence(index).generate_state(1, dtype=np.uint32)[0])


def as_seed(seed: SeedSpec | int | None, label: str = "main") -> SeedSpec:
    if isinstance(seed, SeedSpec):
        return seed
    return SeedSpec(0 if seed is None else int(seed), label)


# --------------------------------------------------------------------------- frames


def _binary_vector(values, name: str, n: int) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValidationError(f"{name} must be a vector of length {n}, got shape {arr.shape}")
    bad = np.flatnonzero((arr != 0) & (arr != 1))
    if bad.size:
        raise ValidationError(f"{name} must be 0/1; row {int(bad[0])} holds {arr[bad[0]]!r}")
    out = arr.astype(np.int8)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class PopulationFrame:
    """Feature matrix with optional binary outcome/treatment and stable row ids.

    Frames are immutable: arrays are flagged read-only and every transformation
    returns a new frame.
    """

    features: np.ndarray
    feature_names: tuple[str, ...]
    outcome: np.ndarray | None = None
    treatment: np.ndarray | None = None
    ids: np.ndarray | None = None
    outcome_name: str = "outcome"
    treatment_name: str = "treatment"

    def __post_init__(self):
        X = np.array(self.features, dtype=float, copy=True)
        if X.ndim != 2:
            raise ValidationError(f"features must be 2-d, got shape {X.shape}")
        n, d = X.shape
        names = tuple(str(c) for c in self.feature_names)
        if len(names) != d:
            raise SchemaError(f"{d} feature columns but {len(names)} feature names")
        if len(set(names)) != d:
            raise SchemaError("feature names must be unique")
        if not np.isfinite(X).all():
            row = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
            raise ValidationError(f"features contain missing or non-finite values (row {row})")
        X.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "feature_names", names)
        if self.outcome is not None:
            object.__setattr__(self, "outcome", _binary_vector(self.outcome, "outcome", n))
        if self.treatment is not None:
            object.__setattr__(self, "treatment", _binary_vector(self.treatment, "treatment", n))
        ids = np.arange(n, dtype=np.int64) if self.ids is None else np.array(self.ids, dtype=np.int64)
        if ids.shape != (n,):
            raise ValidationError(f"ids must have length {n}")
        ids.flags.writeable = False
        object.__setattr__(self, "ids", ids)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.n_rows

    def take(self, rows) -> "PopulationFrame":
        """Subset by positional index (or boolean mask); ids travel with the rows."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return PopulationFrame(
            self.features[rows],
            self.feature_names,
            None if self.outcome is None else self.outcome[rows],
            None if self.treatment is None else self.treatment[rows],
            self.ids[rows],
            self.outcome_name,
            self.treatment_name,
        )

    def with_columns(self, *, outcome=None, treatment=None) -> "PopulationFrame":
        return PopulationFrame(
            self.features,
            self.feature_names,
            self.outcome if outcome is None else outcome,
            self.treatment if treatment is None else treatment,
            self.ids,
            self.outcome_name,
            self.treatment_name,
        )

    def require(self, *roles: str) -> None:
        for role in roles:
            if getattr(self, role) is None:
                raise SchemaError(f"frame has no {role} column")


@dataclass(frozen=True, eq=False)
class SimulatedTruth:
    """Potential-outcome probabilities parallel to a frame."""

    mu0: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        mu0 = np.array(self.mu0, dtype=float)
        tau = np.array(self.tau, dtype=float)
        if mu0.shape != tau.shape or mu0.ndim != 1:
            raise ValidationError("mu0 and tau must be vectors of equal length")
        mu1 = mu0 + tau
        eps = 1e-12
        if (mu0 < -eps).any() or (mu0 > 1 + eps).any() or (mu1 < -eps).any() or (mu1 > 1 + eps).any():
            raise ValidationError("mu0 and mu0 + tau must lie in [0, 1]")
        mu0.flags.writeable = False
        tau.flags.writeable = False
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "tau", tau)

    @property
    def mu1(self) -> np.ndarray:
        return self.mu0 + self.tau

    def __len__(self) -> int:
        return self.mu0.shape[0]

    def take(self, rows) -> "SimulatedTruth":
        return SimulatedTruth(self.mu0[rows], self.tau[rows])

    def phi(self, p: float) -> np.ndarray:
        """Optimal adjustment term mu + (1 - p) * tau."""
        return self.mu0 + (1.0 - p) * self.tau


# --------------------------------------------------------------------------- csv


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`."""

    features: tuple[str, ...]
    outcome: str | None = None
    treatment: str | None = None
    id: str | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "CsvSchema":
        if "features" not in mapping or not mapping["features"]:
            raise SchemaError("schema must name at least one feature column")
        return cls(
            tuple(mapping["features"]),
            mapping.get("outcome"),
            mapping.get("treatment"),
            mapping.get("id"),
        )


def _parse_numeric(col: pd.Series, name: str) -> np.ndarray:
    raw = col.astype(str).str.strip()
    missing = col.isna() | (raw == "")
    if missing.any():
        row = int(np.flatnonzero(missing.to_numpy())[0])
        raise ValidationError(f"column {name!r}: missing value in data row {row}")
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"column {name!r}: cannot parse {raw.iloc[row]!r} in data row {row}")
    # pandas' fast parser can be off by one ulp; numpy's conversion round-trips exactly
    return raw.to_numpy().astype(float)


def load_csv(path: str | Path, schema: CsvSchema | Mapping) -> PopulationFrame:
    """Read a comma-separated file with a header row into a frame.

    Only the columns named in ``schema`` are read; anything else in the file
    (for instance ``visit`` and ``exposure`` in the Criteo layout) is ignored.
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_mapping(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    header = pd.read_csv(path, nrows=0).columns.str.strip().tolist()
    wanted = list(schema.features) + [c for c in (schema.outcome, schema.treatment, schema.id) if c]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"{path.name}: missing column(s) {missing}")
    df = pd.read_csv(path, usecols=wanted, dtype=str, keep_default_na=False, skipinitialspace=True)
    X = np.column_stack([_parse_numeric(df[c], c) for c in schema.features])

    def binary(name):
        if name is None:
            return None
        v = _parse_numeric(df[name], name)
        bad = np.flatnonzero((v != 0) & (v != 1))
        if bad.size:
            raise ValidationError(f"column {name!r}: value {df[name].iloc[bad[0]]!r} in data row {int(bad[0])} is not 0/1")
        return v.astype(np.int8)

    ids = None
    if schema.id:
        ids = _parse_numeric(df[schema.id], schema.id)
        if (ids != np.round(ids)).any():
            raise ValidationError(f"id column {schema.id!r} must hold integers")
        if len(np.unique(ids)) != len(ids):
            raise ValidationError(f"id column {schema.id!r} has duplicates")
    return PopulationFrame(
        X,
        schema.features,
        binary(schema.outcome),
        binary(schema.treatment),
        ids,
        schema.outcome or "outcome",
        schema.treatment or "treatment",
    )


def frame_to_dataframe(frame: PopulationFrame, include_ids: bool = True) -> pd.DataFrame:
    cols = {}
    if include_ids:
        cols["id"] = frame.ids
    for j, name in enumerate(frame.feature_names):
        cols[name] = frame.features[:, j]
    if frame.treatment is not None:
        cols[frame.treatment_name] = frame.treatment.astype(int)
    if frame.outcome is not None:
        cols[frame.outcome_name] = frame.outcome.astype(int)
    return pd.DataFrame(cols)


def emit_csv(frame: PopulationFrame, path: str | Path, include_ids: bool = True) -> Path:
    """Write a frame as CSV; floats use shortest round-trip repr."""
    path = Path(path)
    frame_to_dataframe(frame, include_ids).to_csv(path, index=False)
    return path


def split_frame(frame: PopulationFrame, sizes: Sequence[int], seed: SeedSpec | int) -> list[PopulationFrame]:
    """Disjoint random subsets of the requested sizes."""
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes):
        raise ValidationError("split sizes must be non-negative")
    if sum(sizes) > frame.n_rows:
        raise ValidationError(f"requested {sum(sizes)} rows but frame has {frame.n_rows}")
    order = as_seed(seed, "split").rng().permutation(frame.n_rows)
    out, start = [], 0
    for s in sizes:
        out.append(frame.take(np.sort(order[start:start + s])))
        start += s
    return out
