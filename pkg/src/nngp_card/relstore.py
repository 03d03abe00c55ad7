"""In-memory relational store: typed columns, domain statistics, join catalog.

Relations are immutable once built (their column arrays are marked
read-only), so they can be shared freely across worker threads.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np


class RelStoreError(Exception):
    """Base error for the relational store."""


class IngestError(RelStoreError):
    """CSV or synthetic-spec ingestion failure."""


class CatalogError(RelStoreError):
    """Invalid schema catalog operation."""


@dataclass(frozen=True)
class NumericalType:
    """Numerical attribute with an observed domain range [lo, hi]."""

    lo: float
    hi: float

    kind = "numerical"

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise RelStoreError("numerical domain bounds must be finite")
        if self.lo > self.hi:
            raise RelStoreError(f"numerical domain has lo={self.lo} > hi={self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class CategoricalType:
    """Categorical attribute with a finite ordered domain of distinct values."""

    values: tuple[str, ...]

    kind = "categorical"

    def __post_init__(self):
        if len(self.values) < 1:
            raise RelStoreError("categorical domain must hold at least one value")
        if len(set(self.values)) != len(self.values):
            raise RelStoreError("categorical domain values must be distinct")

    @property
    def size(self) -> int:
        return len(self.values)

    def index(self, value: str) -> int:
        try:
            return self.values.index(value)
        except ValueError:
            raise RelStoreError(f"value {value!r} not in categorical domain") from None


ColumnType = Union[NumericalType, CategoricalType]


class Relation:
    """A named, typed, columnar table with per-attribute domain statistics.

    Numerical columns are float64 arrays; categorical columns are stored as
    int32 codes indexing the (lexicographically ordered) domain of their
    :class:`CategoricalType`.
    """

    def __init__(self, name: str, columns: Sequence[tuple[str, ColumnType, np.ndarray]]):
        if not name:
            raise RelStoreError("relation name must be non-empty")
        attrs = [a for a, _, _ in columns]
        if len(set(attrs)) != len(attrs):
            raise RelStoreError(f"duplicate attribute names in relation {name!r}")
        n_rows = {len(data) for _, _, data in columns}
        if len(n_rows) > 1:
            raise RelStoreError(f"columns of relation {name!r} have unequal lengths")

        self.name = name
        self.attrs: tuple[str, ...] = tuple(attrs)
        self._types: dict[str, ColumnType] = {}
        self._data: dict[str, np.ndarray] = {}
        self.n_rows = n_rows.pop() if n_rows else 0

        for attr, ctype, data in columns:
            if ctype.kind == "numerical":
                arr = np.asarray(data, dtype=np.float64)
                if arr.size and (arr.min() < ctype.lo or arr.max() > ctype.hi):
                    raise RelStoreError(
                        f"{name}.{attr}: values outside declared domain "
                        f"[{ctype.lo}, {ctype.hi}]"
                    )
            else:
                arr = np.asarray(data, dtype=np.int32)
                if arr.size and (arr.min() < 0 or arr.max() >= ctype.size):
                    raise RelStoreError(f"{name}.{attr}: code outside categorical domain")
            arr = arr.copy()
            arr.flags.writeable = False
            self._types[attr] = ctype
            self._data[attr] = arr

    def type_of(self, attr: str) -> ColumnType:
        try:
            return self._types[attr]
        except KeyError:
            raise RelStoreError(f"unknown attribute {self.name}.{attr}") from None

    def column(self, attr: str) -> np.ndarray:
        """Raw column array (float64 values or int32 categorical codes)."""
        self.type_of(attr)
        return self._data[attr]

    def value_at(self, attr: str, row: int):
        """Decoded cell value (float, or domain string for categorical)."""
        ctype = self.type_of(attr)
        raw = self._data[attr][row]
        if ctype.kind == "numerical":
            return float(raw)
        return ctype.values[int(raw)]

    def renamed(self, new_name: str) -> "Relation":
        """Cheap alias sharing column data, used for self-joins."""
        clone = object.__new__(Relation)
        clone.name = new_name
        clone.attrs = self.attrs
        clone._types = self._types
        clone._data = self._data
        clone.n_rows = self.n_rows
        return clone

    def __eq__(self, other) -> bool:
        if not isinstance(other, Relation):
            return NotImplemented
        return (
            self.name == other.name
            and self.attrs == other.attrs
            and all(self._types[a] == other._types[a] for a in self.attrs)
            and all(np.array_equal(self._data[a], other._data[a]) for a in self.attrs)
        )

    def __repr__(self) -> str:
        return f"Relation({self.name!r}, {self.n_rows} rows, {len(self.attrs)} attrs)"


def split_ref(ref: str) -> tuple[str, str]:
    """Split an attribute reference "Rel.Attr" into its two parts."""
    rel, sep, attr = ref.partition(".")
    if not sep or not rel or not attr:
        raise CatalogError(f"malformed attribute reference {ref!r}, expected 'Rel.Attr'")
    return rel, attr


@dataclass(frozen=True)
class SchemaCatalog:
    """The query universe: relations (ordered by name) plus joinable attribute pairs.

    Join pairs keep their registration order; that order assigns the pair
    indices used by queries and by the encoder's join segments.
    """

    relations: tuple[Relation, ...]
    join_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            raise CatalogError("duplicate relation names in catalog")
        if names != sorted(names):
            object.__setattr__(
                self, "relations", tuple(sorted(self.relations, key=lambda r: r.name))
            )
        for left, right in self.join_pairs:
            self._check_pair(left, right)

    def _check_pair(self, left: str, right: str) -> None:
        lt = self.resolve(left)
        rt = self.resolve(right)
        if lt.kind != rt.kind:
            raise CatalogError(
                f"join pair ({left}, {right}) mixes {lt.kind} and {rt.kind} attributes"
            )
        if split_ref(left)[0] == split_ref(right)[0]:
            raise CatalogError(
                f"join pair ({left}, {right}) must reference two distinct "
                "relations; self-joins use a renamed copy"
            )

    def relation(self, name: str) -> Relation:
        for rel in self.relations:
            if rel.name == name:
                return rel
        raise CatalogError(f"unknown relation {name!r}")

    def resolve(self, ref: str) -> ColumnType:
        rel_name, attr = split_ref(ref)
        return self.relation(rel_name).type_of(attr)

    def pair_index(self, left: str, right: str) -> int:
        for i, (l, r) in enumerate(self.join_pairs):
            if (l, r) == (left, right) or (l, r) == (right, left):
                return i
        raise CatalogError(f"join pair ({left}, {right}) not registered")

    def join_graph(self) -> dict[str, list[tuple[int, str]]]:
        """Adjacency: relation name -> [(pair index, neighbour relation)]."""
        adj: dict[str, list[tuple[int, str]]] = {r.name: [] for r in self.relations}
        for i, (left, right) in enumerate(self.join_pairs):
            lrel, _ = split_ref(left)
            rrel, _ = split_ref(right)
            adj[lrel].append((i, rrel))
            adj[rrel].append((i, lrel))
        return adj

    def describe(self) -> dict:
        """Canonical JSON-compatible description (domains included); feeds hashing."""
        rels = []
        for rel in self.relations:
            cols = {}
            for attr in rel.attrs:
                ctype = rel.type_of(attr)
                if ctype.kind == "numerical":
                    cols[attr] = {"kind": "numerical", "lo": ctype.lo, "hi": ctype.hi}
                else:
                    cols[attr] = {"kind": "categorical", "values": list(ctype.values)}
            rels.append({"name": rel.name, "columns": cols, "n_rows": rel.n_rows})
        return {"relations": rels, "join_pairs": [list(p) for p in self.join_pairs]}


def register_join_pair(catalog: SchemaCatalog, left: str, right: str) -> SchemaCatalog:
    """Append a joinable attribute pair, returning the extended catalog.

    Both sides must exist and have the same column kind. Re-registering a
    pair (in either orientation) is an error.
    """
    catalog._check_pair(left, right)
    for l, r in catalog.join_pairs:
        if (l, r) == (left, right) or (l, r) == (right, left):
            raise CatalogError(f"join pair ({left}, {right}) already registered")
    return SchemaCatalog(catalog.relations, catalog.join_pairs + ((left, right),))


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------

_KINDS = ("numerical", "categorical")


def ingest_csv(path, schema: Mapping[str, str], name: str | None = None) -> Relation:
    """Load a UTF-8 CSV with a header row into a typed Relation.

    Parameters
    ----------
    path : str or Path
        CSV file; the header must name exactly the declared columns.
    schema : mapping
        Column name -> "numerical" | "categorical".
    name : str, optional
        Relation name; defaults to the file stem.

    Domain statistics are computed from the data: observed min/max for
    numerical columns, the lexicographically sorted distinct value set for
    categorical ones. Empty cells are rejected (no NULL support).
    """
    path = Path(path)
    for col, kind in schema.items():
        if kind not in _KINDS:
            raise IngestError(f"column {col!r}: unknown kind {kind!r}")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        unknown = [c for c in header if c not in schema]
        if unknown:
            raise IngestError(f"{path}: header columns {unknown} not declared in schema")
        missing = [c for c in schema if c not in header]
        if missing:
            raise IngestError(f"{path}: declared columns {missing} missing from header")

        raw: dict[str, list] = {c: [] for c in header}
        for row_idx, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise IngestError(f"{path}: row {row_idx} has {len(row)} cells, expected {len(header)}")
            for col, cell in zip(header, row):
                if cell == "":
                    raise IngestError(f"{path}: row {row_idx}, column {col!r}: empty cell")
                if schema[col] == "numerical":
                    try:
                        value = float(cell)
                    except ValueError:
                        raise IngestError(
                            f"{path}: row {row_idx}, column {col!r}: "
                            f"cannot parse {cell!r} as numerical"
                        ) from None
                    if not np.isfinite(value):
                        raise IngestError(
                            f"{path}: row {row_idx}, column {col!r}: "
                            f"non-finite value {cell!r}"
                        )
                    raw[col].append(value)
                else:
                    raw[col].append(cell)

    n_rows = len(raw[header[0]]) if header else 0
    if n_rows == 0:
        raise IngestError(f"{path}: no data rows")

    columns = []
    for col in header:
        if schema[col] == "numerical":
            arr = np.asarray(raw[col], dtype=np.float64)
            ctype: ColumnType = NumericalType(float(arr.min()), float(arr.max()))
            columns.append((col, ctype, arr))
        else:
            domain = tuple(sorted(set(raw[col])))
            ctype = CategoricalType(domain)
            codes = np.asarray([domain.index(v) for v in raw[col]], dtype=np.int32)
            columns.append((col, ctype, codes))
    return Relation(name or path.stem, columns)


def export_csv(relation: Relation, path) -> None:
    """Write a Relation back to CSV such that re-ingesting it round-trips."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(relation.attrs)
        decoders = []
        for attr in relation.attrs:
            ctype = relation.type_of(attr)
            col = relation.column(attr)
            if ctype.kind == "numerical":
                decoders.append([repr(float(v)) for v in col])
            else:
                decoders.append([ctype.values[c] for c in col])
        for row in zip(*decoders):
            writer.writerow(row)


def save_schema(relation: Relation, path) -> None:
    schema = {attr: relation.type_of(attr).kind for attr in relation.attrs}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"relation": relation.name, "columns": schema}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schema(path) -> tuple[str, dict[str, str]]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "columns" not in doc:
        raise IngestError(f"{path}: schema file lacks a 'columns' map")
    return doc.get("relation", ""), dict(doc["columns"])


def load_catalog_file(path) -> SchemaCatalog:
    """Build a catalog from a JSON file referencing relation CSVs and join pairs.

    Layout: {"relations": [{"name", "csv", "schema"}...],
             "join_pairs": [["R1.A", "R2.A"], ...]}; csv/schema paths are
    resolved relative to the catalog file.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    relations = []
    for entry in doc.get("relations", []):
        _, schema = load_schema(path.parent / entry["schema"])
        relations.append(ingest_csv(path.parent / entry["csv"], schema, name=entry["name"]))
    catalog = SchemaCatalog(tuple(relations))
    for left, right in doc.get("join_pairs", []):
        catalog = register_join_pair(catalog, left, right)
    return catalog


# ---------------------------------------------------------------------------
# Synthetic relations
# ---------------------------------------------------------------------------


def synth_relation(seed: int, n_rows: int, columns: Sequence[Mapping], name: str = "synth") -> Relation:
    """Generate a deterministic synthetic Relation from column specs.

    Each spec is a mapping with a "name" and a "kind":

    - ``uniform``: {"lo", "hi"} -> U(lo, hi) floats
    - ``uniform_int``: {"lo", "hi"} -> integer-valued floats (join keys)
    - ``mixture``: {"components": [{"weight", "mean", "std"}, ...]} Gaussian mixture
    - ``correlated``: {"source", "rho", "mean", "std"} -> value correlated with a
      previously declared numerical column (Pearson rho on the latent scale)
    - ``categorical``: {"values": [...], "weights": optional}

    The same seed always reproduces the same relation, byte for byte.
    """
    if n_rows < 1:
        raise IngestError(f"n_rows must be >= 1, got {n_rows}")
    if not columns:
        raise IngestError("at least one column spec is required")

    rng = np.random.default_rng(seed)
    built: list[tuple[str, ColumnType, np.ndarray]] = []
    numeric_cols: dict[str, np.ndarray] = {}

    for spec in columns:
        col = spec.get("name")
        kind = spec.get("kind")
        if not col:
            raise IngestError("column spec missing 'name'")
        if kind == "uniform":
            lo, hi = _spec_floats(spec, col, "lo", "hi")
            if lo >= hi:
                raise IngestError(f"column {col!r}: uniform needs lo < hi")
            vals = rng.uniform(lo, hi, size=n_rows)
        elif kind == "uniform_int":
            # integer-valued numerical column; the natural shape for join keys
            lo, hi = _spec_floats(spec, col, "lo", "hi")
            if int(lo) > int(hi):
                raise IngestError(f"column {col!r}: uniform_int needs lo <= hi")
            vals = rng.integers(int(lo), int(hi) + 1, size=n_rows).astype(np.float64)
        elif kind == "mixture":
            comps = spec.get("components")
            if not comps:
                raise IngestError(f"column {col!r}: mixture needs components")
            weights = np.asarray([c.get("weight", 1.0) for c in comps], dtype=np.float64)
            if (weights <= 0).any():
                raise IngestError(f"column {col!r}: mixture weights must be positive")
            weights = weights / weights.sum()
            means = np.asarray([_spec_floats(c, col, "mean")[0] for c in comps])
            stds = np.asarray([_spec_floats(c, col, "std")[0] for c in comps])
            if (stds <= 0).any():
                raise IngestError(f"column {col!r}: mixture stds must be positive")
            which = rng.choice(len(comps), p=weights, size=n_rows)
            vals = rng.normal(means[which], stds[which])
        elif kind == "correlated":
            source = spec.get("source")
            if source not in numeric_cols:
                raise IngestError(
                    f"column {col!r}: correlated source {source!r} must be a "
                    "previously declared numerical column"
                )
            rho = _spec_floats(spec, col, "rho")[0]
            if not -1.0 <= rho <= 1.0:
                raise IngestError(f"column {col!r}: rho must lie in [-1, 1]")
            mean = float(spec.get("mean", 0.0))
            std = float(spec.get("std", 1.0))
            if std <= 0:
                raise IngestError(f"column {col!r}: std must be positive")
            src = numeric_cols[source]
            src_std = src.std()
            z = (src - src.mean()) / src_std if src_std > 0 else np.zeros_like(src)
            latent = rho * z + np.sqrt(1.0 - rho * rho) * rng.standard_normal(n_rows)
            vals = mean + std * latent
        elif kind == "categorical":
            values = spec.get("values")
            if not values:
                raise IngestError(f"column {col!r}: categorical needs values")
            weights = spec.get("weights")
            p = None
            if weights is not None:
                p = np.asarray(weights, dtype=np.float64)
                if len(p) != len(values) or (p <= 0).any():
                    raise IngestError(f"column {col!r}: bad categorical weights")
                p = p / p.sum()
            picks = rng.choice(len(values), p=p, size=n_rows)
            observed = [str(values[i]) for i in picks]
            domain = tuple(sorted(set(observed)))
            codes = np.asarray([domain.index(v) for v in observed], dtype=np.int32)
            built.append((col, CategoricalType(domain), codes))
            continue
        else:
            raise IngestError(f"column {col!r}: unknown generator kind {kind!r}")

        vals = np.asarray(vals, dtype=np.float64)
        numeric_cols[col] = vals
        built.append((col, NumericalType(float(vals.min()), float(vals.max())), vals))

    return Relation(name, built)


def _spec_floats(spec: Mapping, col: str, *keys: str) -> list[float]:
    out = []
    for key in keys:
        if key not in spec:
            raise IngestError(f"column {col!r}: spec missing {key!r}")
        out.append(float(spec[key]))
    return out
