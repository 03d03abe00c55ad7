"""Shared fixtures: small hand-built relations and random-instance builders."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # naive_oracle import

from nngp_card.relstore import (
    CategoricalType,
    NumericalType,
    Relation,
    SchemaCatalog,
    register_join_pair,
)


def make_relation(name, numeric=None, categories=None):
    """Relation with a numerical column "a" and/or categorical column "c"."""
    columns = []
    if numeric is not None:
        arr = np.asarray(numeric, dtype=np.float64)
        columns.append(("a", NumericalType(float(arr.min()), float(arr.max())), arr))
    if categories is not None:
        domain = tuple(sorted(set(categories)))
        codes = np.asarray([domain.index(v) for v in categories], dtype=np.int32)
        columns.append(("c", CategoricalType(domain), codes))
    return Relation(name, columns)


@pytest.fixture
def tiny_relation():
    return make_relation("t", numeric=[1.0, 2.0, 3.0], categories=["a", "b", "a"])


@pytest.fixture
def two_relation_catalog():
    r1 = make_relation("r1", numeric=[1.0, 2.0])
    r2 = make_relation("r2", numeric=[2.0, 3.0])
    catalog = SchemaCatalog((r1, r2))
    return register_join_pair(catalog, "r1.a", "r2.a")


def random_instance(rng, max_relations=3, max_rows=8):
    """Random small database: chain of numeric join pairs plus one categorical pair."""
    n_rel = int(rng.integers(1, max_relations + 1))
    relations = []
    for i in range(n_rel):
        n = int(rng.integers(1, max_rows + 1))
        numeric = rng.integers(0, 6, size=n).astype(np.float64)
        cats = [("x", "y", "z")[j] for j in rng.integers(0, 3, size=n)]
        relations.append(make_relation(f"r{i}", numeric=numeric, categories=cats))
    catalog = SchemaCatalog(tuple(relations))
    for i in range(n_rel - 1):
        catalog = register_join_pair(catalog, f"r{i}.a", f"r{i + 1}.a")
    if n_rel == 3 and rng.random() < 0.5:
        catalog = register_join_pair(catalog, "r0.c", "r2.c")
    return catalog


def random_query(catalog, rng):
    """Random query over a random relation subset; None when not validatable."""
    from nngp_card.queries import InFilter, JoinCondition, Query, QueryError, RangeFilter

    n_rel = len(catalog.relations)
    k = int(rng.integers(1, n_rel + 1))
    names = sorted(rng.choice([r.name for r in catalog.relations], size=k, replace=False).tolist())
    joins = []
    if k > 1:
        for i, (left, right) in enumerate(catalog.join_pairs):
            if left.split(".")[0] in names and right.split(".")[0] in names:
                kind = catalog.resolve(left).kind
                ops = ("=", "!=") if kind == "categorical" else ("<", "<=", "=", ">=", ">", "!=")
                joins.append(JoinCondition(i, ops[rng.integers(len(ops))]))
    selections = []
    for name in names:
        rel = catalog.relation(name)
        if rng.random() < 0.7:
            t = rel.type_of("a")
            lo = float(rng.uniform(t.lo, t.hi))
            hi = float(rng.uniform(lo, t.hi))
            selections.append((f"{name}.a", RangeFilter(lo, hi)))
        if rng.random() < 0.5:
            t = rel.type_of("c")
            size = int(rng.integers(1, t.size + 1))
            vals = tuple(rng.choice(t.values, size=size, replace=False).tolist())
            selections.append((f"{name}.c", InFilter(vals)))
    q = Query(tuple(names), tuple(selections), tuple(joins))
    try:
        q.validate(catalog)
    except QueryError:
        return None
    return q
