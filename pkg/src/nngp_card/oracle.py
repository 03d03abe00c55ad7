"""Brute-force exact cardinality oracle over the relational store.

Counts the tuples of a conjunctive select-join query exactly. Equi-joins go
through a sort/searchsorted hash-join path, theta-joins through filtered
cross products; both paths produce identical counts and can be forced for
differential testing.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .queries import JoinCondition, Query, QueryError, RangeFilter
from .relstore import CategoricalType, Relation, SchemaCatalog, split_ref

# Intermediate-result guard: the oracle targets desk-scale instances, not a
# real executor. Exceeding this is almost certainly a malformed workload.
MAX_INTERMEDIATE = 20_000_000

_STRATEGIES = ("auto", "hash", "nested")


class OracleError(Exception):
    """Execution failure (oversized intermediate, bad strategy)."""


def execute(query: Query, catalog: SchemaCatalog, strategy: str = "auto") -> int:
    """Exact cardinality of the query's select-join result.

    Parameters
    ----------
    query : Query
        Validated against `catalog` before execution.
    catalog : SchemaCatalog
    strategy : str
        "auto" uses a hash join whenever an equality condition links the next
        relation, "hash" requires it, "nested" forces filtered cross products
        everywhere (the differential-testing path).

    Empty results return 0; they are not an error.
    """
    if strategy not in _STRATEGIES:
        raise OracleError(f"unknown strategy {strategy!r}")
    query.validate(catalog)

    selected = {
        name: _selection_rows(catalog.relation(name), name, query)
        for name in query.relations
    }
    if min(len(rows) for rows in selected.values()) == 0:
        return 0
    if len(query.relations) == 1:
        return len(selected[query.relations[0]])

    # Left-deep join in catalog (name) order; correctness is order-independent.
    first = query.relations[0]
    partial: dict[str, np.ndarray] = {first: selected[first]}
    pending = list(query.joins)

    for name in query.relations[1:]:
        rows = selected[name]
        applicable = [
            cond for cond in pending if _cond_touches(cond, catalog, name, partial)
        ]
        pending = [c for c in pending if c not in applicable]
        partial = _join_step(partial, name, rows, applicable, catalog, strategy)
        if not next(iter(partial.values())).size:
            return 0

    if pending:  # both endpoints outside the query would have failed validation
        raise OracleError(f"unapplied join conditions remain: {pending}")
    return int(next(iter(partial.values())).size)


def execute_batch(
    queries: Sequence[Query],
    catalog: SchemaCatalog,
    threads: int | None = None,
    strategy: str = "auto",
) -> list[int]:
    """Element-wise `execute` with order preserved.

    All queries are validated up front so the first invalid one is reported
    with its index regardless of worker scheduling.
    """
    for idx, query in enumerate(queries):
        try:
            query.validate(catalog)
        except QueryError as exc:
            raise QueryError(f"query {idx}: {exc}") from None

    if threads is None:
        threads = os.cpu_count() or 1
    if threads <= 1 or len(queries) < 4:
        return [execute(q, catalog, strategy) for q in queries]

    chunk = max(1, len(queries) // (threads * 4))
    spans = [(i, min(i + chunk, len(queries))) for i in range(0, len(queries), chunk)]
    out: list[list[int]] = [None] * len(spans)  # type: ignore[list-item]

    def run(span_idx: int) -> None:
        lo, hi = spans[span_idx]
        out[span_idx] = [execute(q, catalog, strategy) for q in queries[lo:hi]]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, range(len(spans))))
    return [label for part in out for label in part]


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


def _selection_rows(relation: Relation, name: str, query: Query) -> np.ndarray:
    mask = np.ones(relation.n_rows, dtype=bool)
    for ref, flt in query.selections:
        rel_name, attr = split_ref(ref)
        if rel_name != name:
            continue
        col = relation.column(attr)
        if isinstance(flt, RangeFilter):
            mask &= (col >= flt.lb) & (col <= flt.ub)
        else:
            ctype = relation.type_of(attr)
            codes = [ctype.index(v) for v in flt.values]
            mask &= np.isin(col, codes)
    return np.flatnonzero(mask)


# ---------------------------------------------------------------------------
# join machinery
# ---------------------------------------------------------------------------


def _cond_touches(
    cond: JoinCondition, catalog: SchemaCatalog, incoming: str, partial: dict[str, np.ndarray]
) -> bool:
    """True when adding `incoming` completes this condition's endpoints."""
    left, right = catalog.join_pairs[cond.pair]
    lrel, _ = split_ref(left)
    rrel, _ = split_ref(right)
    done = set(partial) | {incoming}
    return lrel in done and rrel in done and incoming in (lrel, rrel)


def _comparable(catalog: SchemaCatalog, left: str, right: str) -> tuple[np.ndarray, np.ndarray]:
    """Full-column value arrays for a join pair on a shared comparable scale.

    Categorical codes of the right side are remapped into the left side's
    domain (-1 for values absent there, which can never compare equal).
    """
    lrel, lattr = split_ref(left)
    rrel, rattr = split_ref(right)
    lcol = catalog.relation(lrel).column(lattr)
    rcol = catalog.relation(rrel).column(rattr)
    ltype = catalog.resolve(left)
    if isinstance(ltype, CategoricalType):
        rtype = catalog.resolve(right)
        remap = np.asarray(
            [ltype.values.index(v) if v in ltype.values else -1 for v in rtype.values],
            dtype=np.int64,
        )
        return lcol.astype(np.int64), remap[rcol]
    return lcol.astype(np.float64), rcol.astype(np.float64)


_OP_FUNCS = {
    "<": np.less,
    "<=": np.less_equal,
    "=": np.equal,
    ">=": np.greater_equal,
    ">": np.greater,
    "!=": np.not_equal,
}


def _cond_mask(
    cond: JoinCondition,
    catalog: SchemaCatalog,
    incoming: str,
    partial_rows: dict[str, np.ndarray],
    incoming_rows: np.ndarray,
) -> np.ndarray:
    left, right = catalog.join_pairs[cond.pair]
    lrel, _ = split_ref(left)
    lvals, rvals = _comparable(catalog, left, right)
    lrows = incoming_rows if lrel == incoming else partial_rows[lrel]
    rrel, _ = split_ref(right)
    rrows = incoming_rows if rrel == incoming else partial_rows[rrel]
    return _OP_FUNCS[cond.op](lvals[lrows], rvals[rrows])


def _join_step(
    partial: dict[str, np.ndarray],
    name: str,
    rows: np.ndarray,
    conds: list[JoinCondition],
    catalog: SchemaCatalog,
    strategy: str,
) -> dict[str, np.ndarray]:
    m = next(iter(partial.values())).size
    equi = None
    if strategy != "nested":
        for cond in conds:
            if cond.op == "=":
                equi = cond
                break
    if strategy == "hash" and equi is None:
        raise OracleError(f"no equality condition available to hash-join {name}")

    if equi is not None:
        p_pos, r_pos = _hash_join_pairs(equi, catalog, name, partial, rows)
        rest = [c for c in conds if c is not equi]
    else:
        if m * rows.size > MAX_INTERMEDIATE:
            raise OracleError(
                f"cross product of {m} x {rows.size} rows exceeds the "
                f"desk-scale bound ({MAX_INTERMEDIATE})"
            )
        p_pos = np.repeat(np.arange(m, dtype=np.int64), rows.size)
        r_pos = np.tile(np.arange(rows.size, dtype=np.int64), m)
        rest = list(conds)

    if p_pos.size > MAX_INTERMEDIATE:
        raise OracleError(f"intermediate result of {p_pos.size} rows exceeds the desk-scale bound")

    joined = {rel: idx[p_pos] for rel, idx in partial.items()}
    incoming_rows = rows[r_pos]
    if rest:
        mask = np.ones(p_pos.size, dtype=bool)
        for cond in rest:
            mask &= _cond_mask(cond, catalog, name, joined, incoming_rows)
        joined = {rel: idx[mask] for rel, idx in joined.items()}
        incoming_rows = incoming_rows[mask]
    joined[name] = incoming_rows
    return joined


def _hash_join_pairs(
    cond: JoinCondition,
    catalog: SchemaCatalog,
    incoming: str,
    partial: dict[str, np.ndarray],
    incoming_rows: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Matching (partial position, incoming position) pairs for an equi-join."""
    left, right = catalog.join_pairs[cond.pair]
    lrel, _ = split_ref(left)
    lvals, rvals = _comparable(catalog, left, right)
    if lrel == incoming:
        probe_vals = rvals[partial[split_ref(right)[0]]]
        build_vals = lvals[incoming_rows]
    else:
        probe_vals = lvals[partial[lrel]]
        build_vals = rvals[incoming_rows]

    order = np.argsort(build_vals, kind="stable")
    sorted_vals = build_vals[order]
    lo = np.searchsorted(sorted_vals, probe_vals, side="left")
    hi = np.searchsorted(sorted_vals, probe_vals, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total > MAX_INTERMEDIATE:
        raise OracleError(f"equi-join result of {total} rows exceeds the desk-scale bound")

    p_pos = np.repeat(np.arange(probe_vals.size, dtype=np.int64), counts)
    starts = np.repeat(lo, counts)
    within = np.arange(total, dtype=np.int64) - np.repeat(
        np.concatenate(([0], np.cumsum(counts)[:-1])), counts
    )
    r_pos = order[starts + within]
    return p_pos, r_pos
