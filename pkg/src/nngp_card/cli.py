"""Command-line pipeline: synth -> gen-queries -> label -> encode -> train ->
predict -> evaluate, plus active-learn and selfcheck.

Every subcommand is deterministic given --seed; output files embed the
effective config and the hashes of their inputs, never timestamps (those go
to the stderr log only). Unknown config keys are rejected, not ignored.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, encoder, evaluation, gp, oracle, workload
from .encoder import EncodingError, build_layout, encode_batch, load_encoded, save_encoded
from .gp import FitError, ModelIOError
from .kernel import KernelConfig, KernelError
from .oracle import OracleError
from .queries import QueryError, read_queries_jsonl, write_queries_jsonl
from .relstore import (
    RelStoreError,
    export_csv,
    ingest_csv,
    load_catalog_file,
    load_schema,
    save_schema,
    synth_relation,
)
from .workload import WorkloadError

log = logging.getLogger("nngp_card")

THREADS_ENV = "NNGP_CARD_THREADS"

_ERRORS = (
    RelStoreError,
    QueryError,
    OracleError,
    WorkloadError,
    EncodingError,
    KernelError,
    FitError,
    ModelIOError,
    ValueError,
    FileNotFoundError,
)


class CLIError(Exception):
    pass


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def _json_line(doc: dict) -> str:
    return json.dumps(_jsonify(doc), sort_keys=True, allow_nan=False)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    return obj


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CLIError(f"{THREADS_ENV}={env!r} is not an integer") from None
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# configuration: JSON file with "kernel" / "encoder" / "delta"; flags override
# ---------------------------------------------------------------------------

_CONFIG_SECTIONS = {"kernel", "encoder", "delta"}
_ENCODER_KEYS = {"chunk_size", "bitmap_threshold", "normalize"}

_KERNEL_FLAGS = (
    ("sigma_w_sq", float),
    ("sigma_b_sq", float),
    ("depth", int),
    ("activation", str),
    ("noise_sq", float),
    ("kernel_family", str),
    ("length_scale", float),
)


def _load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    unknown = set(doc) - _CONFIG_SECTIONS
    if unknown:
        raise CLIError(f"unknown config sections: {sorted(unknown)}")
    if "encoder" in doc:
        bad = set(doc["encoder"]) - _ENCODER_KEYS
        if bad:
            raise CLIError(f"unknown encoder config keys: {sorted(bad)}")
    return doc


def _effective_config(args) -> dict:
    doc = _load_config_file(args.config) if getattr(args, "config", None) else {}
    kernel_doc = dict(doc.get("kernel", {}))
    for name, _ in _KERNEL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            kernel_doc[name] = value
    kernel_config = KernelConfig.from_dict(kernel_doc)  # rejects unknown keys

    encoder_doc = dict(doc.get("encoder", {}))
    if getattr(args, "chunk_size", None) is not None:
        encoder_doc["chunk_size"] = args.chunk_size
    if getattr(args, "bitmap_threshold", None) is not None:
        encoder_doc["bitmap_threshold"] = args.bitmap_threshold
    encoder_doc.setdefault("chunk_size", encoder.DEFAULT_CHUNK_SIZE)
    encoder_doc.setdefault("bitmap_threshold", encoder.DEFAULT_BITMAP_THRESHOLD)
    encoder_doc.setdefault("normalize", True)

    delta = getattr(args, "delta", None)
    if delta is None:
        delta = doc.get("delta", 0.95)
    return {"kernel": kernel_config, "encoder": encoder_doc, "delta": float(delta)}


def _header(args, command: str, cfg: dict | None = None, inputs: dict | None = None) -> dict:
    head = {"tool": "nngp-card", "version": __version__, "command": command}
    if getattr(args, "seed", None) is not None:
        head["seed"] = args.seed
    if cfg:
        head["config"] = {
            "kernel": cfg["kernel"].to_dict(),
            "encoder": cfg["encoder"],
            "delta": cfg["delta"],
        }
    if inputs:
        head["inputs"] = inputs
    return head


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        spec = json.load(fh)
    if "relations" not in spec:
        spec = {"relations": [spec], "join_pairs": spec.get("join_pairs", [])}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for i, rel_spec in enumerate(spec["relations"]):
        name = rel_spec.get("name", f"rel{i}")
        seed = rel_spec.get("seed", args.seed + i)
        relation = synth_relation(seed, int(rel_spec["rows"]), rel_spec["columns"], name=name)
        export_csv(relation, out_dir / f"{name}.csv")
        save_schema(relation, out_dir / f"{name}.schema.json")
        entries.append({"name": name, "csv": f"{name}.csv", "schema": f"{name}.schema.json"})
        log.info("synthesized %s: %d rows, %d columns", name, relation.n_rows, len(relation.attrs))

    catalog_doc = {"relations": entries, "join_pairs": spec.get("join_pairs", [])}
    catalog_path = out_dir / "catalog.json"
    with open(catalog_path, "w", encoding="utf-8") as fh:
        json.dump(catalog_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    load_catalog_file(catalog_path)  # validates join pairs against the data
    print(_json_line({"catalog": str(catalog_path), "relations": [e["name"] for e in entries]}))
    return 0


def cmd_ingest(args) -> int:
    declared_name, schema = load_schema(args.schema)
    relation = ingest_csv(args.csv, schema, name=args.name or declared_name or None)
    report = {"relation": relation.name, "rows": relation.n_rows, "columns": {}}
    for attr in relation.attrs:
        ctype = relation.type_of(attr)
        if ctype.kind == "numerical":
            report["columns"][attr] = {"kind": "numerical", "lo": ctype.lo, "hi": ctype.hi}
        else:
            report["columns"][attr] = {"kind": "categorical", "m": ctype.size}
    print(_json_line(report))
    return 0


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise CLIError(f"expected a comma-separated integer list, got {text!r}") from None


def cmd_gen_queries(args) -> int:
    catalog = load_catalog_file(args.catalog)
    queries = []
    if args.mode == "single":
        names = [r.name for r in catalog.relations]
        rel_name = args.relation or (names[0] if len(names) == 1 else None)
        if rel_name is None:
            raise CLIError("--relation is required when the catalog has several relations")
        relation = catalog.relation(rel_name)
        for i, d in enumerate(_parse_int_list(args.d)):
            queries.extend(workload.gen_single_relation(relation, d, args.n, args.seed + i))
    else:
        for i, t in enumerate(_parse_int_list(args.t)):
            queries.extend(
                workload.gen_join(
                    catalog, t, args.n, args.seed + i, conds_per_relation=args.conds_per_relation
                )
            )
    header = _header(args, "gen-queries", inputs={"catalog": _hash_file(args.catalog)})
    header["n_queries"] = len(queries)
    write_queries_jsonl(args.out, [(q, None) for q in queries], header=header)
    log.info("generated %d queries -> %s", len(queries), args.out)
    print(_json_line({"out": args.out, "n_queries": len(queries)}))
    return 0


def cmd_label(args) -> int:
    catalog = load_catalog_file(args.catalog)
    items, _ = read_queries_jsonl(args.queries)
    labeled = workload.finalize([q for q, _ in items], catalog, threads=_threads(args))
    header = _header(
        args, "label", inputs={"catalog": _hash_file(args.catalog), "queries": _hash_file(args.queries)}
    )
    header.update({"n_raw": len(items), "n_labeled": len(labeled)})
    workload.save_workload(args.out, labeled, header=header)
    log.info("labeled %d of %d queries -> %s", len(labeled), len(items), args.out)

    summary = {"out": args.out, "n_raw": len(items), "n_labeled": len(labeled)}
    if args.split:
        fractions = tuple(float(f) for f in args.split.split(","))
        if len(fractions) != 3:
            raise CLIError("--split expects three comma-separated fractions")
        train, valid, test, report = workload.split(labeled, fractions, seed=args.split_seed)
        prefix = args.split_out_prefix or str(Path(args.out).with_suffix(""))
        for part, name in ((train, "train"), (valid, "valid"), (test, "test")):
            part_header = dict(header)
            part_header["split"] = name
            workload.save_workload(f"{prefix}.{name}.jsonl", part, header=part_header)
        with open(f"{prefix}.split.json", "w", encoding="utf-8") as fh:
            json.dump(_jsonify(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
        summary["split"] = report["counts"]
    print(_json_line(summary))
    return 0


def cmd_encode(args) -> int:
    catalog = load_catalog_file(args.catalog)
    cfg = _effective_config(args)
    items, _ = read_queries_jsonl(args.queries)
    layout = build_layout(
        catalog,
        chunk_size=cfg["encoder"]["chunk_size"],
        bitmap_threshold=cfg["encoder"]["bitmap_threshold"],
    )
    queries = [q for q, _ in items]
    for q in queries:
        q.validate(catalog)
    matrix = encode_batch(queries, layout, catalog, normalize=cfg["encoder"]["normalize"])

    ids = np.asarray([q.id if q.id is not None else i for i, q in enumerate(queries)], dtype=np.int64)
    targets = None
    if items and all(card is not None for _, card in items):
        targets = np.log(np.asarray([card for _, card in items], dtype=np.float64))
    header = _header(
        args,
        "encode",
        cfg,
        inputs={"catalog": _hash_file(args.catalog), "queries": _hash_file(args.queries)},
    )
    save_encoded(
        args.out,
        matrix,
        layout.hash(),
        ids=ids,
        targets_log=targets,
        normalized=cfg["encoder"]["normalize"],
        extra_header=header,
    )
    log.info("encoded %d queries (d_enc=%d) -> %s", len(queries), layout.dim, args.out)
    print(_json_line({"out": args.out, "n": len(queries), "d_enc": layout.dim, "layout_hash": layout.hash()}))
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    X, _, y, enc_header = load_encoded(args.encoded)
    if y is None:
        raise CLIError(f"{args.encoded} carries no targets; encode a labeled workload")
    estimator = gp.fit(X, y, cfg["kernel"], layout_hash=enc_header["layout_hash"])
    gp.save(estimator, args.model)
    log.info("trained on %d queries (d_enc=%d), jitter=%g", len(y), X.shape[1], estimator.jitter)
    print(
        _json_line(
            {
                "model": args.model,
                "n_train": len(y),
                "d_enc": int(X.shape[1]),
                "jitter": estimator.jitter,
                "layout_hash": enc_header["layout_hash"],
            }
        )
    )
    return 0


def cmd_predict(args) -> int:
    cfg_delta = args.delta if args.delta is not None else 0.95
    estimator = gp.load(args.model)
    X, ids, _, enc_header = load_encoded(args.encoded)
    prediction = gp.predict(estimator, X, delta=cfg_delta, layout_hash=enc_header["layout_hash"])
    if ids is None:
        ids = np.arange(len(X), dtype=np.int64)
    header = _header(
        args, "predict", inputs={"model": _hash_file(args.model), "encoded": _hash_file(args.encoded)}
    )
    header["delta"] = cfg_delta
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(_json_line({"_header": header}) + "\n")
        for i in range(len(X)):
            fh.write(
                _json_line(
                    {
                        "query_id": int(ids[i]),
                        "card_estimate": float(prediction.card_estimate[i]),
                        "mean_log": float(prediction.mean_log[i]),
                        "var_log": float(prediction.var_log[i]),
                        "ci_low": float(prediction.ci_low[i]),
                        "ci_high": float(prediction.ci_high[i]),
                        "cov": float(prediction.cov[i]),
                    }
                )
                + "\n"
            )
    log.info("predicted %d queries -> %s", len(X), args.out)
    print(_json_line({"out": args.out, "n": len(X)}))
    return 0


def _read_predictions(path) -> dict[int, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if "_header" in doc:
                continue
            cov = doc.get("cov")
            doc["cov"] = float("inf") if cov is None else float(cov)
            out[int(doc["query_id"])] = doc
    return out


def cmd_evaluate(args) -> int:
    labeled, _ = workload.load_workload(args.labeled)
    preds = _read_predictions(args.pred)
    missing = [it.query.id for it in labeled if it.query.id not in preds]
    if missing:
        raise CLIError(f"{len(missing)} labeled queries lack predictions (first: {missing[:5]})")
    ordered = [preds[it.query.id] for it in labeled]
    true_cards = labeled.cardinalities().astype(np.float64)
    est_cards = np.asarray([p["card_estimate"] for p in ordered])

    prediction = gp.Prediction(
        mean_log=np.asarray([p["mean_log"] for p in ordered]),
        var_log=np.asarray([p["var_log"] for p in ordered]),
        ci_low=np.asarray([p["ci_low"] for p in ordered]),
        ci_high=np.asarray([p["ci_high"] for p in ordered]),
        cov=np.asarray([p["cov"] for p in ordered]),
        card_estimate=est_cards,
        delta=0.95,
    )
    report = evaluation.uncertainty_error_report(
        prediction,
        true_cards,
        ids=np.asarray([it.query.id for it in labeled], dtype=np.int64),
        n_conditions=labeled.condition_counts(),
    )
    doc = report.to_dict()
    doc["mse_log"] = evaluation.mse_log(true_cards, est_cards)
    doc["inputs"] = {"pred": _hash_file(args.pred), "labeled": _hash_file(args.labeled)}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(_jsonify(doc), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.scatter:
        report.to_csv(args.scatter)
    print(report.stats.to_text())
    print(_json_line({"mse_log": doc["mse_log"], "spearman": report.spearman_cov_vs_log_q}))
    return 0


def _encode_labeled(path, catalog, layout, cfg):
    labeled, _ = workload.load_workload(path)
    X = encode_batch(labeled.queries(), layout, catalog, normalize=cfg["encoder"]["normalize"])
    y = np.log(labeled.cardinalities().astype(np.float64))
    return labeled, X, y


def cmd_active_learn(args) -> int:
    catalog = load_catalog_file(args.catalog)
    cfg = _effective_config(args)
    layout = build_layout(
        catalog,
        chunk_size=cfg["encoder"]["chunk_size"],
        bitmap_threshold=cfg["encoder"]["bitmap_threshold"],
    )
    train, X_train, y_train = _encode_labeled(args.train, catalog, layout, cfg)
    pool, X_pool, y_pool = _encode_labeled(args.pool, catalog, layout, cfg)
    test, X_test, _ = _encode_labeled(args.test, catalog, layout, cfg)

    result = evaluation.active_learn(
        X_train,
        y_train,
        X_pool,
        y_pool,
        X_test,
        test.cardinalities().astype(np.float64),
        config=cfg["kernel"],
        iterations=args.iterations,
        k=args.k,
    )
    pool_ids = [it.query.id for it in pool]
    doc = _header(
        args,
        "active-learn",
        cfg,
        inputs={
            "catalog": _hash_file(args.catalog),
            "train": _hash_file(args.train),
            "pool": _hash_file(args.pool),
            "test": _hash_file(args.test),
        },
    )
    doc.update(
        {
            "iterations": args.iterations,
            "k": args.k,
            "mse_history": result.mse_history,
            "selected_ids": [[pool_ids[i] for i in chosen] for chosen in result.selected],
        }
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(_jsonify(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("active learning MSE history: %s", result.mse_history)
    print(_json_line({"out": args.out, "mse_history": result.mse_history}))
    return 0


def cmd_selfcheck(args) -> int:
    result = diagnostics.selfcheck(seed=args.seed, fast=not args.full)
    for name, check in result["checks"].items():
        status = "PASS" if check["pass"] else "FAIL"
        print(f"[{status}] {name}: value={check['value']:.3e} threshold={check['threshold']:.3e}")
    print(_json_line({"all_pass": result["all_pass"]}))
    return 0 if result["all_pass"] else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_kernel_flags(sub):
    group = sub.add_argument_group("kernel")
    group.add_argument("--sigma-w-sq", dest="sigma_w_sq", type=float, help="weight prior variance")
    group.add_argument("--sigma-b-sq", dest="sigma_b_sq", type=float, help="bias prior variance")
    group.add_argument("--depth", type=int, help="number of hidden layers")
    group.add_argument("--activation", choices=["relu", "erf"], help="hidden nonlinearity")
    group.add_argument("--noise-sq", dest="noise_sq", type=float, help="observation noise variance")
    group.add_argument(
        "--kernel-family", dest="kernel_family", choices=["nngp", "rbf"], help="covariance family"
    )
    group.add_argument("--length-scale", dest="length_scale", type=float, help="RBF length scale")
    sub.add_argument("--config", help="JSON config file (flags override file values)")


def _add_encoder_flags(sub):
    sub.add_argument("--chunk-size", dest="chunk_size", type=int, help="factorized bitmap chunk bits")
    sub.add_argument(
        "--bitmap-threshold",
        dest="bitmap_threshold",
        type=int,
        help="largest domain encoded as a plain bitmap",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nngp-card",
        description="Cardinality estimation with exact infinite-width-network GP regression.",
    )
    parser.add_argument("--version", action="version", version=f"nngp-card {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate synthetic relations and a catalog")
    p.add_argument("--spec", required=True, help="JSON relation spec")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a CSV against its schema and report domains")
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", required=True, help="JSON column->kind declaration")
    p.add_argument("--name")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen-queries", help="generate an unlabeled query workload")
    p.add_argument("--catalog", required=True)
    p.add_argument("--mode", choices=["single", "join"], required=True)
    p.add_argument("--relation", help="relation for single-relation workloads")
    p.add_argument("--d", default="2", help="selection-condition counts, comma separated")
    p.add_argument("--t", default="0", help="join counts, comma separated")
    p.add_argument("--conds-per-relation", dest="conds_per_relation", type=int, default=1)
    p.add_argument("--n", type=int, required=True, help="queries per d/t value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_queries)

    p = sub.add_parser("label", help="dedup, label via the exact oracle, drop empty results")
    p.add_argument("--catalog", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    p.add_argument("--split", help="train,valid,test fractions, e.g. 0.6,0.2,0.2")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0)
    p.add_argument("--split-out-prefix", dest="split_out_prefix")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("encode", help="encode queries into feature vectors")
    p.add_argument("--catalog", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    _add_encoder_flags(p)
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="fit the exact GP regressor")
    p.add_argument("--encoded", required=True)
    p.add_argument("--model", required=True)
    _add_kernel_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predictive mean/variance/interval per query")
    p.add_argument("--model", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float, help="confidence level (default 0.95)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="q-error statistics and uncertainty diagnostics")
    p.add_argument("--pred", required=True)
    p.add_argument("--labeled", required=True)
    p.add_argument("--out")
    p.add_argument("--scatter", help="CSV of (query_id, cov, q_error, n_conditions)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("active-learn", help="uncertainty-sampling loop with retraining")
    p.add_argument("--catalog", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--out", required=True)
    _add_encoder_flags(p)
    _add_kernel_flags(p)
    p.set_defaults(func=cmd_active_learn)

    p = sub.add_parser("selfcheck", help="sampling oracles vs closed forms, GP identities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="full-budget checks (slower)")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CLIError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 1
    except _ERRORS as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
