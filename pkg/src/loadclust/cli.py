"""Command-line pipeline: synth -> extract -> cluster -> evaluate -> importance.

Each subcommand reads an optional key-value config file plus flag
overrides and writes its artifacts under the output directory together
with a manifest.  Every artifact carries the provenance hash of the
extraction that produced it; commands that combine artifacts refuse
mismatched hashes unless forced.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dissimilarity, evaluate, features, hclust, ingest, preprocess, synth
from .config import METHODS, PipelineConfig, read_config
from .errors import ClusterError, EvaluateError, LoadClustError
from .treeimportance import (
    TreeParams,
    cv_misclassification,
    fit_tree,
    permutation_importance,
    predictor_importance,
    tree_to_dict,
)

log = logging.getLogger("loadclust")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out: Path, command: str, cfg_hash: str, outputs) -> None:
    _write_json(
        {
            "command": command,
            "config_hash": cfg_hash,
            "outputs": sorted(str(Path(p).name) for p in outputs),
        },
        out / f"manifest_{command}.json",
    )


def _parallel_map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _check_hash(expected: str, found: str | None, what: str, force: bool) -> None:
    if found is None or found == expected:
        return
    message = (
        f"{what} carries config hash {found}, expected {expected}; "
        "re-run extraction or pass --force"
    )
    if force:
        log.warning("%s (forced)", message)
    else:
        raise EvaluateError(message)


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def cmd_extract(cfg: PipelineConfig, binary: bool = False) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.config_hash()

    rejects: list[ingest.RejectedRow] = []
    series = ingest.parse_readings(cfg.input, rejects)
    if rejects:
        ingest.write_reject_report(rejects, out / "rejected_rows.csv")
        log.warning("%d rejected rows (see rejected_rows.csv)", len(rejects))
    kept, discarded = ingest.filter_by_missingness(series, cfg.missing_threshold)

    dropped: dict[str, str] = {s.meter_id: "missing fraction above threshold" for s in discarded}
    min_len = 2 * cfg.period
    usable = []
    for s in kept:
        if len(s) < min_len:
            dropped[s.meter_id] = f"shorter than {min_len} slots"
        else:
            usable.append(s)

    def to_diff(s):
        try:
            lg = preprocess.log_transform(s, cfg.zero_policy, cfg.zero_floor)
            lg = preprocess.impute_short_gaps(lg, cfg.max_gap)
            return preprocess.seasonal_difference(lg, cfg.period)
        except LoadClustError as exc:
            return exc

    diffs_or_errors = _parallel_map(to_diff, usable, cfg.threads)
    diffs = []
    for s, result in zip(usable, diffs_or_errors):
        if isinstance(result, Exception):
            dropped[s.meter_id] = str(result)
            log.warning("dropping %s: %s", s.meter_id, result)
        else:
            diffs.append((s, result))

    if cfg.select_k:
        k = features.select_max_lag_bic([d for _, d in diffs], cfg.p_max)
        k = max(k, 1)
        log.info("selected maximum lag K = %d", k)
    else:
        k = cfg.k_max

    def to_features(item):
        s, diff = item
        try:
            ac_vec, pac_vec = features.autocorrelation_features(diff, k)
            qc_vec = features.qac_feature_vector(diff, cfg.qc_lags, cfg.qc_quantiles)
            return ac_vec, pac_vec, qc_vec
        except LoadClustError as exc:
            return exc

    results = _parallel_map(to_features, diffs, cfg.threads)
    vectors = {"AC": [], "PAC": [], "QC": []}
    labels: list[tuple[str, str]] = []
    for (s, _), result in zip(diffs, results):
        if isinstance(result, Exception):
            dropped[s.meter_id] = str(result)
            log.warning("dropping %s: %s", s.meter_id, result)
            continue
        ac_vec, pac_vec, qc_vec = result
        vectors["AC"].append(ac_vec)
        vectors["PAC"].append(pac_vec)
        vectors["QC"].append(qc_vec)
        if s.external_label:
            labels.append((s.meter_id, s.external_label))

    n_ok = len(vectors["AC"])
    if n_ok == 0:
        raise ClusterError("no series survived feature extraction")
    if len(dropped) > len(series) / 2:
        raise ClusterError(
            f"{len(dropped)} of {len(series)} series dropped (>50%); aborting"
        )

    outputs = []
    for kind in METHODS:
        path = out / f"features_{kind.lower()}.csv"
        features.write_feature_csv(vectors[kind], path, cfg_hash)
        outputs.append(path)
        if binary:
            bin_path = out / f"features_{kind.lower()}.bin"
            features.write_feature_bin(vectors[kind], bin_path, cfg_hash)
            outputs.append(bin_path)
    if labels:
        with open(out / "labels.csv", "w") as fh:
            fh.write("meter_id,label\n")
            for mid, lab in labels:
                fh.write(f"{mid},{lab}\n")
        outputs.append(out / "labels.csv")

    report = {
        "config_hash": cfg_hash,
        "k_max_used": k,
        "series_total": len(series),
        "series_kept": n_ok,
        "rejected_rows": len(rejects),
        "dropped": {mid: reason for mid, reason in sorted(dropped.items())},
    }
    _write_json(report, out / "extract_report.json")
    outputs.append(out / "extract_report.json")
    _write_manifest(out, "extract", cfg_hash, outputs)
    log.info("extracted %d series at K=%d into %s", n_ok, k, out)
    return 0


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------

def _load_features(out: Path, method: str, cfg_hash: str, force: bool):
    path = out / f"features_{method.lower()}.csv"
    if not path.exists():
        raise ClusterError(f"{path} not found; run extract first")
    vectors, found_hash = features.read_feature_csv(path)
    _check_hash(cfg_hash, found_hash, str(path), force)
    return vectors


def cmd_cluster(cfg: PipelineConfig, method: str, force: bool = False) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.config_hash()
    method = method.upper()
    if method not in METHODS:
        raise ClusterError(f"unknown method {method!r}")
    k, height = cfg.cut_criterion(method)
    if k is None and height is None:
        raise ClusterError(
            f"no cut criterion for {method}: set cut_k_{method.lower()} or "
            f"cut_height_{method.lower()} (or pass --k/--height)"
        )

    vectors = _load_features(out, method, cfg_hash, force)
    n = len(vectors)
    mmap_path = None
    if cfg.save_matrix or n > cfg.mmap_threshold:
        mmap_path = out / f"matrix_{method.lower()}.qcdm"
    matrix = dissimilarity.build_matrix(
        vectors,
        threads=cfg.threads,
        standardize=cfg.standardize,
        mmap_path=mmap_path if n > cfg.mmap_threshold else None,
    )
    outputs = []
    if cfg.save_matrix:
        dissimilarity.save_matrix(matrix, mmap_path, cfg_hash)
        outputs += [mmap_path, Path(str(mmap_path) + ".json")]

    dendrogram = hclust.agglomerate(matrix, cfg.linkage)
    partition = hclust.cut(dendrogram, k=k, height=height)
    partition = hclust.flag_atypical(partition, cfg.atypical_fraction)

    dend_path = out / f"dendrogram_{method.lower()}.csv"
    part_path = out / f"partition_{method.lower()}.csv"
    hclust.write_dendrogram_csv(dendrogram, dend_path, cfg_hash)
    hclust.write_partition_csv(partition, matrix.meter_ids, part_path, cfg_hash)
    sizes = partition.cluster_sizes
    summary = {
        "config_hash": cfg_hash,
        "method": method,
        "linkage": cfg.linkage,
        "n_series": n,
        "clusters": int(partition.k),
        "cluster_sizes": [int(s) for s in sizes],
        "atypical_clusters": [int(c) for c in np.flatnonzero(partition.atypical)],
        "major_clusters": int((~partition.atypical).sum()),
    }
    summary_path = out / f"cluster_summary_{method.lower()}.json"
    _write_json(summary, summary_path)
    outputs += [dend_path, part_path, summary_path]
    _write_manifest(out, f"cluster_{method.lower()}", cfg_hash, outputs)
    log.info(
        "%s: %d clusters (%d major) over %d series",
        method, partition.k, summary["major_clusters"], n,
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _load_partition(out: Path, method: str, cfg_hash: str, force: bool):
    path = out / f"partition_{method.lower()}.csv"
    if not path.exists():
        return None
    partition, meter_ids, found = hclust.read_partition_csv(path)
    _check_hash(cfg_hash, found, str(path), force)
    return partition, meter_ids


def _matrix_for(out: Path, method: str, cfg: PipelineConfig, cfg_hash: str, force: bool):
    path = out / f"matrix_{method.lower()}.qcdm"
    if path.exists():
        matrix, found = dissimilarity.load_matrix(path)
        _check_hash(cfg_hash, found, str(path), force)
        return matrix
    vectors = _load_features(out, method, cfg_hash, force)
    return dissimilarity.build_matrix(vectors, threads=cfg.threads,
                                      standardize=cfg.standardize)


def cmd_evaluate(cfg: PipelineConfig, methods=None, force: bool = False) -> int:
    out = Path(cfg.out)
    cfg_hash = cfg.config_hash()
    requested = [m.upper() for m in (methods or METHODS)]

    partitions: dict[str, hclust.Partition] = {}
    meter_ids: dict[str, list[str]] = {}
    for method in requested:
        loaded = _load_partition(out, method, cfg_hash, force)
        if loaded is None:
            log.warning("no partition for %s; skipping", method)
            continue
        partitions[method], meter_ids[method] = loaded
    if not partitions:
        raise EvaluateError("no partitions found; run cluster first")

    ordered = [m for m in METHODS if m in partitions]
    first = ordered[0]
    for method in ordered[1:]:
        if meter_ids[method] != meter_ids[first]:
            raise EvaluateError(
                f"partitions {first} and {method} cover different meters"
            )

    summary: dict = {"config_hash": cfg_hash, "methods": ordered}
    outputs = []

    ari: dict[str, float] = {}
    for i, m1 in enumerate(ordered):
        for m2 in ordered[i + 1 :]:
            ari[f"{m1}_vs_{m2}"] = evaluate.adjusted_rand_index(
                partitions[m1], partitions[m2]
            )
    summary["adjusted_rand_index"] = ari

    labels_path = out / "labels.csv"
    label_map: dict[str, str] = {}
    if labels_path.exists():
        with open(labels_path) as fh:
            next(fh)
            for line in fh:
                if line.strip():
                    mid, lab = line.strip().split(",", 1)
                    label_map[mid] = lab

    chi2_report = {}
    for method in ordered:
        partition = partitions[method]
        ids = meter_ids[method]
        if label_map:
            labels = [label_map.get(mid) for mid in ids]
            table = evaluate.contingency_table(
                partition, labels, ids, include_atypical=cfg.include_atypical
            )
            stat, df, p = evaluate.chi_squared_test(table)
            chi2_report[method] = {"statistic": stat, "df": df, "p_value": p}
            table_path = out / f"contingency_{method.lower()}.csv"
            with open(table_path, "w") as fh:
                fh.write(f"# config_hash={cfg_hash}\n")
                fh.write("cluster," + ",".join(table.cols) + "\n")
                for row_id, row in zip(table.rows, table.counts):
                    fh.write(f"c{row_id}," + ",".join(str(int(c)) for c in row) + "\n")
            outputs.append(table_path)
        # medoids and their time-of-day profiles
        matrix = _matrix_for(out, method, cfg, cfg_hash, force)
        medoids = {}
        for c in range(partition.k):
            if partition.atypical[c] and not cfg.include_atypical:
                continue
            members = partition.members(c)
            medoids[c] = evaluate.medoid(members, matrix)
        summary.setdefault("medoids", {})[method] = {
            f"c{c}": matrix.meter_ids[m] for c, m in sorted(medoids.items())
        }
        if cfg.input and Path(cfg.input).exists():
            raw = {s.meter_id: s for s in ingest.parse_readings(cfg.input)}
            prof_path = out / f"medoid_profiles_{method.lower()}.csv"
            with open(prof_path, "w") as fh:
                fh.write(f"# config_hash={cfg_hash}\n")
                fh.write("cluster,slot,mean_kwh\n")
                for c, m in sorted(medoids.items()):
                    series = raw.get(matrix.meter_ids[m])
                    if series is None:
                        continue
                    profile, empty = evaluate.hourly_profile(series, cfg.profile_slots)
                    for s in range(cfg.profile_slots):
                        value = "" if empty[s] else repr(float(profile[s]))
                        fh.write(f"c{c},{s},{value}\n")
            outputs.append(prof_path)
        # per-cluster feature means
        vectors = _load_features(out, method, cfg_hash, force)
        means = evaluate.cluster_feature_means(
            vectors, partition, include_atypical=cfg.include_atypical
        )
        means_path = out / f"feature_means_{method.lower()}.csv"
        width = len(vectors[0])
        with open(means_path, "w") as fh:
            fh.write(f"# config_hash={cfg_hash}\n")
            fh.write("cluster," + ",".join(f"f{i}" for i in range(1, width + 1)) + "\n")
            for c in sorted(means):
                fh.write(f"c{c}," + ",".join(repr(float(v)) for v in means[c]) + "\n")
        outputs.append(means_path)

    if chi2_report:
        summary["chi_squared"] = chi2_report
    elif label_map == {} and labels_path.exists():
        raise EvaluateError("labels.csv exists but is empty")

    _write_json(summary, out / "evaluation.json")
    outputs.append(out / "evaluation.json")
    _write_manifest(out, "evaluate", cfg_hash, outputs)
    for pair, value in ari.items():
        log.info("ARI %s = %.4f", pair, value)
    return 0


# ---------------------------------------------------------------------------
# importance
# ---------------------------------------------------------------------------

def cmd_importance(cfg: PipelineConfig, method: str, force: bool = False) -> int:
    out = Path(cfg.out)
    cfg_hash = cfg.config_hash()
    method = method.upper()
    loaded = _load_partition(out, method, cfg_hash, force)
    if loaded is None:
        raise EvaluateError(f"no partition for {method}; run cluster first")
    partition, ids = loaded
    vectors = _load_features(out, method, cfg_hash, force)
    if [v.meter_id for v in vectors] != ids:
        raise EvaluateError("feature and partition meter ids disagree")

    keep = ~partition.atypical[partition.labels]
    if partition.k - int(partition.atypical.sum()) < 2:
        raise EvaluateError("fewer than 2 non-atypical clusters; nothing to explain")
    X = np.vstack([v.values for v in vectors])[keep]
    y = partition.labels[keep]

    params = TreeParams(
        max_depth=cfg.tree_max_depth,
        min_leaf=cfg.tree_min_leaf,
        min_impurity_decrease=cfg.tree_min_impurity_decrease,
    )
    tree = fit_tree(X, y, params)
    if cfg.importance_mode == "permutation":
        importance = permutation_importance(tree, X, y, seed=cfg.seed)
    else:
        importance = predictor_importance(tree)
    cv_error = cv_misclassification(X, y, cfg.cv_folds, params, seed=cfg.seed)

    names = features.feature_names(
        method, k_max=len(vectors[0]), lags=cfg.qc_lags, quantiles=cfg.qc_quantiles
    )
    imp_path = out / f"importance_{method.lower()}.csv"
    with open(imp_path, "w") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        fh.write("feature_index,feature_name,importance\n")
        for i, (name, value) in enumerate(zip(names, importance.values)):
            fh.write(f"{i},{name},{value!r}\n")

    tree_path = out / f"tree_{method.lower()}.json"
    _write_json(tree_to_dict(tree), tree_path)
    summary = {
        "config_hash": cfg_hash,
        "method": method,
        "importance_mode": cfg.importance_mode,
        "cv_folds": cfg.cv_folds,
        "cv_misclassification": cv_error,
        "n_samples": int(keep.sum()),
        "n_classes": int(len(np.unique(y))),
    }
    summary_path = out / f"importance_summary_{method.lower()}.json"
    _write_json(summary, summary_path)
    _write_manifest(out, f"importance_{method.lower()}", cfg_hash,
                    [imp_path, tree_path, summary_path])
    log.info("%s: CV misclassification %.3f", method, cv_error)
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(path: str, n_per_group: int, days: int, seed: int) -> int:
    population = synth.generate_population(n_per_group, days, seed)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ingest.write_readings(population, path)
    log.info("wrote %d synthetic series to %s", len(population), path)
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key-value config file")
    sub.add_argument("--input", help="input readings CSV")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--threads", type=int)


def _resolve_config(args) -> PipelineConfig:
    cfg = read_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    for name in ("input", "out", "seed", "threads"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    for name in (
        "missing_threshold", "zero_policy", "max_gap", "period", "k_max",
        "linkage", "atypical_fraction", "cv_folds", "importance_mode",
    ):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "select_k", False):
        overrides["select_k"] = True
    cfg = cfg.with_overrides(**overrides)
    method = getattr(args, "method", None)
    if method:
        suffix = method.lower()
        if getattr(args, "k", None) is not None:
            cfg = cfg.with_overrides(**{f"cut_k_{suffix}": args.k})
        if getattr(args, "height", None) is not None:
            cfg = cfg.with_overrides(**{f"cut_height_{suffix}": args.height})
    cfg.validate()
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="loadclust",
                     description="Feature-based clustering of smart-meter load series")
    parser.add_argument("-v", "--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("extract", help="parse input and write feature matrices")
    _add_common(p)
    p.add_argument("--missing-threshold", type=float, dest="missing_threshold")
    p.add_argument("--zero-policy", choices=("missing", "floor"), dest="zero_policy")
    p.add_argument("--max-gap", type=int, dest="max_gap")
    p.add_argument("--period", type=int)
    p.add_argument("--k-max", type=int, dest="k_max")
    p.add_argument("--select-k", action="store_true", dest="select_k",
                   help="choose the maximum lag by per-series BIC order selection")
    p.add_argument("--binary", action="store_true", help="also write binary sidecars")

    p = commands.add_parser("cluster", help="build the dissimilarity matrix and cut the tree")
    _add_common(p)
    p.add_argument("--method", required=True, choices=[m for m in METHODS] + [m.lower() for m in METHODS])
    p.add_argument("--linkage", choices=("single", "complete", "average"))
    p.add_argument("--k", type=int, help="number of clusters to cut")
    p.add_argument("--height", type=float, help="dendrogram cut height")
    p.add_argument("--atypical-fraction", type=float, dest="atypical_fraction")
    p.add_argument("--force", action="store_true")

    p = commands.add_parser("evaluate", help="compare and describe partitions")
    _add_common(p)
    p.add_argument("--methods", nargs="+", metavar="METHOD")
    p.add_argument("--force", action="store_true")

    p = commands.add_parser("importance", help="explain a partition with a decision tree")
    _add_common(p)
    p.add_argument("--method", required=True, choices=[m for m in METHODS] + [m.lower() for m in METHODS])
    p.add_argument("--importance-mode", choices=("impurity", "permutation"),
                   dest="importance_mode")
    p.add_argument("--cv-folds", type=int, dest="cv_folds")
    p.add_argument("--force", action="store_true")

    p = commands.add_parser("synth", help="generate a labeled synthetic population")
    p.add_argument("--out-file", required=True, help="destination readings CSV")
    p.add_argument("--n-per-group", type=int, default=200)
    p.add_argument("--days", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            return cmd_synth(args.out_file, args.n_per_group, args.days, args.seed)
        cfg = _resolve_config(args)
        if args.command == "extract":
            if not cfg.input:
                raise UsageError("extract requires --input (or input= in the config)")
            return cmd_extract(cfg, binary=args.binary)
        if args.command == "cluster":
            return cmd_cluster(cfg, args.method, force=args.force)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.methods, force=args.force)
        if args.command == "importance":
            return cmd_importance(cfg, args.method, force=args.force)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except LoadClustError as exc:
        log.error("%s", exc)
        return 2
    except Exception:
        log.exception("internal error")
        return 3


if __name__ == "__main__":
    sys.exit(main())
