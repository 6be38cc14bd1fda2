"""Operator command line: synth, build-db, train, eval, sweep, report.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
failure.  ``GRASP_THREADS`` caps BLAS worker threads (applied before numpy
loads).  Output directories are guarded by a lock file and refuse to
overwrite previous results without ``--force``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _cap_threads() -> None:
    cap = os.environ.get("GRASP_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, cap)


@contextlib.contextmanager
def _output_lock(out_dir):
    from .errors import DataError

    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".grasp.lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(
            f"output directory {out_dir} is locked ({lock}); "
            "another run may be active, or remove the stale lock"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def _refuse_existing(path, force: bool) -> None:
    from .errors import DataError

    if os.path.exists(path) and not force:
        raise DataError(f"{path} already exists; pass --force to overwrite")


def _parse_int_list(raw: str) -> list[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise ValueError(f"expected a comma-separated integer list, got {raw!r}") from None
    if not values:
        raise ValueError(f"empty list: {raw!r}")
    return values


# ---------------------------------------------------------------------------
# Config plumbing

_CONFIG_FLOATS = ("lr", "dropout", "head_ratio")
_CONFIG_INTS = (
    "batch_size", "patience", "max_epochs", "negatives_per_positive",
    "eval_negatives", "h", "max_seq_len", "n_layers", "n_heads",
    "k_neighbors", "d_sem", "h_hidden", "min_user_len", "min_item_freq",
)
_CONFIG_BOOLS = ("no_attention", "no_similar", "no_global", "softmax_variant")


def _add_run_config_flags(sp) -> None:
    sp.add_argument("--config", default=None, help="flat key=value config file")
    for name in _CONFIG_FLOATS:
        sp.add_argument(f"--{name.replace('_', '-')}", type=float, default=None)
    for name in _CONFIG_INTS:
        sp.add_argument(f"--{name.replace('_', '-')}", type=int, default=None)
    for name in _CONFIG_BOOLS:
        sp.add_argument(
            f"--{name.replace('_', '-')}", dest=name,
            action="store_const", const=True, default=None,
        )
    sp.add_argument("--backbone", choices=("gru4rec", "sasrec"), default=None)
    sp.add_argument("--encoder", choices=("semantic", "id"), default=None)


def _resolve_run_config(args):
    from .config import parse_config_file, resolve_config

    file_values = parse_config_file(args.config) if args.config else None
    names = list(_CONFIG_FLOATS) + list(_CONFIG_INTS) + list(_CONFIG_BOOLS) + ["backbone", "encoder"]
    flags = {name: getattr(args, name, None) for name in names}
    return resolve_config(file_values, flags)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    from .embedstore import save_embedding_matrix, synth_corpus, write_interaction_log
    from .pipeline import ITEM_EMB_NAME, LOG_NAME, USER_EMB_NAME

    _refuse_existing(os.path.join(args.out, "manifest.txt"), args.force)
    with _output_lock(args.out):
        ds, users, items = synth_corpus(
            n_users=args.n_users, m_items=args.n_items, n_clusters=args.clusters,
            dim=args.d_sem, noise=args.noise, seed=args.seed,
        )
        write_interaction_log(ds, os.path.join(args.out, LOG_NAME))
        save_embedding_matrix(users, os.path.join(args.out, USER_EMB_NAME))
        save_embedding_matrix(items, os.path.join(args.out, ITEM_EMB_NAME))
        manifest = {
            "n_users": args.n_users,
            "n_items": args.n_items,
            "n_clusters": args.clusters,
            "d_sem": args.d_sem,
            "noise": args.noise,
            "seed": args.seed,
            "exact_cluster_mode": int(args.noise == 0.0),
        }
        with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
            for key, value in manifest.items():
                fh.write(f"{key}={value}\n")
    print(f"synth: wrote {ds.user_count} users / {ds.item_count} items to {args.out}")
    return 0


def cmd_build_db(args) -> int:
    from .embedstore import build_neighbor_cache, load_embedding_matrix, save_neighbor_cache
    from .pipeline import ITEM_CACHE_NAME, USER_CACHE_NAME

    user_out = os.path.join(args.out_dir, USER_CACHE_NAME)
    item_out = os.path.join(args.out_dir, ITEM_CACHE_NAME)
    _refuse_existing(user_out, args.force)
    _refuse_existing(item_out, args.force)
    with _output_lock(args.out_dir):
        users = load_embedding_matrix(args.users)
        items = load_embedding_matrix(args.items)
        save_neighbor_cache(build_neighbor_cache(users, args.k), user_out)
        save_neighbor_cache(build_neighbor_cache(items, args.k), item_out)
    print(f"build-db: k={args.k} caches for {users.rows} users / {items.rows} items -> {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    from .dataset import write_id_map
    from .pipeline import load_data_dir, train_one_seed

    cfg = _resolve_run_config(args)
    seeds = _parse_int_list(args.seeds)
    with _output_lock(args.out):
        data = load_data_dir(args.data, cfg, need_stores=cfg.encoder == "semantic")
        write_id_map(os.path.join(args.out, "user_ids.tsv"), data.ds.user_raw_ids)
        write_id_map(os.path.join(args.out, "item_ids.tsv"), data.ds.item_raw_ids)
        summaries = []
        for seed in seeds:
            seed_dir = os.path.join(args.out, f"seed{seed}")
            _refuse_existing(os.path.join(seed_dir, "summary.json"), args.force)
            summary = train_one_seed(data, cfg, seed, seed_dir)
            summaries.append(summary)
            print(
                f"train: seed {seed} best val NDCG@10 {summary['best_val_ndcg10']:.4f} "
                f"(epoch {summary['best_epoch']}/{summary['epochs_run']})"
            )
        combined = {
            "config": cfg.echo(),
            "seeds": seeds,
            "mean_best_val_ndcg10": sum(s["best_val_ndcg10"] for s in summaries) / len(summaries),
            "per_seed": summaries,
        }
        with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(combined, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"train: mean best val NDCG@10 {combined['mean_best_val_ndcg10']:.4f}")
    return 0


def cmd_eval(args) -> int:
    import hashlib

    from .evaluation import emit_report, format_report_table
    from .pipeline import eval_model, load_data_dir, load_model_dir, _read_manifest

    cfg = _resolve_run_config(args)
    manifest = _read_manifest(os.path.join(args.checkpoint, "model.txt"))
    need_stores = manifest.get("encoder", "semantic") == "semantic"
    metrics_path = os.path.join(args.out, "metrics.tsv")
    _refuse_existing(metrics_path, args.force)
    with _output_lock(args.out):
        data = load_data_dir(args.data, cfg, need_stores=need_stores)
        model, _ = load_model_dir(args.checkpoint, data)
        reports, _ = eval_model(
            data, model, cfg, seed=args.seed, which=args.split,
            with_groups=args.groups == "on",
        )
        emit_report(reports, metrics_path)
        table = format_report_table(reports)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        echo = cfg.echo()
        summary = {
            "config": echo,
            "config_hash": hashlib.sha256(
                json.dumps(echo, sort_keys=True).encode()
            ).hexdigest(),
            "split": args.split,
            "seed": args.seed,
            "dataset": {
                "users": data.ds.user_count,
                "items": data.ds.item_count,
                "interactions": data.ds.interaction_count,
                "split_users": len(data.split),
                "excluded_users": data.split.n_excluded,
            },
            "groups": {r.group: {"ndcg": r.ndcg, "hr": r.hr, "n_users": r.n_users_evaluated}
                       for r in reports},
        }
        with open(os.path.join(args.out, "eval_summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(table, end="")
    return 0


def cmd_sweep(args) -> int:
    import copy

    from .embedstore import build_neighbor_cache
    from .hae import SemanticStore
    from .pipeline import eval_model, load_data_dir, load_model_dir, train_one_seed

    cfg = _resolve_run_config(args)
    grid: list[tuple[str, int]] = []
    if args.sweep_k:
        grid += [("k_neighbors", v) for v in sorted(_parse_int_list(args.sweep_k))]
    if args.sweep_h:
        grid += [("h", v) for v in sorted(_parse_int_list(args.sweep_h))]
    if not grid:
        raise ValueError("empty sweep grid: pass --sweep-k and/or --sweep-h")

    rows = []
    with _output_lock(args.out):
        base = load_data_dir(args.data, cfg, need_stores=cfg.encoder == "semantic")
        for param, value in grid:
            point_cfg = copy.deepcopy(cfg)
            setattr(point_cfg, param, value)
            data = base
            if param == "k_neighbors" and cfg.encoder == "semantic":
                data = copy.copy(base)
                data.user_store = SemanticStore(
                    base.user_store.matrix, build_neighbor_cache(base.user_store.matrix, value)
                )
                data.item_store = SemanticStore(
                    base.item_store.matrix, build_neighbor_cache(base.item_store.matrix, value)
                )
            run_dir = os.path.join(args.out, "runs", f"{param}_{value}")
            _refuse_existing(os.path.join(run_dir, "summary.json"), args.force)
            train_one_seed(data, point_cfg, args.seed, run_dir)
            model, _ = load_model_dir(run_dir, data)
            reports, _ = eval_model(data, model, point_cfg, seed=args.seed,
                                    which="test", with_groups=False)
            rows.append((param, value, reports[0].ndcg[10], reports[0].hr[10]))
            print(f"sweep: {param}={value} NDCG@10 {rows[-1][2]:.4f} HR@10 {rows[-1][3]:.4f}")
        with open(os.path.join(args.out, "sweep.tsv"), "w", encoding="utf-8") as fh:
            fh.write("param\tvalue\tndcg10\thr10\n")
            for param, value, ndcg, hr in rows:
                fh.write(f"{param}\t{value}\t{ndcg!r}\t{hr!r}\n")
    return 0


def cmd_report(args) -> int:
    from .evaluation import format_report_table, parse_report_tsv

    table = format_report_table(parse_report_tsv(args.metrics))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grasp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic corpus + embeddings")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-users", type=int, default=500)
    sp.add_argument("--n-items", type=int, default=200)
    sp.add_argument("--clusters", type=int, default=8)
    sp.add_argument("--d-sem", type=int, default=32)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("build-db", help="build neighbor caches from embedding files")
    sp.add_argument("--users", required=True, help="user GEMB file")
    sp.add_argument("--items", required=True, help="item GEMB file")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_build_db)

    sp = sub.add_parser("train", help="fit the model per seed")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", default="42", help="comma-separated seed list")
    sp.add_argument("--force", action="store_true")
    _add_run_config_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("valid", "test"), default="test")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--groups", choices=("on", "off"), default="on")
    sp.add_argument("--force", action="store_true")
    _add_run_config_flags(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train/evaluate a grid over k_neighbors and/or h")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sweep-k", default=None)
    sp.add_argument("--sweep-h", default=None)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--force", action="store_true")
    _add_run_config_flags(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="render a metrics TSV as a table")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    _cap_threads()
    from .errors import DataError, NumericError, ProtocolError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
