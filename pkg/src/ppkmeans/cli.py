"""Command-line orchestration: gen, dealer, run, selftest, report."""

from __future__ import annotations

import argparse
import json
import sys
import threading
from pathlib import Path

import numpy as np

from . import ahe
from .datagen import (SyntheticSpec, agreement, extract_outliers, gen_dataset,
                      jaccard, split_horizontal, split_vertical)
from .dealer import (JobSpec, compute_budget, dealer_generate, load_store,
                     write_store)
from .kmeans import KMeansConfig, PartitionSpec, plaintext_kmeans, normalize_minmax
from .protocol import RunResult, run_protocol
from .ring import (FixedPointConfig, RingMatrix, SparsePlainMatrix,
                   decode_matrix, encode_matrix)
from .transport import ROLE_A, ROLE_B, connect, loopback_pair


def _parse_seed(s: str) -> bytes:
    raw = bytes.fromhex(s)
    if len(raw) != 16:
        raise ValueError("seed must be 32 hex chars (16 bytes)")
    return raw


def load_job(path: str) -> dict:
    with open(path) as f:
        raw = json.load(f)
    p = raw["partition"]
    if p["mode"] == "vertical":
        part = PartitionSpec.vertical(p["n"], p["d_a"], p["d_b"])
    else:
        part = PartitionSpec.horizontal(p["n_a"], p["n_b"], p["d"])
    fp_raw = raw.get("fixed_point", {})
    fp = FixedPointConfig(fp_raw.get("l", 64), fp_raw.get("f", 20))
    cfg = KMeansConfig(
        k=raw["k"],
        max_iters=raw["max_iters"],
        partition=part,
        epsilon=raw.get("epsilon", 0.0),
        init=raw.get("init", "random"),
        sparse=raw.get("sparse", False),
        fixed_point=fp,
        reciprocal_iters=raw.get("reciprocal_iters"),
        seed=_parse_seed(raw.get("seed", "00" * 16)),
        open_results=raw.get("open_results", False),
        explicit_centroids=raw.get("explicit_centroids"),
        normalize=raw.get("normalize", True),
        he_key_bits=raw.get("he_key_bits", 2048),
    )
    return {"cfg": cfg, "raw": raw}


def job_spec(cfg: KMeansConfig) -> JobSpec:
    p = cfg.partition
    return JobSpec(n=p.n, d=p.d, k=cfg.k, n_a=p.n_a, n_b=p.n_b,
                   d_a=p.d_a, d_b=p.d_b, mode=p.mode, sparse=cfg.sparse,
                   bits=cfg.fixed_point.total_bits, frac=cfg.fixed_point.frac_bits,
                   iters=cfg.max_iters, theta=cfg.reciprocal_iters)


def load_matrix(path: str, fp: FixedPointConfig) -> np.ndarray:
    """Load a party's block as reals from .csv, .rmx or .csr."""
    suffix = Path(path).suffix
    if suffix == ".csv":
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        return arr
    data = Path(path).read_bytes()
    if suffix == ".rmx":
        return decode_matrix(RingMatrix.deserialize(data, fp.total_bits), fp)
    if suffix == ".csr":
        m = SparsePlainMatrix.deserialize(data, fp.total_bits)
        return decode_matrix(m.to_dense(), fp)
    raise ValueError(f"unknown dataset format {suffix}")


def build_report(result: RunResult, cfg: KMeansConfig, raw_job: dict) -> dict:
    cells = result.metrics.to_dict()
    totals = result.metrics.totals()
    report = {
        "schema_version": 1,
        "role": result.role,
        "iters_run": result.iters_run,
        "stopped_early": result.stopped_early,
        "channel": cells,
        "channel_totals": {
            "bytes_sent": totals.bytes_sent,
            "bytes_received": totals.bytes_received,
            "rounds": totals.rounds,
            "seconds": totals.seconds,
        },
        "store_bytes_by_step": {str(k): v for k, v in result.store_bytes.items()},
        "store_surplus": result.store_surplus,
        "step_seconds": result.step_seconds,
        "job": {k: v for k, v in raw_job.items()
                if k not in ("data", "triple_store", "report", "role", "peer")},
    }
    if result.opened_centroids is not None:
        report["opened_centroids"] = result.opened_centroids.tolist()
        report["opened_assignments"] = result.opened_assignments.tolist()
    return report


def attach_quality(report: dict, x_full: np.ndarray, labels: np.ndarray | None,
                   cfg: KMeansConfig):
    """Oracle agreement and Jaccard, when results were opened."""
    if "opened_centroids" not in report:
        return
    cents = np.asarray(report["opened_centroids"])
    assigns = np.asarray(report["opened_assignments"])
    xn = normalize_minmax(x_full) if cfg.normalize and cfg.partition.mode == "vertical" \
        else x_full
    quality: dict = {}
    if cfg.init == "explicit":
        oracle = plaintext_kmeans(xn, cfg.k, cfg.explicit_centroids,
                                  cfg.max_iters, cfg.epsilon)
        quality["oracle_agreement"] = agreement(oracle.assignments[-1], assigns)
        quality["oracle_centroid_max_abs_diff"] = float(
            np.abs(oracle.centroids - cents).max())
    if labels is not None and (labels < 0).any():
        found = extract_outliers(xn, cents, assigns)
        truth = set(np.flatnonzero(labels < 0).tolist())
        quality["jaccard_outliers"] = jaccard(found, truth)
    report["quality"] = quality


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    spec = SyntheticSpec(n=args.n, d=args.d, k_true=args.k,
                         cluster_std=args.std, sparsity=args.sparsity,
                         outliers=args.outliers, seed=args.seed)
    x, labels = gen_dataset(spec)
    if args.split.startswith("vertical:"):
        d_a = int(args.split.split(":")[1])
        xa, xb = split_vertical(x, d_a)
    elif args.split.startswith("horizontal:"):
        n_a = int(args.split.split(":")[1])
        xa, xb = split_horizontal(x, n_a)
    else:
        raise ValueError("--split must be vertical:<d_a> or horizontal:<n_a>")
    fp = FixedPointConfig(args.l, args.f)
    prefix = args.out
    if args.format == "csv":
        paths = (f"{prefix}_a.csv", f"{prefix}_b.csv")
        np.savetxt(paths[0], xa, delimiter=",", fmt="%.10g")
        np.savetxt(paths[1], xb, delimiter=",", fmt="%.10g")
    else:
        paths = (f"{prefix}_a.rmx", f"{prefix}_b.rmx")
        Path(paths[0]).write_bytes(encode_matrix(xa, fp).serialize())
        Path(paths[1]).write_bytes(encode_matrix(xb, fp).serialize())
    labels_path = f"{prefix}_labels.csv"
    np.savetxt(labels_path, labels, fmt="%d")
    print(json.dumps({"rows": int(x.shape[0]), "cols": int(x.shape[1]),
                      "zero_fraction": float((x == 0).mean()),
                      "files": [*paths, labels_path]}))
    return 0


def cmd_dealer(args) -> int:
    job = load_job(args.job)
    budget = compute_budget(job_spec(job["cfg"]))
    store_a, store_b = dealer_generate(budget, _parse_seed(args.seed))
    write_store(store_a, args.out_a)
    write_store(store_b, args.out_b)
    sizes = budget.store_bytes_by_step()
    print(json.dumps({"matmul_triples": budget.matmul_count(),
                      "elementwise": budget.elementwise,
                      "bit_triples": budget.bit_triples,
                      "store_bytes_by_step": sizes,
                      "files": [args.out_a, args.out_b]}))
    return 0


def _load_labels(path: str | None) -> np.ndarray | None:
    if not path:
        return None
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def cmd_run(args) -> int:
    job = load_job(args.job)
    cfg, raw = job["cfg"], job["raw"]
    role = args.role or raw["role"]
    endpoint = raw["peer"]
    x = load_matrix(raw["data"], cfg.fixed_point)
    store = load_store(raw["triple_store"])
    channel = connect(role, endpoint, timeout=args.timeout)
    try:
        result = run_protocol(channel, role, x, cfg, store)
    finally:
        channel.close()
    report = build_report(result, cfg, raw)
    out = raw.get("report", f"report_{role.lower()}.json")
    with open(out, "w") as f:
        json.dump(report, f, indent=2)
    print(json.dumps({"report": out, "iters_run": result.iters_run,
                      "stopped_early": result.stopped_early}))
    return 0


def run_selftest(cfg: KMeansConfig, xa: np.ndarray, xb: np.ndarray,
                 store_a, store_b, key_a=None, key_b=None,
                 debug_open_assignments: bool = False) -> dict:
    """Both parties in one process over loopback; returns both results."""
    ch_a, ch_b = loopback_pair()
    out: dict = {}

    def party(channel, role, x, store, key):
        try:
            out[role] = run_protocol(channel, role, x, cfg, store, key,
                                     debug_open_assignments)
        except BaseException as e:   # surfaced after join
            out[role] = e
            channel.close()          # unblock a peer waiting on recv

    ta = threading.Thread(target=party, args=(ch_a, ROLE_A, xa, store_a, key_a))
    tb = threading.Thread(target=party, args=(ch_b, ROLE_B, xb, store_b, key_b))
    ta.start()
    tb.start()
    ta.join()
    tb.join()
    for role in (ROLE_A, ROLE_B):
        if isinstance(out[role], BaseException):
            raise out[role]
    return out


def cmd_selftest(args) -> int:
    job = load_job(args.job)
    cfg, raw = job["cfg"], job["raw"]
    xa = load_matrix(raw["data_a"], cfg.fixed_point)
    xb = load_matrix(raw["data_b"], cfg.fixed_point)
    budget = compute_budget(job_spec(cfg))
    store_a, store_b = dealer_generate(budget, cfg.seed)
    keys = {}
    if cfg.sparse:
        keys[ROLE_A] = ahe.keygen(cfg.he_key_bits,
                                  allow_short=cfg.he_key_bits < 2048)
        keys[ROLE_B] = ahe.keygen(cfg.he_key_bits,
                                  allow_short=cfg.he_key_bits < 2048)
    out = run_selftest(cfg, xa, xb, store_a, store_b,
                       keys.get(ROLE_A), keys.get(ROLE_B))
    labels = _load_labels(raw.get("labels"))
    if cfg.partition.mode == "vertical":
        x_full = np.hstack([xa, xb])
    else:
        x_full = np.vstack([xa, xb])
    reports = {}
    for role, result in out.items():
        rep = build_report(result, cfg, raw)
        attach_quality(rep, x_full, labels, cfg)
        path = raw.get(f"report_{role.lower()}", f"report_{role.lower()}.json")
        with open(path, "w") as f:
            json.dump(rep, f, indent=2)
        reports[role] = path
    print(json.dumps({"reports": reports,
                      "iters_run": out[ROLE_A].iters_run,
                      "stopped_early": out[ROLE_A].stopped_early}))
    return 0


def report_compare(reports: list[dict]) -> dict:
    """Side-by-side per-phase/per-step table plus deltas against the first."""
    rows = []
    for i, rep in enumerate(reports):
        for phase, steps in rep["channel"].items():
            for step, cell in steps.items():
                rows.append({
                    "report": i, "role": rep.get("role"),
                    "phase": phase, "step": step,
                    "bytes_sent": cell["bytes_sent"],
                    "bytes_received": cell["bytes_received"],
                    "rounds": cell["rounds"],
                    "seconds": cell["seconds"],
                })
        for step, nbytes in rep.get("store_bytes_by_step", {}).items():
            rows.append({"report": i, "role": rep.get("role"),
                         "phase": "offline-store", "step": step,
                         "bytes_sent": nbytes, "bytes_received": nbytes,
                         "rounds": 0, "seconds": 0.0})
    base = {(r["phase"], r["step"]): r for r in rows if r["report"] == 0}
    deltas = []
    for r in rows:
        if r["report"] == 0:
            continue
        b = base.get((r["phase"], r["step"]))
        if b:
            deltas.append({
                "phase": r["phase"], "step": r["step"], "report": r["report"],
                "bytes_sent_delta": r["bytes_sent"] - b["bytes_sent"],
                "rounds_delta": r["rounds"] - b["rounds"],
            })
    return {"rows": rows, "deltas": deltas}


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path) as f:
            reports.append(json.load(f))
    table = report_compare(reports)
    if args.csv:
        import csv as csv_mod
        keys = ["report", "role", "phase", "step", "bytes_sent",
                "bytes_received", "rounds", "seconds"]
        with open(args.csv, "w", newline="") as f:
            w = csv_mod.DictWriter(f, fieldnames=keys)
            w.writeheader()
            for row in table["rows"]:
                w.writerow(row)
    print(json.dumps(table, indent=2))
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="ppkmeans",
        description="Two-party privacy-preserving K-means over secret shares")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic partitioned dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--std", type=float, default=0.05)
    g.add_argument("--sparsity", type=float, default=0.0)
    g.add_argument("--outliers", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", required=True,
                   help="vertical:<d_a> or horizontal:<n_a>")
    g.add_argument("--out", required=True, help="output path prefix")
    g.add_argument("--format", choices=("csv", "bin"), default="csv")
    g.add_argument("--l", type=int, default=64)
    g.add_argument("--f", type=int, default=20)
    g.set_defaults(fn=cmd_gen)

    d = sub.add_parser("dealer", help="generate both parties' triple stores")
    d.add_argument("--job", required=True)
    d.add_argument("--out-a", required=True)
    d.add_argument("--out-b", required=True)
    d.add_argument("--seed", required=True, help="32 hex chars")
    d.set_defaults(fn=cmd_dealer)

    r = sub.add_parser("run", help="run one party over TCP")
    r.add_argument("--job", required=True)
    r.add_argument("--role", choices=(ROLE_A, ROLE_B))
    r.add_argument("--timeout", type=float, default=30.0)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("selftest", help="run both parties in-process")
    s.add_argument("--job", required=True)
    s.set_defaults(fn=cmd_selftest)

    c = sub.add_parser("report", help="compare run reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--csv")
    c.set_defaults(fn=cmd_report)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
