"""Command-line front end: scenario runs, measurement sweeps, secrecy audits,
and golden-vector checks.

Every subcommand is deterministic given its seed; when no seed is supplied
one is drawn and printed so the invocation can be reproduced.  The crypto
golden vectors are re-verified before any run/sweep/audit work, so a broken
primitive can never produce a green result.

Exit codes are distinct per failure class:

====  =========================================================
0     success
2     usage error (standard argument parsing)
3     golden-vector mismatch (also pre-empts run/sweep/audit)
4     scenario run failure: bad script, membership error, or probe failure
5     sweep failure
6     audit found secrecy breaches
====  =========================================================
"""

from __future__ import annotations

import argparse
import os
import sys
from random import Random

from gkms import analyzer, harness
from gkms.core import EventError, rows_to_csv
from gkms.crypto import verify_golden_vectors
from gkms.tree import TreeError

EXIT_OK = 0
EXIT_VECTORS = 3
EXIT_RUN = 4
EXIT_SWEEP = 5
EXIT_AUDIT = 6


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gkms",
        description="Group rekeying benchmarks: scenario runs, cost sweeps, secrecy audits.",
    )
    parser.add_argument(
        "--output-dir",
        default=os.environ.get("GKMS_OUTPUT_DIR", "."),
        help="directory for emitted files (env: GKMS_OUTPUT_DIR, default: .)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario file and print its trace")
    p_run.add_argument("scenario", help="path to a scenario file")

    p_sweep = sub.add_parser("sweep", help="measure a protocols x n x m x op grid to CSV")
    p_sweep.add_argument("--protocols", default="ckcs,lkh,oft,okd", help="comma-separated protocol ids")
    p_sweep.add_argument("--n", default="256,1024,4096,8192", help="comma-separated group sizes at event start")
    p_sweep.add_argument("--m", default="16,64,256,1024", help="comma-separated batch sizes")
    p_sweep.add_argument("--ops", default="join,leave", help="comma-separated ops")
    p_sweep.add_argument("--layout", default="random", choices=harness.LAYOUTS, help="leaver placement")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default="sweep.csv", help="CSV filename (within --output-dir)")

    p_audit = sub.add_parser("audit", help="secrecy closure checks over random traces")
    p_audit.add_argument("--trials", type=int, default=1000)
    p_audit.add_argument("--max-n", type=int, default=64)
    p_audit.add_argument("--max-events", type=int, default=8)
    p_audit.add_argument("--seed", type=int, default=None)
    p_audit.add_argument(
        "--sample",
        default="endpoints",
        choices=("endpoints", "all"),
        help="adversaries per trace: churn endpoints (default) or every leaver/joiner",
    )
    p_audit.add_argument(
        "--codes-public",
        action="store_true",
        help="leak every node code to the adversary (breaches are the expected finding)",
    )

    p_vec = sub.add_parser("vectors", help="verify the crypto golden vectors")
    p_vec.add_argument("--file", default=None, help="alternative vector file")
    return parser


def _pick_seed(explicit: int | None) -> int:
    return explicit if explicit is not None else Random().randrange(10**9)


def _check_vectors(quiet: bool) -> bool:
    results = verify_golden_vectors()
    bad = [r for r in results if not r.ok]
    if bad:
        for r in bad:
            print(
                f"vector line {r.line_no} ({r.function}): expected {r.expected}, got {r.actual}",
                file=sys.stderr,
            )
        print(f"golden vectors: {len(bad)} of {len(results)} FAILED", file=sys.stderr)
        return False
    if not quiet:
        print(f"golden vectors: {len(results)} ok")
    return True


def _cover_line(trace: harness.TraceRecord, record: harness.EventRecord) -> str | None:
    message = next(iter(record.output.messages), None)
    if message is None or "cover" not in message.aux:
        return None
    parts = []
    for node_id, payload in zip(message.aux["cover"], message.payloads):
        try:
            members = trace.server.tree.subtree_member_ids(node_id)
            label = "K{" + ",".join(members) + "}"
        except TreeError:
            label = f"K(node {node_id})"
        kek = trace.wrap_log.get(payload.ciphertext)
        fp = kek[:4].hex() if kek else "????????"
        parts.append(f"{label}={fp}")
    return "  cover: " + " ".join(parts)


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        with open(args.scenario, "r", encoding="utf-8") as handle:
            scenario = harness.parse_scenario(handle.read())
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_RUN
    except harness.ScenarioError as exc:
        print(f"bad scenario: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(f"scenario: {args.scenario}")
    print(f"protocol: {scenario.protocol}  initial n: {scenario.n}  seed: {scenario.seed}")
    try:
        trace = harness.run(scenario)
    except (harness.ScenarioError, harness.ProbeError, EventError, TreeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    for record in trace.events:
        ids = ",".join(record.member_ids)
        cost = record.cost
        print(
            f"event {record.seq}: {record.op} m={len(record.member_ids)} ({ids}) "
            f"n={record.n_at_event} -> keygen={cost.keygen} encrypt={cost.encrypt} "
            f"unicast={cost.unicast} multicast={cost.multicast} size={cost.payload_keys}"
        )
        cover = _cover_line(trace, record)
        if cover:
            print(cover)
    print(f"final members: {trace.server.member_count}")
    print(f"probes: all passed")
    print(f"trace digest: {trace.digest}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    seed = _pick_seed(args.seed)
    print(f"seed: {seed}")
    try:
        protocols = [p for p in args.protocols.split(",") if p]
        n_values = [int(v) for v in args.n.split(",") if v]
        m_values = [int(v) for v in args.m.split(",") if v]
        ops = [o for o in args.ops.split(",") if o]
        rows, notes = harness.sweep(protocols, n_values, m_values, ops, seed=seed, layout=args.layout)
    except (ValueError, harness.ScenarioError, EventError, TreeError) as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return EXIT_SWEEP
    os.makedirs(args.output_dir, exist_ok=True)
    out_path = os.path.join(args.output_dir, args.out)
    with open(out_path, "w", encoding="utf-8") as handle:
        handle.write(rows_to_csv(rows, harness.SWEEP_EXTRA_COLUMNS))
    notes_path = os.path.splitext(out_path)[0] + ".notes.txt"
    with open(notes_path, "w", encoding="utf-8") as handle:
        for note in notes:
            handle.write(note + "\n")
    print(f"wrote {len(rows)} rows to {out_path}")
    print(f"wrote {len(notes)} notes to {notes_path}")
    return EXIT_OK


def _cmd_audit(args: argparse.Namespace) -> int:
    seed = _pick_seed(args.seed)
    print(f"seed: {seed}")
    report = analyzer.audit(
        trials=args.trials,
        max_n=args.max_n,
        seed=seed,
        max_events=args.max_events,
        codes_public=args.codes_public,
        sample=args.sample,
    )
    print(report.summary())
    for scenario_seed, verdict in report.breaches:
        print(f"--- breach in scenario seed {scenario_seed} ---")
        print(str(verdict))
    return EXIT_OK if report.ok else EXIT_AUDIT


def _cmd_vectors(args: argparse.Namespace) -> int:
    if args.file is not None:
        try:
            with open(args.file, "r", encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            print(f"cannot read vectors: {exc}", file=sys.stderr)
            return EXIT_VECTORS
        results = verify_golden_vectors(text)
        bad = [r for r in results if not r.ok]
        if bad:
            for r in bad:
                print(
                    f"vector line {r.line_no} ({r.function}): expected {r.expected}, got {r.actual}",
                    file=sys.stderr,
                )
            return EXIT_VECTORS
        print(f"golden vectors: {len(results)} ok")
        return EXIT_OK
    return EXIT_OK if _check_vectors(quiet=False) else EXIT_VECTORS


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command != "vectors" and not _check_vectors(quiet=True):
        return EXIT_VECTORS
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "sweep":
        return _cmd_sweep(args)
    if args.command == "audit":
        return _cmd_audit(args)
    return _cmd_vectors(args)


if __name__ == "__main__":  # pragma: no cover - exercised via the console script
    sys.exit(main())
