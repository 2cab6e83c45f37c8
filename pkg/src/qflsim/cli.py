"""Experiment runner: config parsing, subcommands, metrics, charts.

Config files are flat INI-style documents with typed keys; unknown sections
or keys abort before any computation (exit 2). Subcommands:

    ingest    validate IDX files and write a preprocessed feature cache
    run       execute the configured method, writing metrics + ledger
    compare   run several methods on shared seed/partition/test data
    verify    recheck every chain and payload under a ledger directory
    rollback  restart training from an audited global model
    report    render metrics files into SVG charts plus a text summary

Every output lands under --out. Runs are pure functions of
(config, dataset, seed): identical invocations write identical bytes.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import data, fed, ledger, qnn, qsim, report
from .errors import ConfigError, DataError, ProtocolError, QflError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# section -> key -> (parser, default)
_SCHEMA = {
    "experiment": {
        "seed": (int, 0),
        "rounds": (int, 100),
        "method": (str, "dqfl"),
        "central_data": (str, "pooled"),
        "workers": (int, 1),
    },
    "data": {
        "images": (str, "train-images-idx3-ubyte.gz"),
        "labels": (str, "train-labels-idx1-ubyte.gz"),
        "classes": ("int_list", (0, 1, 2, 3)),
        "test_fraction": (float, 0.2),
        "partition": (str, "iid"),
        "dirichlet_alpha": (float, 0.5),
        "train_per_client": (int, 500),
        "test_samples": (int, 400),
    },
    "federation": {
        "servers": (int, 3),
        "clients_per_server": (int, 5),
        "topology": (str, "ring"),
        "gossip_steps": (int, 5),
        "random_edge_prob": (float, 0.5),
        "fault_round": (int, -1),
        "fault_server": (int, 0),
    },
    "training": {
        "epochs": (int, 10),
        "batch": (int, 32),
        "lr": (float, 0.01),
    },
    "circuit": {
        "qubits": (int, 4),
        "layers": (int, 6),
    },
    "noise": {
        "enabled": ("bool", True),
        "depolarizing_1q": (float, 0.001),
        "depolarizing_2q": (float, 0.01),
        "measurement_flip": (float, 0.01),
    },
}

_PROFILES = {
    "desk": {("experiment", "rounds"): 20, ("data", "train_per_client"): 500,
             ("data", "test_samples"): 400},
    "full": {},
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


_PARSERS = {"bool": _parse_bool, "int_list": _parse_int_list}


def load_config(path, overrides=None):
    """Strictly-typed config dict: {(section, key): value}."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as err:
        raise ConfigError(f"config parse error: {err}") from err
    values = {
        (section, key): default
        for section, keys in _SCHEMA.items()
        for key, (_, default) in keys.items()
    }
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            kind = _SCHEMA[section][key][0]
            convert = _PARSERS.get(kind, kind)
            try:
                values[(section, key)] = convert(raw)
            except ValueError as err:
                raise ConfigError(f"bad value for {section}.{key}: {err}") from err
    for pair, value in (overrides or {}).items():
        values[pair] = value
    values[("_meta", "dir")] = path.parent
    return values


def echo_config(values) -> str:
    lines = []
    for section in _SCHEMA:
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            value = values[(section, key)]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "".join(line + "\n" for line in lines)


def build_context(values) -> fed.RunContext:
    fault_round = values[("federation", "fault_round")]
    cfg = fed.FederationConfig(
        n_servers=values[("federation", "servers")],
        clients_per_server=values[("federation", "clients_per_server")],
        global_rounds=values[("experiment", "rounds")],
        topology=values[("federation", "topology")],
        gossip_steps=values[("federation", "gossip_steps")],
        random_edge_prob=values[("federation", "random_edge_prob")],
        seed=values[("experiment", "seed")],
        fault_round=None if fault_round < 0 else fault_round,
        fault_server=values[("federation", "fault_server")],
    )
    n_classes = len(values[("data", "classes")])
    train = qnn.TrainConfig(
        epochs=values[("training", "epochs")],
        batch_size=values[("training", "batch")],
        lr=values[("training", "lr")],
        n_classes=n_classes,
    )
    circuit = qnn.CircuitSpec(
        n_qubits=values[("circuit", "qubits")],
        n_layers=values[("circuit", "layers")],
    )
    layout = qnn.EncodingLayout(
        n_qubits=circuit.n_qubits,
        features_per_sample=min(8, 2 * circuit.n_qubits),
    )
    noise = qsim.NoiseConfig(
        p_depol_1q=values[("noise", "depolarizing_1q")],
        p_depol_2q=values[("noise", "depolarizing_2q")],
        p_meas_flip=values[("noise", "measurement_flip")],
        enabled=values[("noise", "enabled")],
    )
    if circuit.n_qubits < 4:
        raise ConfigError(
            "[circuit] qubits must be >= 4: block-mean pooling yields 8 "
            "features and the encoding places at most two per qubit"
        )
    if n_classes > circuit.n_qubits:
        raise ConfigError(
            "class count cannot exceed qubit count (one logit per qubit)"
        )
    return fed.RunContext(
        fed=cfg, train=train, circuit=circuit, layout=layout, noise=noise,
        workers=values[("experiment", "workers")],
    )


def load_dataset(values):
    """Shards and test set per the config's data section."""
    base = values[("_meta", "dir")]
    image_path = (base / values[("data", "images")]).resolve()
    label_path = (base / values[("data", "labels")]).resolve()
    raw = data.load_idx_pair(image_path, label_path)
    processed = data.preprocess(raw, class_set=values[("data", "classes")])
    cap = values[("data", "train_per_client")]
    test_cap = values[("data", "test_samples")]
    split = data.SplitConfig(
        test_fraction=values[("data", "test_fraction")],
        partition_mode=values[("data", "partition")],
        dirichlet_alpha=values[("data", "dirichlet_alpha")],
        per_client_cap=None if cap <= 0 else cap,
        test_cap=None if test_cap <= 0 else test_cap,
    )
    n_clients = (
        values[("federation", "servers")]
        * values[("federation", "clients_per_server")]
    )
    shards, test_set, partition = data.split_and_partition(
        processed, n_clients, seed=values[("experiment", "seed")], config=split
    )
    return shards, test_set, partition


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    raw = data.load_idx_pair(args.images, args.labels)
    classes = _parse_int_list(args.classes)
    processed = data.preprocess(raw, class_set=classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / "processed.npz"
    np.savez(cache, features=processed.features, labels=processed.labels,
             class_set=np.array(processed.class_set))
    counts = np.bincount(processed.labels, minlength=len(classes))
    print(f"parsed {len(raw.labels)} samples; kept {len(processed.labels)}")
    for digit, count in zip(classes, counts):
        print(f"  digit {digit}: {count}")
    print(f"wrote {cache}")
    return EXIT_OK


def _run_method(values, ctx, shards, test_set, method, out_dir, persist_ledger=True):
    rounds = values[("experiment", "rounds")]
    central = values[("experiment", "central_data")]
    if method in ("dqfl", "qfl_central"):
        run_ctx = ctx
        if method == "qfl_central":
            flat_cfg = dataclasses.replace(
                ctx.fed, n_servers=1,
                clients_per_server=ctx.fed.total_clients, topology="star",
            )
            run_ctx = dataclasses.replace(ctx, fed=flat_cfg)
        _, ledgers, metrics = fed.run_federation(
            run_ctx, shards, test_set, rounds=rounds
        )
        if persist_ledger:
            ledger.LedgerDir(out_dir / "ledger").save(
                ledgers.all_chains(), ledgers.store
            )
        return [
            report.MetricsRow(m.round_index, method, m.global_accuracy,
                              m.global_loss, m.messages)
            for m in metrics
        ]
    method_rows = fed.run_baseline(
        method, ctx, shards, test_set, rounds=rounds, central_data=central
    )
    return [
        report.MetricsRow(r.round_index, r.method, r.accuracy, r.loss, r.messages)
        for r in method_rows
    ]


def cmd_run(args) -> int:
    values = _load_with_flags(args)
    ctx = build_context(values)
    shards, test_set, _ = load_dataset(values)
    method = values[("experiment", "method")]
    if method not in fed.METHODS:
        raise ConfigError(f"unknown method {method!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _run_method(values, ctx, shards, test_set, method, out_dir)
    (out_dir / "metrics.csv").write_text(report.format_rows(rows))
    (out_dir / "summary.txt").write_text(report.summarize(rows))
    (out_dir / "config.echo.ini").write_text(echo_config(values))
    print(report.summarize(rows), end="")
    print(f"outputs under {out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    values = _load_with_flags(args)
    ctx = build_context(values)
    methods = []
    for name in args.methods.split(","):
        name = name.strip()
        if not name:
            continue
        if name not in fed.METHODS:
            raise ConfigError(f"unknown method {name!r}")
        if name in methods:
            print(f"warning: duplicate method {name} ignored", file=sys.stderr)
            continue
        methods.append(name)
    if len(methods) < 2:
        raise ConfigError("compare needs at least two distinct methods")
    shards, test_set, _ = load_dataset(values)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_rows = []
    for method in methods:
        all_rows.extend(
            _run_method(values, ctx, shards, test_set, method, out_dir,
                        persist_ledger=False)
        )
    (out_dir / "metrics.csv").write_text(report.format_rows(all_rows))
    summary = report.summarize(all_rows)
    (out_dir / "summary.txt").write_text(summary)
    (out_dir / "config.echo.ini").write_text(echo_config(values))
    print(summary, end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        results = ledger.verify_directory(args.chains)
    except ProtocolError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    bad = {name: height for name, height in results.items() if height is not None}
    if not bad:
        print(f"ok: {len(results)} chains verified clean")
        return EXIT_OK
    for name, height in sorted(bad.items()):
        where = "payload store" if height == -1 else f"height {height}"
        print(f"FAIL {name}: first bad {where}")
    return EXIT_RUNTIME


def cmd_rollback(args) -> int:
    values = _load_with_flags(args)
    ctx = build_context(values)
    ledger_dir = ledger.LedgerDir(args.chains)
    chains, store = ledger_dir.load()
    shard = next((c for c in chains if c.tier == ledger.TIER_SHARD), None)
    if shard is None:
        print("error: no shard chain found", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        params = ledger.rollback(shard, store, args.round)
    except ProtocolError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    lmucs = sorted(
        (c for c in chains if c.tier == ledger.TIER_LMUC), key=lambda c: c.owner
    )
    global_chain = next(c for c in chains if c.tier == ledger.TIER_GLOBAL)
    ledgers = fed.LedgerSet(
        store=store, lmucs=lmucs, shard=shard, global_chain=global_chain
    )
    shards, test_set, _ = load_dataset(values)
    _, metrics = fed.resume_federation(
        ctx, shards, test_set, ledgers, start_round=args.round,
        rounds=args.rounds, params=params,
    )
    ledger_dir.save(ledgers.all_chains(), store)
    rows = [
        report.MetricsRow(m.round_index, "rollback", m.global_accuracy,
                          m.global_loss, m.messages)
        for m in metrics
    ]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    segment = out_dir / f"metrics.rollback-{args.round}.csv"
    segment.write_text(report.format_rows(rows))
    print(f"resumed from round {args.round}; wrote {segment}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"metrics file not found: {path}")
        rows.extend(report.parse_metrics(path.read_text(), source=path.name))
    out_dir = Path(args.out)
    paths = report.write_charts(rows, out_dir)
    summary = report.summarize(rows)
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def _load_with_flags(args):
    overrides = {}
    profile = getattr(args, "profile", None)
    if profile:
        if profile not in _PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        overrides.update(_PROFILES[profile])
    values = load_config(args.config, overrides)
    if getattr(args, "seed", None) is not None:
        values[("experiment", "seed")] = args.seed
    if getattr(args, "workers", None) is not None:
        values[("experiment", "workers")] = args.workers
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qflsim",
        description="deterministic ledger-anchored quantum federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate IDX files, write feature cache")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--classes", default="0,1,2,3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    for name, func, extra in (
        ("run", cmd_run, ()),
        ("compare", cmd_compare, ("methods",)),
    ):
        p = sub.add_parser(name, help=f"{name} an experiment")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--profile", choices=sorted(_PROFILES), default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", required=True)
        if "methods" in extra:
            p.add_argument("--methods", required=True,
                           help="comma-separated method list")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="verify a ledger directory")
    p.add_argument("--chains", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("rollback", help="resume from an audited global model")
    p.add_argument("--chains", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollback)

    p = sub.add_parser("report", help="charts + summary from metrics files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except QflError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
