"""Command-line entry point: ``renfdi {simulate,train,evaluate,verify,infer,plot}``.

Every run writes one ``*.manifest.json`` next to its outputs holding the
argument vector, the resolved config, its hash, seeds and timestamps, so the
run can be repeated from the manifest alone.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from . import ren as rc
from . import training as tr
from . import verify as vf

CONFIG_ENV = "RENFDI_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("renfdi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path: str | None) -> dict:
    """Read the pipeline config (``scenarios`` and ``training`` sections).

    Falls back to ``$RENFDI_CONFIG`` and then to the built-in defaults.
    """
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} does not exist")
    doc = json.loads(p.read_text())
    unknown = set(doc) - {"scenarios", "training"}
    if unknown:
        raise ValueError(f"{p}: unknown config sections {sorted(unknown)}")
    return doc


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class RunManifest:
    def __init__(self, subcommand: str, argv: list[str], config: dict, seeds):
        self.doc = {
            "subcommand": subcommand,
            "argv": list(argv),
            "config": config,
            "config_hash": _hash(config),
            "seeds": seeds,
            "tool_version": __version__,
            "inputs": [],
            "outputs": [],
            "started": _now(),
            "finished": None,
        }

    def write(self, path: Path, inputs=(), outputs=()):
        self.doc["inputs"] = [str(p) for p in inputs]
        self.doc["outputs"] = [str(p) for p in outputs]
        self.doc["finished"] = _now()
        path.write_text(json.dumps(self.doc, indent=2) + "\n")
        return path


def _require_dir(p: str) -> Path:
    d = Path(p)
    if not d.is_dir():
        raise FileNotFoundError(f"output directory {d} does not exist")
    return d


def _require_parent(p: str) -> Path:
    f = Path(p)
    if not f.parent.is_dir():
        raise FileNotFoundError(f"output directory {f.parent} does not exist")
    return f


def _scenario_config(args, cfg: dict) -> ds.ScenarioConfig:
    base = ds.ScenarioConfig.from_dict(cfg.get("scenarios", {}))
    if args.healthy_only:
        comp = (((), args.count if args.count is not None else 5),)
    elif args.test:
        n = args.count if args.count is not None else 100
        comp = tuple((s, n) for s, _ in ds.TEST_COMPOSITION)
    elif args.count is not None:
        raise UsageError("--count needs --healthy-only or --test")
    else:
        return base
    d = base.to_dict()
    d["composition"] = [{"sensors": list(s), "count": c} for s, c in comp]
    return ds.ScenarioConfig.from_dict(d)


def cmd_simulate(args, argv):
    cfg = load_config(args.config)
    out = _require_dir(args.out)
    config = _scenario_config(args, cfg)
    man = RunManifest("simulate", argv, {"scenarios": config.to_dict()},
                      {"master_seed": args.seed})
    data = ds.build_scenarios(config, args.seed)
    ds.save_set(data, out)
    print(f"wrote {len(data)} scenarios to {out}")
    man.write(out / "simulate.manifest.json", outputs=[out / "manifest.json"])
    return EXIT_OK


def _filters(arg: str) -> list[int]:
    if arg == "all":
        return list(range(1, ds.N_SENSORS + 1))
    try:
        i = int(arg)
    except ValueError:
        raise UsageError(f"--filter expects 1..{ds.N_SENSORS} or 'all', got {arg!r}")
    if not 1 <= i <= ds.N_SENSORS:
        raise UsageError(f"--filter expects 1..{ds.N_SENSORS} or 'all', got {arg!r}")
    return [i]


def cmd_train(args, argv):
    filters = _filters(args.filter)
    cfg = load_config(args.config)
    out = _require_dir(args.out)
    config = tr.TrainConfig.from_dict(cfg.get("training", {}))
    if args.epochs is not None:
        config = tr.TrainConfig.from_dict({**config.to_dict(), "epochs": args.epochs})
    data = ds.load_set(args.data)
    dims = config.dims()
    man = RunManifest("train", argv, {"training": config.to_dict()},
                      {"train_seed": config.seed, "data_seed": data.master_seed})
    outputs = []
    for i in filters:
        ckpt = out / f"filter_{i}.json"
        _, report = tr.train_filter(i, dims, config.spec(i), data, config,
                                    checkpoint=ckpt)
        logf = out / f"train_log_{i}.csv"
        report.write_log(logf)
        outputs += [ckpt, logf]
        print(f"filter {i}: loss {report.initial_loss:.6g} -> "
              f"{report.final_loss:.6g} in {report.wall_time:.1f}s")
    man.write(out / "train.manifest.json", inputs=[args.data], outputs=outputs)
    return EXIT_OK


def cmd_evaluate(args, argv):
    bank = tr.FilterBank.load(args.bank)
    out = _require_parent(args.out)
    data = ds.load_set(args.data)
    table, counts = tr.evaluate_rmse(bank, data, args.k0)
    print(tr.format_table(table))
    print("scenarios per row: " + ", ".join(map(str, counts)))
    tr.write_table_csv(out, table)
    RunManifest("evaluate", argv, {"k0": args.k0}, {"data_seed": data.master_seed}) \
        .write(out.with_suffix(".manifest.json"), inputs=[args.bank, args.data],
               outputs=[out])
    return EXIT_OK


def random_bank(seed: int, config: tr.TrainConfig | None = None) -> tr.FilterBank:
    """An untrained bank drawn from the parameter initializer."""
    config = config or tr.TrainConfig(seed=seed)
    dims = config.dims()
    specs = [config.spec(i) for i in range(1, ds.N_SENSORS + 1)]
    params = [rc.init_params(dims, s, seed + s.sensor_index, config.init_scale,
                             config.epsilon, config.alpha_bar) for s in specs]
    return tr.FilterBank(dims, specs, params, {"random_seed": seed})


def _healthy_inputs(data, seed: int, count: int) -> np.ndarray:
    if data is not None:
        healthy = [s for s in data if not s.label] or list(data)
        return np.stack([ds.filter_input(s) for s in healthy])
    cfg = ds.ScenarioConfig(composition=(((), count),))
    return np.stack([ds.filter_input(s) for s in ds.build_scenarios(cfg, seed)])


def cmd_verify(args, argv):
    out = _require_parent(args.out)
    bank = tr.FilterBank.load(args.bank) if args.bank else random_bank(args.seed)
    data = ds.load_set(args.data) if args.data else None
    inputs = _healthy_inputs(data, args.seed, 10)
    records = vf.run_suite(bank.dims, bank.specs, bank.params, inputs,
                           seed=args.seed, trials=args.trials)
    out.write_text(json.dumps(records, indent=2) + "\n")
    failed = [r for r in records if not r["pass"]]
    for r in records:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['name']:<32} "
              f"worst_margin={r['worst_margin']:.3g}")
    ins = [p for p in (args.bank, args.data) if p]
    RunManifest("verify", argv, {"trials": args.trials}, {"seed": args.seed}) \
        .write(out.with_suffix(".manifest.json"), inputs=ins, outputs=[out])
    return EXIT_VERIFY if failed else EXIT_OK


def _pick(data, sid: int):
    for s in data:
        if s.id == sid:
            return s
    raise ValueError(f"no scenario with id {sid} in the dataset")


def cmd_infer(args, argv):
    out = _require_parent(args.out)
    bank = tr.FilterBank.load(args.bank)
    data = ds.load_set(args.data)
    s = _pick(data, args.scenario)
    r = bank.residuals(ds.filter_input(s))
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"r{j + 1}" for j in range(r.shape[1])])
        for k, row in enumerate(r):
            w.writerow([k, repr(k / s.filter_rate)] + [repr(float(v)) for v in row])
    RunManifest("infer", argv, {"scenario": args.scenario},
                {"data_seed": data.master_seed}) \
        .write(out.with_suffix(".manifest.json"), inputs=[args.bank, args.data],
               outputs=[out])
    return EXIT_OK


def cmd_plot(args, argv):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    out = _require_dir(args.out)
    bank = tr.FilterBank.load(args.bank)
    data = ds.load_set(args.data)
    ids = args.scenario if args.scenario else [s.id for s in data]
    written = []
    for sid in ids:
        s = _pick(data, sid)
        r = bank.residuals(ds.filter_input(s))
        t = np.arange(r.shape[0]) / s.filter_rate
        for j in range(r.shape[1]):
            fig, ax = plt.subplots(figsize=(6, 2.5))
            ax.plot(t, s.faults[:, j], "k--", lw=1.2, label=f"$f_{j + 1}$")
            ax.plot(t, r[:, j], lw=1.0, label=f"$r_{j + 1}$")
            ax.set_xlabel("time [s]")
            ax.set_ylabel("[m]")
            ax.set_title(f"scenario {sid}, filter {j + 1}")
            ax.legend(loc="upper left", fontsize=8)
            fig.tight_layout()
            p = out / f"scenario_{sid:04d}_filter_{j + 1}.svg"
            fig.savefig(p, metadata={"Date": None})
            plt.close(fig)
            written.append(p)
    print(f"wrote {len(written)} figures to {out}")
    RunManifest("plot", argv, {"scenarios": ids}, {"data_seed": data.master_seed}) \
        .write(out / "plot.manifest.json", inputs=[args.bank, args.data],
               outputs=written)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="renfdi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a scenario dataset")
    s.add_argument("--config", help=f"JSON config (default ${CONFIG_ENV})")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--healthy-only", action="store_true")
    g.add_argument("--test", action="store_true",
                   help="test composition: sensor 1, sensor 2, sensors 1&2")
    s.add_argument("--count", type=int, help="scenarios per class")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train filters on a dataset")
    t.add_argument("--filter", default="all")
    t.add_argument("--data", "--scenarios", dest="data", required=True)
    t.add_argument("--config", help=f"JSON config (default ${CONFIG_ENV})")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="override training.epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="mean RMSE table of a bank")
    e.add_argument("--bank", required=True)
    e.add_argument("--data", "--scenarios", dest="data", required=True)
    e.add_argument("--k0", type=int, default=4)
    e.add_argument("--out", required=True, help="CSV path for the table")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--bank", help="checkpoint directory (default: random bank)")
    v.add_argument("--data", "--scenarios", dest="data")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--out", required=True, help="JSON report path")
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("infer", help="residual traces for one scenario")
    i.add_argument("--bank", required=True)
    i.add_argument("--data", "--scenarios", dest="data", required=True)
    i.add_argument("--scenario", type=int, required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    pl = sub.add_parser("plot", help="SVG residual panels")
    pl.add_argument("--bank", required=True)
    pl.add_argument("--data", "--scenarios", dest="data", required=True)
    pl.add_argument("--scenario", type=int, action="append")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"renfdi: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"renfdi: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"renfdi: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except rc.CertificateError as exc:
        print(f"renfdi: verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
