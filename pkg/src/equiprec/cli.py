"""Command-line entry point ``equiprec``.

Every subcommand writes machine-readable outputs plus a run manifest. A
single output file ``X`` gets a sidecar ``X.manifest.json``; a directory
output gets ``manifest.json`` inside it listing every file written there.

Exit codes: 0 success, 2 usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import io
import json
import os
import re
import sys

import numpy as np

from . import __version__, bench, costmodel, md, metrics, numerics, train
from . import model as mdl
from .errors import ContractError, EquiprecError
from .geometry import parse_xyz, write_xyz

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

COMPARE_COLUMNS = (
    "backend", "policy", "time_ms_mean", "time_ms_std", "speedup",
    "energy_eV", "energy_std_eV", "abs_dE_eV", "dE_pct",
    "force_eV_A", "force_std_eV_A", "abs_dF_eV_A", "dF_pct",
)
BLOCK_COLUMNS = ("dtype", "forward_ms_mean", "forward_ms_std", "backward_ms_mean", "speedup",
                 "max_abs_error", "max_rel_error")
REPORT_COLUMNS = ("file", "backend", "policy", "system", "n_atoms", "mean_ms", "std_ms",
                  "median_ms", "p95_ms", "speedup")
BACKENDS = {"ref": "reference_per_path", "fused": "fused_batched",
            "reference_per_path": "reference_per_path", "fused_batched": "fused_batched"}
SPECIES = {"diamond": (6,), "water": (1, 8)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting and suggests near-miss flags."""

    def error(self, message):
        bad = re.search(r"invalid choice: '([^']*)'", message)
        if bad:
            choices = [a for act in self._actions for a in (act.choices or ())]
            hint = difflib.get_close_matches(bad.group(1), choices, n=1)
            if hint:
                message += f"; did you mean {hint[0]!r}?"
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().rstrip()}")

    def parse_args(self, args=None, namespace=None):
        ns, extra = self.parse_known_args(args, namespace)
        if extra:
            raise UsageError(self._unknown_message(extra, ns))
        return ns

    def _unknown_message(self, extra, ns):
        parser = self
        if getattr(ns, "command", None) in _SUBPARSERS:
            parser = _SUBPARSERS[ns.command]
        known = [o for a in parser._actions for o in a.option_strings]
        flags = [t for t in extra if t.startswith("-")] or extra
        lines = []
        for token in flags:
            flag = token.split("=", 1)[0]
            hint = difflib.get_close_matches(flag, known, n=1) if flag.startswith("-") else []
            lines.append(f"unrecognized argument {token!r}"
                         + (f"; did you mean {hint[0]!r}?" if hint else ""))
        return f"{parser.prog}: error: " + "; ".join(lines)


_SUBPARSERS: dict = {}


# ------------------------------------------------------------------ helpers

def split_policies(text: str) -> list[str]:
    """Split a comma-joined policy list; ``key=value`` runs stay with their policy.

    ``fp64,fp32,default=fp32,linear=bf16,acc=fp32`` gives three policies.
    A ``;`` always separates.
    """
    out = []
    for chunk in text.split(";"):
        groups: list[list[str]] = []
        for token in (t.strip() for t in chunk.split(",")):
            if not token:
                continue
            key = token.split("=", 1)[0].strip() if "=" in token else None
            if key is not None and key != "default" and groups and "=" in groups[-1][-1]:
                groups[-1].append(token)
            else:
                groups.append([token])
        out.extend(",".join(g) for g in groups)
    for p in out:
        numerics.parse_policy(p)
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def build_manifest(args, outputs, inputs=()) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    env = bench.environment_info()
    return {
        "subcommand": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "policy": getattr(args, "policy", None) or getattr(args, "policies", None),
        "version": {k: env[k] for k in ("equiprec", "numpy", "python", "machine")},
        "threads": env["threads"],
        "timestamp": env["timestamp"],
        "inputs": {os.fspath(p): _sha256(p) for p in inputs},
        "outputs": [os.fspath(p) for p in outputs],
    }


def write_manifest(args, outputs, inputs=(), directory=None) -> str:
    outputs = [os.fspath(p) for p in outputs]
    if directory is not None:
        path = os.path.join(directory, "manifest.json")
    else:
        path = outputs[0] + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(build_manifest(args, outputs, inputs), fh, indent=2, sort_keys=True,
                  default=str)
    return path


def _write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _rows_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def _table(columns, rows) -> str:
    cells = [list(columns)] + [[_short(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)


def _short(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def system_spec(args) -> dict:
    if args.system == "diamond":
        spec = {"kind": "diamond", "supercell": args.supercell}
    else:
        spec = {"kind": "water", "molecules": args.molecules, "density": args.density}
    if args.perturb:
        spec.update(perturb=args.perturb, seed=args.seed)
    elif args.system == "water":
        spec["seed"] = args.seed
    return spec


def load_structure(args):
    if getattr(args, "input", None):
        with open(args.input, encoding="utf-8") as fh:
            frames = parse_xyz(fh.read())
        if not frames:
            raise ContractError(f"{args.input}: no frames")
        return frames[0]
    return bench.build_system(system_spec(args))


def model_setup(args, config=None):
    """Checkpoint weights when given, else seeded random weights on a toy config."""
    if getattr(args, "checkpoint", None):
        return mdl.load_checkpoint(args.checkpoint)
    if config is not None:
        species = tuple(sorted({int(z) for z in config.species}))
    else:
        species = SPECIES.get(args.system, (6,))
    cfg = toy_config(species, args.lmax, args.channels, args.seed, args.r_max)
    return cfg, mdl.ModelWeights.initialize(cfg)


def toy_config(species, lmax=1, channels=8, seed=0, r_max=4.0) -> mdl.ModelConfig:
    """Small configuration that runs every subcommand on one core in minutes."""
    return mdl.ModelConfig(channels=channels, sh_lmax=lmax, message_lmax=min(1, lmax),
                           correlation=2, radial_hidden=8, species_list=tuple(species),
                           r_max=r_max, seed=seed)


def _inputs(args):
    return [p for p in (getattr(args, "input", None), getattr(args, "checkpoint", None)) if p]


# ------------------------------------------------------------------ subcommands

def cmd_gen(args):
    config = load_structure(args)
    _write_text(args.out, write_xyz(config))
    write_manifest(args, [args.out])
    print(f"wrote {len(config)} atoms to {args.out}")


def cmd_bench_infer(args):
    config = load_structure(args)
    cfg, weights = model_setup(args, config)
    spec = bench.BenchmarkSpec(cfg=cfg, warmup_iters=args.warmup, timed_iters=args.iters,
                               seed=cfg.seed, backend=BACKENDS[args.backend],
                               policy=args.policy, system=_system_meta(args),
                               forces=args.forces)
    report = bench.run_inference_bench(spec, weights, config)
    bench.emit_report(report, args.format, args.out)
    write_manifest(args, [args.out], _inputs(args))
    print(f"mean {report.mean_ms:.4g} ms  std {report.std_ms:.3g} ms  "
          f"median {report.median_ms:.4g} ms  p95 {report.p95_ms:.4g} ms")


def _system_meta(args):
    if getattr(args, "input", None):
        return {"kind": "xyz", "path": os.fspath(args.input)}
    return system_spec(args)


def cmd_bench_block(args):
    config = load_structure(args)
    cfg, weights = model_setup(args, config)
    spec = bench.BenchmarkSpec(cfg=cfg, warmup_iters=args.warmup, timed_iters=args.iters,
                               seed=cfg.seed, backend=BACKENDS[args.backend],
                               system=_system_meta(args))
    records, _ = mdl.capture_blocks(config, weights, cfg, spec.backend)
    dtypes = [d.strip() for d in args.dtypes.split(",") if d.strip()]
    for d in dtypes:
        numerics.get_format(d)
    results = bench.run_block_bench(args.block, spec, records, weights, dtypes, args.layer)
    first = results[dtypes[0]].forward.mean_ms
    rows = [{"dtype": d, "forward_ms_mean": r.forward.mean_ms,
             "forward_ms_std": r.forward.std_ms, "backward_ms_mean": r.backward_mean_ms,
             "speedup": first / r.forward.mean_ms, "max_abs_error": r.max_abs_error,
             "max_rel_error": r.max_rel_error} for d, r in results.items()]
    _write_text(args.out, _rows_csv(BLOCK_COLUMNS, rows))
    write_manifest(args, [args.out], _inputs(args))
    print(_table(BLOCK_COLUMNS, rows))


def cmd_cost(args):
    config = load_structure(args)
    cfg, weights = model_setup(args, config)
    measured, stats = costmodel.count_forward(config, weights, cfg)
    constants = {}
    if args.calibrate:
        samples = []
        for k in (4, 8, 16):
            c = toy_config(cfg.species_list, cfg.sh_lmax, k, cfg.seed, cfg.r_max)
            m, s = costmodel.count_forward(config, mdl.ModelWeights.initialize(c), c)
            samples.append((c, s, m))
        constants = costmodel.calibrate(samples)
    predicted = costmodel.estimate_cost(cfg, stats, constants)
    rows = [{"block": b, "predicted": float(predicted.macs[b]), "measured": measured.macs[b]}
            for b in costmodel.BLOCKS]
    rows += [{"block": f"activations_{k}", "predicted": predicted.activations[k],
              "measured": measured.activations.get(k, 0)} for k in ("A", "B", "m")]
    _write_text(args.out, _rows_csv(("block", "predicted", "measured"), rows))
    write_manifest(args, [args.out], _inputs(args))
    print(_table(("block", "predicted", "measured"), rows))


def compare_rows(reports, policies, backend) -> list[dict]:
    """Summary rows in the documented column order; deltas are vs the first policy."""
    base = reports[0]
    e0, f0 = base.outputs["energy"], base.outputs["mean_force"]
    rows = []
    for policy, rep in zip(policies, reports):
        energy, force = rep.outputs["energy"], rep.outputs["mean_force"]
        d_e, d_f = abs(energy - e0), abs(force - f0)
        rows.append({
            "backend": backend, "policy": policy,
            "time_ms_mean": rep.mean_ms, "time_ms_std": rep.std_ms,
            "speedup": base.mean_ms / rep.mean_ms,
            "energy_eV": energy, "energy_std_eV": rep.outputs.get("energy_std", 0.0),
            "abs_dE_eV": d_e, "dE_pct": 100.0 * d_e / (abs(e0) + bench.EPS_STAB),
            "force_eV_A": force, "force_std_eV_A": rep.outputs.get("mean_force_std", 0.0),
            "abs_dF_eV_A": d_f, "dF_pct": 100.0 * d_f / (abs(f0) + bench.EPS_STAB),
        })
    return rows


def cmd_compare_precision(args):
    try:
        policies = split_policies(args.policies)
    except EquiprecError as exc:
        raise UsageError(f"equiprec compare-precision: error: bad --policies: {exc}") from None
    if len(policies) < 2:
        raise UsageError("equiprec compare-precision: error: at least two policies are required")
    config = load_structure(args)
    cfg, weights = model_setup(args, config)
    os.makedirs(args.out, exist_ok=True)
    reports, written = [], []
    for i, policy in enumerate(policies):
        spec = bench.BenchmarkSpec(cfg=cfg, warmup_iters=args.warmup, timed_iters=args.iters,
                                   seed=cfg.seed, backend=BACKENDS[args.backend],
                                   policy=policy, system=_system_meta(args), forces=True)
        rep = bench.run_inference_bench(spec, weights, config)
        path = os.path.join(args.out, f"report_{i}.json")
        bench.emit_report(rep, "json", path)
        reports.append(rep)
        written.append(path)
    rows = compare_rows(reports, policies, BACKENDS[args.backend])
    summary = os.path.join(args.out, "summary.csv")
    _write_text(summary, _rows_csv(COMPARE_COLUMNS, rows))
    written.append(summary)
    write_manifest(args, written, _inputs(args), directory=args.out)
    print(_table(COMPARE_COLUMNS, rows))


def cmd_md(args):
    config = load_structure(args)
    cfg, weights = model_setup(args, config)
    force_field = md.ModelForceField(weights, cfg, args.policy, BACKENDS[args.backend])
    spec = md.MDSpec(ensemble=args.ensemble, dt=args.dt, T_target=args.T,
                     friction=args.friction, p_target=args.p,
                     pressure_coupling_time=args.tau, steps=args.steps,
                     log_every=args.log_every, seed=args.seed, policy=args.policy,
                     backend=BACKENDS[args.backend], frame_every=args.frame_every,
                     log_pressure=args.log_pressure)
    os.makedirs(args.out, exist_ok=True)
    written = []
    try:
        log = md.run_md(spec, config, force_field, dump_dir=args.out)
    except EquiprecError:
        abort = os.path.join(args.out, "abort.xyz")
        if os.path.exists(abort):
            write_manifest(args, [abort], _inputs(args), directory=args.out)
        raise
    log_path = os.path.join(args.out, "log.csv")
    _write_text(log_path, log.to_csv())
    written.append(log_path)
    if log.frames:
        frames_path = os.path.join(args.out, "frames.xyz")
        _write_text(frames_path, write_xyz(_frame_configs(log, config)))
        written.append(frames_path)
    targets = {"T_K": args.T} if args.ensemble != "nve" else {}
    if args.ensemble == "npt":
        targets["p_bar"] = args.p
    obs = metrics.trajectory_observables(log, targets)
    etot = log.column("Etot_eV")
    obs["energy_drift_rel"] = float(abs(etot[-1] - etot[0]) / (abs(etot[0]) + bench.EPS_STAB))
    obs_path = os.path.join(args.out, "observables.json")
    _write_text(obs_path, json.dumps(obs, indent=2, sort_keys=True))
    written.append(obs_path)
    write_manifest(args, written, _inputs(args), directory=args.out)
    t = obs["T_K"]
    print(f"{len(log)} log rows; T {t['mean']:.2f} +- {t['std']:.2f} K; "
          f"Epot {obs['Epot_eV']['mean']:.6g} eV")


def _frame_configs(log, config):
    out = []
    for step, pos, cell in zip(log.frame_steps, log.frames, log.cells):
        out.append(config.copy(positions=pos, cell=cell, info={"step": step}))
    return out


def cmd_train(args):
    cfg = train.default_model_config(args.seed)
    if args.checkpoint:
        cfg, weights = mdl.load_checkpoint(args.checkpoint)
    else:
        weights = None
    train_set = train.synthetic_dataset(count=args.train_size, seed=args.seed + 1)
    val_set = train.synthetic_dataset(count=args.val_size, seed=args.seed + 2)
    test_set = train.synthetic_dataset(count=args.test_size, seed=args.seed + 3)
    tcfg = train.TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                             w_energy=args.w_energy, w_force=args.w_force, policy=args.policy,
                             momentum=args.momentum,
                             dynamic_loss_scaling=not args.no_loss_scaling, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    result = train.train(cfg, tcfg, train_set, val_set, weights=weights, out_dir=args.out,
                         eval_every=args.eval_every)
    test_row = {"epoch": tcfg.epochs, "split": "test",
                **train.evaluate(result.best_weights, cfg, test_set, tcfg.policy)}
    rows = result.history + [test_row]
    metrics_path = os.path.join(args.out, "metrics.csv")
    train.write_metrics_csv(metrics_path, rows)
    written = [metrics_path]
    best = os.path.join(args.out, "best.npz")
    if not os.path.exists(best):
        mdl.save_checkpoint(best, cfg, result.best_weights)
    written.append(best)
    write_manifest(args, written, _inputs(args), directory=args.out)
    events = {e: result.events.count(e) for e in ("overflow", "grow")}
    print(_table(train.RMSE_COLUMNS, rows))
    print(f"loss-scale events {events}; final scale {result.final_scale:g}")


def cmd_report(args):
    rows = []
    for path in args.reports:
        rep = bench.load_report(path)
        spec = rep.metadata.get("spec", {})
        rows.append({"file": os.fspath(path), "backend": spec.get("backend", ""),
                     "policy": spec.get("policy", ""),
                     "system": json.dumps(rep.metadata.get("system", {}), sort_keys=True),
                     "n_atoms": rep.metadata.get("n_atoms", ""), "mean_ms": rep.mean_ms,
                     "std_ms": rep.std_ms, "median_ms": rep.median_ms, "p95_ms": rep.p95_ms})
    for row in rows:
        row["speedup"] = rows[0]["mean_ms"] / row["mean_ms"]
    if args.out:
        _write_text(args.out, _rows_csv(REPORT_COLUMNS, rows))
        write_manifest(args, [args.out], args.reports)
    print(_table(REPORT_COLUMNS, rows))


# ------------------------------------------------------------------ parser

def _add_system(p, out_default=None):
    p.add_argument("--system", choices=("diamond", "water"), default="diamond")
    p.add_argument("--supercell", type=_positive_int, default=1,
                   help="diamond repeats per axis (8 N^3 atoms)")
    p.add_argument("--molecules", type=_positive_int, default=8)
    p.add_argument("--density", type=_positive_float, default=1.0, help="g/cm^3")
    p.add_argument("--perturb", type=float, default=0.0, help="random displacement in Å")
    p.add_argument("--input", help="extended-XYZ file used instead of a generated system")
    p.add_argument("--seed", type=int, default=42)
    if out_default is not None:
        p.add_argument("--out", default=out_default)


def _add_model(p):
    p.add_argument("--checkpoint", help="model checkpoint (.npz); default is random weights")
    p.add_argument("--lmax", type=int, default=1, help="spherical-harmonic order")
    p.add_argument("--channels", type=_positive_int, default=8)
    p.add_argument("--r-max", dest="r_max", type=_positive_float, default=4.0)
    p.add_argument("--backend", choices=sorted(BACKENDS), default="fused")


def _add_timing(p):
    p.add_argument("--warmup", type=_positive_int, default=100)
    p.add_argument("--iters", type=_positive_int, default=100)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _policy(text):
    try:
        numerics.parse_policy(text)
    except EquiprecError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="equiprec", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"equiprec {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)
        p.set_defaults(func=func)
        _SUBPARSERS[name] = p
        return p

    p = add("gen", cmd_gen, "write a diamond or water structure as extended XYZ")
    _add_system(p, "structure.xyz")

    p = add("bench-infer", cmd_bench_infer, "time model inference after warm-up")
    _add_system(p, "report.json")
    _add_model(p)
    _add_timing(p)
    p.add_argument("--policy", type=_policy, default="fp64")
    p.add_argument("--forces", action="store_true", help="time energy plus forces")
    p.add_argument("--format", choices=("json", "csv"), default="json")

    p = add("bench-block", cmd_bench_block, "replay one captured block under several dtypes")
    _add_system(p, "block.csv")
    _add_model(p)
    _add_timing(p)
    p.add_argument("--block", choices=sorted(bench.BLOCK_IDS), default="edge_embedding_A")
    p.add_argument("--dtypes", default="fp64,fp32,bf16,fp16")
    p.add_argument("--layer", type=int, default=1)

    p = add("cost", cmd_cost, "predicted vs counted MACs and activation sizes per block")
    _add_system(p, "cost.csv")
    _add_model(p)
    p.add_argument("--calibrate", action="store_true",
                   help="fit one constant per block over channels 4, 8, 16")

    p = add("compare-precision", cmd_compare_precision,
            "inference under several policies with deltas vs the first")
    _add_system(p, "compare")
    _add_model(p)
    _add_timing(p)
    p.add_argument("--policies", required=True,
                   help="comma list; key=value runs stay together, ';' always separates")

    p = add("md", cmd_md, "NVE, Langevin NVT or NPT dynamics with an observable log")
    _add_system(p, "traj")
    _add_model(p)
    p.add_argument("--ensemble", choices=("nve", "nvt", "npt"), default="nvt")
    p.add_argument("--dt", type=_positive_float, default=1.0, help="fs")
    p.add_argument("--T", type=_positive_float, default=300.0, help="K")
    p.add_argument("--p", type=float, default=1.013, help="bar")
    p.add_argument("--friction", type=float, default=0.01, help="1/fs")
    p.add_argument("--tau", type=_positive_float, default=1000.0,
                   help="pressure coupling time in fs")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--log-every", dest="log_every", type=_positive_int, default=10)
    p.add_argument("--frame-every", dest="frame_every", type=int, default=0,
                   help="frame dump interval in steps; 0 disables frames.xyz")
    p.add_argument("--log-pressure", dest="log_pressure", action="store_true")
    p.add_argument("--policy", type=_policy, default="fp64")

    p = add("train", cmd_train, "fit the model to Lennard-Jones labelled clusters")
    p.add_argument("--policy", type=_policy, default="fp64")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=_positive_float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int, default=10)
    p.add_argument("--w-energy", dest="w_energy", type=float, default=1.0)
    p.add_argument("--w-force", dest="w_force", type=float, default=100.0)
    p.add_argument("--no-loss-scaling", dest="no_loss_scaling", action="store_true")
    p.add_argument("--train-size", dest="train_size", type=_positive_int, default=50)
    p.add_argument("--val-size", dest="val_size", type=_positive_int, default=20)
    p.add_argument("--test-size", dest="test_size", type=_positive_int, default=30)
    p.add_argument("--eval-every", dest="eval_every", type=_positive_int, default=10)
    p.add_argument("--checkpoint", help="start from these weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="ckpt")

    p = add("report", cmd_report, "tabulate saved bench-infer JSON reports")
    p.add_argument("reports", nargs="+", help="report JSON files; speedup is vs the first")
    p.add_argument("--out", help="also write the table as CSV")
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        threads = os.environ.get("EQUIPREC_THREADS", "")
        if threads and not threads.isdigit():
            raise UsageError(f"EQUIPREC_THREADS must be a positive integer, got {threads!r}")
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # argparse exits 0 for --help and --version
        return int(exc.code or 0)
    except (EquiprecError, OSError) as exc:
        print(f"equiprec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
