"""``sas-lab`` command-line entry point.

    sas-lab <command> [--config FILE] [--section.key VALUE ...]

Commands: train, eval, sweep, audit-params, grad-check, timing.
Exit status: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import logging
import os
import sys

from . import checkpoint
from . import config as cfgmod
from . import evalbench as EB
from . import training as T
from .errors import ConfigError

COMMANDS = ("train", "eval", "sweep", "audit-params", "grad-check", "timing")
NUMERIC_AXES = ("head_count", "kernel_size", "expansion_ratio")


def _parser():
    p = argparse.ArgumentParser(prog="sas-lab", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(config_path, overrides):
    flat = cfgmod.parse_file(config_path) if config_path else {}
    flat.update(cfgmod.parse_overrides(overrides))
    return cfgmod.resolve(flat)


def _csv_list(text, key, cast=str):
    try:
        return [cast(v.strip()) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad list for {key}: {text!r}", key=key) from None


def cmd_train(r, out):
    out_dir = r.extras["run.out_dir"]
    records = T.train(r.model, r.train, r.extras["data.corpus"], out_dir)
    cfgmod.write_resolved(out_dir, r.model, r.train, r.extras)
    final = [x for x in records if x.split == "val"][-1]
    out(f"step {final.step}: val loss {final.loss:.6f} ppl {final.ppl:.6g} -> {out_dir}")


def cmd_eval(r, out):
    path = r.extras["run.checkpoint"]
    if not path:
        raise ConfigError("eval needs run.checkpoint", key="run.checkpoint")
    params, model_cfg, meta, _ = checkpoint.load_model(path)
    ds = T.DatasetView.from_bytes(T.load_corpus(r.extras["data.corpus"]), r.train.val_fraction)
    loss = T.evaluate(params, model_cfg, T.fixed_val_batches(ds, r.train))
    out_dir = r.extras["run.out_dir"]
    cfgmod.write_resolved(out_dir, model_cfg, r.train, r.extras)
    rec = T.RunRecord.make(int(meta.get("step", 0)), "val", loss, 0.0,
                           int(meta.get("step", 0)) * r.train.batch_size * r.train.seq_len, 0.0)
    with open(os.path.join(out_dir, "eval.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(T.RUN_CSV_HEADER) + "\n")
        fh.write(",".join(str(v) for v in rec.row()) + "\n")
    out(f"{path}: val loss {loss:.6f} ppl {rec.ppl:.6g}")


def cmd_sweep(r, out):
    axis = r.extras["sweep.axis"]
    values = _csv_list(r.extras["sweep.values"], "sweep.values", int if axis in NUMERIC_AXES else str)
    seeds = _csv_list(r.extras["sweep.seeds"], "sweep.seeds", int)
    spec = EB.SweepSpec(axis=axis, values=values, model=r.model, train=r.train, seeds=seeds,
                        name=r.extras["sweep.name"])
    out_root = r.extras["run.out_dir"]
    EB.validate_spec(spec)
    cfgmod.write_resolved(os.path.join(out_root, spec.name), r.model, r.train, r.extras)
    rows = EB.run_sweep(spec, out_root, r.extras["data.corpus"], workers=r.extras["sweep.workers"])
    for row in rows:
        if row["seed"] == "median":
            out(f"{axis}={row['axis_value']}: median final val loss {row['final_loss']:.6f} "
                f"(extra weights {row['params_extra_w']})")
    out(f"summary -> {os.path.join(out_root, spec.name, 'summary.csv')}")


def cmd_audit(r, out):
    EB.audit_params_cli(r.model, out=out)


def cmd_grad_check(r, out):
    passed, _ = EB.grad_check_cli(r.model, tolerance=r.extras["gradcheck.tolerance"],
                                  seed=r.extras["gradcheck.seed"], out=out)
    return 0 if passed else 1


def cmd_timing(r, out):
    rep = EB.timing_report(r.model, r.train, steps=r.extras["timing.steps"], warmup=r.extras["timing.warmup"])
    for k, v in rep.items():
        out(f"{k}: {v:.3f}" if isinstance(v, float) else f"{k}: {v}")


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "audit-params": cmd_audit,
    "grad-check": cmd_grad_check,
    "timing": cmd_timing,
}


def main(argv=None, out=print):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = load_config(args.config, rest)
        code = HANDLERS[args.command](resolved, out)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"sas-lab: configuration error{key}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"sas-lab: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"sas-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
