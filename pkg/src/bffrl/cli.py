"""``bffrl`` command-line front end.

Exit codes: 0 success, 2 validation, 3 divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .approximator import init_params, save_checkpoint
from .bias_lab import BiasEstimate, epsilon_sweep, estimate_gap
from .config import ConfigError, ExperimentConfig, SweepBlock, load
from .env import ContinuousEnvSpec, save_trajectory, simulate
from .errors import BFFError, DivergenceError, EstimatorError, SpecError
from .residual import Estimator
from .tabular import exact_value
from .trainer import (
    TrainConfig,
    cached_reference,
    eta_diagnostic,
    train,
    value_profile_csv,
)

log = logging.getLogger("bffrl")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
OUT_ENV_VAR = "BFFRL_OUT"
CACHE_ENV_VAR = "BFFRL_CACHE"
CONVERGED_BELOW = 0.5


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    input_digest: str
    tool_version: str
    duration_s: float
    outputs: list

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        _atomic_write(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _input_digest(raw_inputs: list[bytes]) -> str:
    # git-style: hash of "blob <len>\0<content>" per input, then of the concatenation
    h = hashlib.sha256()
    for raw in raw_inputs:
        h.update(hashlib.sha1(b"blob %d\0" % len(raw) + raw).digest())
    return h.hexdigest()


class _Run:
    """Collects outputs of one command and writes the manifest when it succeeds."""

    def __init__(self, command: str, out_dir: Path, configs: list[ExperimentConfig], raws: list[bytes]):
        self.command = command
        self.out_dir = out_dir
        self.configs = configs
        self.raws = raws
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return path

    def finish(self) -> Path:
        cfg_hash = hashlib.sha256("".join(c.digest() for c in self.configs).encode()).hexdigest()
        outputs = [{"path": str(p.relative_to(self.out_dir)), "sha256": _sha256(p)} for p in self.outputs]
        manifest = RunManifest(self.command, cfg_hash, _input_digest(self.raws), __version__,
                               round(time.perf_counter() - self.t0, 3), outputs)
        return manifest.write(self.out_dir)


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output.directory:
        return Path(cfg.output.directory)
    return Path(os.environ.get(OUT_ENV_VAR, "bffrl-out"))


def _load(args, which=None) -> tuple[ExperimentConfig, bytes]:
    cfg, raw = load(which or args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    return cfg, raw


def _trajectory(cfg: ExperimentConfig, env):
    return simulate(env, cfg.trajectory.s0, cfg.trajectory.length, cfg.master_seed)


def cmd_simulate(args) -> int:
    cfg, raw = _load(args)
    env = cfg.env_spec()
    run = _Run("simulate", _out_dir(args, cfg), [cfg], [raw])
    traj = _trajectory(cfg, env)
    run.add(save_trajectory(run.out_dir / "trajectory.csv", traj))
    run.finish()
    print(f"wrote {traj.length + 1} states to {run.out_dir / 'trajectory.csv'}")
    return EXIT_OK


def cmd_solve_exact(args) -> int:
    cfg, raw = _load(args)
    env = cfg.env_spec()
    if env.kind != "discrete":
        raise SpecError("exact solve unavailable for continuous environments")
    run = _Run("solve-exact", _out_dir(args, cfg), [cfg], [raw])
    v = exact_value(env)
    path = run.out_dir / "exact_values.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "v_reference"])
        for i, x in enumerate(v.tolist()):
            w.writerow([i, repr(x)])
    run.add(path)
    run.finish()
    print(f"wrote {env.n} exact values to {path}")
    return EXIT_OK


def _runs(cfg: ExperimentConfig):
    """``(run name, TrainConfig)`` for every estimator (and dual seed) in ``cfg``."""
    tb = cfg.trainer
    for est in tb.estimators():
        base = dict(tau=tb.tau, batch_size=tb.batch_size, epochs=tb.epochs, seed=cfg.master_seed,
                    eval_every=tb.eval_every, beta=tb.beta)
        if est is Estimator.PRIMAL_DUAL and tb.dual_seeds:
            for ds in tb.dual_seeds:
                yield f"{est.value}_dual{ds}", TrainConfig(est, dual_seed=int(ds), **base)
        else:
            yield est.value, TrainConfig(est, **base)


def _check_oracle(cfg: ExperimentConfig, allow: bool):
    for est in cfg.trainer.estimators():
        if est.is_oracle and not allow:
            raise EstimatorError(f"estimator {est.value!r} uses model access; pass --allow-oracle to run it")


def _train_config(cfg: ExperimentConfig, run: _Run, allow_oracle: bool, prefix: str = "") -> list[dict]:
    _check_oracle(cfg, allow_oracle)
    env = cfg.env_spec()
    traj = _trajectory(cfg, env)
    rb = cfg.reference
    params = {} if env.kind == "discrete" and rb.kind in (None, "exact-tabular") else dict(
        length=rb.length, tau=rb.tau, batch_size=rb.batch_size, epochs=rb.epochs, seed=rb.seed)
    cache = Path(os.environ.get(CACHE_ENV_VAR) or run.out_dir / ".cache")
    ref = cached_reference(env, cache, rb.kind, **params)
    n_states = env.n if env.kind == "discrete" else None
    rows = []
    runs = list(_runs(cfg))
    if env.kind == "continuous":
        diag = eta_diagnostic(runs[0][1], env, emit=False)
        if not diag.ok:
            log.warning("%s", diag.message)
    for name, tc in runs:
        if cfg.approximator.kind == "tabular":
            approx = init_params("tabular", n=env.n)
        else:
            approx = init_params("mlp", cfg.init_seed, n_states=n_states)
        t0 = time.perf_counter()
        approx, trace = train(env, traj, approx, tc, ref, model_free=not allow_oracle)
        log.info("%s%s: final relative error %.4g (%.1fs)", prefix, name, trace.final_relative,
                 time.perf_counter() - t0)
        d = run.out_dir / f"{prefix}{name}"
        d.mkdir(parents=True, exist_ok=True)
        run.add(trace.to_csv(d / "trace.csv"))
        run.add(value_profile_csv(d / "profile.csv", approx, ref))
        run.add(save_checkpoint(d / "checkpoint.npz", approx, cfg.init_seed))
        rows.append({"run": f"{prefix}{name}", "estimator": tc.estimator.value, "trace": trace})
    return rows


def cmd_train(args) -> int:
    cfg, raw = _load(args)
    run = _Run("train", _out_dir(args, cfg), [cfg], [raw])
    rows = _train_config(cfg, run, args.allow_oracle)
    run.finish()
    for r in rows:
        print(f"{r['run']:<28} final rel_error {r['trace'].final_relative:.6g}")
    return EXIT_OK


def _shared_key(cfg: ExperimentConfig):
    return (json.dumps(dataclasses.asdict(cfg.environment), sort_keys=True),
            json.dumps(dataclasses.asdict(cfg.trajectory), sort_keys=True), cfg.master_seed)


def cmd_compare(args) -> int:
    loaded = [_load(args, c) for c in args.config]
    cfgs = [c for c, _ in loaded]
    if len(cfgs) == 1 and len(list(_runs(cfgs[0]))) < 2:
        raise ConfigError("compare needs at least two runs (several configs or several estimators)")
    if len({_shared_key(c) for c in cfgs}) != 1:
        raise ConfigError("compare: configs differ in environment, trajectory or master_seed")
    run = _Run("compare", _out_dir(args, cfgs[0]), cfgs, [r for _, r in loaded])
    rows = []
    for k, cfg in enumerate(cfgs):
        prefix = f"{k}_{cfg.name}/" if len(cfgs) > 1 else ""
        rows += _train_config(cfg, run, args.allow_oracle, prefix)
    matched = min(r["trace"].steps[-1] for r in rows)
    table = []
    for r in rows:
        tr = r["trace"]
        table.append({"run": r["run"], "estimator": r["estimator"], "steps": tr.steps[-1],
                      "final_rel_error": tr.final_relative, "matched_step": matched,
                      "rel_error_at_matched": tr.relative_at(matched),
                      "converged": tr.final_relative < args.threshold})
    table.sort(key=lambda t: (t["final_rel_error"], t["run"]))
    path = run.out_dir / "compare.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(table[0]))
        for t in table:
            w.writerow([repr(v) if isinstance(v, float) else v for v in t.values()])
    run.add(path)
    run.finish()
    print(f"{'run':<28} {'final_rel':>10} {f'rel@{matched}':>12}  converged(<{args.threshold:g})")
    for t in table:
        print(f"{t['run']:<28} {t['final_rel_error']:>10.4g} {t['rel_error_at_matched']:>12.4g}  "
              f"{'yes' if t['converged'] else 'no'}")
    return EXIT_OK


def _synthetic_gap(env, approx, n_outer, n_inner, seed) -> BiasEstimate:
    g = 0.37 * env.epsilon ** 2
    return BiasEstimate(0.0, g, g, 0.0, n_outer, n_inner)


def cmd_bias_sweep(args) -> int:
    cfg, raw = _load(args)
    env = cfg.env_spec()
    if not isinstance(env, ContinuousEnvSpec):
        raise ConfigError("environment.kind: bias-sweep needs a continuous environment")
    sb = cfg.bias_sweep or SweepBlock()
    run = _Run("bias-sweep", _out_dir(args, cfg), [cfg], [raw])
    approx = init_params("mlp", sb.init_seed)
    estimator = _synthetic_gap if args.self_test else None
    seed = cfg.master_seed if args.seed is not None else sb.seed
    res = epsilon_sweep(env, approx, sb.eps, sb.n_outer, sb.n_inner, seed, gap_estimator=estimator)
    summary = res.summary()
    summary["self_test"] = bool(args.self_test)
    if sb.control_drift and not args.self_test:
        ctrl_env = dataclasses.replace(env, drift=sb.control_drift, diffusion=sb.control_diffusion or env.diffusion,
                                       epsilon=0.1)
        ctrl = estimate_gap(ctrl_env, approx, sb.n_outer, sb.n_inner, seed)
        base = estimate_gap(dataclasses.replace(env, epsilon=0.1), approx, sb.n_outer, sb.n_inner, seed)
        summary["control"] = {"eps": 0.1, "gap": ctrl.gap, "std_err": ctrl.std_err,
                              "default_gap": base.gap, "default_std_err": base.std_err,
                              "ratio": abs(base.gap) / max(abs(ctrl.gap), 1e-300)}
    run.add(res.to_csv(run.out_dir / "sweep.csv"))
    path = run.out_dir / "sweep.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    run.add(path)
    run.finish()
    for e, g, s in zip(res.eps, res.gaps, res.std_errs):
        print(f"eps={e:<8g} gap={g: .4e} +/- {s:.2e}")
    print(f"slope={res.slope:.6f} intercept={res.intercept:.6f}")
    if "control" in summary:
        c = summary["control"]
        print(f"control gap at eps=0.1: {c['gap']:.3e} (default {c['default_gap']:.3e}, ratio {c['ratio']:.1f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bffrl", description="Bellman residual minimisation experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi=False):
        if multi:
            sp.add_argument("--config", required=True, nargs="+", help="config files or bundled names")
        else:
            sp.add_argument("--config", required=True, help="config file or bundled config name")
        sp.add_argument("--out", help=f"output directory (default: config, then ${OUT_ENV_VAR})")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")

    sp = sub.add_parser("simulate", help="simulate a trajectory")
    common(sp)
    sp.set_defaults(func=cmd_simulate)
    sp = sub.add_parser("solve-exact", help="solve (I - gamma P) V = r for a discrete chain")
    common(sp)
    sp.set_defaults(func=cmd_solve_exact)
    for name, func, multi in (("train", cmd_train, False), ("compare", cmd_compare, True)):
        sp = sub.add_parser(name, help=f"{name} estimators on a simulated trajectory")
        common(sp, multi)
        sp.add_argument("--allow-oracle", action="store_true", help="permit the model-access estimator")
        if multi:
            sp.add_argument("--threshold", type=float, default=CONVERGED_BELOW,
                            help="relative error counted as converged")
        sp.set_defaults(func=func)
    sp = sub.add_parser("bias-sweep", help="fit the BFF bias power law in eps")
    common(sp)
    sp.add_argument("--self-test", action="store_true", help="use an injected c*eps^2 gap to check the fitter")
    sp.set_defaults(func=cmd_bias_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except BFFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
