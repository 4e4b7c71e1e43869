"""Command-line entry point: train, eval, sweep, ablate, certify, smoke.

One INI file drives every subcommand, with sections [train], [eval] and
[certify]; command-line flags override file keys.  Outputs go under --out, or
$LYAPSHIELD_OUT, or ./runs.

Exit codes: 0 success, 1 property failure (smoke), 2 bad config or input,
3 training aborted by the divergence guard.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
OUT_ENV = "LYAPSHIELD_OUT"
INJECT_ENV = "LYAPSHIELD_SMOKE_INJECT"


@dataclass
class EvalSettings:
    payloads: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.5)
    regimes: tuple = (1.0, 5.0)
    seeds: tuple = (0, 1, 2, 3, 4)
    payload: float = 0.4
    alpha: float = 1.0
    T: float | None = None       # None: 5 s, or 4 s for the ideal preset


@dataclass
class CertifySettings:
    n_coverage: int = 4096
    budget: int = 4096
    eta: float = 0.05
    alpha: float | None = None   # None: the checkpoint's alpha


def _section(path, name, cls):
    """Dataclass from one INI section; unknown keys are rejected with location."""
    from .trainloop import ConfigError, _coerce
    if path is None:
        return cls()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    unknown = set(parser.sections()) - {"train", "eval", "certify"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    if not parser.has_section(name):
        return cls()
    known = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, value in parser.items(name):
        if key not in known:
            raise ConfigError(f"{path} [{name}]: unknown key {key!r}")
        out[key] = _coerce(key, value, known[key], f"{path} [{name}]")
    return cls(**out)


def _out_dir(args, sub):
    root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    d = root / sub
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _eval_T(ev: EvalSettings, cfg):
    return ev.T if ev.T is not None else (4.0 if cfg.preset == "ideal" else 5.0)


# -- subcommands ---------------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import trainloop as tl
    overrides = {"seed": args.seed}
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.config:
        cfg = tl.TrainConfig.from_ini(args.config, overrides=overrides)
    else:
        cfg = tl.TrainConfig.from_dict(overrides)
    out = _out_dir(args, "train")
    log = (lambda rec: print(json.dumps(rec, sort_keys=True), flush=True)) if args.verbose else None
    try:
        res = tl.run_training(cfg, out, log=log)
    except tl.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(f"warm-start relative error {res.warmstart_error:.4f}; cost limit {res.cost_limit:.4g}; "
          f"checkpoints in {out}")
    return EXIT_OK


def _load(args):
    from .trainloop import load_checkpoint
    return load_checkpoint(args.checkpoint)


def cmd_eval(args) -> int:
    from . import bench as bn
    from .trainloop import make_setup
    ck = _load(args)
    ev = _section(args.config, "eval", EvalSettings)
    setup = make_setup(ck.cfg)
    T = _eval_T(ev, ck.cfg)
    L = ck.learners
    report = {}
    for f in ev.regimes:
        base = bn.evaluate(setup, bn.EvalCondition(ev.payload, f, tuple(ev.seeds), T, bn.ABLATIONS["A0"][1]))
        meth = bn.evaluate(setup, bn.EvalCondition(ev.payload, f, tuple(ev.seeds), T, bn.ABLATIONS["A6"][1]),
                           L.agent, L.cert, L.model, ev.alpha)
        report[f"friction_x{f:g}"] = {
            "baseline_rmse": base["rmse_mean"], "baseline_std": base["rmse_std"],
            "method_rmse": meth["rmse_mean"], "method_std": meth["rmse_std"],
            "improvement": bn.improvement(base["rmse_mean"], meth["rmse_mean"]),
            "shield_frac": meth["shield_frac"],
        }
    report.update({"payload": ev.payload, "alpha": ev.alpha, "seeds": list(ev.seeds), "T": T})
    out = _out_dir(args, "eval")
    _write_json(out / "eval.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import bench as bn
    from .trainloop import TrainConfig, make_setup
    ev = _section(args.config, "eval", EvalSettings)
    if args.checkpoint is None and not args.baseline_only:
        print("sweep needs --checkpoint (or --baseline-only)", file=sys.stderr)
        return EXIT_CONFIG
    if args.baseline_only and args.checkpoint is None:
        cfg, L = TrainConfig(), None
    else:
        ck = _load(args)
        cfg, L = ck.cfg, ck.learners
    setup = make_setup(cfg)
    T = _eval_T(ev, cfg)
    kw = {} if L is None else dict(agent=L.agent, cert=L.cert, model=L.model)
    rows = bn.payload_sweep(setup, ev.payloads, ev.regimes, ev.seeds, T, alpha=ev.alpha,
                            method=not args.baseline_only, **kw)
    out = _out_dir(args, "sweep")
    (out / "sweep.csv").write_text(bn.rows_to_csv(rows))
    print(bn.rows_to_csv(rows), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import bench as bn
    from .trainloop import make_setup
    ck = _load(args)
    ev = _section(args.config, "eval", EvalSettings)
    setup = make_setup(ck.cfg)
    L = ck.learners
    res = bn.ablation_matrix(setup, L.agent, L.cert, L.model, ev.payload, ev.regimes, ev.seeds,
                             _eval_T(ev, ck.cfg), ev.alpha)
    out = _out_dir(args, "ablate")
    (out / "ablation.csv").write_text(bn.rows_to_csv(res["rows"]))
    _write_json(out / "ablation.json", res)
    print(bn.rows_to_csv(res["rows"]), end="")
    print(json.dumps(res["identities"], sort_keys=True))
    return EXIT_OK


def cmd_certify(args) -> int:
    from . import certify as cf
    ck = _load(args)
    cs = _section(args.config, "certify", CertifySettings)
    cert_rep, cov, zs = cf.certify_checkpoint(ck, cs.n_coverage, cs.budget, cs.eta, cs.alpha, args.seed,
                                              use_policy=not args.sl_only)
    report = {"drift_decay": cert_rep.to_dict(), "coverage": cov.to_dict(),
              "z_points": int(len(zs.x)), "z_tried": zs.tried, "policy": "SL" if args.sl_only else "SL+residual"}
    out = _out_dir(args, "certify")
    _write_json(out / "certify.json", report)
    print(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    return EXIT_OK


# -- smoke ---------------------------------------------------------------------------------------


def _inject(kind):
    """Test hook: deliberately break one piece of physics so smoke must fail."""
    from . import dynamics as dyn
    if kind == "friction-sign":
        orig = dyn.friction
        dyn.friction = lambda qd, p: -orig(qd, p)
    elif kind:
        raise ValueError(f"unknown injection {kind!r}")


def smoke_checks(seed=0):
    """Reduced-scale property suite; yields (name, ok, detail)."""
    from scipy.optimize import minimize

    from . import dynamics as dyn
    from . import lyapcert as lc
    from . import shield as sh
    from . import trainloop as tl

    rng = np.random.default_rng(seed)
    p = dyn.PRESETS["nominal"].with_(payload=0.4)

    q, qd, qdd = rng.normal(size=(200, 2)), rng.normal(size=(200, 2)), rng.normal(size=(200, 2))
    C, G = dyn.coriolis_gravity(q, qd, p)
    lhs = dyn.regressor(q, qd, qdd) @ dyn.base_parameters(p)
    rhs = dyn._matvec(dyn.mass_matrix(q, p), qdd) + dyn._matvec(C, qd) + G
    err = float(np.abs(lhs - rhs).max())
    yield "regressor identity", err < 1e-9, f"max err {err:.2e}"

    # unforced arm with friction must lose energy
    ref, lam = dyn.ReferenceTrajectory(), 5.0 * np.eye(2)
    x = dyn.make_state([0.3, -0.2], [1.5, -1.0], 0.0, ref, lam)
    E0 = dyn.mechanical_energy(x[dyn.Q], x[dyn.QD], p)
    for k in range(100):
        x = dyn.rk4_step(x, np.zeros(2), 0.01, p, ref, 0.01 * k, lam)
    E1 = dyn.mechanical_energy(x[dyn.Q], x[dyn.QD], p)
    yield "friction dissipates energy", E1 < E0, f"E {E0:.4f} -> {E1:.4f}"

    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 5))
        b, t0, c = rng.normal(size=n), rng.normal(size=n), float(rng.normal())
        co = sh.ShieldCoefficients(a=0.0, b=b, c=c, V=0.0)
        got = sh.project(t0, co, b_min=1e-12).tau_safe
        ref_qp = minimize(lambda u: 0.5 * np.sum((u - t0) ** 2), t0, jac=lambda u: u - t0, method="SLSQP",
                          constraints=[{"type": "ineq", "fun": lambda u: c - b @ u, "jac": lambda u: -b}],
                          options={"ftol": 1e-14, "maxiter": 200}).x
        worst = max(worst, float(np.abs(got - ref_qp).max()))
    yield "shield matches QP", worst < 1e-6, f"max diff {worst:.2e}"

    cert = lc.Certificate(width=32, seed=seed)
    xs = lc.sample_ball(rng, 20, 3.0)
    g = lc.grad_V(cert, xs)
    h = 1e-6
    fd = np.stack([(lc.eval_V(cert, xs + h * e) - lc.eval_V(cert, xs - h * e)) / (2 * h) for e in np.eye(10)], 1)
    rel = float(np.abs(g - fd).max() / np.abs(g).max())
    yield "certificate gradient", rel < 1e-6, f"rel err {rel:.2e}"

    err = lc.warmstart(cert, lambda r, n: lc.sample_consistent(r, n, 3.0, lam), 600, rng=rng)
    yield "warm-start regression", err < 0.15, f"rel err {err:.3f}"

    cfg = tl.TrainConfig(episodes=2, T=1.0, warmup_episodes=1, hidden=32, cert_width=32, pinn_width=32,
                         sac_updates=5, cert_updates=2, pinn_updates=5, warmstart_steps=200, batch=32, seed=seed)
    res = tl.run_training(cfg)
    finite = all(np.isfinite(v) for r in res.metrics for v in r.values() if isinstance(v, float))
    mu_ok = all(r["mu"] >= 0 for r in res.metrics)
    yield "2-episode training", finite and mu_ok and len(res.metrics) == 3, f"{len(res.metrics) - 1} episodes"


def cmd_smoke(args) -> int:
    _inject(os.environ.get(INJECT_ENV, ""))
    t0 = time.time()
    ok_all = True
    for name, ok, detail in smoke_checks(args.seed):
        ok_all &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", flush=True)
    print(f"smoke {'passed' if ok_all else 'FAILED'} in {time.time() - t0:.1f} s")
    return EXIT_OK if ok_all else EXIT_FAIL


# -- parser --------------------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="lyapshield", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, checkpoint=False, seed_required=False):
        p.add_argument("--config", help="INI file with [train], [eval], [certify] sections")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory (best/ or latest/)")
        return p

    tr = common(sub.add_parser("train", help="run the training loop"), seed_required=True)
    tr.add_argument("--episodes", type=int)
    tr.add_argument("--verbose", action="store_true", help="print each metrics record")
    tr.set_defaults(func=cmd_train)
    common(sub.add_parser("eval", help="baseline vs proposed at one payload"), checkpoint=True).set_defaults(func=cmd_eval)
    sw = common(sub.add_parser("sweep", help="payload sweep on both friction regimes"))
    sw.add_argument("--checkpoint")
    sw.add_argument("--baseline-only", action="store_true")
    sw.set_defaults(func=cmd_sweep)
    common(sub.add_parser("ablate", help="A0-A7 ablation matrix"), checkpoint=True).set_defaults(func=cmd_ablate)
    ce = common(sub.add_parser("certify", help="drift-decay and coverage reports"), checkpoint=True)
    ce.add_argument("--sl-only", action="store_true", help="certify the pure Slotine-Li policy")
    ce.set_defaults(func=cmd_certify)
    sm = sub.add_parser("smoke", help="reduced-scale property suite")
    sm.add_argument("--seed", type=int, default=0)
    sm.set_defaults(func=cmd_smoke)
    return ap


def main(argv=None) -> int:
    from .trainloop import ConfigError
    torch.set_default_dtype(torch.float64)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
