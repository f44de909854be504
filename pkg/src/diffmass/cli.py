"""``diffmass`` command line.

Every command writes its data files into ``--out-dir`` (default: the
``DIFFMASS_OUT_DIR`` environment variable, else the current directory) and
finishes by writing ``<stem>.manifest.json``. A file set is valid once its
manifest exists. ``diffmass rerun MANIFEST`` repeats the run into a fresh
directory and compares the data files byte for byte.

Exit codes: 0 ok, 1 check failed, 2 bad input, 3 simulation diverged,
4 identification failed.
"""
from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import AlignmentError, gradcheck
from .dynamics import DivergenceError, DynamicsError, Integrator, Trajectory
from .geomcore import MeshModel, box_mesh
from .identify import (IdentificationError, MassUnobservable, Schedule, ablate_integrators, config_for,
                       identify_mass, synthesize_real_trajectory)
from .policy import (STANDARD_MASSES, Demo, EnvFixture, GraspEnvConfig, GraspMLPParams, NetworkPolicy,
                     NonFiniteLoss, OraclePolicy, PolicyError, TrainConfig, cross_mass_eval, demos_from_jsonl,
                     demos_to_jsonl, generate_demos, phase1_train, phase2_train)
from .scenario import NoiseModel, Scenario, ScenarioError, load_scenario

OUT_DIR_ENV = "DIFFMASS_OUT_DIR"

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_DIVERGED, EXIT_IDENT = 0, 1, 2, 3, 4


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# output plumbing

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _strip_columns(data: bytes, columns: list[str]) -> bytes:
    rows = list(csv.reader(io.StringIO(data.decode())))
    if not rows:
        return data
    keep = [i for i, c in enumerate(rows[0]) if c not in columns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([r[i] for i in keep if i < len(r)])
    return buf.getvalue().encode()


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects the outputs of one command and writes its manifest last."""

    def __init__(self, args: argparse.Namespace, stem: str):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.stem = stem
        self.outputs: dict[str, dict] = {}
        self.config: dict = {}
        self.seeds: dict = {}
        self.timing: dict = {}
        self.t0 = time.perf_counter()

    def write(self, name: str, data: str | bytes, volatile_columns: list[str] | None = None) -> Path:
        raw = data.encode() if isinstance(data, str) else data
        path = self.out_dir / name
        _atomic_write(path, raw)
        entry = {"sha256": _digest(raw)}
        if volatile_columns:
            entry["volatile_columns"] = list(volatile_columns)
            entry["stable_sha256"] = _digest(_strip_columns(raw, volatile_columns))
        self.outputs[name] = entry
        return path

    def finish(self) -> Path:
        args = {k: v for k, v in vars(self.args).items() if k not in ("func", "out_dir")}
        manifest = {
            "command": self.args.command,
            "args": args,
            "argv": getattr(self.args, "_argv", None),
            "config": self.config,
            "seeds": self.seeds,
            "version": __version__,
            "wall_clock": time.perf_counter() - self.t0,
            "timing": self.timing,
            "volatile": ["wall_clock", "timing"],
            "outputs": self.outputs,
        }
        path = self.out_dir / f"{self.stem}.manifest.json"
        _atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        return path


def _say(args, human: str, payload: dict | None = None) -> None:
    if args.json:
        print(json.dumps(payload if payload is not None else {"message": human}, sort_keys=True))
    else:
        print(human)


def _err(msg: str) -> None:
    print(f"diffmass: {msg}", file=sys.stderr)


def _abspath(p: str | None) -> str | None:
    return None if p is None else str(Path(p).resolve())


# ---------------------------------------------------------------------------
# shared input handling

def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario)
    over = {}
    if getattr(args, "k_e", None) is not None:
        over["k_e"] = args.k_e
    if getattr(args, "k_d", None) is not None:
        over["k_d"] = args.k_d
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if getattr(args, "integrator", None) is not None:
        over["integrator"] = Integrator(args.integrator)
    return sc.with_(**over) if over else sc


def _noise(args, sc: Scenario, seed_offset: int = 0) -> NoiseModel:
    """Flag > scenario file > default, per field."""
    n = sc.noise
    pick = lambda flag, cur: cur if flag is None else flag  # noqa: E731
    seed = n.seed if args.seed is None else args.seed
    return NoiseModel(pick(getattr(args, "pos_sigma", None), n.pos_sigma), pick(getattr(args, "z_bias", None), n.z_bias),
                      pick(getattr(args, "quat_sigma", None), n.quat_sigma), seed + seed_offset)


def _read_traj(path: str) -> Trajectory:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return Trajectory.from_jsonl(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a trajectory file ({exc})") from None


def _stem(args, default: str) -> str:
    return args.name or default


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    sc = _scenario(args)
    mass = sc.true_mass if args.mass is None else args.mass
    run = Run(args, _stem(args, f"{sc.name}_sim"))
    run.config = {"scenario": sc.to_dict(), "mass_kg": mass}
    try:
        traj, _ = sc.simulate(mass)
    except DivergenceError as exc:
        _err(f"diverged at step {exc.step}: {exc.reason}")
        return EXIT_DIVERGED
    run.write(f"{run.stem}.jsonl", traj.to_jsonl())
    run.finish()
    _say(args, f"wrote {len(traj)} samples", {"samples": len(traj), "path": str(run.out_dir / f"{run.stem}.jsonl")})
    return EXIT_OK


def cmd_gen_data(args) -> int:
    sc = _scenario(args)
    if args.kind == "trajectory":
        noise = _noise(args, sc)
        mass = sc.true_mass if args.mass is None else args.mass
        run = Run(args, _stem(args, f"{sc.name}_real"))
        run.config = {"scenario": sc.to_dict(), "noise": asdict(noise), "mass_kg": mass}
        run.seeds = {"noise": noise.seed}
        try:
            traj = synthesize_real_trajectory(sc, mass, noise)
        except DivergenceError as exc:
            _err(f"reference rollout diverged at step {exc.step}: {exc.reason}")
            return EXIT_DIVERGED
        run.write(f"{run.stem}.jsonl", traj.to_jsonl())
        count = len(traj)
    else:
        if args.n < 1:
            raise InputError("--n must be >= 1")
        masses = args.masses or [sc.true_mass]
        env = _env_config(args.env_config)
        seed = 0 if args.seed is None else args.seed
        run = Run(args, _stem(args, f"{sc.name}_demos"))
        run.config = {"mesh": sc.to_dict()["mesh"], "masses": masses, "n": args.n, "env": asdict(env)}
        run.seeds = {"demos": seed}
        demos = generate_demos(sc.mesh, masses, args.n, seed, env)
        run.write(f"{run.stem}.jsonl", demos_to_jsonl(demos))
        count = len(demos)
    run.finish()
    _say(args, f"wrote {count} records", {"records": count, "kind": args.kind})
    return EXIT_OK


def _observations(args, sc: Scenario, n_seeds: int) -> list[tuple[int | None, Trajectory]]:
    if args.real is not None:
        if n_seeds > 1:
            raise InputError("--seeds needs synthesized observations; drop the REAL argument")
        return [(None, _read_traj(args.real))]
    out = []
    for i in range(n_seeds):
        noise = _noise(args, sc, i)
        out.append((noise.seed, synthesize_real_trajectory(sc, None, noise)))
    return out


def _ident_config(args, sc: Scenario):
    over = {}
    for flag, key in (("m_init", "m_init"), ("lr", "lr"), ("max_epochs", "max_epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return config_for(sc, args.schedule, **over)


def _identify_one(sc, real, cfg):
    return identify_mass(sc, real, cfg)


def _ablate_one(sc, real, cfg):
    return ablate_integrators(sc, real, cfg)


def _fan_out(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(jobs, len(tasks))) as ex:
            return list(ex.map(fn, *zip(*tasks)))
    return [fn(*t) for t in tasks]


def cmd_identify(args) -> int:
    sc = _scenario(args)
    cfg = _ident_config(args, sc)
    obs = _observations(args, sc, args.seeds)
    run = Run(args, _stem(args, f"{sc.name}_identify"))
    run.config = {"scenario": sc.to_dict(), "identify": _cfg_dict(cfg)}
    run.seeds = {"noise": [s for s, _ in obs]}
    reports = _fan_out(_identify_one, [(sc, real, cfg) for _, real in obs], args.jobs)
    if len(obs) == 1:
        rep = reports[0]
        run.write(f"{run.stem}_report.json", rep.to_json(timing=False) + "\n")
        run.write(f"{run.stem}_curve.csv", rep.to_csv())
        run.timing = {"wall_clock": rep.wall_clock, "sec_per_iter": rep.sec_per_iter}
        run.finish()
        _say(args, f"m_hat = {rep.m_hat:.6g} kg ({rep.status}, {rep.epochs_run} epochs)",
             {"m_hat": rep.m_hat, "status": rep.status, "epochs": rep.epochs_run, "converged": rep.converged})
        return EXIT_OK
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "m_hat", "true_mass", "rel_err", "epochs", "status"])
    for (seed, _), rep in zip(obs, reports):
        w.writerow([seed, repr(rep.m_hat), repr(sc.true_mass), repr(abs(rep.m_hat - sc.true_mass) / sc.true_mass),
                    rep.epochs_run, rep.status])
        run.write(f"{run.stem}_seed{seed}_curve.csv", rep.to_csv())
    run.write(f"{run.stem}_seeds.csv", buf.getvalue())
    run.timing = {"sec_per_iter": [r.sec_per_iter for r in reports]}
    run.finish()
    errs = [abs(r.m_hat - sc.true_mass) / sc.true_mass for r in reports]
    _say(args, f"median rel err {float(np.median(errs)):.4f} over {len(errs)} seeds",
         {"m_hat": [r.m_hat for r in reports], "median_rel_err": float(np.median(errs))})
    return EXIT_OK


def _cfg_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: (v.value if hasattr(v, "value") else v) for k, v in d.items()}


def cmd_ablate(args) -> int:
    sc = _scenario(args)
    cfg = _ident_config(args, sc)
    obs = _observations(args, sc, args.seeds)
    run = Run(args, _stem(args, f"{sc.name}_ablate"))
    run.config = {"scenario": sc.to_dict(), "identify": _cfg_dict(cfg)}
    run.seeds = {"noise": [s for s, _ in obs]}
    results = _fan_out(_ablate_one, [(sc, real, cfg) for _, real in obs], args.jobs)
    if len(results) == 1:
        text = results[0].to_csv()
    else:
        parts = []
        for k, ((seed, _), res) in enumerate(zip(obs, results)):
            lines = res.to_csv().splitlines()
            if k == 0:
                parts.append("seed," + lines[0])
            parts += [f"{seed},{ln}" for ln in lines[1:]]
        text = "\n".join(parts) + "\n"
    run.write(f"{run.stem}.csv", text, volatile_columns=["sec_per_iter"])
    run.finish()
    wins = sum(abs(r.semi.m_hat - sc.true_mass) < (abs(r.explicit.m_hat - sc.true_mass) if r.explicit else np.inf)
               for r in results)
    divs = sum(r.explicit_divergences for r in results)
    _say(args, f"semi-implicit closer in {wins}/{len(results)}; explicit divergences: {divs}",
         {"semi_wins": int(wins), "runs": len(results), "explicit_divergences": int(divs)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sc = _scenario(args)
    mass = args.mass if args.mass is not None else 1.25 * sc.true_mass
    if args.real is not None:
        real = _read_traj(args.real)
    else:
        real = synthesize_real_trajectory(sc, None, NoiseModel())
    run = Run(args, _stem(args, f"{sc.name}_gradcheck"))
    run.config = {"scenario": sc.to_dict(), "mass_kg": mass, "threshold": args.threshold, "rel_h": args.rel_h}
    rep = gradcheck(sc.initial_state(), sc.body(mass), sc.schedule, sc.sim_config(Integrator.SEMI_IMPLICIT), real,
                    rel_h=args.rel_h, q_weight=sc.q_weight)
    ok = rep.rel_err <= args.threshold
    run.write(f"{run.stem}.json", rep.to_json() + "\n")
    run.finish()
    payload = {"grad": rep.grad, "fd_grad": rep.fd_grad, "rel_err": rep.rel_err, "loss": rep.loss, "pass": ok}
    _say(args, f"grad {rep.grad:.12g}  fd_grad {rep.fd_grad:.12g}  rel_err {rep.rel_err:.3e}  "
               f"{'PASS' if ok else 'FAIL'}", payload)
    return EXIT_OK if ok else EXIT_CHECK


def _env_config(path: str | None) -> GraspEnvConfig:
    if path is None:
        return GraspEnvConfig()
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    env = d.get("env", d)
    known = set(GraspEnvConfig.__dataclass_fields__)
    extra = set(env) - known - {"mesh", "masses"}
    if extra:
        raise InputError(f"{path}: unknown env keys {sorted(extra)}")
    vals = {k: (tuple(v) if isinstance(v, list) else v) for k, v in env.items() if k in known}
    return GraspEnvConfig(**vals)


def _mesh_for(demos: list[Demo]) -> MeshModel:
    return MeshModel(demos[0].vertices, np.zeros((0, 3), dtype=int), name="demo")


def _curve_rows(phase: int, curves: dict) -> list[list]:
    keys = ["total", "action", "reward", "force"]
    n = len(curves["total"])
    return [[phase, e] + [repr(curves[k][e]) if k in curves else "" for k in keys] for e in range(n)]


def cmd_train_policy(args) -> int:
    try:
        demos = demos_from_jsonl(Path(args.demos).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {args.demos}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{args.demos}: bad demo record ({exc})") from None
    if not demos:
        raise InputError(f"{args.demos}: dataset is empty")
    env = _env_config(args.env_config)
    seed = 0 if args.seed is None else args.seed
    over = {"seed": seed, "env": env}
    for flag in ("epochs_phase1", "epochs_phase2", "lr", "lr_phase2", "batch_size", "bands"):
        v = getattr(args, flag)
        if v is not None:
            over[flag] = v
    cfg = TrainConfig(**over)
    masses = sorted({d.mass for d in demos})
    run = Run(args, _stem(args, "policy"))
    run.config = {"train": {k: (asdict(v) if k == "env" else v) for k, v in cfg.__dict__.items()},
                  "masses": masses, "demos": len(demos)}
    run.seeds = {"train": seed}
    rows = []
    if args.phase in ("1", "both"):
        p = GraspMLPParams.init(cfg.bands, seed, m_ref=cfg.m_ref)
        p, c1 = phase1_train(p, demos, cfg)
        rows += _curve_rows(1, c1)
    else:
        if args.init_params is None:
            raise InputError("--phase 2 needs --init-params from a phase-1 run")
        p = _load_params(args.init_params)
    if args.phase in ("2", "both"):
        mesh = _mesh_for(demos)
        p, c2 = phase2_train(p, [EnvFixture(mesh, m) for m in masses], cfg)
        rows += _curve_rows(2, c2)
    p.meta["train_masses"] = masses
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "epoch", "total", "action", "reward", "force"])
    w.writerows(rows)
    run.write(f"{run.stem}.params", p.to_bytes())
    run.write(f"{run.stem}_loss.csv", buf.getvalue())
    run.finish()
    tail = ""
    if rows:
        ph, ep, total = rows[-1][:3]
        tail = f"; phase {ph} epoch {ep} loss {float(total):.3g}"
    _say(args, f"trained on {len(demos)} demos, masses {masses}{tail}",
         {"demos": len(demos), "masses": masses, "params": str(run.out_dir / f"{run.stem}.params")})
    return EXIT_OK


def _load_params(path: str) -> GraspMLPParams:
    try:
        return GraspMLPParams.from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{path}: bad params file ({exc})") from None


def cmd_eval_policy(args) -> int:
    env = _env_config(args.env_config)
    mesh = box_mesh(tuple(args.box), name="eval_box")
    masses = args.masses or list(STANDARD_MASSES)
    seed = 0 if args.seed is None else args.seed
    if args.oracle:
        policies = [(m, OraclePolicy(mesh, env)) for m in masses]
        condition = "eval"
        sources = ["oracle"] * len(masses)
    else:
        paths = sorted(glob.glob(args.params))
        if not paths:
            raise InputError(f"no params files match {args.params!r}")
        policies, sources = [], []
        for path in paths:
            p = _load_params(path)
            tm = p.meta.get("train_masses", [])
            if args.condition == "train" and len(tm) != 1:
                raise InputError(f"{path}: needs exactly one training mass to condition on (has {tm})")
            policies.append((float(tm[0]) if len(tm) == 1 else float("nan"), NetworkPolicy(p, args.mass_blind)))
            sources.append(str(Path(path).resolve()))
        condition = args.condition
    res = cross_mass_eval(policies, masses, args.trials, seed, mesh, env, condition=condition, jobs=args.jobs)
    run = Run(args, _stem(args, "eval"))
    run.config = {"env": asdict(env), "box": list(args.box), "masses": masses, "trials": args.trials,
                  "condition": condition, "policies": sources}
    run.seeds = {"eval": seed}
    run.write(f"{run.stem}.csv", res.to_csv())
    run.finish()
    dom = res.diagonal_dominant()
    lines = [f"train {m:g} kg: rates {' '.join(f'{r:.2f}' for r in row)}  diagonal-dominant: {'yes' if d else 'no'}"
             for m, row, d in zip(res.train_masses, res.rates, dom)]
    _say(args, "\n".join(lines), {"rates": res.rates.tolist(), "diagonal_dominant": dom,
                                  "train_masses": res.train_masses, "eval_masses": res.eval_masses})
    return EXIT_OK


def cmd_rerun(args) -> int:
    mpath = Path(args.manifest)
    try:
        manifest = json.loads(mpath.read_text())
        cmd_args = manifest["args"]
        outputs = manifest["outputs"]
    except OSError as exc:
        raise InputError(f"cannot read {mpath}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"{mpath}: not a manifest ({exc})") from None
    out_dir = Path(args.target) if args.target else mpath.parent / f"rerun-{mpath.name.removesuffix('.manifest.json')}"
    ns = argparse.Namespace(**cmd_args)
    ns.out_dir = str(out_dir)
    ns.json = True
    ns.func = COMMANDS[manifest["command"]]
    with _quiet():
        code = ns.func(ns)
    if code != EXIT_OK:
        _err(f"rerun exited with {code}")
        return code
    mismatched = []
    for name, entry in outputs.items():
        data = (out_dir / name).read_bytes() if (out_dir / name).exists() else None
        if data is None:
            mismatched.append(name)
            continue
        if "volatile_columns" in entry:
            ok = _digest(_strip_columns(data, entry["volatile_columns"])) == entry["stable_sha256"]
        else:
            ok = _digest(data) == entry["sha256"]
        if not ok:
            mismatched.append(name)
    _say(args, "identical" if not mismatched else f"differs: {', '.join(mismatched)}",
         {"identical": not mismatched, "mismatched": mismatched, "out_dir": str(out_dir)})
    return EXIT_OK if not mismatched else EXIT_CHECK


class _quiet:
    def __enter__(self):
        self._out = sys.stdout
        sys.stdout = io.StringIO()

    def __exit__(self, *exc):
        sys.stdout = self._out


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "identify": cmd_identify,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "train-policy": cmd_train_policy,
    "eval-policy": cmd_eval_policy,
    "rerun": cmd_rerun,
}


# ---------------------------------------------------------------------------
# parser

def _masses(text: str) -> list[float]:
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad mass list {text!r}") from None
    if not out or any(m <= 0.0 for m in out):
        raise argparse.ArgumentTypeError("masses must be positive")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed override (noise / training / evaluation)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent seeds or cells")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("--out-dir", default=os.environ.get(OUT_DIR_ENV, "."), help=f"output directory "
                        f"(default ${OUT_DIR_ENV} or .)")
    common.add_argument("--name", default=None, help="stem for output files")

    ap = argparse.ArgumentParser(prog="diffmass", description="Differentiable rigid-body mass identification.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def scen(p, real: bool = False):
        p.add_argument("scenario", help="scenario JSON file")
        if real:
            p.add_argument("real", nargs="?", default=None, help="observed trajectory JSONL (default: synthesize)")
        p.add_argument("--k-e", type=float, default=None)
        p.add_argument("--k-d", type=float, default=None)
        p.add_argument("--steps", type=int, default=None)

    def noise(p):
        p.add_argument("--pos-sigma", type=float, default=None)
        p.add_argument("--z-bias", type=float, default=None)
        p.add_argument("--quat-sigma", type=float, default=None)

    def ident(p):
        p.add_argument("--schedule", choices=[s.value for s in Schedule], default="adaptive")
        p.add_argument("--m-init", type=float, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--max-epochs", type=int, default=None)
        p.add_argument("--seeds", type=int, default=1, help="identify against this many noise seeds")

    p = sub.add_parser("simulate", parents=[common], help="roll a scenario out to JSONL")
    scen(p)
    p.add_argument("--integrator", choices=[i.value for i in Integrator], default=None)
    p.add_argument("--mass", type=float, default=None)

    p = sub.add_parser("gen-data", parents=[common], help="synthesize observations or demonstrations")
    scen(p)
    noise(p)
    p.add_argument("--kind", choices=["trajectory", "demos"], default="trajectory")
    p.add_argument("--mass", type=float, default=None)
    p.add_argument("--n", type=int, default=200, help="demo count")
    p.add_argument("--masses", type=_masses, default=None, help="comma-separated demo masses (kg)")
    p.add_argument("--env-config", default=None)

    p = sub.add_parser("identify", parents=[common], help="estimate mass by gradient descent")
    scen(p, real=True)
    noise(p)
    ident(p)
    p.add_argument("--integrator", choices=[i.value for i in Integrator], default=None)

    p = sub.add_parser("ablate", parents=[common], help="semi-implicit vs explicit identification")
    scen(p, real=True)
    noise(p)
    ident(p)

    p = sub.add_parser("gradcheck", parents=[common], help="adjoint vs finite-difference dL/dm")
    scen(p)
    p.add_argument("--mass", type=float, default=None, help="evaluation mass (default 1.25 x true)")
    p.add_argument("--real", default=None)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--rel-h", type=float, default=1e-5)

    p = sub.add_parser("train-policy", parents=[common], help="two-phase grasp policy training")
    p.add_argument("demos", help="demo JSONL")
    p.add_argument("--env-config", default=None)
    p.add_argument("--phase", choices=["1", "2", "both"], default="both")
    p.add_argument("--init-params", default=None)
    p.add_argument("--epochs-phase1", type=int, default=None)
    p.add_argument("--epochs-phase2", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-phase2", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--bands", type=int, default=None)

    p = sub.add_parser("eval-policy", parents=[common], help="cross-mass success matrix")
    p.add_argument("params", nargs="?", default="", help="params file glob")
    p.add_argument("--masses", type=_masses, default=None)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--box", type=float, nargs=3, default=[0.05, 0.05, 0.05])
    p.add_argument("--env-config", default=None)
    p.add_argument("--condition", choices=["train", "eval"], default="train")
    p.add_argument("--mass-blind", action="store_true")
    p.add_argument("--oracle", action="store_true")

    p = sub.add_parser("rerun", parents=[common], help="repeat a run from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--target", default=None, help="directory for the repeated outputs")
    return ap


_PATH_ARGS = ("scenario", "real", "demos", "env_config", "init_params", "manifest", "target")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    args._argv = argv
    for k in _PATH_ARGS:
        if getattr(args, k, None):
            setattr(args, k, _abspath(getattr(args, k)))
    if getattr(args, "params", None) and args.command == "eval-policy":
        args.params = str(Path(args.params).expanduser().absolute())
    args.out_dir = str(Path(args.out_dir).absolute())
    if args.jobs < 1:
        _err("--jobs must be >= 1")
        return EXIT_INPUT
    func = COMMANDS[args.command]
    try:
        return func(args)
    except (InputError, ScenarioError, PolicyError, AlignmentError, DynamicsError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    except DivergenceError as exc:
        _err(f"diverged at step {exc.step}: {exc.reason}")
        return EXIT_DIVERGED
    except MassUnobservable as exc:
        _err(str(exc))
        return EXIT_IDENT
    except IdentificationError as exc:
        _err(f"identification failed: {exc}")
        return EXIT_IDENT
    except NonFiniteLoss as exc:
        _err(str(exc))
        return EXIT_IDENT
    except IndexError as exc:
        _err(f"bad synchronization window: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
