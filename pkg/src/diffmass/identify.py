"""Mass identification by gradient descent on the trajectory loss.

The loop evaluates one rollout per epoch at the current mass, takes
``dL/dm`` from the adjoint (semi-implicit) or from central differences
(explicit), and moves ``m`` along the negative gradient inside
``[M_MIN, M_MAX]``.

Two step-size rules are offered. ``Fixed`` keeps ``lr`` constant. ``Adaptive``
is a bold-driver rule: an accepted step (loss went down) grows ``lr``; a
rejected step is undone and ``lr`` is halved. The loss seen from a 0.002 kg
start spans many decades of curvature on the way to the truth, which a
constant ``lr`` cannot cover in a few hundred epochs.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adjoint import AlignmentError, finite_diff_grad, grad_mass, pose_loss, record_rollout
from .dynamics import DivergenceError, Integrator, Trajectory, rollout
from .geomcore import quat_from_axis_angle, quat_mul, quat_normalize
from .scenario import NoiseModel, Scenario, SyncSpec, load_scenario, scenario_from_dict  # noqa: F401

M_MIN = 1.0e-4
M_MAX = 100.0
MAX_RETRIES = 10

# adaptive-schedule constants (kg thresholds, initial learning rates)
HEAVY_KG = 0.5
LIGHT_KG = 0.05
LR_HI = 1.0e-6
LR_MID = 1.0e-7
LIGHT_DECAY = 0.95


class IdentificationError(RuntimeError):
    """The loop could not produce an estimate (e.g. repeated divergence)."""


class MassUnobservable(IdentificationError):
    def __init__(self, grad: float, loss: float):
        super().__init__(f"mass unobservable: |dL/dm| = {abs(grad):.3g} below tol_grad at epoch 0 (loss {loss:.3g})")
        self.grad = grad
        self.loss = loss


class Schedule(str, enum.Enum):
    FIXED = "fixed"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class IdentifyConfig:
    m_init: float = 0.002
    lr: float = LR_MID
    max_epochs: int = 200
    tol_loss: float = 1.0e-12
    tol_grad: float = 1.0e-12
    lr_decay: float | None = None
    schedule: Schedule = Schedule.ADAPTIVE
    tol_step: float = 1.0e-7  # relative change in m between accepted iterates
    step_patience: int = 3  # consecutive accepted steps below tol_step
    lr_growth: float = 2.0
    plateau_rel: float = 1.0e-3
    q_weight: float = 1.0
    integrator: Integrator = Integrator.SEMI_IMPLICIT
    fd_rel_h: float = 1.0e-5

    def __post_init__(self):
        if not self.m_init > 0.0:
            raise ValueError("m_init must be positive")
        if not self.lr > 0.0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.lr_decay is not None and not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "integrator", Integrator(self.integrator))


@dataclass
class IdentifyReport:
    m_hat: float
    loss_curve: list
    m_curve: list
    epochs_run: int
    converged: bool
    wall_clock: float = 0.0
    grad_curve: list = field(default_factory=list)
    lr_curve: list = field(default_factory=list)
    divergences: int = 0
    status: str = "max_epochs"
    integrator: str = "semi"
    diagnostic: str = ""

    @property
    def final_loss(self) -> float:
        return min(self.loss_curve) if self.loss_curve else math.inf

    @property
    def sec_per_iter(self) -> float:
        return self.wall_clock / max(self.epochs_run, 1)

    def to_dict(self, *, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d

    def to_json(self, *, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing=timing), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "IdentifyReport":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "m", "loss"])
        for i, (m, l) in enumerate(zip(self.m_curve, self.loss_curve)):
            w.writerow([i, repr(float(m)), repr(float(l))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# observations

def _small_rotation(rng: np.random.Generator, sigma: float) -> np.ndarray:
    rv = rng.normal(0.0, sigma, 3)
    ang = float(np.linalg.norm(rv))
    return quat_from_axis_angle(rv, ang) if ang > 0.0 else np.array([1.0, 0.0, 0.0, 0.0])


def add_noise(traj: Trajectory, noise: NoiseModel) -> Trajectory:
    if noise.is_zero:
        return Trajectory(traj.times.copy(), traj.positions.copy(), traj.quats.copy(), traj.frame_rate, traj.body)
    rng = np.random.default_rng(noise.seed)
    n = len(traj)
    pos = traj.positions + rng.normal(0.0, noise.pos_sigma, (n, 3)) if noise.pos_sigma > 0.0 else traj.positions.copy()
    pos[:, 2] += noise.z_bias
    quats = traj.quats.copy()
    if noise.quat_sigma > 0.0:
        for i in range(n):
            quats[i] = quat_normalize(quat_mul(_small_rotation(rng, noise.quat_sigma), quats[i]))
    return Trajectory(traj.times.copy(), pos, quats, traj.frame_rate, traj.body)


def synthesize_real_trajectory(scenario: Scenario, true_mass: float | None = None,
                               noise: NoiseModel | None = None) -> Trajectory:
    """Stand-in observation: rollout at the true mass plus pose noise.

    The rollout is semi-implicit. With ``scenario.ref_substeps = s > 1`` it
    runs at ``dt / s`` and every ``s``-th sample is kept, so the observation
    is closer to the continuous motion than either discrete model. Raises
    :class:`DivergenceError` if that rollout blows up.
    """
    m = scenario.true_mass if true_mass is None else float(true_mass)
    if not m > 0.0:
        raise ValueError("true mass must be positive")
    cfg = scenario.sim_config(Integrator.SEMI_IMPLICIT)
    s = scenario.ref_substeps
    init = scenario.initial_state()
    if s > 1:
        cfg = replace(cfg, dt=cfg.dt / s, steps=cfg.steps * s)
    traj, _ = rollout(init, scenario.body(m), scenario.schedule, cfg)
    if s > 1:
        keep = np.arange(0, len(traj), s)
        times = init.t + scenario.dt * np.arange(scenario.steps + 1)
        traj = Trajectory(times, traj.positions[keep], traj.quats[keep], 1.0 / scenario.dt, traj.body)
    return add_noise(traj, scenario.noise if noise is None else noise)


def _resample(traj: Trajectory, times: np.ndarray) -> Trajectory:
    pos = np.column_stack([np.interp(times, traj.times, traj.positions[:, i]) for i in range(3)])
    quats = np.empty((len(times), 4))
    j = np.clip(np.searchsorted(traj.times, times, side="right") - 1, 0, len(traj) - 2)
    for i, (t, k) in enumerate(zip(times, j)):
        t0, t1 = traj.times[k], traj.times[k + 1]
        a = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        q0, q1 = traj.quats[k], traj.quats[k + 1]
        if q0 @ q1 < 0.0:
            q1 = -q1
        quats[i] = quat_normalize((1.0 - a) * q0 + a * q1)
    rate = 1.0 / (times[1] - times[0]) if len(times) > 1 else traj.frame_rate
    return Trajectory(times, pos, quats, rate, traj.body)


def align_trajectories(real: Trajectory, sim_template: Trajectory, sync: SyncSpec) -> tuple[Trajectory, Trajectory]:
    """Crop both trajectories to the sync window and put them on one clock.

    The window ``[start_index, end_index)`` indexes ``real``. Real positions
    are shifted by ``sync.recenter``. Without a resample rate the simulated
    samples at the real timestamps are taken; with one, both are
    interpolated onto a common grid starting at the window start.
    """
    end = len(real) if sync.end_index is None else sync.end_index
    if end > len(real):
        raise IndexError(f"sync window end {end} beyond the {len(real)} observed samples")
    if end - sync.start_index < 1:
        raise IndexError("empty sync window")
    win = real.slice(sync.start_index, end)
    t0, t1 = float(win.times[0]), float(win.times[-1])
    tol = 1e-9
    if t0 < sim_template.times[0] - tol or t1 > sim_template.times[-1] + tol:
        raise IndexError(f"window [{t0:g}, {t1:g}] s lies outside the simulated span")
    win = Trajectory(win.times, win.positions + np.asarray(sync.recenter), win.quats, win.frame_rate, win.body)
    if sync.resample_rate is None:
        idx = np.searchsorted(sim_template.times, win.times - tol)
        idx = np.minimum(idx, len(sim_template) - 1)
        if np.any(np.abs(sim_template.times[idx] - win.times) > tol):
            raise AlignmentError("observed timestamps do not fall on simulated samples; set a resample rate")
        sim = Trajectory(sim_template.times[idx], sim_template.positions[idx], sim_template.quats[idx],
                         sim_template.frame_rate, sim_template.body)
        return win, sim
    step = 1.0 / sync.resample_rate
    n = int(math.floor((t1 - t0) / step + 1e-9)) + 1
    grid = t0 + step * np.arange(n)
    return _resample(win, grid), _resample(sim_template, grid)


def trajectory_loss(sim: Trajectory, real: Trajectory, q_weight: float = 1.0) -> float:
    """Summed squared pose residual over matching samples."""
    if len(sim) != len(real):
        raise AlignmentError(f"length mismatch: {len(sim)} simulated vs {len(real)} observed")
    if np.any(np.abs(sim.times - real.times) > 1e-9):
        raise AlignmentError("timestamps differ by more than 1e-9 s")
    return pose_loss(sim, real, q_weight)


def adaptive_schedule(m_scale_guess: float) -> tuple[float, int, float | None]:
    """(lr, max_epochs, lr_decay) for a rough mass scale in kg."""
    if not m_scale_guess > 0.0:
        raise ValueError("mass scale guess must be positive")
    if m_scale_guess >= HEAVY_KG:
        return LR_HI, 2000, None
    if m_scale_guess >= LIGHT_KG:
        return LR_MID, 200, None
    return LR_MID, 200, LIGHT_DECAY


def config_for(scenario: Scenario, schedule: Schedule | str = Schedule.ADAPTIVE, **overrides) -> IdentifyConfig:
    """Identification config with the adaptive constants for this scenario."""
    lr, epochs, decay = adaptive_schedule(scenario.prior_mass)
    base = dict(m_init=scenario.m_init, lr=lr, max_epochs=epochs, lr_decay=decay, schedule=Schedule(schedule),
                q_weight=scenario.q_weight, integrator=scenario.integrator)
    base.update(overrides)
    return IdentifyConfig(**base)


# ---------------------------------------------------------------------------
# the loop

def _evaluator(scenario: Scenario, real: Trajectory, cfg: IdentifyConfig):
    init = scenario.initial_state()
    sim_cfg = scenario.sim_config(cfg.integrator)
    body0 = scenario.body()

    if cfg.integrator is Integrator.SEMI_IMPLICIT:
        def evaluate(m: float) -> tuple[float, float]:
            _, tape = record_rollout(init, body0.with_mass(m), scenario.schedule, sim_cfg)
            rep = grad_mass(tape, real, cfg.q_weight)
            return rep.loss, rep.grad
    else:
        def loss_at(m: float) -> float:
            traj, _ = rollout(init, body0.with_mass(m), scenario.schedule, sim_cfg)
            return pose_loss(traj, real, cfg.q_weight)

        def evaluate(m: float) -> tuple[float, float]:
            loss = loss_at(m)
            h = cfg.fd_rel_h * m
            return loss, finite_diff_grad(loss_at, m, h)
    return evaluate


def identify_mass(scenario: Scenario, real: Trajectory, cfg: IdentifyConfig) -> IdentifyReport:
    """Estimate the total mass that best reproduces ``real``.

    Every epoch evaluates loss and gradient at one mass; ``m_curve`` /
    ``loss_curve`` list those evaluations in order, rejected trial steps
    included. ``m_hat`` is the evaluated mass with the lowest loss.
    """
    t_start = time.perf_counter()
    evaluate = _evaluator(scenario, real, cfg)
    rep = IdentifyReport(m_hat=cfg.m_init, loss_curve=[], m_curve=[], epochs_run=0, converged=False,
                         integrator=cfg.integrator.value)
    adaptive = cfg.schedule is Schedule.ADAPTIVE
    lr = cfg.lr
    small_steps = 0
    # small steps only mean convergence once the rate has overshot at least once
    overshot = not adaptive

    def record(m, loss, grad):
        rep.m_curve.append(float(m))
        rep.loss_curve.append(float(loss))
        rep.grad_curve.append(float(grad))
        rep.lr_curve.append(float(lr))
        rep.epochs_run = len(rep.m_curve)

    def finish(status: str, converged: bool, diagnostic: str = "") -> IdentifyReport:
        rep.status = status
        rep.converged = converged
        rep.diagnostic = diagnostic
        if rep.loss_curve:
            rep.m_hat = rep.m_curve[int(np.argmin(rep.loss_curve))]
        rep.wall_clock = time.perf_counter() - t_start
        return rep

    try:
        loss, grad = evaluate(cfg.m_init)
    except DivergenceError as exc:
        rep.divergences += 1
        raise IdentificationError(f"rollout at the initial mass {cfg.m_init:g} kg diverged: {exc}") from exc
    m = cfg.m_init
    record(m, loss, grad)
    if abs(grad) < cfg.tol_grad:
        # flat at the start: an exact optimum, or a loss that ignores mass?
        try:
            probe, _ = evaluate(2.0 * m)
        except DivergenceError:
            probe = math.inf
        if abs(probe - loss) <= max(cfg.tol_loss, 1e-12 * abs(loss)):
            raise MassUnobservable(grad, loss)
    if loss <= cfg.tol_loss:
        return finish("tol_loss", True)
    if abs(grad) < cfg.tol_grad:
        return finish("tol_grad", True)

    while rep.epochs_run < cfg.max_epochs:
        # propose, halving lr on divergence
        for attempt in range(MAX_RETRIES + 1):
            m_new = min(max(m - lr * grad, M_MIN), M_MAX)
            if m_new == m:
                return finish("tol_step", True)
            try:
                loss_new, grad_new = evaluate(m_new)
                break
            except DivergenceError as exc:
                rep.divergences += 1
                lr *= 0.5
                if attempt == MAX_RETRIES:
                    return finish("diverged", False,
                                  f"rollout diverged {MAX_RETRIES + 1} times from m={m:.6g} kg: {exc}")
        record(m_new, loss_new, grad_new)

        if adaptive and loss_new > loss:
            lr *= 0.5  # reject; m, loss, grad stay at the previous iterate
            overshot = True
            continue

        rel_step = abs(m_new - m) / m
        improved = (loss - loss_new) / max(loss, 1e-300)
        m, loss, grad = m_new, loss_new, grad_new
        if loss <= cfg.tol_loss:
            return finish("tol_loss", True)
        if abs(grad) < cfg.tol_grad:
            return finish("tol_grad", True)
        small_steps = small_steps + 1 if (rel_step < cfg.tol_step and overshot) else 0
        if small_steps >= cfg.step_patience:
            return finish("tol_step", True)
        if adaptive:
            if cfg.lr_decay is not None and improved < cfg.plateau_rel:
                lr *= cfg.lr_decay
            else:
                lr *= cfg.lr_growth
        elif not math.isfinite(loss):
            return finish("diverged", False, "non-finite loss")
    return finish("max_epochs", False)


# ---------------------------------------------------------------------------
# integrator ablation

@dataclass
class AblationResult:
    semi: IdentifyReport
    explicit: IdentifyReport | None
    true_mass: float
    explicit_error: str = ""

    def rows(self) -> list[dict]:
        out = []
        for name, r in (("semi", self.semi), ("explicit", self.explicit)):
            if r is None:
                out.append({"integrator": name, "m_hat": "diverged", "abs_err": "diverged",
                            "sec_per_iter": "", "epochs": 0, "divergences": 1})
                continue
            m_hat = r.m_hat if r.status != "diverged" or r.loss_curve else "diverged"
            out.append({"integrator": name, "m_hat": m_hat,
                        "abs_err": abs(r.m_hat - self.true_mass),
                        "sec_per_iter": r.sec_per_iter, "epochs": r.epochs_run,
                        "divergences": r.divergences})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["integrator", "m_hat", "abs_err", "sec_per_iter", "epochs", "divergences"]
        w.writerow(cols)
        for row in self.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in cols)])
        return buf.getvalue()

    @property
    def explicit_divergences(self) -> int:
        return 1 if self.explicit is None else self.explicit.divergences


def ablate_integrators(scenario: Scenario, real: Trajectory, cfg: IdentifyConfig) -> AblationResult:
    """Identify once with each integrator on the same observation.

    The explicit arm takes finite-difference gradients. If it cannot even
    start (divergence at the initial mass) it is recorded as diverged.
    """
    semi = identify_mass(scenario, real, replace(cfg, integrator=Integrator.SEMI_IMPLICIT))
    try:
        expl = identify_mass(scenario, real, replace(cfg, integrator=Integrator.EXPLICIT))
        err = ""
    except IdentificationError as exc:
        expl, err = None, str(exc)
    return AblationResult(semi, expl, scenario.true_mass, err)
