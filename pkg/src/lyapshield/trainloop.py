"""Joint training: shielded rollouts, PINN fit, hybrid Lyapunov update, SAC and
dual ascent, with the alpha ramp, the adaptive-alpha safeguard, stratified
payload/friction scheduling and the divergence guard.

One update block runs after every episode, in the order
PINN -> certificate (+ spectral normalisation) -> SAC -> delta/alpha -> safeguard -> mu.
"""
from __future__ import annotations

import configparser
import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import dynamics as dyn
from . import lyapcert as lc
from . import pinn as pn
from . import shield as sh
from .agent import ReplayBuffer, ResidualSAC, SACConfig, sac_update
from .baseline import SlotineLiGains
from .closedloop import Context, Drift, Setup, episode_rollout, shielded_violation, sl_torque, trace_rmse
from .netcore import adam, load_net, save_net

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    preset: str = "nominal"
    T: float = 5.0
    dt: float = 0.02
    episodes: int = 75
    warmup_episodes: int = 15
    # learning rates: policy fastest, certificate slower, multiplier slowest
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_cert: float = 1e-4
    lr_pinn: float = 3e-3
    lr_mu: float = 5e-5
    gamma: float = 0.98
    entropy: float = 0.05
    tau_soft: float = 5e-3
    hidden: int = 128
    max_residual: float = 10.0
    penalty_mode: str = "detached"
    lam_tau: float = 1e-3
    batch: int = 256
    replay_capacity: int = 100_000
    sac_updates: int = 50
    cert_updates: int = 10
    pinn_updates: int = 50
    alpha0: float = 0.1
    alpha_cap: float | None = None       # 0.5, or 0.3 for the ideal preset
    ramp_start: int = 15
    ramp_end: int = 55
    robust_alpha: bool = False
    robust_margin: float = 0.0
    cost_limit: float | None = None      # None: calibrate on the SL baseline
    calibration_episodes: int = 20
    strata: tuple = (0.0, 0.35, 0.75, 1.1, 1.5)
    jitter: float = 0.15
    payload_max: float = 1.5
    friction_period: int = 5
    friction_aggressive: float = 5.0
    pgd_steps: int = 7
    pgd_step_frac: float = 0.05
    hybrid_weights: tuple = (1 / 2, 1 / 3, 1 / 6)
    b_min: float = sh.B_MIN
    gate: bool = True
    divergence_factor: float = 5.0
    divergence_window: int = 10
    rollback_budget: int = 10
    best_window: int = 5
    safeguard_rho: float = 0.9
    safeguard_eta: float = 0.05
    d_Z: int = 8
    lipschitz_inflation: float = 2.0
    safeguard_points: int = 512
    cert_width: int = 64
    cert_depth: int = 3
    cert_eps: float = 1e-3
    radius: float = 3.0
    warmstart_steps: int = 2000
    warmstart_lr: float = 3e-3
    pinn_width: int = 64
    lam_r: float = 1e-2
    delta0: float = 0.1
    delta_rate: float = 0.05
    k_d: float = 15.0
    lam: float = 5.0
    k_pi: float = 0.1
    shield_drift: str = "learned"
    seed: int = 0

    def __post_init__(self):
        if self.alpha_cap is None:
            self.alpha_cap = 0.3 if self.preset == "ideal" else 0.5
        self.strata = tuple(float(v) for v in self.strata)
        self.hybrid_weights = tuple(float(v) for v in self.hybrid_weights)
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)
        need(self.preset in dyn.PRESETS, f"preset: unknown {self.preset!r}")
        need(self.T > 0 and self.dt > 0, "T and dt must be positive")
        need(self.episodes >= 0 and self.warmup_episodes >= 0, "episode counts must be non-negative")
        need(0 < self.lr_mu < self.lr_cert < self.lr_actor,
             "timescale ordering violated: need 0 < lr_mu < lr_cert < lr_actor")
        need(self.lr_pinn > 0 and self.lr_critic > 0, "learning rates must be positive")
        need(len(self.hybrid_weights) == 3 and abs(sum(self.hybrid_weights) - 1) < 1e-12
             and min(self.hybrid_weights) >= 0, "hybrid_weights must be three non-negatives summing to 1")
        need(0 < self.alpha0 <= self.alpha_cap, "need 0 < alpha0 <= alpha_cap")
        need(self.ramp_end > self.ramp_start >= 0, "need 0 <= ramp_start < ramp_end")
        need(self.robust_margin >= 0, "robust_margin must be non-negative")
        need(self.cost_limit is None or self.cost_limit >= 0, "cost_limit must be non-negative")
        need(len(self.strata) >= 1 and self.jitter >= 0 and self.payload_max > 0, "bad payload strata")
        need(self.friction_period >= 1, "friction_period must be >= 1")
        need(self.pgd_steps >= 0 and self.pgd_step_frac > 0, "bad PGD settings")
        need(self.b_min > 0, "b_min must be positive")
        need(0 < self.safeguard_rho < 1, "safeguard_rho must lie in (0, 1)")
        need(0 < self.safeguard_eta < 1, "safeguard_eta must lie in (0, 1)")
        need(self.divergence_factor > 1 and self.rollback_budget >= 0, "bad divergence guard settings")
        need(self.batch >= 1 and self.replay_capacity >= self.batch, "replay must hold a batch")
        need(self.shield_drift in Drift.KINDS, f"shield_drift must be one of {Drift.KINDS}")
        need(self.penalty_mode in ("detached", "differentiable"), "penalty_mode must be detached or differentiable")
        need(self.calibration_episodes >= 1, "calibration_episodes must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def effective_b_min(self) -> float:
        # gate off: only exactly-zero b is treated as degenerate
        return self.b_min if self.gate else 1e-300

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strata"] = list(self.strata)
        d["hybrid_weights"] = list(self.hybrid_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict, where="config") -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        out = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"{where}: unknown key {key!r}")
            out[key] = _coerce(key, value, cls.__dataclass_fields__[key].default, where)
        return cls(**out)

    @classmethod
    def from_ini(cls, path, section="train", overrides: dict | None = None) -> "TrainConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise FileNotFoundError(f"config file not found: {path}")
        d = dict(parser.items(section)) if parser.has_section(section) else {}
        d.update(overrides or {})
        return cls.from_dict(d, where=f"{path} [{section}]")


def _coerce(key, value, default, where):
    if not isinstance(value, str):
        return value
    v = value.strip()
    try:
        if v.lower() in ("none", ""):
            return None
        if isinstance(default, bool):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if isinstance(default, int):
            return int(v)
        if isinstance(default, tuple):
            cast = int if default and all(isinstance(d, int) for d in default) else float
            return tuple(cast(s) for s in v.replace("(", "").replace(")", "").split(",") if s.strip())
        if isinstance(default, float) or default is None:
            return float(v)
        return v
    except ValueError:
        raise ConfigError(f"{where}: key {key!r} has invalid value {value!r}") from None


# -- scalar rules -----------------------------------------------------------------------


def dual_ascent(mu, L_lyap, d, lr_mu):
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return max(0.0, mu + lr_mu * (L_lyap - d))


def hybrid_combine(branch_means, weights=(1 / 2, 1 / 3, 1 / 6)):
    total = 0.0
    for w, m in zip(weights, branch_means):
        total = total + w * m
    return total


def alpha_schedule(episode, delta_hat, L_V, cfg: TrainConfig):
    """Linear ramp alpha0 -> alpha_cap over [ramp_start, ramp_end], plus the
    robust increment L_V * delta_hat when enabled."""
    if episode < 0:
        raise ValueError("episode must be non-negative")
    if episode <= cfg.ramp_start:
        a = cfg.alpha0
    elif episode >= cfg.ramp_end:
        a = cfg.alpha_cap
    else:
        frac = (episode - cfg.ramp_start) / (cfg.ramp_end - cfg.ramp_start)
        a = cfg.alpha0 + frac * (cfg.alpha_cap - cfg.alpha0)
    a = min(a, cfg.alpha_cap)
    if cfg.robust_alpha:
        a += L_V * delta_hat
    return a


def epsilon_star(L, N, log_inv_eta, d_Z):
    """Optimal covering radius (L N / log(1/eta))^(-1/(d_Z + 2))."""
    return (L * N / log_inv_eta) ** (-1.0 / (d_Z + 2))


def lipschitz_slack(L, N, log_inv_eta, d_Z):
    """L * eps*, written so that L = 0 gives 0 rather than 0 * inf."""
    if L <= 0:
        return 0.0
    return L * epsilon_star(L, N, log_inv_eta, d_Z)


def pairwise_slope(values, points, inflation=2.0):
    """Max finite-difference slope |f(x)-f(y)| / ||x-y|| over all pairs, inflated."""
    values = np.asarray(values, dtype=float)
    points = np.asarray(points, dtype=float)
    if len(values) < 2:
        return 0.0
    df = np.abs(values[:, None] - values[None, :])
    dx = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    mask = dx > 1e-12
    return inflation * float((df[mask] / dx[mask]).max()) if mask.any() else 0.0


def shrink_alpha(a, V, alpha, lipschitz_term, rho=0.9, max_shrinks=200):
    """Shrink alpha by rho until max(a + alpha V) + L eps* <= 0.

    ``lipschitz_term`` is a number or a callable of alpha.  Returns (alpha, shrinks).
    """
    a = np.asarray(a, dtype=float)
    V = np.asarray(V, dtype=float)
    if a.size == 0:
        return alpha, 0
    term = lipschitz_term if callable(lipschitz_term) else (lambda _: lipschitz_term)
    k = 0
    while float(np.max(a + alpha * V)) + term(alpha) > 0 and k < max_shrinks:
        alpha *= rho
        k += 1
    return alpha, k


def payload_scheduler(episode, rng, cfg: TrainConfig):
    """Round-robin stratum with uniform jitter, clipped; friction toggles every period."""
    stratum = cfg.strata[episode % len(cfg.strata)]
    m = float(np.clip(stratum + rng.uniform(-cfg.jitter, cfg.jitter), 0.0, cfg.payload_max))
    aggressive = (episode // cfg.friction_period) % 2 == 1
    return m, (cfg.friction_aggressive if aggressive else 1.0)


def adaptive_cost_limit(violations, quantile=75, factor=1.5):
    v = np.asarray(violations, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no baseline violations")
    return float(factor * np.percentile(v, quantile))


class DivergenceGuard:
    """Rollback when an episode's RMSE exceeds factor x rolling median, or on a
    non-finite state; abort once the rollback budget is spent."""

    def __init__(self, factor=5.0, window=10, budget=10, min_entries=3):
        self.factor, self.window, self.budget, self.min_entries = factor, window, budget, min_entries
        self.history: list[float] = []
        self.rollbacks = 0

    def check(self, rmse, finite=True) -> str:
        bad = (not finite) or not math.isfinite(rmse)
        if not bad and len(self.history) >= self.min_entries:
            bad = rmse > self.factor * float(np.median(self.history[-self.window:]))
        if bad:
            self.rollbacks += 1
            if self.rollbacks > self.budget:
                raise TrainingAborted(f"rollback budget {self.budget} exhausted (rmse={rmse})")
            return "rollback"
        self.history.append(float(rmse))
        return "continue"


# -- learners ---------------------------------------------------------------------------


@dataclass
class Learners:
    agent: ResidualSAC
    cert: lc.Certificate
    cert_opt: torch.optim.Optimizer
    model: pn.PinnModel
    model_opt: torch.optim.Optimizer
    delta: pn.ModelErrorEstimate
    mu: float = 0.0
    alpha: float = 0.1
    L_V: float = 0.0
    cost_limit: float = 0.0

    def snapshot(self, replay: ReplayBuffer | None = None) -> dict:
        snap = {
            "agent": copy.deepcopy(self.agent.state_dict()),
            "opt_actor": copy.deepcopy(self.agent.opt_actor.state_dict()),
            "opt_critic": copy.deepcopy(self.agent.opt_critic.state_dict()),
            "cert": copy.deepcopy(self.cert.state_dict()),
            "cert_opt": copy.deepcopy(self.cert_opt.state_dict()),
            "model": copy.deepcopy(self.model.state_dict()),
            "model_opt": copy.deepcopy(self.model_opt.state_dict()),
            "scalars": (self.delta.delta, self.mu, self.alpha, self.L_V, self.cost_limit),
        }
        if replay is not None:
            snap["replay"] = replay.state()
        return snap

    def restore(self, snap: dict, replay: ReplayBuffer | None = None):
        self.agent.load_state_dict(snap["agent"])
        self.agent.opt_actor.load_state_dict(snap["opt_actor"])
        self.agent.opt_critic.load_state_dict(snap["opt_critic"])
        self.cert.load_state_dict(snap["cert"])
        self.cert_opt.load_state_dict(snap["cert_opt"])
        self.model.load_state_dict(snap["model"])
        self.model_opt.load_state_dict(snap["model_opt"])
        self.delta.delta, self.mu, self.alpha, self.L_V, self.cost_limit = snap["scalars"]
        if replay is not None and "replay" in snap:
            replay.restore(snap["replay"])


def make_setup(cfg: TrainConfig) -> Setup:
    gains = SlotineLiGains.scalar(k_d=cfg.k_d, lam=cfg.lam, k_pi=cfg.k_pi)
    return Setup(base=dyn.PRESETS[cfg.preset], gains=gains, dt=cfg.dt)


def make_learners(cfg: TrainConfig) -> Learners:
    sac_cfg = SACConfig(hidden=cfg.hidden, gamma=cfg.gamma, entropy=cfg.entropy, tau_soft=cfg.tau_soft,
                        lr_actor=cfg.lr_actor, lr_critic=cfg.lr_critic, max_residual=cfg.max_residual,
                        penalty_mode=cfg.penalty_mode)
    torch.manual_seed(cfg.seed)
    agent = ResidualSAC(sac_cfg, seed=cfg.seed)
    cert = lc.Certificate(width=cfg.cert_width, depth=cfg.cert_depth, eps=cfg.cert_eps,
                          radius=cfg.radius, seed=cfg.seed + 10)
    model = pn.PinnModel(pi0=dyn.base_parameters(dyn.PRESETS[cfg.preset].with_(payload=0.0)),
                         width=cfg.pinn_width, lam_r=cfg.lam_r, seed=cfg.seed + 20)
    return Learners(agent=agent, cert=cert, cert_opt=adam(cert.parameters(), cfg.lr_cert),
                    model=model, model_opt=pn.make_optimizer(model, cfg.lr_pinn),
                    delta=pn.ModelErrorEstimate(cfg.delta0, cfg.delta_rate), alpha=cfg.alpha0)


def make_drift(cfg: TrainConfig, setup: Setup, model) -> Drift:
    return Drift(cfg.shield_drift, setup, model if cfg.shield_drift == "learned" else None)


# -- hybrid Lyapunov loss and the adversarial branch -------------------------------------


def policy_violation(cert, agent, drift, setup, x, ctx, alpha, margin, b_min, shield_on=True,
                     create_graph=True, actor_grad=False):
    """relu(Vdot + alpha V) at the shielded torque of the current policy mean."""
    dtau = 0.0
    if agent is not None:
        dtau = agent.mean_action(x.detach())
        if not actor_grad:
            dtau = dtau.detach()
    tau_raw = sl_torque(x.detach(), ctx, setup) + dtau
    viol, _, _ = shielded_violation(cert, drift, x, ctx, tau_raw, alpha, margin, b_min,
                                    shield_on, create_graph=create_graph)
    return viol


def hybrid_lyapunov_loss(violation_fn, branches, weights=(1 / 2, 1 / 3, 1 / 6)):
    """Weighted sum of branch means of ``violation_fn(x, ctx)``.

    ``branches`` is a sequence of (x, ctx) for replay, uniform-K and adversarial
    samples.  Returns (loss tensor, list of branch means as floats).
    """
    if len(branches) != len(weights):
        raise ValueError("one weight per branch")
    means = []
    for x, ctx in branches:
        if x.shape[0] == 0:
            raise ValueError("empty branch")
        means.append(violation_fn(x, ctx).mean())
    loss = hybrid_combine(means, weights)
    return loss, [float(m.detach()) for m in means]


def pgd_adversarial(violation_fn, x0, ctx, steps=7, step_size=0.15, radius=3.0, basis=None):
    """Projected ascent on the per-point violation with monotone acceptance.

    Steps are normalised gradient moves of length ``step_size``, restricted to
    span(``basis``) when given, then projected onto the ball of ``radius``.  A
    point keeps its old position whenever the step would lower its violation.
    """
    x = torch.as_tensor(x0, dtype=torch.float64).detach().clone()
    if steps == 0:
        return x
    P = None if basis is None else torch.as_tensor(basis @ basis.T)
    x.requires_grad_(True)
    cur = violation_fn(x, ctx)
    for _ in range(steps):
        (grad,) = torch.autograd.grad(cur.sum(), x)
        with torch.no_grad():
            if P is not None:
                grad = grad @ P
            nrm = grad.norm(dim=-1, keepdim=True)
            cand = x + step_size * grad / nrm.clamp_min(1e-12)
            cand = cand * torch.clamp(radius / cand.norm(dim=-1, keepdim=True).clamp_min(1e-300), max=1.0)
        cand.requires_grad_(True)
        new = violation_fn(cand, ctx)
        with torch.no_grad():
            keep = (new.detach() >= cur.detach()) & (nrm[:, 0] > 0)
            x_next = torch.where(keep[:, None], cand.detach(), x.detach())
        x = x_next.requires_grad_(True)
        cur = violation_fn(x, ctx)
    return x.detach()


# -- safeguard --------------------------------------------------------------------------


def adaptive_alpha_safeguard(cert, drift, x, ctx, alpha, cfg: TrainConfig, rng=None):
    """Shrink alpha until the empirical drift-decay slack plus L eps* is <= 0 on
    Z_emp = {x in the replay sample : ||b(x)||^2 <= b_min}.

    Returns (alpha', info dict).
    """
    h, g = drift.fields(x, ctx)
    co = sh.coefficients(cert, x, h, g, alpha)
    bb = (co.b ** 2).sum(-1).detach().numpy()
    mask = bb <= cfg.b_min
    a = co.a.detach().numpy()[mask]
    V = co.V.detach().numpy()[mask]
    pts = x.detach().numpy()[mask]
    N = int(mask.sum())
    if N == 0:
        return alpha, {"z_count": 0, "shrinks": 0, "lipschitz": 0.0}
    if N > cfg.safeguard_points:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = rng.choice(N, cfg.safeguard_points, replace=False)
        a_s, V_s, p_s = a[idx], V[idx], pts[idx]
    else:
        a_s, V_s, p_s = a, V, pts
    log_inv_eta = math.log(1.0 / cfg.safeguard_eta)
    lip = {}

    def term(al):
        L = pairwise_slope(a_s + al * V_s, p_s, cfg.lipschitz_inflation)
        lip["L"] = L
        return lipschitz_slack(L, N, log_inv_eta, cfg.d_Z)

    new_alpha, k = shrink_alpha(a, V, alpha, term, cfg.safeguard_rho)
    return new_alpha, {"z_count": N, "shrinks": k, "lipschitz": lip.get("L", 0.0)}


# -- training ---------------------------------------------------------------------------


def _pinn_batch(b, base: dyn.ArmParams):
    return pn.make_batch(b["x"][:, dyn.Q], b["x"][:, dyn.QD], b["qdd"], b["tau_applied"],
                         pn.structural_inertia(b["x"][:, dyn.Q], b["payload"], base))


def _uniform_branch(rng, n, cfg, setup, replay):
    x = torch.as_tensor(lc.sample_consistent(rng, n, cfg.radius, setup.lam))
    ctx = Context.from_batch(replay.take(replay.indices(n)))
    return x, ctx


def calibrate_cost_limit(cfg, setup, learners, drift, rng):
    """d from per-step violations of the pure SL policy (no residual, no shield),
    measured with the warm-started certificate and the shield's drift estimate."""
    viols = []
    for ep in range(cfg.calibration_episodes):
        m, f = payload_scheduler(ep, rng, cfg)
        tr = episode_rollout(setup, setup.plant(m, f), seed=10_000 + ep, T=cfg.T, cert=learners.cert,
                             drift=drift, shield_on=False, alpha=cfg.alpha0, b_min=cfg.effective_b_min)
        viols.append(tr["viol"])
    return adaptive_cost_limit(np.concatenate(viols)), np.concatenate(viols)


def save_checkpoint(path, learners: Learners, cfg: TrainConfig, bounds: lc.CertBounds | None,
                    extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    learners.cert.save(path / "cert.lsnet", bounds)
    for name, blob in learners.agent.state_bytes().items():
        (path / f"{name}.lsnet").write_bytes(blob)
    save_net(learners.model.residual_net, path / "residual.lsnet")
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "pi_hat": learners.model.pi_hat.detach().tolist(),
        "mu": learners.mu, "alpha": learners.alpha, "delta_hat": learners.delta.delta,
        "L_V": learners.L_V, "cost_limit": learners.cost_limit,
    }
    meta.update(extra or {})
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


@dataclass
class Checkpoint:
    cfg: TrainConfig
    learners: Learners
    bounds: lc.CertBounds | None
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{path}: not a checkpoint directory")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
    cfg = TrainConfig.from_dict(meta["config"], where=str(meta_path))
    learners = make_learners(cfg)
    cert, bounds = lc.Certificate.load(path / "cert.lsnet")
    learners.cert = cert
    learners.agent.load_state_bytes({n: (path / f"{n}.lsnet").read_bytes()
                                     for n in ("actor", "q1", "q2", "q1_target", "q2_target")})
    learners.model.residual_net = load_net(path / "residual.lsnet")
    with torch.no_grad():
        learners.model.pi_hat.copy_(torch.as_tensor(meta["pi_hat"]))
    learners.mu, learners.alpha = meta["mu"], meta["alpha"]
    learners.delta.delta, learners.L_V, learners.cost_limit = meta["delta_hat"], meta["L_V"], meta["cost_limit"]
    return Checkpoint(cfg, learners, bounds, meta)


@dataclass
class TrainResult:
    learners: Learners
    metrics: list
    bounds: lc.CertBounds
    warmstart_error: float
    cost_limit: float
    setup: Setup


def _finite(*vals):
    return all(math.isfinite(v) for v in vals)


def run_training(cfg: TrainConfig, out_dir=None, log=None) -> TrainResult:
    """Warm start, calibrate d, then ``cfg.episodes`` episodes of rollout + update block.

    Metrics go to ``out_dir/metrics.jsonl`` (one JSON object per episode) when
    ``out_dir`` is given; best and latest checkpoints land beside it.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    setup = make_setup(cfg)
    L = make_learners(cfg)
    drift = make_drift(cfg, setup, L.model)
    replay = ReplayBuffer(cfg.replay_capacity, seed=cfg.seed + 1)
    b_min = cfg.effective_b_min
    basis = lc.consistent_basis(setup.lam)
    out = None if out_dir is None else Path(out_dir)
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")

    def emit(rec):
        rec = {"schema": SCHEMA_VERSION, **rec}
        metrics.append(rec)
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if log is not None:
            log(rec)

    metrics: list = []
    ws_rng = np.random.default_rng(cfg.seed + 2)
    ws_err = lc.warmstart(L.cert, lambda r, n: lc.sample_consistent(r, n, cfg.radius, setup.lam),
                          cfg.warmstart_steps, lr=cfg.warmstart_lr, rng=ws_rng)
    bounds = lc.estimate_bounds(L.cert, rng=np.random.default_rng(cfg.seed + 3))
    L.L_V = bounds.L_V
    if cfg.cost_limit is None:
        L.cost_limit, _ = calibrate_cost_limit(cfg, setup, L, drift, np.random.default_rng(cfg.seed + 4))
    else:
        L.cost_limit = float(cfg.cost_limit)
    emit({"episode": -1, "phase": "warmstart", "warmstart_rel_error": ws_err, "cost_limit": L.cost_limit,
          "L_V": L.L_V, "beta_bar": bounds.beta_bar, "mu": L.mu, "alpha": L.alpha})

    guard = DivergenceGuard(cfg.divergence_factor, cfg.divergence_window, cfg.rollback_budget)
    best = L.snapshot(replay)
    best_score = math.inf
    accepted: list[float] = []
    margin = cfg.robust_margin

    for ep in range(cfg.episodes):
        m, f = payload_scheduler(ep, rng, cfg)
        p = setup.plant(m, f)
        tr = episode_rollout(setup, p, seed=cfg.seed * 100_003 + ep, T=cfg.T, agent=L.agent,
                             cert=L.cert, drift=drift, shield_on=True, alpha=L.alpha, margin=margin,
                             b_min=b_min, lam_tau=cfg.lam_tau)
        rmse = trace_rmse(tr)
        finite = not tr["diverged"] and bool(np.all(np.isfinite(tr["x"])))
        action = guard.check(rmse, finite)
        rec = {"episode": ep, "payload": m, "friction_scale": p.friction_scale, "rmse": rmse,
               "viol_mean": float(np.mean(tr["viol"])) if len(tr["viol"]) else 0.0,
               "shield_frac": float(np.mean(tr["active"])) if len(tr["active"]) else 0.0,
               "degenerate_frac": float(np.mean(tr["degenerate"])) if len(tr["degenerate"]) else 0.0,
               "diverged": bool(tr["diverged"]), "action": action}
        if action == "rollback":
            L.restore(best, replay)
            rec.update({"mu": L.mu, "alpha": L.alpha, "delta_hat": L.delta.delta,
                        "rollbacks": guard.rollbacks})
            emit(rec)
            continue

        for k in range(len(tr["tau"])):
            replay.push(x=tr["x"][k], x_next=tr["x"][k + 1], a=tr["dtau"][k], tau_applied=tr["tau"][k],
                        tau_sl=tr["tau_sl"][k], qdd=tr["qdd"][k], r=tr["reward"][k], done=0.0,
                        t=tr["t"][k], payload=m, friction_scale=p.friction_scale,
                        sl_pi_hat=tr["sl_pi_hat"][k], episode=ep, step=k)
        info = update_block(cfg, setup, L, drift, replay, rng, basis, ep)
        rec.update(info)
        rec.update({"mu": L.mu, "alpha": L.alpha, "delta_hat": L.delta.delta, "rollbacks": guard.rollbacks})
        if not _finite(*(v for v in rec.values() if isinstance(v, float))):
            raise TrainingAborted(f"non-finite training metric at episode {ep}: {rec}")
        emit(rec)

        accepted.append(rmse)
        score = float(np.mean(accepted[-cfg.best_window:]))
        if score < best_score:
            best_score = score
            best = L.snapshot(replay)
            if out is not None:
                save_checkpoint(out / "best", L, cfg, bounds, {"episode": ep, "score": score})

    bounds = lc.estimate_bounds(L.cert, rng=np.random.default_rng(cfg.seed + 5))
    L.L_V = bounds.L_V
    if out is not None:
        save_checkpoint(out / "latest", L, cfg, bounds, {"episode": cfg.episodes - 1})
        if cfg.episodes == 0:
            save_checkpoint(out / "best", L, cfg, bounds, {"episode": -1})
    return TrainResult(L, metrics, bounds, ws_err, L.cost_limit, setup)


def update_block(cfg: TrainConfig, setup: Setup, L: Learners, drift: Drift, replay: ReplayBuffer,
                 rng, basis, episode) -> dict:
    n = min(cfg.batch, len(replay))
    b_min = cfg.effective_b_min
    margin = cfg.robust_margin

    # PINN
    l_phys = []
    for _ in range(cfg.pinn_updates):
        b = replay.sample(n)
        l_phys.append(pn.pinn_update(L.model, L.model_opt, _pinn_batch(b, setup.base)))
    mean_phys = float(np.mean(l_phys)) if l_phys else 0.0
    if l_phys:
        L.delta.update(mean_phys)

    # certificate on the hybrid batch
    def viol(x, ctx):
        return policy_violation(L.cert, L.agent, drift, setup, x, ctx, L.alpha, margin, b_min)

    branch = [0.0, 0.0, 0.0]
    lyap = 0.0
    for _ in range(cfg.cert_updates):
        rb = replay.sample(n)
        xD, cD = rb["x"], Context.from_batch(rb)
        xU, cU = _uniform_branch(rng, n, cfg, setup, replay)
        xS, cS = _uniform_branch(rng, n, cfg, setup, replay)
        xA = pgd_adversarial(viol, xS, cS, cfg.pgd_steps, cfg.pgd_step_frac * cfg.radius, cfg.radius, basis)
        loss, branch = hybrid_lyapunov_loss(viol, [(xD, cD), (xU, cU), (xA, cS)], cfg.hybrid_weights)
        L.cert_opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            L.cert_opt.step()
        L.cert.normalize()
        lyap = float(loss.detach())

    # SAC with the Lagrangian penalty
    sac_info = {}
    for _ in range(cfg.sac_updates):
        b = replay.sample(n)
        batch = {"x": b["x"], "a": b["a"], "r": b["r"], "x_next": b["x_next"], "done": b["done"]}
        if cfg.penalty_mode == "differentiable" and L.mu > 0:
            ctx = Context.from_batch(b)
            penalty = policy_violation(L.cert, L.agent, drift, setup, b["x"], ctx, L.alpha, margin, b_min,
                                       create_graph=False, actor_grad=True).mean()
        else:
            penalty = torch.tensor(lyap)
        sac_info = sac_update(L.agent, batch, L.mu, penalty)

    # alpha for the next episode: schedule first, safeguard last
    alpha = alpha_schedule(episode + 1, L.delta.delta, L.L_V, cfg)
    sb = replay.sample(min(len(replay), 4 * cfg.batch))
    alpha, sg = adaptive_alpha_safeguard(L.cert, drift, sb["x"], Context.from_batch(sb), alpha, cfg, rng)
    L.alpha = alpha

    if episode >= cfg.warmup_episodes:
        L.mu = dual_ascent(L.mu, lyap, L.cost_limit, cfg.lr_mu)

    return {"L_phys": mean_phys, "L_lyap": lyap, "L_replay": branch[0], "L_uniform": branch[1],
            "L_adv": branch[2], "critic_loss": sac_info.get("critic_loss", 0.0),
            "actor_loss": sac_info.get("actor_loss", 0.0), "z_count": sg["z_count"],
            "safeguard_shrinks": sg["shrinks"]}
