"""Command-line entry point for the experiment suite.

Subcommands: solve, oracle, check-derivs, noise, cross, train-pendulum,
pendulum. Settings come from an optional JSON config file plus flag
overrides (flags win); every command echoes the effective configuration
to config.json in the output directory, and re-running from that file
reproduces the artifacts byte for byte (timing fields aside).

Exit codes: 0 success, 2 solver unconverged, 3 validation or tolerance
failure, 64 bad configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts
from .classic import ClassicDdp, lqr_solve
from .core import DelayWindow, rollout, total_cost
from .deriv import check_derivatives, compute_bundle
from .harness import NoiseConfig, cross_apply, simulate_noisy, transfer_to_real
from .models import (
    PendulumModel,
    RealPendulumSwingupCost,
    augment,
    make_cstr_problem,
    make_linear_lq_problem,
)
from .neural import (
    DatasetConfig,
    NetConfig,
    TrainConfig,
    generate_pendulum_dataset,
    load_dataset,
    load_network,
    make_pendulum_ddp_problem,
    save_dataset,
    save_network,
    train,
)
from .solver import MODE_FULL, MODE_ILQG, SolverConfig, solve

EXIT_OK = 0
EXIT_UNCONVERGED = 2
EXIT_TOLERANCE = 3
EXIT_BAD_CONFIG = 64

logger = logging.getLogger(__name__)

PROBLEMS = ("cstr", "cstr-nodelay", "linear-lq", "pendulum-net")


@dataclass
class ExperimentConfig:
    problem: str = "cstr"
    mode: str = MODE_ILQG
    alpha: float | None = 0.4        # fixed step length; null = backtracking
    mu: float = 0.0
    max_iterations: int = 20
    horizon: int | None = None
    delay: int = 1                   # linear-lq delay order
    sigma: float = 0.01
    samples: int = 100
    trajectories: int = 4000
    epochs: int = 400
    checkpoint: str | None = None
    dataset_cache: str | None = None
    control_weight: float = 0.05
    rel_tol: float = 1e-5
    output: str = "out"
    seed: int = 0

    def solver_config(self) -> SolverConfig:
        if self.mode not in (MODE_FULL, MODE_ILQG):
            raise ConfigError(f"unknown mode {self.mode!r}")
        return SolverConfig(mode=self.mode, max_iterations=self.max_iterations,
                            mu_init=self.mu, fixed_alpha=self.alpha)


class ConfigError(Exception):
    pass


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        unknown = set(raw) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(raw)
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    unknown = set(values) - fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    config = ExperimentConfig(**values)
    if config.problem not in PROBLEMS:
        raise ConfigError(f"unknown problem {config.problem!r}; pick from {PROBLEMS}")
    return config


def _echo_config(config: ExperimentConfig, outdir: Path) -> None:
    artifacts.write_json(outdir / "config.json", dataclasses.asdict(config))


def build_problem(config: ExperimentConfig):
    if config.problem in ("cstr", "cstr-nodelay"):
        tau = 0.5 if config.problem == "cstr" else 0.0
        return make_cstr_problem(
            tau=tau,
            horizon=config.horizon or 100,
            fixed_alpha=config.alpha,
            mode=config.mode,
            max_iterations=config.max_iterations,
            mu_init=config.mu,
        )
    if config.problem == "linear-lq":
        prob = make_linear_lq_problem(seed=config.seed, delay=config.delay,
                                      horizon=config.horizon or 20, mode=config.mode)
        return prob
    if config.problem == "pendulum-net":
        if not config.checkpoint:
            raise ConfigError("pendulum-net requires a checkpoint path")
        net, meta = load_network(config.checkpoint)
        prob = make_pendulum_ddp_problem(
            net,
            horizon=config.horizon or 100,
            control_weight=config.control_weight,
            max_iterations=config.max_iterations or 30,
            visible_scale=float(meta.get("visible_scale", 0.8)),
        )
        prob.meta = meta  # type: ignore[attr-defined]
        return prob
    raise ConfigError(f"unknown problem {config.problem!r}")


def _write_solution(outdir: Path, prob, result, extra=None) -> None:
    artifacts.write_trajectory_csv(outdir / "trajectory.csv", result.trajectory, prob.dt)
    artifacts.write_gains_csv(outdir / "gains.csv", result.gains, prob.dt)
    artifacts.write_result_json(outdir / "result.json", result, extra)


def cmd_solve(config: ExperimentConfig) -> int:
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, outdir)
    prob = build_problem(config)
    result = solve(prob.model, prob.cost, prob.initial_window, prob.u_init, prob.config)
    _write_solution(outdir, prob, result, {"problem": config.problem})
    if not result.converged:
        logger.warning("solver did not converge: %s", result.status)
        artifacts.write_json(outdir / "diagnostic.json",
                             {"status": result.status,
                              "iterations": result.iterations_used,
                              "final_cost": result.cost_history[-1]})
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_oracle(config: ExperimentConfig) -> int:
    """Solve the stacked (delay-free) reformulation with the classic
    machinery and record its optimum for comparison."""
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, outdir)
    if config.problem == "pendulum-net":
        raise ConfigError("no oracle defined for pendulum-net")
    prob = build_problem(config)
    aug = augment(prob.model)
    z0 = prob.initial_window.stacked()
    if config.problem == "linear-lq":
        zero_w = DelayWindow(z0[None, :])
        A = aug.jacobians(zero_w, np.zeros(aug.m))[0][0]
        B = aug.jacobians(zero_w, np.zeros(aug.m))[1]
        P = prob.cost.P
        R = prob.cost.R
        Qbig = np.kron(np.eye(prob.model.k + 1), P)
        sol = lqr_solve(A, B, Qbig, R, Qbig, prob.u_init.shape[0], z0)
        artifacts.write_json(outdir / "oracle_result.json", {
            "problem": config.problem,
            "method": "augmented-lqr",
            "cost": sol.cost,
            "controls": [[float(v) for v in row] for row in sol.controls],
        })
        return EXIT_OK
    ddp = ClassicDdp(aug, prob.cost, second_order=False)
    ddp.alphas = np.array([config.alpha]) if config.alpha else ddp.alphas
    res = ddp.solve(z0, prob.u_init, max_iterations=config.max_iterations)
    artifacts.write_json(outdir / "oracle_result.json", {
        "problem": config.problem,
        "method": "augmented-classic-ddp",
        "cost": res.cost_history[-1],
        "cost_history": [float(c) for c in res.cost_history],
    })
    return EXIT_OK


def cmd_check_derivs(config: ExperimentConfig, as_json: bool = False) -> int:
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, outdir)
    prob = build_problem(config)
    rng = np.random.default_rng(config.seed)
    worst: dict[str, float] = {}
    ok = True
    for point in range(3):
        window = prob.initial_window
        u = np.zeros(prob.model.m)
        if point > 0:
            window = DelayWindow(window.states + 0.1 * rng.normal(size=window.states.shape))
            u = 0.5 * rng.normal(size=prob.model.m)
        analytic = compute_bundle(prob.model, prob.cost, 0, window, u)
        numeric_model = _ForcedNumeric(prob.model)
        numeric_cost = _ForcedNumericCost(prob.cost)
        numeric = compute_bundle(numeric_model, numeric_cost, 0, window, u)
        report = check_derivatives(analytic, numeric, config.rel_tol)
        for name, err in report.errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
        ok = ok and report.passed
    from .deriv import DerivativeReport

    summary = DerivativeReport(errors=worst, rel_tol=config.rel_tol,
                               failed_blocks=[b for b, e in worst.items()
                                              if e > config.rel_tol])
    print(summary.as_table())
    if as_json:
        artifacts.write_json(outdir / "check_derivs.json",
                             {"errors": worst, "rel_tol": config.rel_tol,
                              "passed": summary.passed})
    return EXIT_OK if summary.passed else EXIT_TOLERANCE


class _ForcedNumeric:
    """Model wrapper hiding analytic derivatives so bundles go numeric."""

    def __init__(self, inner):
        self.inner = inner
        self.n, self.m, self.k = inner.n, inner.m, inner.k

    def step(self, window, u):
        return self.inner.step(window, u)

    def jacobians(self, window, u):
        return None

    def hessians(self, window, u):
        return None


class _ForcedNumericCost:
    def __init__(self, inner):
        self.inner = inner

    def running(self, i, window, u):
        return self.inner.running(i, window, u)

    def terminal(self, window):
        return self.inner.terminal(window)

    def running_gradients(self, i, window, u):
        return None

    def running_hessians(self, i, window, u):
        return None

    def terminal_gradients(self, window):
        return None

    def terminal_hessians(self, window):
        return None


def cmd_noise(config: ExperimentConfig) -> int:
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, outdir)
    prob = build_problem(config)
    result = solve(prob.model, prob.cost, prob.initial_window, prob.u_init, prob.config)
    if not result.converged:
        return EXIT_UNCONVERGED
    noise = NoiseConfig(sigma=config.sigma, dt=prob.dt or 1.0,
                        samples=config.samples, seed=config.seed)
    summary = {}
    for tag, gains in (("open_loop", None), ("feedback", result.gains)):
        stats, samples, diverged = simulate_noisy(prob.model, result.trajectory,
                                                  gains, noise)
        artifacts.write_ensemble_csv(outdir / f"ensemble_{tag}.csv", stats, prob.dt)
        artifacts.write_samples_csv(outdir / f"samples_{tag}.csv", samples, prob.dt)
        dev = samples - result.trajectory.states[None, :, :]
        sumsq = np.nansum(dev[~diverged] ** 2, axis=(1, 2))
        summary[tag] = {
            "divergence_count": stats.divergence_count,
            "samples_used": stats.samples_used,
            "mean_sumsq_deviation": float(np.mean(sumsq)) if sumsq.size else None,
        }
    artifacts.write_json(outdir / "noise_summary.json", summary)
    artifacts.write_trajectory_csv(outdir / "trajectory.csv", result.trajectory, prob.dt)
    return EXIT_OK


def cmd_cross(config: ExperimentConfig) -> int:
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, outdir)
    base = dataclasses.replace(config, problem="cstr-nodelay")
    prob0 = build_problem(base)
    res0 = solve(prob0.model, prob0.cost, prob0.initial_window, prob0.u_init, prob0.config)
    delayed = build_problem(dataclasses.replace(config, problem="cstr"))
    res_delayed = solve(delayed.model, delayed.cost, delayed.initial_window,
                        delayed.u_init, delayed.config)
    replay, replay_cost = cross_apply(res0, delayed.model, delayed.cost, use_gains=False)
    artifacts.write_trajectory_csv(outdir / "classic_on_nodelay.csv",
                                   res0.trajectory, prob0.dt)
    artifacts.write_trajectory_csv(outdir / "classic_on_delayed.csv", replay, delayed.dt)
    artifacts.write_trajectory_csv(outdir / "delayed_ddp.csv",
                                   res_delayed.trajectory, delayed.dt)
    artifacts.write_json(outdir / "cross_summary.json", {
        "classic_cost_on_nodelay": res0.cost_history[-1],
        "replay_cost_on_delayed": replay_cost,
        "delayed_ddp_cost": res_delayed.cost_history[-1],
        "cost_ratio": replay_cost / res_delayed.cost_history[-1],
    })
    return EXIT_OK


def cmd_train_pendulum(config: ExperimentConfig) -> int:
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, outdir)
    cache = Path(config.dataset_cache) if config.dataset_cache else outdir / "dataset.npz"
    if cache.exists():
        dataset = load_dataset(cache)
        logger.info("loaded cached dataset from %s", cache)
    else:
        dataset = generate_pendulum_dataset(
            DatasetConfig(n_trajectories=config.trajectories, seed=config.seed)
        )
        save_dataset(cache, dataset)
    net, report = train(
        dataset,
        NetConfig(seed=config.seed),
        TrainConfig(epochs=config.epochs, seed=config.seed),
    )
    ckpt = Path(config.checkpoint) if config.checkpoint else outdir / "network.npz"
    save_network(ckpt, net, extra={
        "visible_scale": dataset.visible_scale,
        "u_max": dataset.u_max,
        "gravity": dataset.gravity,
        "damping": dataset.damping,
        "control_range": np.asarray(dataset.control_range),
    })
    artifacts.write_loss_csv(outdir / "loss_curve.csv",
                             report.train_losses, report.val_one_step)
    artifacts.write_json(outdir / "train_report.json", {
        "persistence_one_step": report.persistence_one_step,
        "final_val_one_step": report.final_val_one_step,
        "beats_persistence": report.final_val_one_step < report.persistence_one_step,
        "n_train": report.n_train,
        "n_val": report.n_val,
        "epochs": config.epochs,
        "control_range": list(report.control_range),
    })
    if not report.final_val_one_step < report.persistence_one_step:
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_pendulum(config: ExperimentConfig) -> int:
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, outdir)
    if not config.checkpoint:
        raise ConfigError("pendulum requires a checkpoint path")
    net, meta = load_network(config.checkpoint)
    scale = float(meta.get("visible_scale", 0.8))
    gravity = float(meta.get("gravity", 2.0))
    damping = float(meta.get("damping", 0.05))
    prob = make_pendulum_ddp_problem(net, horizon=config.horizon or 100,
                                     control_weight=config.control_weight,
                                     max_iterations=config.max_iterations or 30,
                                     visible_scale=scale)
    result = solve(prob.model, prob.cost, prob.initial_window, prob.u_init, prob.config)
    _write_solution(outdir, prob, result, {"problem": "pendulum-net"})

    real = PendulumModel(gravity=gravity, damping=damping)
    open_loop = transfer_to_real(result, real, gain_policy="none",
                                 visible_scale=scale)
    with_gains = transfer_to_real(result, real, gain_policy="visible-current-only",
                                  visible_scale=scale)
    artifacts.write_transfer_csv(outdir / "transfer_open_loop.csv", open_loop, prob.dt)
    artifacts.write_transfer_csv(outdir / "transfer_feedback.csv", with_gains, prob.dt)

    # reference: the same swing-up planned directly on the simulator
    ref = ClassicDdp(real, RealPendulumSwingupCost(config.control_weight),
                     second_order=False)
    ref_res = ref.solve(np.array([np.pi, 0.0]), np.zeros_like(result.trajectory.controls),
                        max_iterations=60)
    with open(outdir / "classic_reference_controls.csv", "w") as fh:
        fh.write("t,u_1\n")
        for i, u in enumerate(ref_res.controls):
            fh.write(f"{i * (prob.dt or 1.0)!r},{float(u[0])!r}\n")

    artifacts.write_json(outdir / "pendulum_summary.json", {
        "solver_status": result.status,
        "iterations": result.iterations_used,
        "final_cost": result.cost_history[-1],
        "open_loop_final_angle_error": open_loop.final_angle_error,
        "feedback_final_angle_error": with_gains.final_angle_error,
        "classic_reference_cost": ref_res.cost_history[-1],
    })
    if not result.converged:
        return EXIT_UNCONVERGED
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="delayddp",
        description="trajectory optimization for state-delayed systems",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--problem", choices=PROBLEMS)
        p.add_argument("--mode", choices=(MODE_ILQG, MODE_FULL))
        p.add_argument("--alpha", type=float,
                       help="fixed step length; pass 0 for backtracking search")
        p.add_argument("--mu", type=float)
        p.add_argument("--max-iterations", dest="max_iterations", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--delay", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--samples", type=int)
        p.add_argument("--trajectories", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--dataset-cache", dest="dataset_cache")
        p.add_argument("--control-weight", dest="control_weight", type=float)
        p.add_argument("--rel-tol", dest="rel_tol", type=float)
        p.add_argument("--output", "-o")
        p.add_argument("--seed", type=int)

    for name in ("solve", "oracle", "noise", "cross", "train-pendulum", "pendulum"):
        add_common(sub.add_parser(name))
    p_check = sub.add_parser("check-derivs")
    add_common(p_check)
    p_check.add_argument("--json", action="store_true", dest="as_json")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    overrides = {
        key: getattr(args, key, None)
        for key in (f.name for f in dataclasses.fields(ExperimentConfig))
    }
    if getattr(args, "alpha", None) == 0:
        overrides["alpha"] = None
        explicit_alpha_none = True
    else:
        explicit_alpha_none = False

    try:
        config = load_config(args.config, overrides)
        if explicit_alpha_none:
            config.alpha = None
        commands = {
            "solve": cmd_solve,
            "oracle": cmd_oracle,
            "noise": cmd_noise,
            "cross": cmd_cross,
            "train-pendulum": cmd_train_pendulum,
            "pendulum": cmd_pendulum,
        }
        if args.command == "check-derivs":
            return cmd_check_derivs(config, as_json=getattr(args, "as_json", False))
        return commands[args.command](config)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
