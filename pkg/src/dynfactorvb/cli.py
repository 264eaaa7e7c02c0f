"""Command-line entry point: ``dfvb {fit,counts,check-grad,simulate} --config FILE``.

Exit codes: 0 success, 1 configuration or I/O error, 2 numerical failure
(divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from dynfactorvb.io import ConfigError, RunConfig, format_float, lambda_to_json, load_config, read_csv, write_csv
from dynfactorvb.models import (
    LGSSM,
    DoveData,
    DoveHyper,
    DoveModel,
    GaussianToy,
    Grid,
    LGSSMTarget,
    WishartHyper,
    WishartModel,
    WishartTheta,
    ar1_prefilter,
    check_gradient,
    self_target,
    simulate_dove,
    simulate_wishart,
    wishart_pack,
)
from dynfactorvb.optimizer import TRACE_COLUMNS, FitDivergence, final_elbo, fit
from dynfactorvb.varfamily import NoiseDraw, count_params, grad_roeder, grad_standard, sample_theta_batch, workspace

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
DESK_DOVE = dict(s_eps=0.05, s_eta=0.05, s_psi=0.01, s_alpha=0.01)


def _dove_hyper(cfg: RunConfig) -> DoveHyper:
    return DoveHyper(
        l=cfg.get("l", int, 1),
        c=cfg.get("c", float, 4.0),
        u0_var=cfg.get("u0_var", float, 10.0),
        kernel=cfg.get("kernel", str, "exp_decay"),
    )


def _wishart_hyper(cfg: RunConfig, k: int) -> WishartHyper:
    s0 = cfg.path("sigma0", required=False)
    return WishartHyper(
        k,
        alpha0=cfg.get("alpha0", float, 2.0),
        beta0=cfg.get("beta0", float, 2.0),
        Sigma0=None if s0 is None else read_csv(s0)[1],
    )


def build_model(cfg: RunConfig, allow_dummy: bool = False):
    """Model named by the config; dummy data stands in when only dimensions are needed."""
    if cfg.model == "toy":
        m = cfg.data.get("toy_m")
        return GaussianToy.random(
            cfg.get("toy_p", int, 2),
            cfg.get("toy_n_states", int, 3),
            cfg.get("toy_P", int, 1),
            None if m is None else int(m),
            seed=cfg.get("toy_seed", int, 0),
        )
    if cfg.model == "lgssm":
        with open(cfg.path("system")) as fh:
            sysd = json.load(fh)
        model = LGSSM(**{k: np.asarray(sysd[k], dtype=float) for k in ("F", "Q", "G", "R", "m0", "P0")})
        return LGSSMTarget(model, read_csv(cfg.path("observations"))[1])
    if cfg.model == "dove":
        hyper = _dove_hyper(cfg)
        if allow_dummy and "counts" not in cfg.data:
            p, T = cfg.get("p", int), cfg.get("T", int)
            coords = np.random.default_rng(0).uniform(size=(p, 2))
            return DoveModel(DoveData(np.zeros((T, p)), Grid(coords)), hyper)
        y = read_csv(cfg.path("counts"))[1]
        coords = read_csv(cfg.path("coords"))[1]
        off = cfg.path("offsets", required=False)
        return DoveModel(DoveData(y, Grid(coords), None if off is None else read_csv(off)[1]), hyper)
    # wishart
    if allow_dummy and "returns" not in cfg.data:
        k, T = cfg.get("k", int), cfg.get("T", int)
        return WishartModel(np.random.default_rng(0).standard_normal((T, k)), WishartHyper(k, Sigma0=np.eye(k)))
    y = read_csv(cfg.path("returns"))[1]
    if cfg.get("prefilter", str, "no").lower() in ("1", "true", "yes"):
        y = ar1_prefilter(y)
    return WishartModel(y, _wishart_hyper(cfg, y.shape[1]))


def _components(cfg: RunConfig, model, layout) -> np.ndarray:
    spec = cfg.posterior_components
    if spec == "all":
        return np.arange(model.dim)
    if spec == "static":
        return np.arange(layout.n_x, model.dim) if layout.P else np.arange(model.dim)
    out = []
    for part in spec.split(","):
        if ":" in part:
            a, b = part.split(":")
            out.extend(range(int(a), int(b)))
        else:
            out.append(int(part))
    idx = np.array(out, dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= model.dim:
        raise ConfigError("posterior_components out of range")
    return idx


def cmd_fit(cfg: RunConfig) -> int:
    model = build_model(cfg)
    layout = model.layout(cfg.q, cfg.mean_mode, cfg.structure)
    lam0 = model.initial_params(layout, delta=cfg.delta0)
    os.makedirs(cfg.output_dir, exist_ok=True)
    S_final = cfg.fit.final_samples
    init, _ = final_elbo(lam0, layout, model, S_final, rng=np.random.SeedSequence(cfg.seed).spawn(3)[2])
    lam, trace = fit(lam0, layout, model, cfg.fit)
    est, (lo, hi) = final_elbo(lam, layout, model, S_final, rng=cfg.seed + 1)
    out = cfg.output_dir
    write_csv(os.path.join(out, "elbo_trace.csv"), trace.rows, list(TRACE_COLUMNS))
    with open(os.path.join(out, "lambda_opt.json"), "w") as fh:
        fh.write(lambda_to_json(lam, layout))
    if cfg.posterior_samples:
        rng = np.random.default_rng(cfg.seed + 2)
        S = cfg.posterior_samples
        thetas = sample_theta_batch(
            lam, layout, rng.standard_normal((S, layout.dim_rho)), rng.standard_normal((S, layout.n_x)), workspace(lam, layout)
        )
        idx = _components(cfg, model, layout)
        write_csv(os.path.join(out, "posterior_samples.csv"), thetas[:, idx], [f"theta_{i}" for i in idx])
    with open(os.path.join(out, "final_elbo.txt"), "w") as fh:
        fh.write(f"final_elbo = {format_float(est)}\n")
        fh.write(f"ci95_lo = {format_float(lo)}\nci95_hi = {format_float(hi)}\n")
        fh.write(f"initial_elbo = {format_float(init)}\nsamples = {S_final}\n")
    print(f"initial ELBO {init:.6g}; final ELBO {est:.6g} (95% CI {lo:.6g}, {hi:.6g}); {len(trace)} trace rows in {out}")
    return EXIT_OK


def cmd_counts(cfg: RunConfig) -> int:
    model = build_model(cfg, allow_dummy=True)
    layout = model.layout(cfg.q, cfg.mean_mode, cfg.structure)
    counts = count_params(layout, model.c2_mask(layout))
    print(f"{cfg.model} {cfg.structure} {cfg.mean_mode} q={cfg.q}")
    for key in ("mu", "B", "D", "C1", "C2", "total"):
        print(f"{key:>6} {counts[key]:>8}")
    return EXIT_OK


def _desk_models(cfg: RunConfig) -> dict:
    if cfg.data.get("models", "") != "all":
        return {cfg.model: build_model(cfg)}
    grid = Grid.rectangular(4, 4)
    dove, _ = simulate_dove(grid, 5, seed=cfg.seed, fixed=dict(DESK_DOVE, u0=np.zeros(16)))
    k = 3
    y, _ = simulate_wishart(k, 5, np.linalg.cholesky(0.8 * np.eye(k) + 0.1), 0.5, k + 6.0, np.eye(k), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    A = rng.standard_normal((2, 2))
    lg = LGSSM(0.7 * A / np.max(np.abs(np.linalg.eigvals(A))), 0.5 * np.eye(2), np.eye(2), 0.3 * np.eye(2), np.zeros(2), np.eye(2))
    return {
        "toy": GaussianToy.random(2, 3, 1, seed=cfg.seed),
        "lgssm": LGSSMTarget(lg, lg.simulate(5, rng)[1]),
        "dove": DoveModel(dove),
        "wishart": WishartModel(y),
    }


def cmd_check_grad(cfg: RunConfig) -> int:
    tol = cfg.tolerance
    ok = True
    rng = np.random.default_rng(cfg.seed)
    for name, model in _desk_models(cfg).items():
        theta0 = model.default_theta()
        err = max(
            check_gradient(model, theta0 + 0.1 * rng.standard_normal(model.dim), directions=20, rng=i) for i in range(3)
        )
        ok &= err < tol
        print(f"{name:>8} max FD relative error {err:.3e} {'PASS' if err < tol else 'FAIL'}")

    toy = GaussianToy.random(2, 3, 1, seed=cfg.seed)
    layout = toy.layout(1)
    lam = toy.initial_params(layout, delta=0.5)
    lam.mu[:] = 0.0
    g = grad_roeder(lam, layout, self_target(lam, layout), NoiseDraw.draw(layout, rng))
    norm = float(np.sqrt(sum(g.block_norm(b) ** 2 for b in ("mu", "B", "delta", "C"))))
    ok &= norm < 1e-8
    print(f"self-target Roeder gradient norm {norm:.3e} {'PASS' if norm < 1e-8 else 'FAIL'}")

    draws = cfg.get("equivalence_draws", int, 2000)
    ws = workspace(lam, layout)
    diffs = []
    for _ in range(draws):
        u = NoiseDraw.draw(layout, rng)
        diffs.append(grad_standard(lam, layout, toy, u, ws=ws).flatten() - grad_roeder(lam, layout, toy, u, ws=ws).flatten())
    diffs = np.array(diffs)
    sd = diffs.std(axis=0, ddof=1)
    live = sd > 1e-12
    z = float(np.max(np.abs(diffs.mean(0)[live]) / (sd[live] / np.sqrt(draws)))) if live.any() else 0.0
    ok &= z < 6.0
    print(f"estimator equivalence max |z| {z:.2f} over {draws} draws {'PASS' if z < 6.0 else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_simulate(cfg: RunConfig) -> int:
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    seed = cfg.seed
    lines = [f"model = {cfg.model}", f"seed = {seed}", f"q = {cfg.q}"]
    if cfg.model == "dove":
        rows, cols = cfg.get("grid_rows", int, 4), cfg.get("grid_cols", int, 4)
        grid = Grid.rectangular(rows, cols)
        fixed = {k: cfg.get(k, float) for k in ("s_eps", "s_eta", "s_psi", "s_alpha") if k in cfg.data}
        if "psi" in cfg.data:
            # negative diffusion rates make the state recursion explode
            fixed["psi"] = np.full(grid.p, cfg.get("psi", float))
        hyper = _dove_hyper(cfg)
        data, theta = simulate_dove(grid, cfg.get("T", int, 10), hyper, seed, fixed)
        write_csv(os.path.join(out, "counts.csv"), data.y.astype(int), [f"cell_{i}" for i in range(grid.p)])
        write_csv(os.path.join(out, "coords.csv"), grid.coords, ["x", "y"])
        lines += ["counts = counts.csv", "coords = coords.csv"]
        lines += [f"{k} = {v}" for k, v in (("l", hyper.l), ("c", hyper.c), ("u0_var", hyper.u0_var), ("kernel", hyper.kernel))]
    elif cfg.model == "wishart":
        k = cfg.get("k", int, 3)
        H = np.linalg.cholesky(0.8 * np.eye(k) + 0.1)
        sigma0 = np.eye(k)
        d, nu = cfg.get("d", float, 0.5), cfg.get("nu", float, k + 6.0)
        y, Sig = simulate_wishart(k, cfg.get("T", int, 30), H, d, nu, sigma0, seed)
        write_csv(os.path.join(out, "returns.csv"), y, [f"asset_{i}" for i in range(k)])
        write_csv(os.path.join(out, "sigma0.csv"), sigma0)
        theta = wishart_pack(WishartTheta(np.linalg.cholesky(Sig), H, d, nu))
        lines += ["returns = returns.csv", "sigma0 = sigma0.csv"]
    elif cfg.model == "lgssm":
        p, m, T = cfg.get("p", int, 2), cfg.get("m", int, 2), cfg.get("T", int, 20)
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((p, p))
        model = LGSSM(
            0.7 * A / np.max(np.abs(np.linalg.eigvals(A))),
            0.5 * np.eye(p) + 0.1 * np.ones((p, p)),
            rng.standard_normal((m, p)),
            0.3 * np.eye(m),
            np.zeros(p),
            np.eye(p),
        )
        x, y = model.simulate(T, rng)
        with open(os.path.join(out, "system.json"), "w") as fh:
            json.dump({k: np.asarray(getattr(model, k)).tolist() for k in ("F", "Q", "G", "R", "m0", "P0")}, fh, indent=1)
        write_csv(os.path.join(out, "observations.csv"), y)
        theta = x.ravel()
        lines += ["system = system.json", "observations = observations.csv"]
    else:
        raise ConfigError("the toy model is generated from its seed and has no data files")
    write_csv(os.path.join(out, "theta_true.csv"), theta[:, None], ["theta"])
    with open(os.path.join(out, "fit.cfg"), "w") as fh:
        fh.write("\n".join(lines + ["output_dir = fit_output"]) + "\n")
    print(f"wrote simulated {cfg.model} data to {out}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "counts": cmd_counts, "check-grad": cmd_check_grad, "simulate": cmd_simulate}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="dfvb", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--tolerance", type=float, default=None, help="override the check-grad tolerance")
    parser.add_argument("--output-dir", default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.tolerance is not None:
            if args.tolerance <= 0:
                raise ConfigError("tolerance must be positive")
            cfg.tolerance = args.tolerance
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        elif not os.path.isabs(cfg.output_dir):
            cfg.output_dir = os.path.join(cfg.base_dir, cfg.output_dir)
        return COMMANDS[args.command](cfg)
    except (FitDivergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
