import logging

import numpy as np

from core.artifacts import read_field, write_csv, write_grid, write_json
from core.covariance_models import FullBivariateMatern, ScaleTag, ensure_valid
from core.darcy import (
    DarcyProblem,
    HeadObservationSet,
    boundary_fluxes,
    mc_propagate,
    mmse_update,
    normalized_head,
    observation_rows,
    predictive_band,
    profile_nodes,
    profile_variance_norm,
    sample_head_observations,
    solve_darcy,
)
from core.exceptions import ConfigError, DomainError
from core.fields import NystromPosterior, nystrom_factor, single_scale
from core.management.commands._base import (
    NumericalCommand,
    grid_from_config,
    load_model,
    quadrature_grid,
)
from core.tasks.task_manager import TaskManager
from utils.rng import derived_seed

logger = logging.getLogger(__name__)

CONDITIONING_SETS = ("fine_only", "multiscale")

PROFILE_HEADER = [
    "x",
    "reference",
    "prior_mean",
    "prior_lower",
    "prior_upper",
    "prior_variance",
    "conditioned_mean",
    "conditioned_lower",
    "conditioned_upper",
    "conditioned_variance",
]


class Command(NumericalCommand):
    """
    Propagate log-conductivity uncertainty to the hydraulic head.

    Usage:
        python manage.py darcy --config darcy1 --dataset run/dataset.csv --params fit/params.json --reference run/fine_field.grd
        python manage.py darcy --config darcy1 --dataset d.csv --params p.json --reference f.grd --n-real 200 --threads 4
    """

    help = "Monte-Carlo head statistics under fine-only and multiscale conditioning, with the MMSE head update"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--dataset", required=True, help="Data set CSV file")
        parser.add_argument("--params", required=True, help="Model parameter file written by fit")
        parser.add_argument("--reference", required=True, help="Reference fine log-conductivity field (.grd)")
        parser.add_argument("--n-real", type=int, default=None, help="Monte-Carlo realizations")
        parser.add_argument("--solver", choices=["direct", "cg"], default=None)

    def run(self, **options):
        config = self.load_config(options)
        if config.darcy is None:
            raise ConfigError(f"config '{config.name}' has no darcy section")
        flow = config.darcy
        seed = self.resolve_seed(options, config)
        threads = self.resolve_threads(options)
        out_dir = self.resolve_out_dir(options, config)
        n_real = options.get("n_real") or flow.n_real

        grid = grid_from_config(config)
        problem = DarcyProblem(grid, K_G=flow.K_G, h_L=flow.h_L, h_R=flow.h_R, solver=options.get("solver") or flow.solver)
        data = self.read_dataset(options["dataset"])
        model = load_model(options["params"], domain=grid.domain)
        if isinstance(model, FullBivariateMatern):
            ensure_valid(model.params)
        reference = read_field(options["reference"])
        if reference.grid.to_dict() != grid.to_dict():
            raise DomainError("reference field grid differs from the configured grid")

        truth = solve_darcy(problem, reference)
        inflow, outflow = boundary_fluxes(problem, truth)
        observed, h_obs = sample_head_observations(
            problem, truth, flow.n_head_obs, flow.sigma_eh, derived_seed(seed, 1)
        )
        profile = profile_nodes(grid, flow.profile_x2)
        nodes = np.union1d(profile, observed)
        profile_rows = observation_rows(nodes, profile)
        head_obs = HeadObservationSet(observation_rows(nodes, observed), h_obs, flow.sigma_eh, len(nodes))

        factor = nystrom_factor(model, ScaleTag.FINE, quadrature_grid(config))
        targets = grid.points(ScaleTag.FINE)
        mc_seed = derived_seed(seed, 2)
        span = flow.h_L - flow.h_R
        reference_profile = normalized_head(problem, truth.head[profile])
        x = grid.centroids[profile, 0]

        results = {}
        with TaskManager(max_workers=threads) as manager:
            for name in CONDITIONING_SETS:
                conditioning = single_scale(data, ScaleTag.FINE) if name == "fine_only" else data
                sampler = NystromPosterior(conditioning, factor).sampler(targets)
                logger.info(f"Propagating {n_real} realizations conditioned on {name} data")
                stats = mc_propagate(problem, sampler, n_real, mc_seed, nodes, task_manager=manager)
                results[name] = (stats, mmse_update(stats, head_obs))

        seeds = {"base": seed, "head_observations": derived_seed(seed, 1), "monte_carlo": mc_seed}
        extra = {
            "dataset": options["dataset"],
            "params": options["params"],
            "reference": options["reference"],
            "n_real": n_real,
            "solver": problem.solver,
        }
        with self.outputs(out_dir, config, seeds, extra) as out:
            table = {"prior": {}, "conditioned": {}}
            coverage = {}
            for name, (stats, update) in results.items():
                columns = {}
                for stage, mean, variance in (
                    ("prior", stats.mean, stats.variance),
                    ("conditioned", update.h_hat, update.variance),
                ):
                    m = normalized_head(problem, mean[profile_rows])
                    v = variance[profile_rows] / span**2
                    lower, upper = predictive_band(m, v)
                    columns[stage] = (m, lower, upper, v)
                    table[stage][name] = profile_variance_norm(v, grid)
                _, lower, upper, _ = columns["conditioned"]
                inside = (reference_profile >= lower) & (reference_profile <= upper)
                coverage[name] = float(np.mean(inside))
                rows = [
                    [x[i], reference_profile[i]]
                    + [col[i] for col in columns["prior"]]
                    + [col[i] for col in columns["conditioned"]]
                    for i in range(len(profile))
                ]
                write_csv(out.path(f"profile_{name}.csv"), PROFILE_HEADER, rows)

            write_grid(
                out.path("reference_head.grd"),
                grid,
                normalized_head(problem, truth.head),
                {"quantity": "normalized_head"},
            )
            write_csv(
                out.path("head_observations.csv"),
                ["node", "x", "y", "head"],
                [(int(n), *grid.centroids[n], h) for n, h in zip(observed, h_obs)],
            )
            report = {
                "variance_norm": table,
                "coverage": coverage,
                "n_real": n_real,
                "n_head_obs": len(observed),
                "sigma_eh": flow.sigma_eh,
                "reference_fluxes": {"inflow": inflow, "outflow": outflow},
            }
            write_json(out.path("darcy_report.json"), report)
            out.manifest.stages["darcy"] = {
                "problem": problem.to_dict(),
                "nystrom_rank": factor.rank,
                "reference_residuals": truth.residuals,
            }

        for stage in ("prior", "conditioned"):
            self.stdout.write(
                f"{stage:<12} fine_only={table[stage]['fine_only']:.4e} multiscale={table[stage]['multiscale']:.4e}"
            )
        self.success(f"Darcy propagation finished; report in {out_dir}")
