import logging

from core.artifacts import write_dataset, write_field, write_field_csv, write_json
from core.covariance_models import ScaleTag, true_coarse_parameters
from core.fields import (
    block_average_grid,
    dataset_from_observations,
    nystrom_factor,
    sample_observations,
    simulate,
)
from core.management.commands._base import (
    NumericalCommand,
    grid_from_config,
    model_document,
    quadrature_grid,
    true_model,
)
from core.tasks.task_manager import TaskManager
from utils.rng import derived_seed

logger = logging.getLogger(__name__)


class Command(NumericalCommand):
    """
    Generate synthetic multiscale data sets.

    Usage:
        python manage.py generate --config test1
        python manage.py generate --config test3 --replicates 20 --threads 4
    """

    help = "Simulate a reference fine field, block-average it and sample noisy observations at both scales"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--replicates", type=int, default=None, help="Override the number of replicate data sets")
        parser.add_argument("--fields-csv", action="store_true", help="Also write reference fields as CSV")

    def run(self, **options):
        config = self.load_config(options)
        seed = self.resolve_seed(options, config)
        threads = self.resolve_threads(options)
        out_dir = self.resolve_out_dir(options, config)
        replicates = options.get("replicates") or config.replicates

        grid = grid_from_config(config)
        model = true_model(config)
        factor = nystrom_factor(model, ScaleTag.FINE, quadrature_grid(config))
        obs = config.observations
        sigma_c, rho = true_coarse_parameters(model, grid.domain.lo + 0.5 * (grid.domain.hi - grid.domain.lo))

        fields = simulate(factor, grid, replicates, seed)

        def replicate(r: int):
            fine = fields[r]
            coarse = block_average_grid(fine, obs.window_cells)
            fine_obs = sample_observations(fine, obs.n_fine, obs.noise_sigma, derived_seed(seed, r, 1))
            coarse_obs = sample_observations(coarse, obs.n_coarse, obs.noise_sigma, derived_seed(seed, r, 2))
            data = dataset_from_observations(fine_obs, coarse_obs, obs.noise_sigma, obs.noise_sigma)
            return fine, coarse, data

        seeds = {"base": seed, "fields": seed}
        with self.outputs(out_dir, config, seeds) as out:
            out.manifest.stages["nystrom"] = {
                "rank": factor.rank,
                "jitter": factor.chol_lower.jitter,
                "quadrature_shape": list(config.nystrom.shape),
            }
            out.manifest.stages["replicates"] = replicates
            write_json(
                out.path("true_params.json"),
                {**model_document(model), "true_sigma_c": sigma_c, "true_rho": rho},
            )
            with TaskManager(max_workers=threads) as manager:
                results = manager.map_ordered("generate", replicate, range(replicates))
            for r, (fine, coarse, data) in enumerate(results):
                prefix = "" if replicates == 1 else f"replicate_{r:04d}/"
                write_field(out.path(f"{prefix}fine_field.grd"), fine)
                write_field(out.path(f"{prefix}coarse_field.grd"), coarse, {"window_cells": obs.window_cells})
                write_dataset(out.path(f"{prefix}dataset.csv"), data)
                if options.get("fields_csv"):
                    write_field_csv(
                        out.path(f"{prefix}fields.csv"), grid, {"fine": fine.values, "coarse": coarse.values}
                    )
        logger.info(f"Generated {replicates} data set(s) for {config.name} (true sigma_c={sigma_c:.4g}, rho={rho:.4g})")
        self.success(f"Generated {replicates} data set(s) in {out_dir}")
