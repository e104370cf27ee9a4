import logging

from core.artifacts import write_field, write_json
from core.covariance_models import FullBivariateMatern, ScaleTag, ensure_valid
from core.exceptions import ConfigError
from core.fields import FieldRealization, NystromPosterior, nystrom_factor, simulate
from core.management.commands._base import (
    NumericalCommand,
    grid_from_config,
    load_model,
    quadrature_grid,
    true_model,
)

logger = logging.getLogger(__name__)


class Command(NumericalCommand):
    """
    Draw realizations on the grid, unconditionally or given a data set.

    Usage:
        python manage.py simulate --config test1 --n-real 10
        python manage.py simulate --config test1 --params fit/params.json --scale coarse
        python manage.py simulate --config test1 --params fit/params.json --dataset run/dataset.csv --n-real 50
    """

    help = "Simulate Gaussian random field realizations with the Nyström method"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--params", default=None, help="Model parameter file; defaults to the config's true model")
        parser.add_argument("--dataset", default=None, help="Condition the realizations on this data set")
        parser.add_argument("--scale", choices=["fine", "coarse"], default="fine")
        parser.add_argument("--n-real", type=int, default=1, help="Number of realizations")
        parser.add_argument("--start", type=int, default=0, help="Index of the first realization")

    def run(self, **options):
        config = self.load_config(options)
        seed = self.resolve_seed(options, config)
        out_dir = self.resolve_out_dir(options, config)
        n_real = options.get("n_real")
        start = options.get("start") or 0
        if n_real is None or n_real < 1:
            raise ConfigError(f"--n-real must be positive, got {n_real}")
        if start < 0:
            raise ConfigError(f"--start must be nonnegative, got {start}")

        grid = grid_from_config(config)
        scale = ScaleTag.parse(options["scale"])
        if options.get("params"):
            model = load_model(options["params"], domain=grid.domain)
        elif options.get("dataset"):
            raise ConfigError("conditional simulation needs --params")
        else:
            model = true_model(config)
        if isinstance(model, FullBivariateMatern):
            ensure_valid(model.params)

        factor = nystrom_factor(model, scale, quadrature_grid(config))
        if options.get("dataset"):
            data = self.read_dataset(options["dataset"])
            values = NystromPosterior(data, factor).samples(grid.points(scale), n_real, seed, start)
            fields = [
                FieldRealization(grid, values[:, k], scale, seed=seed, index=start + k) for k in range(n_real)
            ]
            mode = "conditional"
        else:
            fields = simulate(factor, grid, n_real, seed, start)
            mode = "unconditional"
        logger.info(f"Drew {n_real} {mode} {scale.label}-scale realization(s) starting at {start}")

        extra = {
            "params": options.get("params"),
            "dataset": options.get("dataset"),
            "scale": scale.label,
            "n_real": n_real,
            "start": start,
        }
        with self.outputs(out_dir, config, {"base": seed}, extra) as out:
            for realization in fields:
                write_field(out.path(f"realization_{realization.index:04d}.grd"), realization, {"mode": mode})
            stage = {"mode": mode, "rank": factor.rank, "jitter": factor.chol_lower.jitter}
            write_json(out.path("simulation_report.json"), stage)
            out.manifest.stages["simulate"] = stage
        self.success(f"Wrote {n_real} {mode} realization(s) to {out_dir}")
