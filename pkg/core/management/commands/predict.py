import logging

from core.artifacts import read_field, write_csv, write_field_csv, write_grid, write_json
from core.covariance_models import FullBivariateMatern, ScaleTag, ensure_valid
from core.fields import NystromPosterior, mse, nystrom_factor
from core.gp import condition
from core.management.commands._base import (
    NumericalCommand,
    grid_from_config,
    load_model,
    quadrature_grid,
)

logger = logging.getLogger(__name__)


class Command(NumericalCommand):
    """
    Conditional mean and variance per scale.

    Usage:
        python manage.py predict --config test1 --dataset run/dataset.csv --params fit/params.json
        python manage.py predict --config test1 --dataset d.csv --params p.json --reference run/fine_field.grd run/coarse_field.grd
        python manage.py predict --config test1 --dataset d.csv --params p.json --targets observations
    """

    help = "Predict the fine and coarse fields conditioned on multiscale data"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--dataset", required=True, help="Data set CSV file")
        parser.add_argument("--params", required=True, help="Model parameter file written by fit")
        parser.add_argument("--scale", choices=["fine", "coarse", "both"], default="both")
        parser.add_argument(
            "--targets",
            choices=["grid", "observations"],
            default="grid",
            help="Predict on the grid (rank-M path) or at the observation locations (exact path)",
        )
        parser.add_argument(
            "--reference",
            nargs="+",
            default=None,
            help="Reference field file(s); the MSE is reported for every matching scale",
        )

    def run(self, **options):
        config = self.load_config(options)
        seed = self.resolve_seed(options, config)
        out_dir = self.resolve_out_dir(options, config)
        grid = grid_from_config(config)
        data = self.read_dataset(options["dataset"])
        model = load_model(options["params"], domain=grid.domain)
        if isinstance(model, FullBivariateMatern):
            ensure_valid(model.params)
        scales = list(ScaleTag) if options["scale"] == "both" else [ScaleTag.parse(options["scale"])]
        references = {}
        for path in options.get("reference") or []:
            reference = read_field(path)
            references[reference.scale] = reference

        extra = {"dataset": options["dataset"], "params": options["params"], "targets": options["targets"]}
        with self.outputs(out_dir, config, {"base": seed}, extra) as out:
            if options["targets"] == "observations":
                targets = data.points
                summary = condition(data, model, targets)
                rows = [
                    (ScaleTag(targets.tags[i]).label, targets.X[i, 0], targets.X[i, 1], summary.mean[i], summary.variance[i])
                    for i in range(len(targets))
                ]
                write_csv(out.path("posterior_observations.csv"), ["scale", "x", "y", "mean", "variance"], rows)
                self.success(f"Predicted at {len(targets)} observation locations")
                return

            report = {"nystrom_shape": list(config.nystrom.shape), "scales": {}}
            for scale in scales:
                factor = nystrom_factor(model, scale, quadrature_grid(config))
                posterior = NystromPosterior(data, factor)
                summary = posterior.summary(grid.points(scale))
                meta = {"scale": scale.label}
                write_grid(out.path(f"{scale.label}_mean.grd"), grid, summary.mean, meta)
                write_grid(out.path(f"{scale.label}_variance.grd"), grid, summary.variance, meta)
                write_field_csv(
                    out.path(f"{scale.label}_posterior.csv"),
                    grid,
                    {"mean": summary.mean, "variance": summary.variance},
                )
                entry = {
                    "jitter": factor.chol_lower.jitter,
                    "clamped_variances": summary.n_clamped,
                }
                if scale in references:
                    entry["mse"] = mse(summary, references[scale])
                    logger.info(f"MSE at the {scale.label} scale: {entry['mse']:.6g}")
                report["scales"][scale.label] = entry
            write_json(out.path("prediction_report.json"), report)
            out.manifest.stages["predict"] = report
        self.success(f"Predicted {', '.join(s.label for s in scales)} scale(s) on {grid.shape[0]}x{grid.shape[1]} grid")
