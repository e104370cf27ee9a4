import logging

import numpy as np
from django.conf import settings

from core.artifacts import write_csv, write_json
from core.covariance_models import (
    FullBivariateMatern,
    ScaleTag,
    ensure_valid,
    pseudo_cross_variogram,
    pseudo_isotropic_variogram,
)
from core.exceptions import ConfigError
from core.fields import ObservationSet, VariogramTable, empirical_variogram
from core.management.commands._base import NumericalCommand, grid_from_config, load_model

logger = logging.getLogger(__name__)

HEADER = ["curve", "lag", "value", "count", "kind"]


class Command(NumericalCommand):
    """
    Empirical and model variograms at both scales.

    Usage:
        python manage.py variogram --config test1 --dataset run/dataset.csv
        python manage.py variogram --config test1 --dataset run/dataset.csv --params fit/params.json
        python manage.py variogram --config test1 --params fit/params.json --lags 0.01 0.05 0.1
    """

    help = "Compute empirical and model (pseudo) variograms and cross-variograms"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--dataset", default=None, help="Data set CSV file")
        parser.add_argument("--params", default=None, help="Model parameter file written by fit")
        parser.add_argument("--bins", type=int, default=None, help="Number of lag bins")
        parser.add_argument("--max-lag", type=float, default=None, help="Largest binned lag")
        parser.add_argument("--lags", type=float, nargs="+", default=None, help="Model lags without a data set")

    def empirical(self, data, n_bins, max_lag):
        fine = ObservationSet(data.X_f, data.y_f, ScaleTag.FINE)
        coarse = ObservationSet(data.X_c, data.y_c, ScaleTag.COARSE)
        return {
            "fine": empirical_variogram(fine, n_bins=n_bins, max_lag=max_lag),
            "coarse": empirical_variogram(coarse, n_bins=n_bins, max_lag=max_lag),
            "cross": empirical_variogram(coarse, fine, n_bins=n_bins, max_lag=max_lag),
        }

    def run(self, **options):
        if options.get("dataset") is None and options.get("params") is None:
            raise ConfigError("give --dataset, --params or both")
        config = self.load_config(options)
        seed = self.resolve_seed(options, config)
        out_dir = self.resolve_out_dir(options, config)
        grid = grid_from_config(config)
        n_bins = options.get("bins") or settings.MULTISCALE_GP["VARIOGRAM_BINS"]

        curves = {}
        if options.get("dataset"):
            data = self.read_dataset(options["dataset"])
            curves = self.empirical(data, n_bins, options.get("max_lag"))

        model_lags = None
        if options.get("params"):
            model = load_model(options["params"], domain=grid.domain)
            if isinstance(model, FullBivariateMatern):
                ensure_valid(model.params)
            if options.get("lags"):
                lags = np.asarray(options["lags"], dtype=float)
            elif curves:
                lags = curves["fine"].lags
            else:
                top = options.get("max_lag") or 0.5 * min(grid.extent)
                lags = (np.arange(n_bins) + 0.5) * top / n_bins
            if np.any(lags < 0.0):
                raise ConfigError("lags must be nonnegative")
            center = grid.domain.lo + 0.5 * (grid.domain.hi - grid.domain.lo)
            inside = lags <= grid.domain.hi[0] - center[0]
            if not inside.all():
                logger.warning(f"Skipping {int((~inside).sum())} lag(s) that leave the domain")
            model_lags = lags[inside]
            ones = np.ones(len(model_lags), dtype=int)
            curves["fine_model"] = VariogramTable(
                model_lags,
                pseudo_isotropic_variogram(model, (ScaleTag.FINE, ScaleTag.FINE), center, model_lags),
                ones,
                "model",
            )
            curves["coarse_model"] = VariogramTable(
                model_lags,
                pseudo_isotropic_variogram(model, (ScaleTag.COARSE, ScaleTag.COARSE), center, model_lags),
                ones,
                "model",
            )
            curves["cross_model"] = VariogramTable(
                model_lags, pseudo_cross_variogram(model, center, model_lags), ones, "model"
            )

        extra = {k: options.get(k) for k in ("dataset", "params", "bins", "max_lag", "lags")}
        with self.outputs(out_dir, config, {"base": seed}, extra) as out:
            rows = []
            for name, table in curves.items():
                rows += [(name, lag, value, count, table.kind) for lag, value, count in table.rows()]
            write_csv(out.path("variogram.csv"), HEADER, rows)
            summary = {
                name: {"plateau": table.plateau(), "bins": int(np.count_nonzero(table.counts))}
                for name, table in curves.items()
            }
            write_json(out.path("variogram_report.json"), summary)
            out.manifest.stages["variogram"] = summary
        self.success(f"Wrote {len(curves)} variogram curve(s) to {out_dir}")
