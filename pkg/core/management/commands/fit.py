import logging
from pathlib import Path

import numpy as np
from django.conf import settings

from core.artifacts import write_csv, write_json
from core.exceptions import ConfigError, OptimizationError
from core.fit import BivariateMaternSpace, BlockAverageSpace, FitOptions, fit
from core.management.commands._base import NumericalCommand, model_document, true_model
from core.tasks.task_manager import TaskManager
from utils.rng import derived_seed

logger = logging.getLogger(__name__)


class Command(NumericalCommand):
    """
    Estimate covariance hyperparameters from one or more data sets.

    Usage:
        python manage.py fit --dataset run/dataset.csv --criterion ml
        python manage.py fit --dataset run/replicate_*/dataset.csv --criterion loo --config test3
    """

    help = "Fit the bivariate Matérn (or block-average) model by ML or LOO-CV"
    config_required = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--dataset", nargs="+", required=True, help="Data set CSV file(s)")
        parser.add_argument("--criterion", choices=["ml", "loo"], default=None)
        parser.add_argument("--model", choices=["bimatern", "blockavg"], default=None)
        parser.add_argument("--n-starts", type=int, default=None)
        parser.add_argument("--max-evals", type=int, default=None)

    def fit_options(self, options, config, seed: int, threads: int) -> FitOptions:
        defaults = settings.MULTISCALE_GP
        fit_config = config.fit if config is not None else None
        return FitOptions(
            n_starts=options.get("n_starts") or (fit_config.n_starts if fit_config else defaults["N_STARTS"]),
            max_evals=options.get("max_evals") or (fit_config.max_evals if fit_config else defaults["MAX_EVALS"]),
            max_iter=fit_config.max_iter if fit_config else defaults["MAX_ITER"],
            tol=fit_config.tol if fit_config else defaults["TOL"],
            fd_step=fit_config.fd_step if fit_config else defaults["FD_STEP"],
            seed=seed,
            threads=threads,
        )

    def run(self, **options):
        config = self.load_config(options)
        seed = self.resolve_seed(options, config)
        threads = self.resolve_threads(options)
        out_dir = self.resolve_out_dir(options, config)
        criterion = options.get("criterion") or (config.fit.criterion if config else "ml")
        kind = options.get("model") or (config.fit.model if config else "bimatern")

        if kind == "blockavg":
            if config is None:
                raise ConfigError("--model blockavg needs --config for the averaging window and domain")
            space = BlockAverageSpace(
                true_model(config, config.fit.quadrature_order), fit_eta=config.fit.fit_eta
            )
        else:
            space = BivariateMaternSpace()

        paths = [Path(p) for p in options["dataset"]]
        datasets = [self.read_dataset(str(p)) for p in paths]
        fit_seeds = [derived_seed(seed, i) for i in range(len(datasets))]
        extra = {"criterion": criterion, "model": kind, "datasets": [p.as_posix() for p in paths]}

        with self.outputs(out_dir, config, {"base": seed}, extra) as out:
            fitted, failures = [], []
            # starts of one fit share the pool; data sets run one after another
            with TaskManager(max_workers=threads) as manager:
                for i, data in enumerate(datasets):
                    fit_options = self.fit_options(options, config, fit_seeds[i], threads)
                    try:
                        result = fit(data, criterion, options=fit_options, space=space, task_manager=manager)
                    except OptimizationError as e:
                        logger.error(f"Fit of {paths[i]} failed: {e}")
                        failures.append({"dataset": paths[i].as_posix(), "seed": fit_seeds[i], "starts": e.diagnostics})
                        continue
                    fitted.append((i, result))
                    logger.info(f"Fitted {paths[i]}: {result.table_row()}")

            if failures:
                write_json(out.path("fit_diagnostics.json", keep=True), failures)
            if not fitted:
                raise OptimizationError(
                    f"every data set failed to fit ({len(failures)} of {len(datasets)})",
                    diagnostics=failures,
                )

            entries = []
            for i, result in fitted:
                entry = {"dataset": paths[i].as_posix(), "seed": fit_seeds[i]}
                entry.update(result.to_dict())
                entries.append(entry)
                name = "params.json" if len(datasets) == 1 else f"params_{i:04d}.json"
                write_json(out.path(name), model_document(result.model))

            names = list(space.names)
            rows = [[paths[i].as_posix(), criterion.upper()] + space.values(r.theta_star) for i, r in fitted]
            write_csv(out.path("fit_table.csv"), ["dataset", "criterion"] + names, rows)

            report = {"criterion": criterion, "model": kind, "fits": entries, "failed": [f["dataset"] for f in failures]}
            if len(fitted) > 1:
                values = np.array([space.values(r.theta_star) for _, r in fitted])
                q25, q50, q75 = np.percentile(values, [25, 50, 75], axis=0)
                report["summary"] = {
                    name: {"median": q50[j], "q25": q25[j], "q75": q75[j]} for j, name in enumerate(names)
                }
            write_json(out.path("fit_report.json"), report)
            out.manifest.stages["fit"] = {
                "options": self.fit_options(options, config, seed, threads).to_dict(),
                "jitter_events": sum(r.jitter_events for _, r in fitted),
                "quadrature_order": space.template.quadrature_order if kind == "blockavg" else None,
                "failed": len(failures),
            }
        message = f"Fitted {len(fitted)} data set(s) by {criterion.upper()}; report in {out_dir}"
        if failures:
            message += f" ({len(failures)} failed, see fit_diagnostics.json)"
        self.success(message)
