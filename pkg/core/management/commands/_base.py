import logging
import os
import sys
from pathlib import Path
from typing import Optional

from django.conf import settings
from django.core.management.base import BaseCommand

from core.artifacts import OutputSet, RunManifest, read_dataset, read_json
from core.covariance_models import (
    BlockAvgModel,
    FullBivariateMatern,
    MultiscaleCovariance,
    Rectangle,
    make_model,
)
from core.exceptions import ConfigError, DomainError, NumericalError
from core.fields import StructuredGrid
from core.gp import MultiscaleDataset
from core.presets import ExperimentConfig, load_config

logger = logging.getLogger(__name__)

EXIT_USER_ERROR = 1
EXIT_NUMERICAL = 2


def model_document(model: MultiscaleCovariance) -> dict:
    """JSON-ready description that ``load_model`` turns back into ``model``."""
    if isinstance(model, FullBivariateMatern):
        return {"model": model.kind, "params": model.params.to_dict()}
    params = {k: v for k, v in model.describe().items() if k != "kind"}
    return {"model": model.kind, "params": params}


def load_model(path: str, domain: Optional[Rectangle] = None) -> MultiscaleCovariance:
    document = read_json(Path(path))
    if not isinstance(document, dict) or "model" not in document or "params" not in document:
        raise ConfigError(f"{path}: expected an object with 'model' and 'params'")
    return make_model(document["model"], document["params"], domain=domain)


def grid_from_config(config: ExperimentConfig) -> StructuredGrid:
    return StructuredGrid(config.grid.extent, config.grid.shape, config.grid.origin)


def quadrature_grid(config: ExperimentConfig) -> StructuredGrid:
    return StructuredGrid(config.grid.extent, config.nystrom.shape, config.grid.origin)


def true_model(config: ExperimentConfig, quadrature_order: Optional[int] = None) -> BlockAvgModel:
    """The block-average model that generates the synthetic data of ``config``."""
    order = quadrature_order or settings.MULTISCALE_GP["QUADRATURE_ORDER"]
    return BlockAvgModel(
        fine_sigma=config.fine.sigma,
        fine_lambda=config.fine.lam,
        fine_nu=config.fine.nu,
        eta_c=config.eta_c,
        domain=grid_from_config(config).domain,
        quadrature_order=order,
    )


class NumericalCommand(BaseCommand):
    """
    Base class of the experiment commands.

    Subclasses implement ``run``; errors are mapped to exit codes
    (1 for configuration and input errors, 2 for numerical failures).
    """

    config_required = True

    def add_arguments(self, parser):
        parser.add_argument(
            "--config",
            type=str,
            default=None,
            help="Preset name (test1, test2, test3, darcy1) or path of a JSON config",
        )
        parser.add_argument("--seed", type=int, default=None, help="Base seed of all random streams")
        parser.add_argument("--threads", type=int, default=None, help="Worker threads (outputs do not depend on it)")
        parser.add_argument("--out-dir", type=str, default=None, help="Directory receiving the outputs")

    def handle(self, *args, **options):
        try:
            self.run(**options)
        except (ConfigError, DomainError) as e:
            logger.exception(f"Command {self.command_name} failed: {e}")
            self.stderr.write(self.style.ERROR(f"Error: {e}"))
            sys.exit(EXIT_USER_ERROR)
        except NumericalError as e:
            logger.exception(f"Command {self.command_name} failed: {e}")
            self.stderr.write(self.style.ERROR(f"Numerical failure: {e}"))
            sys.exit(EXIT_NUMERICAL)

    @property
    def command_name(self) -> str:
        return self.__module__.rsplit(".", 1)[-1]

    def run(self, **options):
        raise NotImplementedError

    # option helpers

    def load_config(self, options) -> Optional[ExperimentConfig]:
        source = options.get("config")
        if source is None:
            if self.config_required:
                raise ConfigError("--config is required")
            return None
        return load_config(source)

    def resolve_seed(self, options, config: Optional[ExperimentConfig]) -> int:
        if options.get("seed") is not None:
            return int(options["seed"])
        if "MSGP_SEED" in os.environ:
            return int(os.environ["MSGP_SEED"])
        if config is not None:
            return config.seed
        return settings.DEFAULT_SEED

    def resolve_threads(self, options) -> int:
        threads = options.get("threads") or settings.THREADS
        if threads < 1:
            raise ConfigError(f"--threads must be positive, got {threads}")
        return threads

    def resolve_out_dir(self, options, config: Optional[ExperimentConfig]) -> Path:
        if options.get("out_dir"):
            return Path(options["out_dir"])
        name = config.name if config is not None else self.command_name
        return Path(settings.OUT_DIR) / name / self.command_name

    def read_dataset(self, path: str) -> MultiscaleDataset:
        data = read_dataset(Path(path))
        data.check_duplicates()
        return data

    def outputs(self, out_dir: Path, config: Optional[ExperimentConfig], seeds: dict, extra_config: Optional[dict] = None) -> OutputSet:
        echoed = config.to_dict() if config is not None else {}
        if extra_config:
            echoed = {**echoed, **extra_config}
        manifest = RunManifest(command=self.command_name, config=echoed, seeds=seeds)
        return OutputSet(out_dir, manifest)

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))
