"""
Django settings for the multiscale-gp project.

The project has no database and no web front end; Django provides the
management-command runner, settings and logging configuration.
"""

from pathlib import Path
import tomllib

from django.core.management.utils import get_random_secret_key
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent
# Read version from pyproject.toml
with open(BASE_DIR / "pyproject.toml", "rb") as f:
    pyproject = tomllib.load(f)
    VERSION = pyproject["project"]["version"]

SECRET_KEY = os.environ.get("MSGP_SECRET_KEY", get_random_secret_key())
DEBUG = os.environ.get("MSGP_DEBUG") == "1"

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    "core.apps.CoreConfig",
]

DATA_FOLDER = BASE_DIR / "data"
DATA_FOLDER.mkdir(exist_ok=True)
DATABASES = {}

# Run outputs land under this folder unless --out-dir is given.
OUT_DIR = Path(os.environ.get("MSGP_OUT_DIR", DATA_FOLDER / "runs"))
THREADS = int(os.environ.get("MSGP_THREADS", "1"))
DEFAULT_SEED = int(os.environ.get("MSGP_SEED", "20180403"))

MULTISCALE_GP = {
    "JITTER_LADDER": (1e-12, 1e-10, 1e-8),
    "QUADRATURE_ORDER": int(os.environ.get("MSGP_QUADRATURE_ORDER", "16")),
    "VALIDITY_TOL": 1e-9,
    "N_STARTS": int(os.environ.get("MSGP_N_STARTS", "5")),
    "MAX_EVALS": int(os.environ.get("MSGP_MAX_EVALS", "4000")),
    "MAX_ITER": 200,
    "TOL": 1e-5,
    "FD_STEP": 1e-5,
    "NU_BOX": (0.05, 30.0),
    "VARIOGRAM_BINS": 15,
}

TIME_ZONE = os.environ.get("MSGP_TIME_ZONE", "UTC")
USE_TZ = True

LOG_LEVEL = os.environ.get("MSGP_LOG_LEVEL", "INFO")  # DEBUG > INFO > WARNING > ERROR > CRITICAL
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{levelname} {asctime}<{name}>:{message}",
            "style": "{",
        },
    },
    "handlers": {
        "logfile": {
            "level": LOG_LEVEL,
            "class": "logging.handlers.RotatingFileHandler",
            "filename": DATA_FOLDER / "msgp.log",
            "maxBytes": 1024 * 1024 * 5,
            "encoding": "utf-8",
            "backupCount": 2,
            "formatter": "verbose",
        },
        "console": {
            "level": LOG_LEVEL,
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "root": {
        "handlers": ["logfile", "console"],
        "level": LOG_LEVEL,
    },
}
