import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()
"""
Django settings for the gated_gan project.

The project uses Django as an offline application framework: management
commands are the CLI, there are no URLs and no database tables.
"""


# Build paths inside the project
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("SECRET_KEY", "")
if not SECRET_KEY:
    # management commands never sign anything; local default only
    SECRET_KEY = "dev-only-change-me"

DEBUG = os.environ.get("DEBUG", "False").lower() == "true"
ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    "core.apps.CoreConfig",
]

# No tables: every test is a SimpleTestCase and commands never touch a DB.
DATABASES = {}

# Internationalization
LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# =========================
# Numerics
# =========================
# Default tensor precision. float64 is what the gradient checks use.
GSGAN_DTYPE = os.environ.get("GSGAN_DTYPE", "float32").lower()
if GSGAN_DTYPE not in ("float32", "float64"):
    GSGAN_DTYPE = "float32"

# Assert finite outputs after every tensor op (slow).
GSGAN_CHECK_FINITE = os.environ.get("GSGAN_CHECK_FINITE", str(DEBUG)).lower() == "true"

# =========================
# Paths
# =========================
GSGAN_OUTPUT_DIR = Path(os.environ.get("GSGAN_OUTPUT_DIR", str(BASE_DIR / "runs")))
GSGAN_DATA_DIR = Path(os.environ.get("GSGAN_DATA_DIR", str(BASE_DIR / "data" / "cifar-10-batches-bin")))

# =========================
# LOGGING
# =========================
GSGAN_LOG_LEVEL = os.environ.get("GSGAN_LOG_LEVEL", "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "root": {
        "handlers": ["console"],
        "level": GSGAN_LOG_LEVEL,
    },
    "loggers": {
        "core": {
            "handlers": ["console"],
            "level": GSGAN_LOG_LEVEL,
            "propagate": False,
        },
    },
}
