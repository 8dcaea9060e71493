from pathlib import Path
import os
from dotenv import load_dotenv

# -------------------------------------------------
# BASE
# -------------------------------------------------
BASE_DIR = Path(__file__).resolve().parent.parent
load_dotenv(BASE_DIR / ".env")

# -------------------------------------------------
# CORE DJANGO
# -------------------------------------------------
SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "unsafe-secret-key-change-me")
DEBUG = os.getenv("DJANGO_DEBUG", "False") == "True"

# ALLOWED HOSTS
_allowed_hosts = []
for i in range(1, 10):  # Support up to 9 hosts
    host = os.getenv(f"DJANGO_ALLOWED_HOSTS_{i}")
    if host:
        _allowed_hosts.append(host)

# Fallback to comma-separated list if no numbered hosts
if not _allowed_hosts:
    raw_hosts = os.getenv("DJANGO_ALLOWED_HOSTS", "")
    if raw_hosts == "*" or raw_hosts == "":
        _allowed_hosts = ["*"]
    else:
        _allowed_hosts = raw_hosts.replace(" ", "").split(",")

ALLOWED_HOSTS = _allowed_hosts

# -------------------------------------------------
# APPLICATIONS
# -------------------------------------------------
INSTALLED_APPS = [
    # Django core
    "django.contrib.contenttypes",
    "django.contrib.auth",

    # Third-party
    "rest_framework",

    # Local apps
    "apps.common",
    "apps.geometry",
    "apps.tensor_core",
    "apps.fusion",
    "apps.gradcheck",
    "apps.tile_store",
    "apps.tile_service",
    "apps.simulator",
    "apps.cli",
]

# -------------------------------------------------
# MIDDLEWARE
# -------------------------------------------------
MIDDLEWARE = [
    "django.middleware.security.SecurityMiddleware",
    "django.middleware.common.CommonMiddleware",
]

ROOT_URLCONF = "config.urls"
WSGI_APPLICATION = "config.wsgi.application"

# -------------------------------------------------
# DATABASE
# The engine keeps no ORM models; the database only backs Django internals.
# -------------------------------------------------
DATABASES = {
    "default": {
        "ENGINE": os.getenv("DB_ENGINE", "django.db.backends.sqlite3"),
        "NAME": os.getenv("DB_NAME", str(BASE_DIR / "db.sqlite3")),
    }
}

LANGUAGE_CODE = os.getenv("DJANGO_LANGUAGE_CODE", "en-us")
TIME_ZONE = os.getenv("DJANGO_TIME_ZONE", "UTC")

USE_I18N = False
USE_TZ = False

# -------------------------------------------------
# DJANGO REST FRAMEWORK
# -------------------------------------------------
REST_FRAMEWORK = {
    "DEFAULT_AUTHENTICATION_CLASSES": [],
    "DEFAULT_PERMISSION_CLASSES": [],
    "UNAUTHENTICATED_USER": None,
    "DEFAULT_RENDERER_CLASSES": ["rest_framework.renderers.JSONRenderer"],
    "DEFAULT_PARSER_CLASSES": ["rest_framework.parsers.JSONParser"],
}

# -------------------------------------------------
# CACHE (vehicle-side tile cache)
# LocMem unless REDIS_URL is configured.
# -------------------------------------------------
REDIS_URL = os.getenv("REDIS_URL")

if REDIS_URL:
    CACHES = {
        "default": {
            "BACKEND": "django_redis.cache.RedisCache",
            "LOCATION": REDIS_URL,
            "OPTIONS": {
                "CLIENT_CLASS": "django_redis.client.DefaultClient",
            },
            "KEY_PREFIX": "nmp_tiles",
        }
    }
else:
    CACHES = {
        "default": {
            "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
            "LOCATION": "nmp-tiles",
            "OPTIONS": {"MAX_ENTRIES": 4096},
        }
    }

NMP_TILE_CACHE_TIMEOUT = int(os.getenv("NMP_TILE_CACHE_TIMEOUT", "3600"))

# -------------------------------------------------
# DEFAULT PRIMARY KEY
# -------------------------------------------------
DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# -------------------------------------------------
# LOGGING
# -------------------------------------------------
NMP_LOG_LEVEL = os.getenv("NMP_LOG_LEVEL", "INFO")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "root": {
        "handlers": ["console"],
        "level": NMP_LOG_LEVEL,
    },
    "loggers": {
        "django.server": {"level": os.getenv("NMP_SERVER_LOG_LEVEL", "WARNING")},
    },
}

# -------------------------------------------------
# GRID GEOMETRY
# -------------------------------------------------
NMP_RESOLUTION_M = float(os.getenv("NMP_RESOLUTION_M", "0.3"))
# Global prior grid; defaults to the BEV resolution.
NMP_MAP_RESOLUTION_M = float(os.getenv("NMP_MAP_RESOLUTION_M", str(NMP_RESOLUTION_M)))
NMP_CHANNELS = int(os.getenv("NMP_CHANNELS", "32"))
NMP_TILE_EDGE = int(os.getenv("NMP_TILE_EDGE", "64"))
NMP_BEV_PRESET = os.getenv("NMP_BEV_PRESET", "60x30")

# BEV ranges in meters (forward x lateral)
NMP_BEV_PRESETS = {
    "test": (18.0, 9.0),
    "60x30": (60.0, 30.0),
    "100x100": (100.0, 100.0),
    "160x100": (160.0, 100.0),
}

# -------------------------------------------------
# FUSION
# -------------------------------------------------
NMP_PATCH_SIZE = int(os.getenv("NMP_PATCH_SIZE", "10"))
NMP_ATTENTION_DIM = int(os.getenv("NMP_ATTENTION_DIM", "256"))
NMP_ATTENTION_HEADS = int(os.getenv("NMP_ATTENTION_HEADS", "4"))
NMP_WEIGHT_SEED = int(os.getenv("NMP_WEIGHT_SEED", "7"))
NMP_EMBED_SEED = int(os.getenv("NMP_EMBED_SEED", "20230517"))
NMP_DEFAULT_ALPHA = float(os.getenv("NMP_DEFAULT_ALPHA", "0.5"))

# -------------------------------------------------
# TILE STORE
# -------------------------------------------------
NMP_STORE_DIR = os.getenv("NMP_STORE_DIR") or None
NMP_STORE_CAPACITY = int(os.getenv("NMP_STORE_CAPACITY", "256"))
NMP_SPLAT_MIN_WEIGHT = float(os.getenv("NMP_SPLAT_MIN_WEIGHT", "0.05"))

# -------------------------------------------------
# TILE SERVICE
# -------------------------------------------------
NMP_ADDR = os.getenv("NMP_ADDR", "127.0.0.1:8765")
NMP_SERVICE_TIMEOUT = float(os.getenv("NMP_SERVICE_TIMEOUT", "10"))
NMP_MAX_REGION_TILES = int(os.getenv("NMP_MAX_REGION_TILES", "1024"))
