"""
WSGI entry of the tile service.

Production runs `gunicorn config.wsgi` with the global prior held by the
process-wide TileStore that apps.tile_service.service builds from settings;
`manage.py serve` wraps the same application for local runs.
"""
import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
application = get_wsgi_application()
