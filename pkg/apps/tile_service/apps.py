from django.apps import AppConfig


class TileServiceConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "apps.tile_service"
