from django.apps import AppConfig


class TileStoreConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "apps.tile_store"
