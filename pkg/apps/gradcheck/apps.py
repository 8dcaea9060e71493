from django.apps import AppConfig


class GradcheckConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "apps.gradcheck"
