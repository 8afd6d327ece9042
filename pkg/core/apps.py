from django.apps import AppConfig


class CoreConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "core"

    def ready(self):
        from django.conf import settings

        from core.services import tensor

        tensor.configure(
            dtype=getattr(settings, "GSGAN_DTYPE", "float32"),
            check_finite=getattr(settings, "GSGAN_CHECK_FINITE", False),
        )
