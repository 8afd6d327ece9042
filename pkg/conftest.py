import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "gated_gan.settings")
django.setup()
