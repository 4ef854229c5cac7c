from django.apps import AppConfig


class CodesignConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'codesign'
