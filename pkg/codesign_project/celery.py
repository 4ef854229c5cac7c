import os
from celery import Celery

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'codesign_project.settings')

app = Celery('codesign_project')

app.config_from_object('django.conf:settings', namespace='CELERY')

app.autodiscover_tasks()
