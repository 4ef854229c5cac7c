"""
Django settings for the codesign_project project.

Only the parts of Django the toolkit uses are configured: the management command
framework, Django REST Framework serializers/renderers and Celery.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""

import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv('SECRET_KEY', 'codesign-insecure-local-key')

DEBUG = os.getenv('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'codesign',
]

# The toolkit keeps no persistent state; results are written as JSON/CSV files.
DATABASES = {}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

REST_FRAMEWORK = {
    'DEFAULT_RENDERER_CLASSES': [
        'rest_framework.renderers.JSONRenderer',
    ],
    'DEFAULT_PARSER_CLASSES': [
        'rest_framework.parsers.JSONParser',
    ],
    'UNAUTHENTICATED_USER': None,
}


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'codesign': {
            'handlers': ['console'],
            'level': os.getenv('CODESIGN_LOG_LEVEL', 'WARNING'),
            'propagate': False,
        },
    },
}


# Numerical defaults

CODESIGN = {
    'VERSION': '0.1.0',
    'TRACE_EPS': 1e-14,
    'PSD_TOLERANCE': 1e-10,
    'COVARIANCE_CLAMP_TOLERANCE': 1e-2,
    'COVARIANCE_FLOOR': 1e-8,
    'RANK_TOLERANCE': 1e-9,
    'MEMBERSHIP_TOLERANCE': 1e-9,
    'HORIZON_EPS': 1e-6,
    'HORIZON_CAP': 10_000,
    'SOLVER': {
        'starts': 64,
        'seed': 2020,
        'residual_tol': 1e-8,
        'max_iterations': 400,
        'hessian_step': 1e-4,
        'hessian_tol': 1e-4,
        'gain_tol': 1e-3,
    },
    'SIMULATION_BATCH': 2000,
    'OUTPUT_PRECISION': 12,
    'OUTPUT_DIR': os.getenv('CODESIGN_OUTPUT_DIR', str(BASE_DIR / 'results')),
}


# Celery Configuration

CELERY_BROKER_URL = os.getenv('CELERY_BROKER_URL', 'redis://localhost:6379/0')
CELERY_RESULT_BACKEND = os.getenv('CELERY_RESULT_BACKEND', 'redis://localhost:6379/0')
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE
CELERY_TASK_ALWAYS_EAGER = os.getenv('CODESIGN_EAGER', 'True') == 'True'
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_TASK_TIME_LIMIT = 60 * 60  # 1 hour
CELERY_WORKER_CONCURRENCY = int(os.getenv('CODESIGN_WORKERS', os.cpu_count() or 1))
CELERY_BROKER_CONNECTION_RETRY_ON_STARTUP = True
