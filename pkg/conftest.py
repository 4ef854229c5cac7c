import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'codesign_project.settings')
django.setup()
