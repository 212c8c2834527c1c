"""
Development settings for the edgeflock project.
"""
from .settings import *

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = True

DATABASES['default'] = DATABASES['dev']

# Per-iteration trainer detail
LOGGING['loggers']['offload']['level'] = 'DEBUG'
