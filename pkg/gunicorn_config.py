"""
Gunicorn configuration for the edgeflock dashboard.

Training and comparison jobs run as management commands, never inside a worker.
"""
import os

wsgi_app = "edgeflock.wsgi:application"
raw_env = ["DJANGO_SETTINGS_MODULE=edgeflock.settings_production"]

bind = os.environ.get("EDGEFLOCK_BIND", "127.0.0.1:8000")

workers = int(os.environ.get("EDGEFLOCK_WORKERS", "2"))
worker_class = "sync"
worker_tmp_dir = "/dev/shm"

# Trace and metric CSV downloads of long runs stream whole files
timeout = 120
graceful_timeout = 30

max_requests = 500
max_requests_jitter = 50

preload_app = True

accesslog = os.environ.get("EDGEFLOCK_ACCESS_LOG", "/var/log/edgeflock/gunicorn-access.log")
errorlog = os.environ.get("EDGEFLOCK_ERROR_LOG", "/var/log/edgeflock/gunicorn-error.log")
loglevel = "info"

proc_name = "edgeflock-dashboard"
