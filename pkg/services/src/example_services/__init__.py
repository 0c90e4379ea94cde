from .app import ALL_SERVICES, build_app
from .serving import serve_in_thread

__all__ = ["ALL_SERVICES", "build_app", "serve_in_thread"]
