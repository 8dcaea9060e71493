import logging
import threading
from dataclasses import dataclass
from typing import Optional, Tuple

from django.conf import settings
from django.core.servers.basehttp import ThreadedWSGIServer, WSGIRequestHandler
from django.core.wsgi import get_wsgi_application

from apps.common.exceptions import ConfigurationError, ServiceUnavailable
from apps.tile_store.store import TileStore
from .views import STORE_ENVIRON_KEY

logger = logging.getLogger(__name__)


def parse_address(address: Optional[str]) -> Tuple[str, int]:
    """'host:port' (port 0 picks a free one)."""
    address = address or settings.NMP_ADDR
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise ConfigurationError(f"bind address must be host:port, got '{address}'")
    try:
        return host.strip("[]"), int(port)
    except ValueError:
        raise ConfigurationError(f"bad port in '{address}'")


@dataclass
class ServerHandle:
    httpd: ThreadedWSGIServer
    thread: threading.Thread
    store: TileStore

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    def wait(self) -> None:
        self.thread.join()

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)
        self.store.flush()
        logger.info(f"tile service at {self.address} stopped")


def serve(store: TileStore, bind_address: Optional[str] = None) -> ServerHandle:
    """Run the tile service for `store` on a background thread."""
    host, port = parse_address(bind_address)
    django_app = get_wsgi_application()

    def app(environ, start_response):
        environ[STORE_ENVIRON_KEY] = store
        return django_app(environ, start_response)

    try:
        httpd = ThreadedWSGIServer((host, port), WSGIRequestHandler, allow_reuse_address=True)
    except OSError as e:
        raise ServiceUnavailable(f"cannot bind {host}:{port}: {e}")
    httpd.set_app(app)

    thread = threading.Thread(target=httpd.serve_forever, name=f"nmp-tiles-{port}", daemon=True)
    thread.start()
    handle = ServerHandle(httpd, thread, store)
    logger.info(f"tile service listening on {handle.url}")
    return handle
