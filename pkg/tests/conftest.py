import socket

import pytest
from hypothesis import settings

from predscale.harness import serve_stub_target

settings.register_profile("default", deadline=None)
settings.load_profile("default")


@pytest.fixture
def stub_server():
    started = []

    def start(**kw):
        srv = serve_stub_target(**kw)
        started.append(srv)
        return srv

    yield start
    for srv in started:
        try:
            srv.shutdown()
        except Exception:
            pass


@pytest.fixture
def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
