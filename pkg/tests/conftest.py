from __future__ import annotations

import socket
import time

import pytest

SESSION_START = time.monotonic()

_real_connect = socket.socket.connect


def _loopback_only_connect(self, address, *args, **kwargs):
    if isinstance(address, tuple):
        host = address[0]
        if isinstance(host, str) and host not in ("127.0.0.1", "localhost", "::1"):
            raise RuntimeError(f"test suite attempted external network access: {host!r}")
    return _real_connect(self, address, *args, **kwargs)


@pytest.fixture(autouse=True, scope="session")
def no_external_network():
    """The whole suite must run offline; only loopback sockets are allowed."""
    socket.socket.connect = _loopback_only_connect
    yield
    socket.socket.connect = _real_connect
