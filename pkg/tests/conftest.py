"""Suite-wide guard: no test may open a network connection.

All gateway traffic in tests goes through the in-process mock; an attempted
AF_INET/AF_INET6 connect anywhere in the run is a bug and fails loudly.
"""

import socket

import pytest


class NetworkBlocked(RuntimeError):
    pass


_real_connect = socket.socket.connect


def _guarded_connect(self, address):
    if self.family in (socket.AF_INET, socket.AF_INET6):
        raise NetworkBlocked(f"test tried to open a network connection to {address!r}")
    return _real_connect(self, address)


@pytest.fixture(autouse=True, scope="session")
def _no_network():
    socket.socket.connect = _guarded_connect
    try:
        yield
    finally:
        socket.socket.connect = _real_connect
