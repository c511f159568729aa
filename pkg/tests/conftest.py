import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mock_openai import MockOpenAI  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
_LOOPBACK = {"127.0.0.1", "::1", "localhost"}
_real_connect = socket.socket.connect


def _guarded_connect(sock, address):
    if sock.family in (socket.AF_INET, socket.AF_INET6) and address[0] not in _LOOPBACK:
        raise RuntimeError(f"network egress blocked in tests: {address!r}")
    return _real_connect(sock, address)


def pytest_configure(config):
    socket.socket.connect = _guarded_connect


def pytest_unconfigure(config):
    socket.socket.connect = _real_connect


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def mock_server():
    """Factory yielding started :class:`MockOpenAI` servers, shut down afterwards."""
    servers = []

    def make(**kwargs):
        server = MockOpenAI(**kwargs).__enter__()
        servers.append(server)
        return server

    yield make
    for server in servers:
        server.__exit__(None, None, None)
