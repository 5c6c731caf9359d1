"""Endpoint helpers for both socket families.

Endpoints are strings: "host:port" for TCP, "unix:/path" for AF_UNIX
stream sockets. The coordinator CLI uses TCP; in-process worlds default
to unix sockets to avoid ephemeral-port churn.
"""

import os
import socket

from .errors import BindFailure, CoordinatorUnreachable


def is_unix(endpoint):
    return endpoint.startswith("unix:")


def make_listener(endpoint, backlog=128):
    """Bind and listen; returns (socket, resolved endpoint string)."""
    try:
        if is_unix(endpoint):
            path = endpoint[5:]
            if os.path.exists(path):
                os.unlink(path)
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.bind(path)
            sock.listen(backlog)
            return sock, endpoint
        host, _, port = endpoint.rpartition(":")
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, int(port)))
        sock.listen(backlog)
        rhost, rport = sock.getsockname()
        return sock, f"{rhost}:{rport}"
    except OSError as exc:
        raise BindFailure(f"cannot listen on {endpoint}: {exc}") from exc


def connect(endpoint, timeout):
    """Blocking connect with timeout; the returned socket is in blocking
    mode with no timeout set."""
    try:
        if is_unix(endpoint):
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.settimeout(timeout)
            sock.connect(endpoint[5:])
        else:
            host, _, port = endpoint.rpartition(":")
            sock = socket.create_connection((host, int(port)), timeout=timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 20)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
        return sock
    except OSError as exc:
        raise CoordinatorUnreachable(
            f"cannot connect to {endpoint}: {exc}") from exc
