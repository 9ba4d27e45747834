"""Bring up loopback inside a fresh network namespace, then exec a command.

Run as `unshare -rn python3 scripts/netless_exec.py CMD...`. Only `lo` exists
in the namespace, so the command can talk to local test servers but not to
the outside world.
"""
import fcntl
import os
import socket
import struct
import sys

SIOCGIFFLAGS = 0x8913
SIOCSIFFLAGS = 0x8914
IFF_UP = 0x1

with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
    req = struct.pack("16sH14x", b"lo", 0)
    flags = struct.unpack("16sH14x", fcntl.ioctl(s, SIOCGIFFLAGS, req))[1]
    fcntl.ioctl(s, SIOCSIFFLAGS, struct.pack("16sH14x", b"lo", flags | IFF_UP))

os.execvp(sys.argv[1], sys.argv[1:])
