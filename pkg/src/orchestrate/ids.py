"""Opaque, lexically sortable identifiers: millisecond timestamp + random suffix."""

import secrets
import string
import time

_ALPHABET = string.digits + string.ascii_lowercase


def _base36(n: int, width: int) -> str:
    digits = []
    while n:
        n, r = divmod(n, 36)
        digits.append(_ALPHABET[r])
    return "".join(reversed(digits)).rjust(width, "0")


def new_id(prefix: str = "") -> str:
    ts = _base36(time.time_ns() // 1_000_000, 9)
    suffix = "".join(secrets.choice(_ALPHABET) for _ in range(4))
    return f"{prefix}{ts}{suffix}"
