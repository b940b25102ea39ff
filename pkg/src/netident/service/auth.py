"""Accounts, roles and bearer-token resolution.

Tokens are static: a JSON file maps each bearer token to an account name,
loaded once at service startup.  Roles are granted per case, not per
account, so the same analyst can administer one case while holding
read-only access on another.
"""

from __future__ import annotations

import json
from enum import IntEnum
from pathlib import Path
from typing import Optional, Union


class Role(IntEnum):
    """Per-case privilege levels; higher values subsume lower ones."""

    VIEWER = 1
    INVESTIGATOR = 2
    ADMIN = 3

    @classmethod
    def parse(cls, name) -> "Role":
        if isinstance(name, str) and name in cls.__members__:
            return cls[name]
        raise ValueError(f"unknown role: {name!r}")


class AuthError(Exception):
    """Missing, malformed or unrecognized bearer token."""


def load_tokens(path: Union[str, Path]) -> dict[str, str]:
    """Read the token file: ``{"tokens": {"<token>": "<account>"}}``."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    tokens = doc.get("tokens")
    if not isinstance(tokens, dict) or not tokens:
        raise ValueError("token file must carry a non-empty 'tokens' map")
    for tok, account in tokens.items():
        if not isinstance(tok, str) or not isinstance(account, str) or not account:
            raise ValueError("tokens and account names must be non-empty strings")
    return dict(tokens)


def resolve_token(tokens: dict[str, str], header: Optional[str]) -> str:
    """Map an Authorization header to an account name.

    Only ``Bearer <token>`` is accepted; a malformed header is rejected the
    same way as an unknown token so probes cannot tell the two apart.
    """
    if not header or not header.startswith("Bearer "):
        raise AuthError("missing bearer token")
    account = tokens.get(header[len("Bearer "):])
    if account is None:
        raise AuthError("unrecognized bearer token")
    return account
