"""Casework HTTP service: durable cases, materialized analyses, queries
with sealed bookmark extracts, and a hash-chained audit trail."""

from netident.service.app import create_app
from netident.service.auth import Role, load_tokens
from netident.service.store import CaseStore

__all__ = ["create_app", "CaseStore", "Role", "load_tokens"]
