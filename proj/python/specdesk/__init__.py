"""Desk-scale speculative decoding and selective distillation lab."""

from ._specdesk import *  # noqa: F401,F403
