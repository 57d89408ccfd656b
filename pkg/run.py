#!/usr/bin/env python3
"""Relaxed Steiner solver — entry point.

Configures logging once, here; every ``app`` module only owns a named
logger.  ``RELAX_LOG_LEVEL`` lowers or raises the threshold (default INFO).
"""
from __future__ import annotations

import logging
import os
import sys

from cli.relax_cli import main


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
logging.basicConfig(
    level=getattr(logging, os.environ.get("RELAX_LOG_LEVEL", "INFO").upper(), logging.INFO),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    stream=sys.stdout,
)
log = logging.getLogger("relaxed-steiner")


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        log.info("Interrupted")
        sys.exit(130)
