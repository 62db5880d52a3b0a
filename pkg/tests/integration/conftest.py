#!/usr/bin/env python3
# Copyright 2025 The regionboot Authors.
# See LICENSE file for licensing details.

import pytest
from _pytest.config.argparsing import Parser


def pytest_addoption(parser: Parser):
    parser.addoption(
        "--workers",
        type=int,
        default=8,
        help="Number of worker processes for the parallel runs.",
    )


@pytest.fixture(scope="session")
def workers(request) -> int:
    return request.config.getoption("--workers")
