"""Shared builders for the test suite."""

import pytest

from sgxpart.enclave import PageKind, SgxDriver
from sgxpart.memory import PlatformMemory


@pytest.fixture
def platform():
    return PlatformMemory(pages=64, seed=1)


@pytest.fixture
def driver(platform):
    return SgxDriver(platform)


def echo(ctx, args):
    return args


def build_enclave(driver, code=(b"unit-a",), data=(b"",), entries=("main",), handlers=None):
    """Create, load, measure, and initialize a small enclave.

    ``entries`` names the entry point exposed by each leading code page;
    ``handlers`` maps those names to callables (default: echo).
    """
    enclave = driver.ecreate(len(code) + len(data))
    for i, content in enumerate(code):
        entry = entries[i] if i < len(entries) else None
        driver.eadd(enclave, i, content, kind=PageKind.CODE, entry_point=entry)
    for j, content in enumerate(data):
        driver.eadd(enclave, len(code) + j, content, kind=PageKind.DATA)
    for off in range(len(code) + len(data)):
        driver.eextend(enclave, off)
    driver.einit(enclave)
    for name in entries:
        enclave.bind(name, (handlers or {}).get(name, echo))
    return enclave
