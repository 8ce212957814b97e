from fractions import Fraction
from functools import lru_cache

import pytest

from kochlayer.geometry import build_domain
from kochlayer.mesh import mesh_fibered_domain


@lru_cache(maxsize=None)
def domain(n: int, eps: str):
    return build_domain(n, Fraction(eps))


@lru_cache(maxsize=None)
def fibered(n: int, eps: str):
    return mesh_fibered_domain(domain(n, eps))


@pytest.fixture(scope="session")
def mesh1():
    return fibered(1, "1/10")


@pytest.fixture(scope="session")
def mesh2():
    return fibered(2, "1/20")
