import math

import pytest

from distopf.case import Branch, Bus, Generator, NetworkCase, load_case


def two_bus(demand=1.0, limit=math.inf, cost=(1.0, 0.0, 0.0), p_max=2.5, susceptance=10.0):
    """Generator at reference bus 1 feeding a load at bus 2 over one line."""
    return NetworkCase(
        100.0,
        (Bus(1, 0.0, True), Bus(2, demand)),
        (Generator(1, 0.0, p_max, cost),),
        (Branch(1, 2, susceptance, limit),),
        name="twobus",
    )


def two_bus_two_gen(demand=1.0):
    """As :func:`two_bus` but with a dearer second unit at the load bus."""
    return NetworkCase(
        100.0,
        (Bus(1, 0.0, True), Bus(2, demand)),
        (Generator(1, 0.0, 2.0, (1.0, 1.0, 0.0)), Generator(2, 0.0, 2.0, (2.0, 1.5, 0.0))),
        (Branch(1, 2, 10.0),),
        name="twobus2",
    )


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")
