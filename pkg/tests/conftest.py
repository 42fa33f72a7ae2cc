import numpy as np
import pytest


def fd_d1(f, x, h=None):
    """Five-point first derivative of a callable on scalar/array x."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-5 * np.maximum(np.abs(x), 1.0)
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def fd_d2(f, x, h=None):
    """Five-point second derivative of a callable on scalar/array x."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 3e-4 * np.maximum(np.abs(x), 1.0)
    return (
        -f(x + 2 * h) + 16 * f(x + h) - 30 * f(x) + 16 * f(x - h) - f(x - 2 * h)
    ) / (12 * h**2)


def fd_d1_log(f, R, h=1e-4):
    """First derivative via five-point differences in log R."""
    R = np.asarray(R, dtype=float)

    def g(x):
        return f(np.exp(x))

    x = np.log(R)
    d1 = (-g(x + 2 * h) + 8 * g(x + h) - 8 * g(x - h) + g(x - 2 * h)) / (12 * h)
    return d1 / R


def fd_d2_log(f, R, h=1e-3):
    """Second derivative via five-point differences in log R."""
    R = np.asarray(R, dtype=float)

    def g(x):
        return f(np.exp(x))

    x = np.log(R)
    d1 = (-g(x + 2 * h) + 8 * g(x + h) - 8 * g(x - h) + g(x - 2 * h)) / (12 * h)
    d2 = (
        -g(x + 2 * h) + 16 * g(x + h) - 30 * g(x) + 16 * g(x - h) - g(x - 2 * h)
    ) / (12 * h**2)
    return (d2 - d1) / R**2


def grid_d1(x, y):
    """First derivative of samples y on a (possibly nonuniform) grid x."""
    return np.gradient(y, x, edge_order=2)


def grid_d2_log(x, y):
    """Second derivative on a log-spaced grid via derivatives in log x."""
    u = np.log(x)
    dy = np.gradient(y, u, edge_order=2)
    d2y = np.gradient(dy, u, edge_order=2)
    return (d2y - dy) / x**2


@pytest.fixture(scope="session")
def betas():
    return [0.8, 1.0, 1.5, 2.0, 2.5, 3.5]
