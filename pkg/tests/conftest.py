import numpy as np
import pytest

from slhjb.problem import Problem


def simple_problem(dim=1, f=None, g=None, psi=None, discount=0.0, T=1.0, lower=-1.0, upper=1.0,
                   control_lower=(-1.0,), control_upper=(1.0,), name="simple"):
    """Problem with numpy callables; unspecified pieces default to zero."""

    def zero_f(x, t, u):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (dim,))

    def zero_g(x, t, u):
        return np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))

    def zero_psi(x):
        return np.zeros(x.shape[:-1])

    return Problem(
        name=name,
        dim=dim,
        dynamics=f or zero_f,
        running_cost=g or zero_g,
        terminal_cost=psi or zero_psi,
        discount=discount,
        t0=0.0,
        T=T,
        domain_lower=(lower,) * dim,
        domain_upper=(upper,) * dim,
        control_lower=tuple(control_lower),
        control_upper=tuple(control_upper),
    )


@pytest.fixture
def make_simple():
    return simple_problem
