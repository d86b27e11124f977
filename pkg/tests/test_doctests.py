import doctest
import importlib

import pytest

MODULES = ["lmmboot.bootstrap", "lmmboot.estimation", "lmmboot.inference", "lmmboot.model",
           "lmmboot.simulation", "lmmboot.variability", "lmmboot.rng"]


@pytest.mark.parametrize("name", MODULES)
def test_module_doctests(name):
    result = doctest.testmod(importlib.import_module(name), optionflags=doctest.ELLIPSIS)
    assert result.failed == 0
