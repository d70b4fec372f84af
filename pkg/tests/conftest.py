import numpy as np


class ConstModel:
    """Conditional-mean stub predicting a constant; duck-types the models."""

    kind = "const"
    fit_rows = None

    def __init__(self, value, arm=0):
        self.value = float(value)
        self.arm = arm
        self.warnings = ()

    def predict(self, x):
        return np.full(np.atleast_2d(x).shape[0], self.value)


def const_pair(m0, m1=None):
    from shadowatt.nuisance import NuisancePair

    p1 = None if m1 is None else ConstModel(m1, arm=1)
    return NuisancePair(ConstModel(m0, arm=0), p1)
