"""Independent reference implementations used by the tests."""
from fractions import Fraction


def interpolation_oracle(v, thresholds):
    """Exact-rational continuous label, written directly from the interval rule."""
    v = Fraction(v)
    r = [Fraction(t) for t in thresholds]
    m = len(r) + 1
    out = [Fraction(0)] * m
    if v < r[0]:
        out[0] = Fraction(1)
        return out
    if v >= r[-1]:
        out[m - 1] = Fraction(1)
        return out
    for j in range(len(r) - 1):
        if r[j] <= v < r[j + 1]:
            width = r[j + 1] - r[j]
            out[j + 1] = (r[j + 1] - v) / width
            out[j + 2] = (v - r[j]) / width
            return out
    raise AssertionError("unreachable")


def hard_class_oracle(v, thresholds):
    cls = 0
    for t in thresholds:
        if v >= t:
            cls += 1
    return cls
