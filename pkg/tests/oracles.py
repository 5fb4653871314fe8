"""Independent reference implementations used by the tests."""

import math

import numpy as np


def brute_compare(a, b, specs):
    """Plain-Python hierarchical pair comparison."""
    for x, y, spec in zip(a, b, specs):
        diff = x - y
        if spec.kind == "continuous" and abs(diff) <= (spec.tie_threshold or 0.0):
            continue
        if diff == 0:
            continue
        better = diff > 0 if spec.direction == "higher" else diff < 0
        return 1 if better else -1
    return 0


def brute_counts(A, B, specs):
    w = l = t = 0
    for a in A:
        for b in B:
            s = brute_compare(a, b, specs)
            if s > 0:
                w += 1
            elif s < 0:
                l += 1
            else:
                t += 1
    return w, l, t


def random_instance(rng: np.random.Generator):
    from swgpc.design import EndpointHierarchy, EndpointSpec
    M = int(rng.integers(1, 5))
    eps = []
    for m in range(M):
        direction = "higher" if rng.random() < 0.5 else "lower"
        if rng.random() < 0.5:
            eps.append((f"e{m}", EndpointSpec("binary", direction)))
        else:
            thr = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
            eps.append((f"e{m}", EndpointSpec("continuous", direction, thr)))
    hier = EndpointHierarchy(tuple(eps))

    def draw(n):
        cols = []
        for _, spec in eps:
            if spec.kind == "binary":
                cols.append((rng.random(n) < rng.uniform(0.1, 0.9)).astype(float))
            else:
                # coarse grid so exact ties and at-threshold differences occur
                cols.append(np.round(rng.normal(0, 2, n) * 2) / 2)
        return np.column_stack(cols)

    return draw(int(rng.integers(1, 16))), draw(int(rng.integers(1, 16))), hier


def balanced_anova_reml(y_groups: np.ndarray):
    """Closed-form REML variance components of a balanced one-way layout (g x n)."""
    g, n = y_groups.shape
    means = y_groups.mean(axis=1)
    msb = n * np.sum((means - means.mean()) ** 2) / (g - 1)
    msw = np.sum((y_groups - means[:, None]) ** 2) / (g * (n - 1))
    between = (msb - msw) / n
    if between > 0:
        return between, msw
    # boundary: REML with zero between-group variance pools all deviations
    return 0.0, np.sum((y_groups - y_groups.mean()) ** 2) / (g * n - 1)


def logit(p):
    return math.log(p / (1 - p))
