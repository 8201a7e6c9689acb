import numpy as np

# one pass/fail line per acceptance criterion, shown in the terminal summary
CRITERION_LINES: list[str] = []


def tiny_arrays(n=(3, 3, 2), C=2, D=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for name, k in zip(("tr", "ca", "te"), n):
        out.append(([f"{name}{i}" for i in range(k)], rng.integers(0, C, k), rng.normal(size=(k, C)), rng.normal(size=(k, D))))
    return out
