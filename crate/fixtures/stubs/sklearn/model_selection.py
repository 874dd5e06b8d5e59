import numpy as np


def train_test_split(X, y, test_size=0.25, random_state=None):
    n = len(X)
    idx = np.random.default_rng(random_state).permutation(n)
    n_test = int(np.ceil(n * test_size))
    test, train = idx[:n_test], idx[n_test:]
    return X[train], X[test], y[train], y[test]
