"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.exceptions import NotFittedError


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


def check_frame(X, required=()):
    """Return ``X`` as a DataFrame; arrays get columns ``x0, x1, ...``."""
    if isinstance(X, pd.DataFrame):
        df = X
    else:
        arr = np.asarray(X)
        if arr.ndim != 2:
            raise DataError(f"expected 2-d covariates, got shape {arr.shape}")
        df = pd.DataFrame(arr, columns=[f"x{i}" for i in range(arr.shape[1])])
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if len(df) == 0:
        raise DataError("no rows")
    return df


def check_responses(y, n):
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != 2:
        raise DataError(f"responses must have two columns, got shape {y.shape}")
    if y.shape[0] != n:
        raise DataError(f"{y.shape[0]} response rows for {n} covariate rows")
    return y


def check_is_fitted(est, attr="result_"):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
