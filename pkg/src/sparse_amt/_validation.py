"""Input checks shared by the estimator and the CLI."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import InputError
from .tokenizer import NoteEvent


def check_features(X, n_features=None, dtype=np.float64):
    """Validate a sequence of ``[T, n_features]`` frame matrices."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    for i, x in enumerate(X):
        try:
            x = check_array(x, dtype=dtype, ensure_2d=True, ensure_all_finite=True)
        except ValueError as e:
            raise InputError(f"features[{i}]: {e}") from None
        if n_features is not None and x.shape[1] != n_features:
            raise InputError(f"features[{i}] has {x.shape[1]} columns, expected {n_features}")
        out.append(x)
    if not out:
        raise InputError("no feature matrices given")
    return out


def check_note_lists(y, n_items):
    y = list(y)
    if len(y) != n_items:
        raise InputError(f"got {len(y)} note lists for {n_items} feature matrices")
    for i, notes in enumerate(y):
        for n in notes:
            if not isinstance(n, NoteEvent):
                raise InputError(f"y[{i}] contains {type(n).__name__}, expected NoteEvent")
    return y
