import numpy as np
import pytest

from gazepriv.core import WINDOW_SAMPLES, GazeWindow


def make_window(x, y=None, valid=None, subject="S001", session=1, round_=2, task="HSS", index=0, t0=0):
    n = WINDOW_SAMPLES
    x = np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()
    y = np.zeros(n) if y is None else np.broadcast_to(np.asarray(y, dtype=float), (n,)).copy()
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    return GazeWindow(np.arange(n) + t0, x, y, valid, subject, session, round_, task, window_index=index)


@pytest.fixture
def window_factory():
    return make_window
