"""Auxiliary trajectory losses for JEPA-style training loops."""

import json

from ._trajaux import (
    ConfigError,
    DataError,
    NumericalError,
    Session as _Session,
    ShapeError,
    TrajauxError,
)

__all__ = ["open", "Session", "TrajauxError", "ConfigError", "DataError", "ShapeError", "NumericalError"]


class Session:
    """One loss plus its state (bank, EMA target, predictors)."""

    def __init__(self, loss, D, hyper=None, seed=0):
        if isinstance(hyper, dict):
            hyper = ";".join(f"{k}={v}" for k, v in hyper.items())
        self._s = _Session(loss, D, hyper or "", seed)

    @property
    def loss_id(self):
        return self._s.loss_id

    def set_head(self, W, temperature=1.0):
        self._s.set_head(W, temperature)

    def eval_with_grad(self, hidden, spans, labels=None, seed=0):
        """Returns (value, {leaf: grad}, flags)."""
        return self._s.eval_with_grad(hidden, spans, labels, seed)

    def step(self, lr):
        self._s.step(lr)

    def ema_tick(self):
        self._s.ema_tick()

    def bank_insert(self, hidden, spans):
        self._s.bank_insert(hidden, spans)

    def diagnose(self, hidden, spans, labels=None, seed=0):
        return json.loads(self._s.diagnose(hidden, spans, labels, seed))

    def close(self):
        self._s = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open(loss, D, hyper=None, seed=0):
    return Session(loss, D, hyper, seed)
