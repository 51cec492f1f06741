"""Learnable per-dataset style embeddings plus the unconditional slot.

The bank is one trainable (n+1, D) matrix; row 0 is the unconditional
embedding that training-time dropout falls back to, which is what makes
classifier-free guidance possible at sampling time.  New styles append
rows without touching existing ones.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, StyleLookupError

UNCONDITIONAL = "__unconditional__"

DEFAULT_DROPOUT_PROB = 0.1
DEFAULT_INIT_SIGMA = 0.02


class StyleBank:
    """Registry of style embeddings backed by a single leaf tensor."""

    def __init__(self, style_ids, dim: int, dropout_prob: float = DEFAULT_DROPOUT_PROB,
                 rng: np.random.Generator | None = None, init: str = "gaussian",
                 init_sigma: float = DEFAULT_INIT_SIGMA):
        if not 0.0 <= dropout_prob < 1.0:
            raise ConfigError(f"dropout_prob must lie in [0, 1), got {dropout_prob}")
        ids = list(style_ids)
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate style ids in {ids}")
        if UNCONDITIONAL in ids:
            raise ConfigError("the unconditional slot is implicit; do not register it")
        self.dim = int(dim)
        self.dropout_prob = float(dropout_prob)
        self._ids = ids
        rng = rng or np.random.default_rng(0)
        rows = [self._init_row(init, init_sigma, rng) for _ in range(len(ids) + 1)]
        self.matrix = T.Tensor(np.stack(rows), requires_grad=True)

    def _init_row(self, init: str, sigma: float, rng: np.random.Generator) -> np.ndarray:
        if init == "zeros":
            return np.zeros(self.dim)
        if init == "gaussian":
            return rng.normal(0.0, sigma, size=self.dim)
        raise ConfigError(f"unknown style init '{init}' (use 'zeros' or 'gaussian')")

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def unconditional_index(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self._ids)

    def index_of(self, style_id: str) -> int:
        if style_id == UNCONDITIONAL:
            return 0
        try:
            return self._ids.index(style_id) + 1
        except ValueError:
            raise StyleLookupError(
                f"unknown style '{style_id}'; registered styles: {self._ids}"
            ) from None

    def lookup(self, style_id: str) -> np.ndarray:
        """The live embedding row; reflects training updates in place."""
        return self.matrix.data[self.index_of(style_id)]

    def train_select_index(self, style_id: str, rng: np.random.Generator) -> int:
        """Row to condition on during training: the style's own, or the
        unconditional slot with probability dropout_prob."""
        idx = self.index_of(style_id)
        if self.dropout_prob > 0.0 and rng.uniform() < self.dropout_prob:
            return 0
        return idx

    def train_select(self, style_id: str, rng: np.random.Generator) -> np.ndarray:
        return self.matrix.data[self.train_select_index(style_id, rng)]

    def extend(self, new_style_id: str, init: str = "gaussian",
               init_sigma: float = DEFAULT_INIT_SIGMA,
               rng: np.random.Generator | None = None) -> None:
        """Append one trainable row; existing rows are preserved bitwise.

        Call before (re)creating the optimizer: the bank tensor is replaced.
        """
        if new_style_id == UNCONDITIONAL or new_style_id in self._ids:
            raise ConfigError(f"style id '{new_style_id}' is already registered")
        rng = rng or np.random.default_rng(0)
        row = self._init_row(init, init_sigma, rng)
        self.matrix = T.Tensor(np.vstack([self.matrix.data, row[None, :]]), requires_grad=True)
        self._ids.append(new_style_id)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"style.bank": self.matrix.data}

    def state_meta(self) -> dict:
        return {"style_ids": self.ids, "style_dim": self.dim, "dropout_prob": self.dropout_prob}

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], meta: dict) -> "StyleBank":
        bank = cls.__new__(cls)
        bank._ids = list(meta["style_ids"])
        bank.dim = int(meta["style_dim"])
        bank.dropout_prob = float(meta["dropout_prob"])
        matrix = arrays["style.bank"]
        if matrix.shape != (len(bank._ids) + 1, bank.dim):
            raise ConfigError(
                f"style bank shape {matrix.shape} does not match ids+1 x dim "
                f"({len(bank._ids) + 1}, {bank.dim})"
            )
        bank.matrix = T.Tensor(matrix, requires_grad=True)
        return bank
