import numpy as np
import pytest

from thermoflow.checkpoint import load_tensors, save_tensors
from thermoflow.errors import ConfigError, StyleLookupError
from thermoflow.style import UNCONDITIONAL, StyleBank


def make_bank(ids=("bosonplus-day", "bosonplus-night"), dropout=0.1, seed=0):
    return StyleBank(ids, dim=8, dropout_prob=dropout, rng=np.random.default_rng(seed))


class TestLookup:
    def test_unconditional_sentinel(self):
        bank = make_bank()
        assert np.array_equal(bank.lookup(UNCONDITIONAL), bank.matrix.data[0])

    def test_registered_id(self):
        bank = make_bank()
        row = bank.lookup("bosonplus-day")
        assert np.array_equal(row, bank.matrix.data[1])

    def test_unknown_id_lists_registered(self):
        bank = make_bank()
        with pytest.raises(StyleLookupError) as exc:
            bank.lookup("nonexistent")
        msg = str(exc.value)
        assert "bosonplus-day" in msg and "bosonplus-night" in msg

    def test_lookup_is_live(self):
        bank = make_bank()
        row = bank.lookup("bosonplus-day")
        bank.matrix.data[1] += 1.0
        assert np.array_equal(row, bank.matrix.data[1])

    def test_dimension_homogeneity(self):
        bank = make_bank()
        assert bank.matrix.shape == (3, 8)
        bank.extend("new-style")
        assert bank.matrix.shape == (4, 8)


class TestTrainSelect:
    def test_zero_dropout_always_conditional(self):
        bank = make_bank(dropout=0.0)
        rng = np.random.default_rng(1)
        for _ in range(200):
            assert bank.train_select_index("bosonplus-day", rng) == 1

    def test_dropout_frequency(self):
        bank = make_bank(dropout=0.1)
        rng = np.random.default_rng(2)
        n = 100_000
        hits = sum(bank.train_select_index("bosonplus-day", rng) == 0 for _ in range(n))
        assert abs(hits / n - 0.1) < 0.01

    def test_same_seed_same_sequence(self):
        bank = make_bank(dropout=0.3)
        seq1 = [bank.train_select_index("bosonplus-day", np.random.default_rng(3))
                for _ in range(1)]
        rng_a = np.random.default_rng(4)
        rng_b = np.random.default_rng(4)
        a = [bank.train_select_index("bosonplus-day", rng_a) for _ in range(500)]
        b = [bank.train_select_index("bosonplus-day", rng_b) for _ in range(500)]
        assert a == b
        del seq1

    def test_invalid_dropout_rejected(self):
        with pytest.raises(ConfigError):
            StyleBank(["a"], dim=4, dropout_prob=1.0)


class TestExtend:
    def test_extend_then_lookup(self):
        bank = make_bank()
        bank.extend("synthC")
        assert bank.lookup("synthC").shape == (8,)
        assert bank.index_of("synthC") == 3

    def test_extend_preserves_existing_bitwise(self):
        bank = make_bank()
        before = bank.matrix.data.copy()
        bank.extend("synthC", rng=np.random.default_rng(9))
        assert np.array_equal(bank.matrix.data[:3], before)

    def test_duplicate_rejected(self):
        bank = make_bank()
        with pytest.raises(ConfigError):
            bank.extend("bosonplus-day")
        with pytest.raises(ConfigError):
            bank.extend(UNCONDITIONAL)

    def test_zeros_init(self):
        bank = make_bank()
        bank.extend("blank", init="zeros")
        assert np.all(bank.lookup("blank") == 0.0)

    def test_checkpoint_roundtrip_after_extend(self, tmp_path):
        bank = make_bank()
        bank.extend("synthC", rng=np.random.default_rng(10))
        path = tmp_path / "bank.tfck"
        save_tensors(path, bank.state_arrays(), meta=bank.state_meta())
        arrays, meta = load_tensors(path)
        restored = StyleBank.from_state(arrays, meta)
        assert restored.ids == bank.ids
        assert restored.dropout_prob == bank.dropout_prob
        assert np.array_equal(restored.matrix.data, bank.matrix.data)
