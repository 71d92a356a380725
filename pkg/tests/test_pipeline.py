import numpy as np
import pytest

from climacredit import synth
from climacredit.pipeline import assemble_dataset, prepare_dataset
from climacredit.trainer import SplitPlan, TrainerError


@pytest.fixture(scope="module")
def world():
    return synth.generate(synth.GenSpec.test(0, n_loans=600, n_stations=6))


def test_held_out_rows_cannot_leak_into_fit(world):
    clean = prepare_dataset(world.loans, world.panels, world.texts, split_seed=3, max_seq_len=32)
    held_out = np.concatenate([clean.split.val, clean.split.test])
    poisoned = world.loans.copy()
    poisoned.loc[held_out, "label"] = 1 - poisoned.loc[held_out, "label"]
    poisoned.loc[held_out, "monthly_revenue"] = 1e9
    texts = dict(world.texts)
    for i in held_out:
        texts[poisoned.loc[i, "loan_id"]] = ["poison"] * 5
    dirty = prepare_dataset(poisoned, world.panels, texts, max_seq_len=32, split=clean.split)
    assert dirty.plan.to_json() == clean.plan.to_json()
    assert dirty.vocab.token_to_id == clean.vocab.token_to_id
    assert "poison" not in dirty.vocab.token_to_id


def test_assemble_reproduces_prepared(world):
    prep = prepare_dataset(world.loans, world.panels, world.texts, split_seed=1, max_seq_len=32)
    again = assemble_dataset(world.loans, world.panels, world.texts, prep.plan, prep.vocab, 32)
    np.testing.assert_array_equal(again.structured, prep.data.structured)
    np.testing.assert_array_equal(again.climate, prep.data.climate)
    np.testing.assert_array_equal(again.text_ids, prep.data.text_ids)


def test_split_round_trip_checks_checksum(world):
    prep = prepare_dataset(world.loans, world.panels, world.texts, split_seed=2, max_seq_len=32)
    doc = prep.split.to_dict()
    assert SplitPlan.from_dict(doc).checksum() == prep.split.checksum()
    doc["test"] = doc["test"][1:]
    with pytest.raises(TrainerError, match="checksum"):
        SplitPlan.from_dict(doc)
