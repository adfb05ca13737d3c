import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from csialm import channel_sim as cs
from csialm import training as tr
from csialm.errors import DimensionError
from csialm.estimators import CSIALMLightRegressor, CSIALMRegressor, PersistenceRegressor, check_history

SCEN = cs.ScenarioConfig(M=2, F=4, T_history=8, P=4)
TINY_TEACHER = dict(layers=1, hidden=16, heads=2, vocab=128, pretrain_steps=5, cssa_dim=4, dict_size=8, anchors=4,
                    prompts=2, epochs=2, batch_size=16)
TINY_STUDENT = dict(layers=1, hidden=16, heads=2, prompt_len=2, relation_heads=2, epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def data():
    return cs.make_dataset(SCEN, 20, 10, 10)


@pytest.fixture(scope="module")
def teacher(data):
    return CSIALMRegressor(**TINY_TEACHER).fit(data.train.history, data.train.target,
                                               data.val.history, data.val.target)


def test_params_round_trip_and_clone():
    est = CSIALMRegressor(**TINY_TEACHER)
    params = est.get_params()
    assert params["layers"] == 1 and params["lora_rank"] == 4
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert clone(CSIALMLightRegressor(lambda2=0.5)).get_params()["lambda2"] == 0.5


def test_default_teacher_is_frozen_lora():
    cfg = CSIALMRegressor().backbone_config()
    assert (cfg.layers, cfg.hidden, cfg.heads, cfg.lora_rank, cfg.frozen_base) == (6, 128, 8, 4, True)


def test_teacher_fit_predict_score(teacher, data):
    pred = teacher.predict(data.test.history)
    assert pred.shape == data.test.target.shape and np.iscomplexobj(pred)
    assert teacher.score(data.test.history, data.test.target) == pytest.approx(-tr.nmse(pred, data.test.target))
    single = teacher.predict(data.test.history[:, 0])
    np.testing.assert_allclose(single, pred[:, 0], rtol=1e-5, atol=1e-6)
    assert teacher.run_.epochs_run == 2


def test_predict_rejects_other_subcarrier_count(teacher):
    with pytest.raises(DimensionError, match="F=4"):
        teacher.predict(np.ones((2, 2, 6, 8), np.complex64))


def test_unfitted_estimators_raise():
    with pytest.raises(NotFittedError):
        CSIALMRegressor().predict(np.ones((1, 4, 8), np.complex64))
    with pytest.raises(NotFittedError):
        PersistenceRegressor().predict(np.ones((1, 4, 8), np.complex64))


def test_input_validation():
    with pytest.raises(DimensionError):
        check_history(np.ones((4, 8)))
    with pytest.raises(ValueError, match="no samples"):
        check_history(np.ones((0, 2, 4, 8)))
    bad = np.ones((1, 2, 4, 8), complex)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        check_history(bad)
    with pytest.raises(DimensionError, match="does not match"):
        PersistenceRegressor().fit(np.ones((3, 2, 4, 8))).score(np.ones((3, 2, 4, 8)), np.ones((3, 2, 5)))


def test_student_distilled_from_fitted_teacher(teacher, data):
    student = CSIALMLightRegressor(teacher=teacher, **TINY_STUDENT).fit(data.train.history, data.train.target)
    assert student.predict(data.test.history).shape == data.test.target.shape
    kd = [r["loss_align_or_kd"] for r in student.run_.rows("train")]
    assert all(v > 0 for v in kd)
    plain = CSIALMLightRegressor(**TINY_STUDENT).fit(data.train.history, data.train.target)
    assert all(r["loss_align_or_kd"] == 0 for r in plain.run_.rows("train"))


def test_holdout_split_is_used_without_validation_data(data):
    est = CSIALMLightRegressor(**TINY_STUDENT, validation_fraction=0.25).fit(data.train.history, data.train.target)
    assert len(est.run_.rows("val")) == 2


def test_persistence_regressor(data):
    est = PersistenceRegressor().fit(data.train.history)
    np.testing.assert_array_equal(est.predict(data.test.history), data.test.history[..., -1])
    static = cs.make_dataset(SCEN, 5, 1, 1, grid=(0.0,)).train
    assert est.score(static.history, static.target) == 0.0
