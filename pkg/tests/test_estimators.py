import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from chronode import MinMaxSeriesScaler, NeuralCODERegressor, NeuralODERegressor, RecurrentRegressor
from chronode.data import gen_surrogate, make_windows
from chronode.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def series():
    s = gen_surrogate(40, 2, seed=1)
    return MinMaxSeriesScaler().fit_transform(s.values), s.times


def test_scaler_round_trip():
    X = np.random.default_rng(0).normal(size=(30, 3)) * [1, 10, 100]
    sc = MinMaxSeriesScaler().fit(X[:20])
    Z = sc.transform(X)
    np.testing.assert_allclose(Z[:20].min(axis=0), 0.0, atol=1e-15)
    np.testing.assert_allclose(Z[:20].max(axis=0), 1.0, atol=1e-15)
    np.testing.assert_allclose(sc.inverse_transform(Z), X, rtol=1e-12)


def test_unfitted_estimators_raise():
    for est in (NeuralCODERegressor(), RecurrentRegressor(), MinMaxSeriesScaler()):
        with pytest.raises(NotFittedError):
            (est.transform if isinstance(est, MinMaxSeriesScaler) else est.predict)(np.zeros((5, 1)))


def test_params_and_clone():
    est = RecurrentRegressor(model="ode-gru", epochs=3)
    assert clone(est).get_params() == est.get_params()
    assert NeuralODERegressor().get_params()["width"] == 50
    assert "fvp_weight" not in NeuralODERegressor().get_params()


def test_neural_code_regressor(series):
    X, t = series
    est = NeuralCODERegressor(width=8, max_iter=5, seq_len=5, substeps=2).fit(X, t)
    pred = est.predict(X, t)
    assert pred.shape == X.shape
    assert est.score(X, t) == pytest.approx(-np.mean((pred - X) ** 2), rel=1e-12)
    assert len(est.history_) >= 1 and est.history_[0].backward_mse is not None
    back = clone(est).set_params(direction="backward").fit(X, t).predict(X, t)
    np.testing.assert_allclose(back[-1], X[-1], atol=1e-14)


def test_neural_ode_regressor_has_no_backward_loss(series):
    X, t = series
    est = NeuralODERegressor(width=8, max_iter=3, seq_len=5, substeps=2).fit(X, t)
    assert est.history_[0].backward_mse is None


def test_recurrent_regressor(series):
    X, t = series
    est = RecurrentRegressor(model="code-birnn-lstm", hidden_dim=4, width=8, epochs=1, seen=3, predict_len=3).fit(X, t)
    idx, pred = est.predict_windows(X, t)
    assert pred.shape == (len(idx), 2)
    assert est.score(X, t) == pytest.approx(-np.mean((pred - X[idx]) ** 2), rel=1e-12)
    again = clone(est).fit(X, t).predict(X, t)
    np.testing.assert_array_equal(again, pred)


def test_recurrent_regressor_extrapolation_backward(series):
    X, t = series
    est = RecurrentRegressor(model="ode-rnn-rnn", hidden_dim=4, width=8, epochs=1, task="extrap_bwd").fit(X, t)
    idx, _ = est.predict_windows(X, t)
    windows = make_windows(len(X), "extrap_bwd", 7, 7)
    assert idx.tolist() == [i for _, targets in windows for i in targets]
    assert idx.max() == len(X) - 1 - 7


def test_input_validation():
    with pytest.raises(ConfigError):
        RecurrentRegressor(model="nope").fit(np.zeros((20, 1)))
    with pytest.raises(DataError):
        NeuralCODERegressor(max_iter=1).fit(np.zeros((5, 1)), t=np.arange(4.0))
    with pytest.raises(ValueError):
        NeuralCODERegressor(max_iter=1).fit(np.array([[0.0], [np.nan], [1.0]]))
