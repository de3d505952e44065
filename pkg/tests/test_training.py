import math

import numpy as np
import pytest

from divil import autograd as ag
from divil.data import EnvDataset, SynthConfig, gen_synthetic
from divil.models import ModelSpec, init_params, synthetic_spec
from divil.training import (
    CMNIST_HPARAMS,
    AdamState,
    TrainConfig,
    TrainingError,
    _objective,
    adam_step,
    cmnist_train_config,
    evaluate_accuracy,
    lambda_schedule,
    sgd_step,
    train,
    write_history_csv,
)


def toy_envs():
    x = np.array([[2.0, 1.0], [1.0, 2.0], [-2.0, -1.0], [-1.0, -2.0]])
    y = np.array([1.0, 1.0, 0.0, 0.0])
    return [EnvDataset(x[[0, 2]], y[[0, 2]], "a"), EnvDataset(x[[1, 3]], y[[1, 3]], "b")]


def small_synth(n=100, seed=0):
    return [gen_synthetic(SynthConfig(n=n, s=s, seed=seed, sigma_s=0.5), f"train{i}")
            for i, s in enumerate((0.2, 0.4))]


class TestSchedule:
    def test_warmup(self):
        assert lambda_schedule(0, 190, 91257.18613115903) == 1.0
        assert lambda_schedule(189, 190, 91257.18613115903) == 1.0

    def test_after_anneal(self):
        assert lambda_schedule(190, 190, 91257.18613115903) == 91257.18613115903

    def test_no_anneal(self):
        assert lambda_schedule(0, 0, 7.5) == 7.5


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p, _ = adam_step({"t": np.array(1.0)}, {"t": np.array(1.0)},
                         AdamState.zeros_like({"t": np.array(1.0)}), lr=0.1)
        assert float(p["t"]) == pytest.approx(0.9, abs=1e-7)

    def test_zero_gradient(self):
        theta = {"t": np.array([1.0, -2.0])}
        p, state = adam_step(theta, {"t": np.zeros(2)}, AdamState.zeros_like(theta), lr=0.1)
        np.testing.assert_array_equal(p["t"], theta["t"])
        assert state.t == 1

    def test_hand_two_steps(self):
        theta = {"t": np.array(0.5)}
        state = AdamState.zeros_like(theta)
        p, state = adam_step(theta, {"t": np.array(2.0)}, state, lr=0.01)
        p, state = adam_step(p, {"t": np.array(-1.0)}, state, lr=0.01)
        m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
        v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
        step2 = 0.01 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        step1 = 0.01 * 2.0 / (2.0 + 1e-8)
        assert float(p["t"]) == pytest.approx(0.5 - step1 - step2, abs=1e-15)

    def test_coupled_weight_decay(self):
        theta = {"t": np.array(2.0)}
        a, _ = adam_step(theta, {"t": np.array(0.0)}, AdamState.zeros_like(theta), 0.1, weight_decay=0.5)
        b, _ = adam_step(theta, {"t": np.array(1.0)}, AdamState.zeros_like(theta), 0.1)
        assert float(a["t"]) == float(b["t"])

    def test_inputs_untouched(self):
        theta = {"t": np.array([1.0])}
        state = AdamState.zeros_like(theta)
        adam_step(theta, {"t": np.array([3.0])}, state, 0.1)
        assert theta["t"][0] == 1.0 and state.t == 0 and state.m["t"][0] == 0.0

    def test_sgd(self):
        p, _ = sgd_step({"t": np.array(1.0)}, {"t": np.array(2.0)}, None, 0.25)
        assert float(p["t"]) == 0.5


class TestConfigs:
    def test_cmnist_hparams(self):
        cfg = cmnist_train_config("irmv1")
        assert cfg.lr == 0.0004898536566546834
        assert cfg.weight_decay == 0.00110794568
        assert cfg.epochs == 501 and cfg.batch_size == 25000
        assert cfg.anneal_iters == 190 and cfg.lam == 91257.18613115903
        assert CMNIST_HPARAMS["lam"] == 91257.18613115903

    def test_erm_has_no_penalty(self):
        assert cmnist_train_config("erm").lam == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(method="dro")
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(mask_fraction=1.5)


class TestObjective:
    def _bd(self, cfg, step=0, lam_eff=1.0):
        spec = synthetic_spec()
        p = init_params(spec, 0)
        envs = small_synth(20)
        tape = ag.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in p.values.items()}
        batches = [(e.x, e.labels01) for e in envs]
        bd, obj, _ = _objective(leaves, spec, batches, cfg, step, lam_eff)
        return bd.as_floats(), float(ag.as_array(obj))

    def test_erm_divil_has_zero_il(self):
        bd, _ = self._bd(TrainConfig(method="erm", divil=True, lam=0.0))
        assert bd.il == 0.0 and bd.ucl > 0.0

    def test_total_composition(self):
        cfg = TrainConfig(method="vrex", divil=True, lam=3.0, beta=0.2)
        bd, obj = self._bd(cfg, lam_eff=3.0)
        assert bd.total == pytest.approx(bd.pred + 3.0 * bd.il + 0.2 * bd.ucl, rel=1e-14)
        assert obj == pytest.approx(bd.total / 3.0, rel=1e-14)

    def test_beta_off_without_divil(self):
        bd, _ = self._bd(TrainConfig(method="irmv1", lam=2.0))
        assert bd.ucl == 0.0

    def test_weight_decay_term(self):
        cfg = TrainConfig(method="erm", weight_decay=0.01)
        bd, obj = self._bd(cfg)
        p = init_params(synthetic_spec(), 0)
        l2 = sum(float((v ** 2).sum()) for k, v in p.values.items() if not k.startswith("proj."))
        assert obj == pytest.approx(bd.total + 0.01 * l2, rel=1e-12)


class TestTrain:
    def test_separable_toy(self):
        spec = ModelSpec(input_dim=2, hidden_dims=(8,), feature_dim=8, projector_dims=())
        cfg = TrainConfig(method="erm", lam=0.0, lr=0.05, epochs=200)
        params, hist = train(spec, toy_envs(), cfg)
        assert hist.train_acc[-1] == 1.0
        for env in toy_envs():
            assert evaluate_accuracy(params, env) == 1.0

    def test_deterministic(self):
        cfg = TrainConfig(method="irmv1", divil=True, lam=5.0, epochs=5, seed=3)
        a, ha = train(synthetic_spec(), small_synth(), cfg)
        b, hb = train(synthetic_spec(), small_synth(), cfg)
        for k in a.values:
            assert a[k].tobytes() == b[k].tobytes()
        assert [s.total for s in ha.steps] == [s.total for s in hb.steps]

    def test_first_step_is_adam_on_objective(self):
        spec = synthetic_spec()
        envs = small_synth(30)
        cfg = TrainConfig(method="vrex", lam=2.0, epochs=1, lr=1e-3)
        init = init_params(spec, 0)
        params, _ = train(spec, envs, cfg, init=init)

        values = {k: v for k, v in init.values.items() if not k.startswith("proj.")}
        batches = [(e.x, e.labels01) for e in envs]

        def objective(**leaves):
            return _objective(leaves, spec, batches, cfg, 0, 2.0)[1]

        out, tape = ag.record_forward(objective, values)
        grads = ag.backward(tape, out)
        want, _ = adam_step(values, grads, AdamState.zeros_like(values), 1e-3)
        for k in want:
            np.testing.assert_allclose(params[k], want[k], rtol=0, atol=1e-15)

    def test_minibatches(self):
        cfg = TrainConfig(method="erm", lam=0.0, epochs=2, batch_size=30)
        _, hist = train(synthetic_spec(), small_synth(100), cfg)
        assert hist.steps_per_epoch == 4 and len(hist.steps) == 8

    def test_penalty_needs_two_envs(self):
        with pytest.raises(TrainingError):
            train(synthetic_spec(), small_synth()[:1], TrainConfig(method="irmv1", epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_reports_step(self):
        spec = synthetic_spec()
        init = init_params(spec, 0)
        init.values["phi.0.W"] = init.values["phi.0.W"] * 1e300
        with pytest.raises(TrainingError, match="step 0"):
            train(spec, small_synth(), TrainConfig(method="vrex", epochs=2), init=init)

    def test_eval_sets(self):
        envs = small_synth()
        cfg = TrainConfig(method="erm", lam=0.0, epochs=4, eval_every=2)
        _, hist = train(synthetic_spec(), envs, cfg, eval_sets=envs)
        assert [r["step"] for r in hist.evals] == [2, 2, 4, 4]
        assert 0.0 <= hist.final_eval("train0") <= 1.0

    def test_history_csv(self, tmp_path):
        cfg = TrainConfig(method="irmv1", lam=4.0, anneal_iters=1, epochs=3)
        _, hist = train(synthetic_spec(), small_synth(), cfg)
        write_history_csv(tmp_path / "h.csv", hist)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "step,pred,il,ucl,total,lambda_eff"
        assert [ln.split(",")[-1] for ln in lines[1:]] == ["1.0", "4.0", "4.0"]


class TestAccuracy:
    def test_constant_model_coin_flip(self):
        spec = ModelSpec(input_dim=16, feature_dim=4, projector_dims=())
        p = init_params(spec, 0)
        p = p.replace({k: np.zeros_like(v) for k, v in p.values.items()})
        ds = gen_synthetic(SynthConfig(n=4000, seed=9))
        # zero logit predicts class 0 everywhere
        assert abs(evaluate_accuracy(p, ds) - 0.5) < 0.03
