import csv
import math

import numpy as np
import pytest

from maskgen import numerics as nx
from maskgen.embeddings import Modality
from maskgen.suite import build_suite, five_task_spec
from maskgen.tasks import Cipher, TaskSpec, make_samples, synth_translation_corpus
from maskgen.trainer import (CURVE_FIELDS, LOG_FIELDS, NonFiniteLoss, OptimizerState, TrainConfig,
                             decays, lr_at, make_validator, optimizer_step, run_ablation, steps_to_reach,
                             train)
from maskgen.transformer import ModelConfig, init_random, load_checkpoint
from maskgen.vocab import build_vocab

TINY = dict(layers=1, heads=2, d_model=16, d_ff=32, max_positions=24, d_v=16)


class TestSchedule:
    def test_points(self):
        assert lr_at(0, 3e-4, 200, 1000) == 0.0
        assert lr_at(200, 3e-4, 200, 1000) == 3e-4
        assert lr_at(1000, 3e-4, 200, 1000) == 0.0
        assert lr_at(16000, 1.3e-5, 16000, 100000) == 1.3e-5

    def test_piecewise_linear(self):
        assert lr_at(100, 1.0, 200, 1000) == 0.5
        assert lr_at(600, 1.0, 200, 1000) == 0.5
        left, right = lr_at(199, 1.0, 200, 1000), lr_at(201, 1.0, 200, 1000)
        assert abs((1.0 - left) - 1 / 200) < 1e-15 and abs((1.0 - right) - 1 / 800) < 1e-15

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(1001, 1.0, 200, 1000)
        with pytest.raises(ValueError):
            lr_at(-1, 1.0, 200, 1000)

    def test_config_invariants(self):
        for bad in (dict(warmup=0), dict(warmup=20000), dict(base_lr=0.0), dict(weight_decay=-1.0)):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestAdamW:
    def _params(self, x):
        return {"w": nx.parameter(np.array(x, dtype=float))}

    def test_zero_grad_no_decay(self):
        p = self._params([1.0, -2.0])
        st = OptimizerState.for_params(p)
        optimizer_step(p, {"w": np.zeros(2)}, st, 0.1)
        assert np.array_equal(p["w"].data, [1.0, -2.0]) and st.step == 1

    def test_zero_grad_decay(self):
        p = self._params([1.0, -2.0])
        st = OptimizerState.for_params(p)
        for _ in range(3):
            optimizer_step(p, {"w": np.zeros(2)}, st, 0.1, weight_decay=0.5)
        np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * 0.95 ** 3, rtol=1e-15)

    def test_hand_computed_quadratic(self):
        # f(x) = 1.5 x^2 at x = 2: g = 6
        p = self._params([2.0])
        st = OptimizerState.for_params(p)
        optimizer_step(p, {"w": np.array([6.0])}, st, 0.1, (0.9, 0.999), 1e-8, 0.01)
        m, v = 0.1 * 6.0, 0.001 * 36.0
        mhat, vhat = m / (1 - 0.9), v / (1 - 0.999)
        expect = 2.0 * (1 - 0.1 * 0.01) - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
        assert abs(p["w"].data[0] - expect) < 1e-12

    def test_decay_skips_biases_and_gains(self):
        assert decays("tok_emb") and decays("layer0.attn.q.w")
        assert not decays("layer0.attn.q.b") and not decays("emb_ln.g")

    def test_non_finite_gradient_named(self):
        p = self._params([1.0])
        with pytest.raises(FloatingPointError, match="w"):
            optimizer_step(p, {"w": np.array([np.nan])}, OptimizerState.for_params(p), 0.1)

    def test_state_round_trip(self, tmp_path):
        p = self._params([1.0, 2.0])
        st = OptimizerState.for_params(p)
        optimizer_step(p, {"w": np.array([0.5, -0.5])}, st, 0.1)
        st.save(tmp_path / "s.npz")
        back = OptimizerState.load(tmp_path / "s.npz")
        assert back.step == 1 and np.array_equal(back.m["w"], st.m["w"]) and np.array_equal(back.v["w"], st.v["w"])


def copy_task(size=200, length=3, seed=0):
    words = [f"w{i}" for i in range(8)]
    recs = synth_translation_corpus(Cipher({w: w for w in words}), size, (length, length), seed, "copy")
    vocab = build_vocab([r.src for r in recs], ["en"])
    spec = TaskSpec("copy", Modality.TEXT_TO_TEXT, "en", "en", reference=True)
    return spec, make_samples(recs, spec, vocab), vocab


class TestTrain:
    def test_zero_steps_returns_initial(self):
        spec, samples, vocab = copy_task(10)
        cfg = ModelConfig(vocab_size=len(vocab), **TINY)
        p = init_random(cfg)
        res = train(TrainConfig(total_steps=0, tasks=(spec,)), p, {"copy": samples})
        assert res.params.equal(init_random(cfg)) and res.log == []

    def test_copy_task_learns(self):
        spec, samples, vocab = copy_task()
        cfg = ModelConfig(vocab_size=len(vocab))
        tc = TrainConfig(base_lr=5e-4, warmup=100, total_steps=2000, tasks=(spec,), validate_every=0)
        res = train(tc, init_random(cfg), {"copy": samples})
        tail = [r["loss"] for r in res.log[-100:]]
        assert np.mean(tail) < 0.1

    def test_log_and_artifacts(self, tmp_path):
        suite = build_suite(five_task_spec(size=20, heldout=4))
        cfg = ModelConfig(vocab_size=len(suite.vocab), **TINY)
        tc = TrainConfig(warmup=2, total_steps=6, tasks=suite.registry, validate_every=3, checkpoint_every=3)
        held = suite.heldout_samples([t.name for t in suite.registry])
        res = train(tc, init_random(cfg), suite.train_samples(), tmp_path, make_validator(held))
        with open(tmp_path / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == LOG_FIELDS
        assert len(rows) == 6 * 5
        assert [int(r["step"]) for r in rows[::5]] == list(range(1, 7))
        assert float(rows[0]["lr"]) == lr_at(1, tc.base_lr, 2, 6)
        for step in (3, 6):
            assert (tmp_path / f"step{step}.ckpt").exists()
        _, _, meta = load_checkpoint(tmp_path / "final.ckpt")
        assert meta["step"] == 6 and len(meta["tasks"]) == 5
        with open(tmp_path / "curves.csv") as fh:
            curves = list(csv.DictReader(fh))
        assert tuple(curves[0]) == CURVE_FIELDS and len(curves) == 2 * 5
        assert res.steps == 6

    def test_deterministic_and_resumable(self, tmp_path):
        suite = build_suite(five_task_spec(size=20, heldout=4))
        cfg = ModelConfig(vocab_size=len(suite.vocab), **TINY)
        tc = TrainConfig(warmup=2, total_steps=8, tasks=suite.registry, validate_every=0, checkpoint_every=4)
        train(tc, init_random(cfg), suite.train_samples(), tmp_path / "a")
        train(tc, init_random(cfg), suite.train_samples(), tmp_path / "b")
        a = (tmp_path / "a" / "final.ckpt").read_bytes()
        assert a == (tmp_path / "b" / "final.ckpt").read_bytes()
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
        params, _, meta = load_checkpoint(tmp_path / "a" / "step4.ckpt")
        state = OptimizerState.load(tmp_path / "a" / "step4.ckpt.optim.npz")
        res = train(tc, params, suite.train_samples(), tmp_path / "c", state=state, start_step=meta["step"])
        assert res.log[0]["step"] == 5
        assert (tmp_path / "c" / "final.ckpt").read_bytes() == a

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_keeps_last_good(self, tmp_path):
        spec, samples, vocab = copy_task(10)
        cfg = ModelConfig(vocab_size=len(vocab), **TINY)
        p = init_random(cfg)
        tc = TrainConfig(base_lr=1e-3, warmup=1, total_steps=5, tasks=(spec,), validate_every=0)
        good = p.copy()
        p["head.out.b"].data[0] = np.inf
        with pytest.raises(NonFiniteLoss):
            train(tc, p, {"copy": samples}, tmp_path)
        kept, _, meta = load_checkpoint(tmp_path / "last_good.ckpt")
        assert meta["step"] == 0
        assert np.array_equal(kept["tok_emb"].data, good["tok_emb"].data)


@pytest.fixture(scope="module")
def setup():
    suite = build_suite(five_task_spec(size=16, heldout=4))
    cfg = ModelConfig(vocab_size=len(suite.vocab), **TINY)
    tc = TrainConfig(warmup=2, total_steps=6, tasks=suite.registry, validate_every=3)
    held = suite.heldout_samples([t.name for t in suite.registry])
    return suite, cfg, tc, held


class TestAblation:
    def test_init_mode(self, setup, tmp_path):
        suite, cfg, tc, held = setup
        text, visual = init_random(cfg.with_seed(7)), init_random(cfg.with_seed(8))
        rep = run_ablation("init", cfg, tc, suite.train_samples(), held, text, visual, tmp_path)
        assert list(rep.curves) == ["random", "visual", "hybrid"]
        assert [r["step"] for r in rep.summary()] == [3, 6]
        for v in rep.curves:
            steps = [r["step"] for r in rep.curves[v]]
            assert steps == sorted(steps) and {r["task"] for r in rep.curves[v]} == {"mmt_en_de"}
            assert (tmp_path / f"curves_{v}.csv").exists()
        assert set(rep.manifests["random"].values()) == {"random"}
        assert set(rep.manifests["hybrid"].values()) == {"text", "visual"}

    def test_init_needs_checkpoints(self, setup):
        suite, cfg, tc, held = setup
        with pytest.raises(ValueError):
            run_ablation("init", cfg, tc, suite.train_samples(), held)
        with pytest.raises(ValueError):
            run_ablation("bogus", cfg, tc, suite.train_samples(), held)

    def test_multitask_mode(self, setup, tmp_path):
        suite, cfg, tc, held = setup
        rep = run_ablation("multitask", cfg, tc, suite.train_samples(), held, out_dir=tmp_path)
        assert list(rep.curves) == ["single", "multi"]
        assert {r["task"] for r in rep.curves["multi"]} == {t.name for t in suite.registry}
        assert {r["task"] for r in rep.curves["single"]} == {"mmt_en_de"}
        with open(tmp_path / "summary.csv") as fh:
            assert next(csv.reader(fh)) == ["step", "single", "multi"]

    def test_steps_to_reach(self):
        assert steps_to_reach([(1, 0.1), (2, 0.5), (3, 0.9)], 0.5) == 2
        assert steps_to_reach([(1, 0.1)], 0.5) is None
