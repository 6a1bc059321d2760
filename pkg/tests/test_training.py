import numpy as np
import pytest

from enct5 import model as M
from enct5 import tensor as T
from enct5.adafactor import AdafactorState, NonFiniteGradientError, adafactor_step, decay_rate
from enct5.checkpoint import load
from enct5.metrics import compute_metrics
from enct5.packing import Segment, collate, pack_labeled, pack_pairs
from enct5.tasks import Example, TaskData, TaskSpec, synth_task
from enct5.tensor import Rng
from enct5.training import (PRESETS, DivergenceError, Encoded, TrainConfig, apply_noise_mask, compute_loss,
                            default_tokenizer, encode_examples, evaluate, finetune, format_score, gradients,
                            layout, pretrain, rank_scores, reconstruct, span_corrupt, train_step,
                            write_history_csv)

from oracles import padded_slot_trajectories

TOK = default_tokenizer()


def cfg_for(variant="t5", **kw):
    base = dict(d_model=16, d_ff=24, num_heads=2, d_kv=8, num_encoder_layers=2, num_decoder_layers=2,
                vocab_size=TOK.vocab_size, rel_buckets=8, rel_max_distance=16, variant=variant)
    base.update(kw)
    return M.ModelConfig(**base)


class TestAdafactor:
    def _params(self, **arrays):
        return {k: T.parameter(np.array(v, dtype=float)) for k, v in arrays.items()}

    def test_zero_gradient(self):
        p = self._params(w=np.ones((2, 3)), b=np.ones(3))
        state = AdafactorState()
        adafactor_step(p, {"w": np.full((2, 3), 0.5), "b": np.full(3, 0.5)}, state, 0.1)
        before = {k: v.data.copy() for k, v in p.items()}
        row, full = state.row["w"].copy(), state.full["b"].copy()
        adafactor_step(p, {"w": np.zeros((2, 3)), "b": np.zeros(3)}, state, 0.1)
        for k in p:
            assert p[k].data.tobytes() == before[k].tobytes()
        beta = decay_rate(2)
        np.testing.assert_allclose(state.row["w"], beta * row + (1 - beta) * 1e-30, rtol=1e-15)
        assert np.all(state.row["w"] < row) and np.all(state.full["b"] < full)

    def test_sign(self):
        p = self._params(b=[0.0, 0.0])
        adafactor_step(p, {"b": np.array([2.0, -3.0])}, AdafactorState(), 0.01)
        assert p["b"].data[0] < 0 < p["b"].data[1]

    def test_factored_moment_against_loops(self):
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=(4, 3)) for _ in range(3)]
        p = self._params(w=np.zeros((4, 3)))
        state = AdafactorState()
        R = [0.0] * 4
        C = [0.0] * 3
        for t, g in enumerate(grads, start=1):
            adafactor_step(p, {"w": g}, state, 0.1)
            beta = 1.0 - t ** -0.8
            for i in range(4):
                m = sum(g[i, j] ** 2 + 1e-30 for j in range(3)) / 3
                R[i] = m if t == 1 else beta * R[i] + (1 - beta) * m
            for j in range(3):
                m = sum(g[i, j] ** 2 + 1e-30 for i in range(4)) / 4
                C[j] = m if t == 1 else beta * C[j] + (1 - beta) * m
        mean_r = sum(R) / 4
        want = np.array([[R[i] * C[j] / mean_r for j in range(3)] for i in range(4)])
        got = np.outer(state.row["w"], state.col["w"]) / state.row["w"].mean()
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=0)

    def test_update_clipping(self):
        p = self._params(b=[0.0, 0.0, 0.0, 0.0])
        adafactor_step(p, {"b": np.array([1.0, 1.0, 1.0, 1.0])}, AdafactorState(), 1.0)
        # first step: u = g/|g| has rms 1, so no clipping and a unit step
        np.testing.assert_allclose(p["b"].data, -1.0, rtol=1e-12)

    def test_non_finite_aborts_before_mutation(self):
        p = self._params(a=[1.0], b=[1.0])
        state = AdafactorState()
        with pytest.raises(NonFiniteGradientError, match="b"):
            adafactor_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, state, 0.1)
        assert p["a"].data[0] == 1.0 and state.step == 0


class TestSpanCorruption:
    def test_rule(self):
        a, b, c, d, e = 10, 11, 12, 13, 14
        inp, tgt = apply_noise_mask([a, b, c, d, e], [0, 0, 1, 1, 0], TOK.sentinel)
        s0 = TOK.sentinel(0)
        assert inp == [a, b, s0, e]
        assert tgt == [s0, c, d, 1]
        assert s0 == TOK.vocab_size - 1

    def test_tiny_rate(self):
        toks = list(range(3, 60))
        inp, tgt = span_corrupt(toks, Rng(0), TOK, corruption_rate=1e-6)
        assert inp == toks and tgt == [1]

    def test_too_short(self):
        assert span_corrupt([5], Rng(0), TOK) == ([5], [1])

    def test_reconstruction_10k(self):
        rng = Rng(1)
        np_rng = np.random.default_rng(1)
        noise = 0
        total = 0
        for _ in range(10_000):
            toks = np_rng.integers(3, 200, np_rng.integers(2, 60)).tolist()
            inp, tgt = span_corrupt(toks, rng, TOK)
            assert reconstruct(inp, tgt, TOK) == toks
            noise += len(tgt) - 1 - sum(TOK.is_sentinel(t) for t in tgt)
            total += len(toks)
        assert abs(noise / total - 0.15) < 0.02

    def test_mean_span_length(self):
        rng = Rng(2)
        spans, noise = 0, 0
        for _ in range(2000):
            inp, tgt = span_corrupt(list(range(3, 103)), rng, TOK)
            k = sum(TOK.is_sentinel(t) for t in tgt)
            spans += k
            noise += len(tgt) - 1 - k
        assert abs(noise / spans - 3.0) < 0.3


class TestPretrain:
    def test_loss_falls_and_checkpoints(self, tmp_path):
        from enct5.tasks import topic_corpus
        corpus = [TOK.encode(s, add_eos=False) for s in topic_corpus(0, 300)]
        cfg = TrainConfig(batch_size=8, max_input_len=32, max_target_len=12, steps=200, checkpoint_every=80,
                          learning_rate=3e-3)
        result = pretrain(cfg, cfg_for(), corpus, TOK, out_dir=tmp_path)
        losses = [l for _, l in result.losses]
        assert len(losses) == 200
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
        assert [p.name for p in result.checkpoints] == ["ckpt_000080.bin", "ckpt_000160.bin", "ckpt_000200.bin"]
        final = load(result.checkpoints[-1])
        for name, t in result.params.items():
            assert final.params[name].data.tobytes() == t.data.tobytes()

    def test_packing_leaves_batch_loss_unchanged(self):
        config = cfg_for()
        p = M.init_params(config, 0)
        rng = np.random.default_rng(0)
        xs = [rng.integers(3, 100, n).tolist() for n in (5, 7, 4, 6)]
        ys = [rng.integers(3, 100, n).tolist() for n in (3, 2, 4, 3)]
        with T.no_grad():
            packed = compute_loss(config, p, pack_pairs(xs, ys, 12, 8))
            single = compute_loss(config, p, pack_pairs(xs, ys, 12, 8, enabled=False))
        assert pack_pairs(xs, ys, 12, 8).batch_size < len(xs)
        assert abs(packed.item() - single.item()) < 1e-9

    def test_divergence(self):
        config = cfg_for()
        p = M.init_params(config, 0)
        p["shared/embedding"].data[:] = np.nan
        with pytest.raises(DivergenceError, match="step 1"):
            train_step(config, p, pack_pairs([[3, 4]], [[5]], 2, 1), AdafactorState(), 1e-3)

    def test_step_is_reproducible(self):
        config = cfg_for()
        batch = pack_pairs([[3, 4, 5], [6, 7]], [[8], [9, 10]], 5, 3)
        outs = []
        for _ in range(2):
            p = M.init_params(config, 0)
            train_step(config, p, batch, AdafactorState(), 1e-3)
            outs.append(b"".join(t.data.tobytes() for t in p.values()))
        assert outs[0] == outs[1]


class TestFinetuneData:
    spec = TaskSpec("sent", "classification", ("neg", "pos"), ("accuracy",))

    def test_label_mapping_and_padded_slot(self):
        enc = encode_examples(self.spec, [Example("good", "pos"), Example("bad", "neg")], TOK, "enct5", 16)
        assert [e.label for e in enc] == [2, 1]
        batch = layout(cfg_for("enct5"), [[enc[0], enc[1]], [enc[1]]], TrainConfig(max_input_len=16))
        assert batch.labels.tolist() == [[2, 1], [1, 0]]

    def test_unknown_label(self):
        from enct5.tasks import TaskError
        with pytest.raises(TaskError):
            encode_examples(self.spec, [Example("x", "maybe")], TOK, "t5", 16)

    def test_multi_token_target(self):
        spec = TaskSpec("nli", "classification", ("entailment", "neutral", "contradiction"), ("accuracy",))
        enc = encode_examples(spec, [Example("a", "entailment", "b")], TOK, "t5", 32)
        assert len(enc[0].targets) > 2
        assert enc[0].targets[-1] == 1

    def test_score_grid(self):
        assert format_score(3.14159) == "3.2" and format_score(9.0) == "5.0" and format_score(-1) == "0.0"


class TestGradients:
    def test_only_enct5_names_receive_gradients(self):
        config = cfg_for("enct5", num_classes=3)
        p = M.init_params(config, 0)
        _, grads = gradients(config, p, pack_labeled([[3, 4, 5], [6, 7]], [1, 3], 5, num_slots=4))
        assert set(grads) <= set(M.parameter_shapes(config))
        assert not [n for n in grads if n.startswith("decoder/")]
        assert np.any(grads["head/bos_embedding"] != 0)

    def test_removing_padded_slots_changes_no_gradient(self):
        config = cfg_for("enct5", num_classes=3)
        p = M.init_params(config, 0)
        rows = [[Segment([3, 4, 5], label=1), Segment([6, 7], label=3)], [Segment([8, 9], label=2)]]
        _, wide = gradients(config, p, collate(rows, 6, num_slots=5))
        _, tight = gradients(config, p, collate(rows, 6))
        assert set(wide) == set(tight)
        for name in wide:
            np.testing.assert_allclose(wide[name], tight[name], rtol=1e-12, atol=1e-15)

    def test_padded_slot_logits_get_zero_gradient(self):
        config = cfg_for("enct5", num_classes=3)
        p = M.init_params(config, 0)
        batch = collate([[Segment([3, 4], label=1)], [Segment([5], label=2), Segment([6], label=3)]], 3)
        with T.no_grad():
            logits = T.parameter(M.forward(config, p, batch).data)
        T.backward(T.cross_entropy_masked(logits, batch.labels, batch.label_weights))
        assert np.all(logits.grad[0, 1] == 0.0)

    @pytest.mark.parametrize("variant", ["enct5", "t5"])
    def test_padded_slot_trajectory_bitwise(self, variant):
        task = synth_task("majority", 0, 120)
        config = cfg_for(variant, num_classes=4)
        a, b, pa, pb, fillers = padded_slot_trajectories(config, task, TOK, steps=15)
        assert fillers > 0
        assert a == b
        for name in pa:
            assert pa[name].data.tobytes() == pb[name].data.tobytes()

    def test_packing_on_off_same_membership(self):
        config = cfg_for("enct5", num_classes=3)
        rng = np.random.default_rng(0)
        xs = [rng.integers(3, 100, rng.integers(3, 9)).tolist() for _ in range(24)]
        ys = rng.integers(1, 4, 24).tolist()
        runs = []
        for packed in (True, False):
            p = M.init_params(config, 0)
            state = AdafactorState()
            losses = []
            for step in range(4):
                chunk = slice(6 * step, 6 * step + 6)
                batch = pack_labeled(xs[chunk], ys[chunk], 24, enabled=packed)
                losses.append(train_step(config, p, batch, state, 1e-2))
            runs.append((losses, p))
        assert max(abs(a - b) for a, b in zip(runs[0][0], runs[1][0])) < 1e-9
        for name in runs[0][1]:
            np.testing.assert_allclose(runs[0][1][name].data, runs[1][1][name].data, rtol=0, atol=1e-9)


class TestEvaluation:
    def test_rank_score_matches_independent_forward(self):
        config = cfg_for()
        p = M.init_params(config, 0)
        inputs = [[5, 6, 7, 1], [8, 9, 1]]
        cands = [TOK.encode("alpha"), TOK.encode("entailment")]
        scores = rank_scores(config, p, inputs, cands, 8)
        for i, x in enumerate(inputs):
            for j, c in enumerate(cands):
                batch = collate([[Segment(x, targets=c)]], len(x), max_target_len=len(c))
                with T.no_grad():
                    logits = M.forward(config, p, batch).data[0]
                total = 0.0
                for t, tok in enumerate(c):
                    row = logits[t]
                    total += row[tok] - np.log(np.sum(np.exp(row - row.max()))) - row.max()
                assert scores[i, j] == pytest.approx(total, abs=1e-9)

    def test_perfect_and_constant_predictors(self):
        golds = np.array([1, 2, 1, 2, 1, 2])
        perfect = compute_metrics(["accuracy", "matthews"], golds, golds)
        assert perfect["accuracy"] == 1.0 and perfect["matthews"] == 1.0
        const = compute_metrics(["accuracy", "matthews"], np.ones(6, dtype=int), golds)
        assert const["accuracy"] == 0.5 and const["matthews"] == 0.0
        assert const["flags"] == ["matthews"]

    def test_empty_split(self):
        from enct5.tasks import TaskError
        config = cfg_for("enct5")
        spec = TaskSpec("t", "classification", ("neg", "pos"), ("accuracy",))
        with pytest.raises(TaskError):
            evaluate(config, M.init_params(config, 0), TaskData(spec, {"validation": []}), "validation", TOK)

    @pytest.mark.parametrize("variant", ["t5", "1dect5", "enct5"])
    def test_finetune_runs_and_selects(self, variant, tmp_path):
        task = synth_task("match", 0, 40, 16)
        cfg = TrainConfig(batch_size=4, max_input_len=48, max_target_len=8, steps=6, eval_every=3)
        result = finetune(cfg, variant, None, task, TOK, model_config=cfg_for())
        evals = [h for h in result.history if "accuracy" in h]
        assert [h["step"] for h in evals] == [3, 6]
        assert result.best_score == max(h["f1"] * 0.5 + h["accuracy"] * 0.5 for h in evals)
        write_history_csv(tmp_path / "h.csv", result.history)
        assert (tmp_path / "h.csv").read_text().splitlines()[0].startswith("step,loss")

    def test_regression_pathways(self):
        task = synth_task("score", 0, 24, 8)
        cfg = TrainConfig(batch_size=4, max_input_len=48, max_target_len=8, steps=2, eval_every=2)
        for variant in ("enct5", "t5"):
            result = finetune(cfg, variant, None, task, TOK, model_config=cfg_for())
            assert np.isfinite(result.best_score)


def test_presets():
    pub = PRESETS["published"]
    assert (pub.batch_size, pub.max_input_len, pub.max_target_len, pub.learning_rate, pub.steps) == \
        (2048, 512, 62, 1e-3, 50_000)
    desk = PRESETS["desk"]
    assert (desk.batch_size, desk.max_input_len, desk.max_target_len, desk.steps) == (32, 64, 8, 2000)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
