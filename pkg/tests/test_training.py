import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xladapt.model import FreezeMask, build_network, forward, make_tdnn_spec
from xladapt.numerics import NumericError, Rng
from xladapt.synthdata import (
    identity_domain,
    make_language,
    sample_corpus,
)
from xladapt.training import (
    TrainConfig,
    adapt_shared_layers,
    apply_update,
    lr_schedule,
    make_epoch_plan,
    set_input_normalization,
    steps_per_epoch,
    train_multitask,
    train_single_task,
)

SMALL_CONTEXTS = ((-1, 0, 1), (-1, 0, 1), (0,))


def toy_spec(tasks=("toy",), hidden=16, input_dim=8, senones=2):
    return make_tdnn_spec(
        input_dim, hidden, {t: senones for t in tasks}, trunk_contexts=SMALL_CONTEXTS
    )


def separable_corpus(seed=0, n_frames=1200, senones=2, prefix="toy"):
    lang = make_language(
        Rng(seed), f"sep{prefix}", senones, 4, 8, class_sep=6.0
    )
    dom = identity_domain("clean", 8, noise_std=0.05)
    return sample_corpus(Rng(seed).split("data"), lang, dom, n_frames, 30, prefix)


def frame_error(net, task, corpus):
    wrong = total = 0
    for u in corpus.utterances:
        logits, _ = forward(net, task, u.frames)
        wrong += int(np.sum(logits.argmax(axis=1) != u.labels))
        total += u.labels.size
    return 100.0 * wrong / total


class TestSchedule:
    def test_paper_endpoints_exact(self):
        cfg = TrainConfig()
        assert lr_schedule(cfg, 0.0) == 0.0015
        assert lr_schedule(cfg, 1.0) == 0.0015 / 10.0
        assert lr_schedule(cfg, 1.0) == pytest.approx(0.00015, rel=1e-12)

    def test_halfway_closed_form(self):
        cfg = TrainConfig()
        assert lr_schedule(cfg, 0.5) == pytest.approx(4.743416490252569e-4, rel=1e-12)

    def test_monotone_on_grid(self):
        cfg = TrainConfig()
        grid = [lr_schedule(cfg, p) for p in np.linspace(0.0, 1.0, 1000)]
        assert all(a >= b for a, b in zip(grid, grid[1:]))

    def test_progress_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(TrainConfig(), -0.01)
        with pytest.raises(ValueError):
            lr_schedule(TrainConfig(), 1.01)

    @given(
        initial=st.floats(1e-6, 1.0),
        factor=st.floats(1.0, 100.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_endpoints_exact_for_any_config(self, initial, factor):
        cfg = TrainConfig(initial_lr=initial, final_lr_factor=factor)
        assert lr_schedule(cfg, 0.0) == initial
        assert lr_schedule(cfg, 1.0) == initial / factor

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(initial_lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(final_lr_factor=0.5)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(minibatch=0)
        with pytest.raises(ValueError):
            TrainConfig(max_change=0)


class TestApplyUpdate:
    def _net_and_grads(self, norm_target, lr=1.0):
        net = build_network(toy_spec(), Rng(0))
        grads = {}
        for name, (w, b) in net.params.items():
            gw = np.zeros_like(w)
            gw[0, 0] = norm_target / lr
            grads[name] = (gw, np.zeros_like(b))
        return net, grads

    def test_under_cap_applied_unscaled(self):
        net, grads = self._net_and_grads(1.5)
        before = net.params["trunk1"][0][0, 0]
        report = apply_update(net, grads, 1.0, FreezeMask.all_unfrozen(net.spec), 2.0)
        assert not report["trunk1"].clipped
        assert net.params["trunk1"][0][0, 0] == before - 1.5

    def test_over_cap_scaled_by_norm_ratio(self):
        net, grads = self._net_and_grads(4.0)
        before = net.params["trunk1"][0][0, 0]
        report = apply_update(net, grads, 1.0, FreezeMask.all_unfrozen(net.spec), 2.0)
        assert report["trunk1"].clipped
        assert report["trunk1"].raw_norm == pytest.approx(4.0)
        assert report["trunk1"].applied_norm == pytest.approx(2.0, rel=1e-12)
        assert net.params["trunk1"][0][0, 0] == pytest.approx(before - 2.0)

    def test_frozen_layer_bitwise_unchanged_after_many_updates(self):
        net = build_network(toy_spec(), Rng(1))
        mask = FreezeMask.all_unfrozen(net.spec)
        mask.scales["trunk3"] = 0.0
        frozen_w = net.params["trunk3"][0].copy()
        frozen_b = net.params["trunk3"][1].copy()
        r = np.random.default_rng(0)
        for _ in range(100):
            grads = {
                name: (r.standard_normal(w.shape), r.standard_normal(b.shape))
                for name, (w, b) in net.params.items()
            }
            apply_update(net, grads, 0.01, mask, 2.0)
        assert np.array_equal(net.params["trunk3"][0], frozen_w)
        assert np.array_equal(net.params["trunk3"][1], frozen_b)

    def test_nan_gradient_aborts(self):
        net = build_network(toy_spec(), Rng(1))
        grads = {"trunk1": (np.full_like(net.params["trunk1"][0], np.nan),
                            np.zeros_like(net.params["trunk1"][1]))}
        with pytest.raises(NumericError):
            apply_update(net, grads, 0.01, FreezeMask.all_unfrozen(net.spec), 2.0)

    @given(seed=st.integers(0, 10_000), lr=st.floats(1e-4, 10.0))
    @settings(max_examples=40, deadline=None)
    def test_clip_ceiling_property(self, seed, lr):
        net = build_network(toy_spec(), Rng(0))
        r = np.random.default_rng(seed)
        grads = {
            name: (r.standard_normal(w.shape) * 10, r.standard_normal(b.shape) * 10)
            for name, (w, b) in net.params.items()
        }
        report = apply_update(net, grads, lr, FreezeMask.all_unfrozen(net.spec), 2.0)
        for info in report.values():
            assert info.applied_norm <= 2.0 * (1 + 1e-12)


class TestBatchPlan:
    def _cover_counts(self, corpora, minibatch, seed=0):
        plan = make_epoch_plan(corpora, minibatch, Rng(seed))
        counts = {}
        for entry in plan.entries:
            for u, lo, hi in entry.segments:
                for f in range(lo, hi):
                    key = (entry.task, u, f)
                    counts[key] = counts.get(key, 0) + 1
        return plan, counts

    def test_exact_cover_no_duplicates(self):
        corpora = {"a": separable_corpus(1, 300, prefix="a"),
                   "b": separable_corpus(2, 200, prefix="b")}
        plan, counts = self._cover_counts(corpora, 64)
        expected = {
            (t, u, f)
            for t, c in corpora.items()
            for u, utt in enumerate(c.utterances)
            for f in range(utt.frames.shape[0])
        }
        assert set(counts) == expected
        assert all(v == 1 for v in counts.values())

    def test_steps_per_epoch_is_ceil_sum(self):
        corpora = {"a": separable_corpus(1, 300, prefix="a"),
                   "b": separable_corpus(2, 200, prefix="b")}
        plan = make_epoch_plan(corpora, 64, Rng(0))
        assert plan.steps() == math.ceil(300 / 64) + math.ceil(200 / 64)
        assert plan.steps() == steps_per_epoch(corpora, 64)

    def test_larger_task_contributes_proportionally(self):
        corpora = {"big": separable_corpus(1, 512, prefix="big"),
                   "small": separable_corpus(2, 256, prefix="small")}
        plan = make_epoch_plan(corpora, 64, Rng(0))
        n_big = sum(1 for e in plan.entries if e.task == "big")
        n_small = sum(1 for e in plan.entries if e.task == "small")
        assert n_big == 2 * n_small

    def test_entry_order_shuffled_by_seed(self):
        corpora = {"a": separable_corpus(1, 600, prefix="a"),
                   "b": separable_corpus(2, 600, prefix="b")}
        order1 = [e.task for e in make_epoch_plan(corpora, 32, Rng(0)).entries]
        order2 = [e.task for e in make_epoch_plan(corpora, 32, Rng(1)).entries]
        assert order1 != order2

    def test_batch_frame_counts_respect_minibatch(self):
        corpora = {"a": separable_corpus(1, 300, prefix="a")}
        plan = make_epoch_plan(corpora, 64, Rng(0))
        sizes = sorted(e.n_frames for e in plan.entries)
        assert sizes == [300 - 64 * 4] + [64] * 4


class TestTrainSingle:
    def test_learns_separable_corpus(self):
        corpus = separable_corpus(0)
        net = build_network(toy_spec(), Rng(0))
        set_input_normalization(net, [corpus])
        train_single_task(
            net, "toy", corpus,
            TrainConfig(initial_lr=0.06, epochs=3, minibatch=64, seed=0),
        )
        assert frame_error(net, "toy", corpus) < 5.0

    def test_half_epoch_runs_ceil_half_steps(self):
        corpus = separable_corpus(0, 700)
        full_steps = steps_per_epoch({"toy": corpus}, 64)
        net = build_network(toy_spec(), Rng(0))
        result = train_single_task(
            net, "toy", corpus, TrainConfig(epochs=0.5, minibatch=64, seed=0)
        )
        assert len(result.loss_curve) == math.ceil(full_steps / 2)

    def test_same_seed_bit_identical_networks(self):
        corpus = separable_corpus(0, 400)
        cfg = TrainConfig(epochs=1, minibatch=64, seed=7)
        nets = []
        for _ in range(2):
            net = build_network(toy_spec(), Rng(3))
            train_single_task(net, "toy", corpus, cfg)
            nets.append(net)
        for name in nets[0].params:
            assert np.array_equal(nets[0].params[name][0], nets[1].params[name][0])
            assert np.array_equal(nets[0].params[name][1], nets[1].params[name][1])

    def test_empty_corpus_rejected(self):
        from xladapt.synthdata import Corpus

        net = build_network(toy_spec(), Rng(0))
        with pytest.raises(ValueError, match="empty corpus"):
            train_single_task(net, "toy", Corpus([], 8, 2), TrainConfig())

    def test_out_of_range_labels_rejected(self):
        corpus = separable_corpus(0, 200, senones=4)
        net = build_network(toy_spec(senones=2), Rng(0))
        with pytest.raises(ValueError, match="out of range"):
            train_single_task(net, "toy", corpus, TrainConfig())

    def test_provenance_appended(self):
        corpus = separable_corpus(0, 200)
        net = build_network(toy_spec(), Rng(0))
        train_single_task(net, "toy", corpus, TrainConfig(epochs=1, minibatch=64))
        assert net.provenance[-1]["stage"] == "train_single"
        assert net.provenance[-1]["tasks"] == ["toy"]

    def test_loss_descends_for_19_of_20_seeds(self):
        wins = 0
        for seed in range(20):
            corpus = separable_corpus(seed, 600)
            net = build_network(toy_spec(), Rng(seed))
            set_input_normalization(net, [corpus])
            result = train_single_task(
                net, "toy", corpus,
                TrainConfig(initial_lr=0.03, epochs=3, minibatch=64, seed=seed),
            )
            losses = result.losses()
            if losses[-1] < losses[0]:
                wins += 1
        assert wins >= 19


class TestTrainMultitask:
    def test_trunk_sees_all_frames_heads_their_own(self):
        corpora = {"a": separable_corpus(1, 512, prefix="a"),
                   "b": separable_corpus(2, 256, prefix="b")}
        net = build_network(toy_spec(tasks=("a", "b")), Rng(0))
        seen = {"a": 0, "b": 0}
        train_multitask(
            net,
            corpora,
            TrainConfig(epochs=1, minibatch=64, seed=0),
            batch_hook=lambda e: seen.__setitem__(e.task, seen[e.task] + e.n_frames),
        )
        assert seen == {"a": 512, "b": 256}

    def test_three_task_mode(self):
        corpora = {
            "a": separable_corpus(1, 200, prefix="a"),
            "b": separable_corpus(2, 200, prefix="b"),
            "c": separable_corpus(3, 200, prefix="c"),
        }
        net = build_network(toy_spec(tasks=("a", "b", "c")), Rng(0))
        result = train_multitask(net, corpora, TrainConfig(epochs=1, minibatch=64, seed=0))
        assert {t for _, t, _ in result.loss_curve} == {"a", "b", "c"}

    def test_task_without_head_rejected(self):
        corpora = {"a": separable_corpus(1, 100, prefix="a")}
        net = build_network(toy_spec(tasks=("b",)), Rng(0))
        with pytest.raises(KeyError, match="unknown task"):
            train_multitask(net, corpora, TrainConfig())

    def test_only_own_head_updates(self):
        corpora = {"a": separable_corpus(1, 300, prefix="a"),
                   "b": separable_corpus(2, 300, prefix="b")}
        net = build_network(toy_spec(tasks=("a", "b")), Rng(0))
        b_head_before = net.params["b.output"][0].copy()
        # train only task a's batches by restricting the corpus map
        train_multitask(net, {"a": corpora["a"]}, TrainConfig(epochs=1, minibatch=64))
        assert np.array_equal(net.params["b.output"][0], b_head_before)


class TestAdaptation:
    def _multilingual_net(self):
        corpora = {"lr": separable_corpus(1, 300, prefix="lr"),
                   "wr": separable_corpus(2, 300, prefix="wr")}
        net = build_network(toy_spec(tasks=("lr", "wr")), Rng(0))
        train_multitask(net, corpora, TrainConfig(epochs=1, minibatch=64, seed=0))
        return net, corpora

    def test_upper_trunk_and_heads_bitwise_frozen(self):
        net, corpora = self._multilingual_net()
        adapted = adapt_shared_layers(
            net, "wr", corpora["wr"], 2, TrainConfig(epochs=1, minibatch=64, seed=1)
        )
        frozen = ["trunk3", "lr.prefinal", "lr.output", "wr.prefinal", "wr.output"]
        for name in frozen:
            assert np.array_equal(adapted.params[name][0], net.params[name][0])
            assert np.array_equal(adapted.params[name][1], net.params[name][1])
        assert not np.array_equal(adapted.params["trunk1"][0], net.params["trunk1"][0])

    def test_full_depth_adaptation_still_freezes_heads(self):
        net, corpora = self._multilingual_net()
        adapted = adapt_shared_layers(
            net, "wr", corpora["wr"], 3, TrainConfig(epochs=1, minibatch=64, seed=1)
        )
        for name in ("lr.prefinal", "lr.output", "wr.prefinal", "wr.output"):
            assert np.array_equal(adapted.params[name][0], net.params[name][0])

    def test_original_untouched(self):
        net, corpora = self._multilingual_net()
        snapshot = {k: (w.copy(), b.copy()) for k, (w, b) in net.params.items()}
        adapt_shared_layers(net, "wr", corpora["wr"], 2,
                            TrainConfig(epochs=1, minibatch=64, seed=1))
        for name, (w, b) in snapshot.items():
            assert np.array_equal(net.params[name][0], w)

    def test_k_out_of_range(self):
        net, corpora = self._multilingual_net()
        with pytest.raises(ValueError, match="out of range"):
            adapt_shared_layers(net, "wr", corpora["wr"], 0, TrainConfig())
        with pytest.raises(ValueError, match="out of range"):
            adapt_shared_layers(net, "wr", corpora["wr"], 9, TrainConfig())

    def test_provenance_records_k_and_epochs(self):
        net, corpora = self._multilingual_net()
        adapted = adapt_shared_layers(
            net, "wr", corpora["wr"], 2, TrainConfig(epochs=0.5, minibatch=64, seed=1)
        )
        record = adapted.provenance[-1]
        assert record["stage"] == "adapt"
        assert record["k_layers"] == 2
        assert record["epochs"] == 0.5
        assert record["adapt_task"] == "wr"


class TestInputNormalization:
    def test_standardizes_training_frames(self):
        corpus = separable_corpus(0, 500)
        net = build_network(toy_spec(), Rng(0))
        set_input_normalization(net, [corpus])
        frames = np.vstack([u.frames for u in corpus.utterances])
        normed = frames * net.input_scale + net.input_shift
        assert np.allclose(normed.mean(axis=0), 0.0, atol=1e-10)
        assert np.allclose(normed.std(axis=0), 1.0, atol=1e-10)
