from dataclasses import replace

import numpy as np
import pytest

from c2af.config import ConfigError
from c2af.core import AdamState, finite_diff_check
from c2af.data import SynthConfig, TruncatedPayloadError, synth_generate
from c2af.encoder import predict_view, view_loss_and_grads
from c2af.training import (
    BatchSampler,
    TrainConfig,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    evaluate,
    init_model,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_step_fusion,
    train_step_view,
)

TINY = TrainConfig(
    steps=12, warmup=4, batch_size=8, lr=1e-2, d_global=3, conv_channels=(4,), conv_kernels=(3,),
    n_kernels=2, eval_interval=4, seed=5,
)


@pytest.fixture(scope="module")
def tiny_ds():
    cfg = SynthConfig(4, 2, 60, 8, (3, 2), 0.8, (((0, 1),), ((2, 3),)), seed=11)
    return synth_generate(cfg)


def snapshot(model):
    return {p.name: p.value.tobytes() for p in model.params()}


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.warmup == 400 and cfg.lr == 1e-4 and cfg.batch_size == 32 and cfg.n_kernels == 8
        assert cfg.conv_channels == (64, 128, 64) and cfg.conv_kernels == (7, 5, 3) and cfg.d_global == 64

    @pytest.mark.parametrize(
        "kwargs",
        [dict(steps=5, warmup=6), dict(batch_size=0), dict(heads=("bogus",)), dict(heads=()),
         dict(conv_channels=(4,), conv_kernels=(3, 3)), dict(eval_interval=0), dict(heads=("complete", "complete"))],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_kv_round_trip(self):
        cfg = replace(TINY, heads=("complete", "concat"), standardize=False)
        assert TrainConfig.from_kv(cfg.to_kv()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_kv({"learning_rate": "1"})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_kv({"steps": "many"})

    def test_from_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# tiny\nsteps = 10\nheads = complete, concat\nconv_kernels = 3\nconv_channels = 2\n")
        cfg = TrainConfig.from_file(tmp_path / "c.cfg")
        assert cfg.steps == 10 and cfg.warmup == 2 and cfg.heads == ("complete", "concat")

    def test_fingerprint_ignores_seed(self):
        assert TINY.fingerprint() == replace(TINY, seed=99).fingerprint()
        assert TINY.fingerprint() != replace(TINY, lr=0.5).fingerprint()


class TestSampler:
    def test_epoch_covers_without_replacement(self):
        s = BatchSampler(10, 3, np.random.default_rng(0))
        seen = np.concatenate([s.next() for _ in range(3)])
        assert len(set(seen.tolist())) == 9

    def test_reshuffles(self):
        s = BatchSampler(6, 3, np.random.default_rng(0))
        first = [s.next().tolist() for _ in range(2)]
        second = [s.next().tolist() for _ in range(2)]
        assert sorted(sum(first, [])) == sorted(sum(second, [])) == list(range(6))

    def test_small_dataset(self):
        assert BatchSampler(3, 8, np.random.default_rng(0)).next().size == 3


class TestSteps:
    def setup(self, tiny_ds, heads=("complete",)):
        cfg = replace(TINY, heads=heads)
        model = init_model(cfg, tiny_ds.n_views, tiny_ds.n_classes, tiny_ds.length, tiny_ds.dims)
        X = [x[:8] for x in tiny_ds.views]
        return cfg, model, X, tiny_ds.labels[:8]

    def test_view_step_deterministic(self, tiny_ds):
        results = []
        for _ in range(2):
            cfg, model, X, y = self.setup(tiny_ds)
            enc = model.views[0]
            train_step_view(X[0], y, enc, AdamState.init(enc.params()), cfg)
            results.append(snapshot(model))
        assert results[0] == results[1]

    def test_view_descent_on_fixed_batch(self, tiny_ds):
        cfg, model, X, y = self.setup(tiny_ds)
        enc = model.views[0]
        opt = AdamState.init(enc.params())
        losses = [train_step_view(X[0], y, enc, opt, cfg) for _ in range(50)]
        assert losses[-1] < losses[0] * 0.5

    def test_view_step_gradients(self, tiny_ds):
        cfg, model, X, y = self.setup(tiny_ds)
        enc = model.views[1]
        view_loss_and_grads(X[1], y, enc)
        errs = finite_diff_check(lambda: view_loss_and_grads(X[1], y, enc)[0], enc.params())
        assert max(errs.values()) < 1e-4

    def test_fusion_step_leaves_encoders(self, tiny_ds):
        cfg, model, X, y = self.setup(tiny_ds)
        P = np.stack([predict_view(X[v], e) for v, e in enumerate(model.views)], axis=1)
        head = model.heads["complete"]
        before = {p.name: p.value.tobytes() for e in model.views for p in e.params()}
        grads = {p.name: p.grad.tobytes() for e in model.views for p in e.params()}
        opt = AdamState.init(head.params())
        losses = [train_step_fusion(P, y, head, opt, cfg) for _ in range(30)]
        assert before == {p.name: p.value.tobytes() for e in model.views for p in e.params()}
        assert grads == {p.name: p.grad.tobytes() for e in model.views for p in e.params()}
        assert losses[-1] < losses[0]

    def test_single_view_fusion(self):
        ds = synth_generate(SynthConfig(3, 1, 30, 8, (2,), 0.5, ((),), seed=1))
        result = run_training(ds, replace(TINY, steps=6, warmup=2))
        assert result.log[-1]["fusion_loss"]["complete"] is not None


class TestLoop:
    def test_warmup_only_keeps_heads(self, tiny_ds):
        cfg = replace(TINY, steps=6, warmup=6, heads=("complete", "concat"))
        init = init_model(cfg, tiny_ds.n_views, tiny_ds.n_classes, tiny_ds.length, tiny_ds.dims)
        result = run_training(tiny_ds, cfg)
        for mode, head in result.final.model.heads.items():
            for p, q in zip(head.params(), init.heads[mode].params()):
                assert p.value.tobytes() == q.value.tobytes()
        assert all(rec["phase"] == "warmup" for rec in result.log)

    def test_deterministic_log(self, tiny_ds):
        a = run_training(tiny_ds, TINY).log_text()
        b = run_training(tiny_ds, TINY).log_text()
        assert a == b and "NaN" not in a

    def test_seed_changes_run(self, tiny_ds):
        assert run_training(tiny_ds, TINY).log_text() != run_training(tiny_ds, replace(TINY, seed=6)).log_text()

    def test_log_contents(self, tiny_ds):
        log = run_training(tiny_ds, TINY).log
        assert [rec["step"] for rec in log] == [4, 8, 12]
        assert set(log[-1]["fused_acc"]) == {"complete", "average", "max"}
        assert len(log[-1]["view_acc"]) == 2

    def test_shared_heads_equal_separate_runs(self, tiny_ds):
        both = run_training(tiny_ds, replace(TINY, heads=("complete", "inter_only")))
        alone = run_training(tiny_ds, replace(TINY, heads=("inter_only",)))
        a, b = both.best["inter_only"].to_dict(), alone.best["inter_only"].to_dict()
        # the fingerprint covers the head list, which differs by construction
        a.pop("fingerprint"), b.pop("fingerprint")
        assert a == b
        for p, q in zip(both.final.model.heads["inter_only"].params(), alone.final.model.heads["inter_only"].params()):
            assert p.value.tobytes() == q.value.tobytes()

    def test_best_checkpoint_matches_best_report(self, tiny_ds):
        result = run_training(tiny_ds, TINY)
        from c2af.data import split_train_test

        test = split_train_test(tiny_ds, TINY.test_fraction)[1]
        rep = evaluate(result.checkpoint, test)["complete"]
        assert rep.to_dict() == result.best["complete"].to_dict()

    @pytest.mark.parametrize("lr", [0.0, 1e-2])
    def test_best_is_earliest_maximum(self, tiny_ds, lr):
        # lr=0 still moves batch-norm running stats, but yields many ties
        result = run_training(tiny_ds, replace(TINY, lr=lr, steps=24, eval_interval=2))
        for mode, rep in result.best.items():
            accs = [(rec["fused_acc"][mode], rec["step"]) for rec in result.log]
            top = max(a for a, _ in accs)
            assert rep.fused_accuracy == top
            assert rep.step == min(s for a, s in accs if a == top)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_ds, tmp_path):
        result = run_training(tiny_ds, replace(TINY, heads=("complete", "concat")))
        save_checkpoint(result.final, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert checkpoint_to_bytes(loaded) == checkpoint_to_bytes(result.final)
        a = {m: r.to_dict() for m, r in evaluate(result.final, tiny_ds).items()}
        b = {m: r.to_dict() for m, r in evaluate(loaded, tiny_ds).items()}
        assert a == b
        assert loaded.view_opts[0].step == result.final.view_opts[0].step == 12

    def test_truncated(self, tiny_ds):
        buf = checkpoint_to_bytes(run_training(tiny_ds, replace(TINY, steps=4, warmup=0)).final)
        with pytest.raises(TruncatedPayloadError):
            checkpoint_from_bytes(buf[:-3])

    def test_dataset_record_rejected(self, tiny_ds):
        from c2af.data import RecordTypeError, dataset_to_bytes

        with pytest.raises(RecordTypeError):
            checkpoint_from_bytes(dataset_to_bytes(tiny_ds))
