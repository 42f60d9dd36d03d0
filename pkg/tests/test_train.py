import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvp3d.checkpoint import load_checkpoint
from mvp3d.model import ModelConfig, NonFiniteError, init_params
from mvp3d.pointcloud import CorpusSpec, PointCloud, save_ply
from mvp3d.task import make_episodes
from mvp3d.train import (
    ConfigMismatch,
    OptimState,
    ScheduleConfig,
    TrainConfig,
    TrainError,
    adamw_step,
    check_gradients,
    finetune,
    grad_check,
    lamb_step,
    lr_schedule,
    prepare_views,
    pretrain,
    procedural_corpus,
)

SMALL = ModelConfig(hidden=16, enc_layers=1, dec_layers=1, heads=2, patch=8, image_size=16)
SPEC = CorpusSpec(density=800.0)


class TestAdamW:
    def test_first_step_hand_value(self):
        p = {"w": np.zeros(3)}
        g = {"w": np.ones(3)}
        out, state = adamw_step(p, g, OptimState(), 1e-4)
        np.testing.assert_allclose(out["w"], -1e-4 / (1 + 1e-8), rtol=1e-15)
        assert state.t == 1
        np.testing.assert_array_equal(p["w"], 0.0)

    def test_zero_grad_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        state = OptimState()
        for _ in range(5):
            p, state = adamw_step(p, {"w": np.zeros(2)}, state, 1e-3)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_decoupled_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        state = OptimState()
        lr, wd = 1e-2, 0.1
        for k in range(1, 6):
            p, state = adamw_step(p, {"w": np.zeros(2)}, state, lr, wd=wd)
            np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) * (1 - lr * wd) ** k,
                                       rtol=1e-14)

    def test_non_finite_grad(self):
        with pytest.raises(NonFiniteError):
            adamw_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0])}, OptimState(), 1e-3)


class TestLamb:
    def test_zero_params_equals_adamw(self):
        g = {"w": np.array([0.5, -1.0, 2.0])}
        a, _ = adamw_step({"w": np.zeros(3)}, g, OptimState(), 1e-3)
        b, _ = lamb_step({"w": np.zeros(3)}, g, OptimState(), 1e-3)
        np.testing.assert_array_equal(a["w"], b["w"])

    def test_zero_update_fixed_point(self):
        p = {"w": np.array([1.0, 2.0])}
        out, _ = lamb_step(p, {"w": np.zeros(2)}, OptimState(), 1e-2)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_scale_consistency(self):
        # g = 0, wd > 0: u = wd * theta, r = 1/wd, so theta <- theta * (1 - lr) at any scale
        base = np.array([0.3, -1.2, 0.7])
        lr, wd = 1e-2, 0.05
        for c in (1.0, 10.0, 0.01):
            out, _ = lamb_step({"w": c * base}, {"w": np.zeros(3)}, OptimState(), lr, wd=wd)
            np.testing.assert_allclose(out["w"] / (c * base), 1 - lr, rtol=1e-12)

    def test_trust_ratio(self):
        p = {"w": np.array([3.0, 4.0])}
        g = {"w": np.array([1.0, 0.0])}
        out, _ = lamb_step(p, g, OptimState(), 0.1)
        # u = (1/(1+eps), 0), r = 5 / |u|
        np.testing.assert_allclose(out["w"], [3.0 - 0.1 * 5.0, 4.0], rtol=1e-12)


class TestSchedule:
    paper = ScheduleConfig(base_lr=1e-4, warmup_steps=2000, min_lr=1e-6, total_steps=10000)

    def test_paper_endpoints(self):
        assert lr_schedule(0, self.paper) == 0.0
        assert lr_schedule(2000, self.paper) == 1e-4
        assert lr_schedule(10000, self.paper) == 1e-6
        assert lr_schedule(12345, self.paper) == 1e-6

    def test_warmup_linear(self):
        assert lr_schedule(1000, self.paper) == pytest.approx(5e-5, rel=1e-15)

    def test_cosine_midpoint(self):
        mid = 2000 + 4000
        assert lr_schedule(mid, self.paper) == pytest.approx((1e-4 + 1e-6) / 2, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(warm=st.integers(0, 50), extra=st.integers(1, 60), base=st.floats(1e-5, 1e-1),
           frac=st.floats(0, 1))
    def test_monotone_after_warmup_and_continuous(self, warm, extra, base, frac):
        cfg = ScheduleConfig(base, warm, base * frac, warm + extra)
        lrs = [lr_schedule(s, cfg) for s in range(warm, warm + extra + 2)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert lrs[0] == base
        if warm:
            assert abs(lr_schedule(warm - 1, cfg) - base) <= base / warm * (1 + 1e-12)

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, self.paper)


class TestPresets:
    def test_paper_pretrain(self):
        c = TrainConfig.paper_pretrain()
        assert (c.base_lr, c.weight_decay, c.epochs, c.batch_size, c.mask_ratio, c.optimizer) == \
            (1e-4, 0.01, 15, 3, 0.75, "adamw")

    def test_paper_finetune(self):
        c = TrainConfig.paper_finetune()
        assert (c.base_lr, c.warmup_steps, c.min_lr, c.epochs, c.batch_size, c.optimizer) == \
            (1e-4, 2000, 1e-6, 15, 3, "lamb")

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(mask_ratio=1.0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="sgd")
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"bogus": 1})


def small_pretrain(tmp_path=None, cfg=SMALL, preset=TrainConfig.desk_pretrain, **kw):
    tcfg = preset(max_steps=kw.pop("steps", 6), seed=kw.pop("seed", 0), **kw)
    corpus = procedural_corpus(6, 100, SPEC)
    return pretrain(corpus, cfg, tcfg, out_dir=tmp_path)


class TestPretrain:
    def test_outputs(self, tmp_path):
        res = small_pretrain(tmp_path)
        assert res.step == 6
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,epoch,split,loss,lr,masked_mse"
        assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 7
        ckpts = sorted(p.name for p in tmp_path.glob("ckpt_epoch*.ckpt"))
        assert ckpts == ["ckpt_epoch001.ckpt", "ckpt_epoch002.ckpt"]
        ck = load_checkpoint(tmp_path / "final.ckpt")
        assert ck.step == 6
        assert all(ck.params[k].tobytes() == res.params[k].astype("<f4").tobytes()
                   for k in res.params)

    def test_deterministic(self, tmp_path):
        a = small_pretrain(tmp_path / "a")
        b = small_pretrain(tmp_path / "b")
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
        assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()
        c = small_pretrain(seed=1)
        assert a.losses != c.losses

    def test_workers_do_not_change_results(self):
        a = small_pretrain(workers=1)
        b = small_pretrain(workers=3)
        assert a.losses == b.losses

    def test_ratio_zero_still_learns(self):
        res = small_pretrain(steps=100, mask_ratio=0.0)
        assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])

    @pytest.mark.parametrize("preset", [TrainConfig.desk_pretrain, TrainConfig.paper_pretrain])
    @pytest.mark.parametrize("strategy", ["rgb_only", "all_channels"])
    @pytest.mark.parametrize("seed", range(10))
    def test_loss_trace_finite(self, seed, strategy, preset):
        cfg = ModelConfig(**{**SMALL.to_dict(), "strategy": strategy})
        res = small_pretrain(cfg=cfg, preset=preset, steps=4, seed=seed, strategy=strategy)
        assert all(math.isfinite(x) for x in res.losses)

    def test_strategy_mismatch(self):
        with pytest.raises(ValueError, match="strategy"):
            small_pretrain(strategy="all_channels")

    def test_skips_unreadable(self, tmp_path, caplog):
        paths = []
        for i, cloud in enumerate(procedural_corpus(10, 0, SPEC)):
            paths.append(tmp_path / f"s{i}.ply")
            save_ply(paths[-1], cloud)
        paths[3].write_text("garbage\n")
        views = prepare_views(paths, 16)
        assert len(views) == 9
        assert "skipping unreadable scene" in caplog.text
        paths[4].write_text("garbage\n")
        with pytest.raises(TrainError, match="aborting"):
            prepare_views(paths, 16)

    def test_empty_corpus(self):
        with pytest.raises(TrainError):
            prepare_views([], 16)


class TestFinetune:
    def demos(self, n=4):
        return make_episodes(n, 500, SPEC)

    def test_from_pretrained(self, tmp_path):
        pre = small_pretrain(tmp_path / "pre")
        ck = load_checkpoint(tmp_path / "pre/final.ckpt")
        tcfg = TrainConfig.desk_finetune(max_steps=4)
        res = finetune(self.demos(), ck, SMALL, tcfg, out_dir=tmp_path / "ft")
        assert math.isfinite(res.losses[0]) and res.step == 4
        assert not any(k.startswith("mae.") for k in res.params)
        np.testing.assert_array_equal(
            finetune(self.demos(), ck, SMALL, TrainConfig.desk_finetune(max_steps=1, base_lr=0.0, min_lr=0.0)
                     ).params["enc.patch_w"],
            pre.params["enc.patch_w"].astype(np.float32))
        assert (tmp_path / "ft/final.ckpt").exists()

    def test_from_scratch(self):
        res = finetune(self.demos(), None, SMALL, TrainConfig.desk_finetune(max_steps=3))
        scratch = init_params(SMALL, parts=("enc",))
        assert set(res.params) == set(scratch) | {k for k in res.params if k.startswith("act.")}

    def test_zero_demos(self):
        with pytest.raises(TrainError):
            finetune([], None, SMALL, TrainConfig.desk_finetune())

    def test_config_mismatch_lists_fields(self, tmp_path):
        small_pretrain(tmp_path)
        ck = load_checkpoint(tmp_path / "final.ckpt")
        other = ModelConfig(hidden=32, enc_layers=1, dec_layers=1, heads=2, patch=8, image_size=16)
        with pytest.raises(ConfigMismatch, match="hidden: 16 vs 32"):
            finetune(self.demos(), ck, other, TrainConfig.desk_finetune(max_steps=1))

    def test_val_rows(self):
        res = finetune(self.demos(3), None, SMALL, TrainConfig.desk_finetune(max_steps=2, epochs=2),
                       val_demos=self.demos(2))
        assert [r["split"] for r in res.metrics] == ["train", "val", "train", "val"]


class TestGradCheck:
    def test_constant_loss_skips(self):
        params = {"w": np.zeros((3, 3))}
        grads = {"w": np.zeros((3, 3))}
        rep = check_gradients(lambda p: 1.0, params, grads)
        assert rep == {"w": 0.0}

    def test_detects_wrong_gradient(self):
        params = {"w": np.array([1.0, 2.0])}
        rep = check_gradients(lambda p: float((p["w"] ** 2).sum()), params,
                              {"w": np.array([2.0, 0.0])})
        assert rep["w"] == pytest.approx(1.0)

    @pytest.mark.parametrize("mode", ["pretrain", "finetune"])
    def test_small_model(self, mode):
        rep = grad_check(SMALL, samples=3, mode=mode)
        assert rep.max_rel_err < 1e-3
