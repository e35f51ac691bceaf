import numpy as np
import pytest

from rgsplat import tensor as T
from rgsplat.feedback import ErrorFeatureNet
from rgsplat.initrecon import InitConfig
from rgsplat.metrics import psnr
from rgsplat.model import ModelParams
from rgsplat.recurrent import RecurrentConfig
from rgsplat.scenes import SceneSpec, gen_scene
from rgsplat.training import (
    AdamW,
    CosineSchedule,
    LossConfig,
    TrainSettings,
    TrainingError,
    depth_smooth_loss,
    render_loss,
    sample_iteration_counts,
    stage1_loss,
    stage2_loss,
    stage2_weights,
    train_stage1,
    train_stage2,
)


@pytest.fixture(scope="module")
def net():
    return ErrorFeatureNet()


def tiny_model(**cfg):
    init_cfg = InitConfig(channels=16, context_blocks=2, k=4, **cfg)
    rec_cfg = RecurrentConfig(blocks=1, k=4, channels=16)
    return ModelParams(init_cfg, rec_cfg, LossConfig(target_views=1), seed=5)


@pytest.fixture(scope="module")
def tiny_dataset():
    spec = SceneSpec(num_gt_gaussians=80, n_input=2, n_target=1, height=32, width=48)
    return [gen_scene(100 + i, spec) for i in range(2)]


class TestRenderLoss:
    def test_zero_on_identical_images(self, rng, net):
        img = rng.uniform(0, 1, (16, 16, 3))
        loss = render_loss(T.Tensor(img), img, net, perceptual_weight=0.5)
        assert loss.item() == 0.0

    def test_l1_of_constant_offset(self, rng, net):
        img = rng.uniform(0.2, 0.7, (16, 16, 3))
        loss = render_loss(T.Tensor(img + 0.1), img, net, perceptual_weight=0.0)
        np.testing.assert_allclose(loss.item(), 0.1, rtol=1e-5)

    def test_symmetric_without_perceptual_term(self, rng, net):
        a = rng.uniform(0, 1, (12, 12, 3))
        b = rng.uniform(0, 1, (12, 12, 3))
        la = render_loss(T.Tensor(a), b, net, perceptual_weight=0.0).item()
        lb = render_loss(T.Tensor(b), a, net, perceptual_weight=0.0).item()
        assert la == pytest.approx(lb, rel=1e-6)

    def test_shape_mismatch_rejected(self, rng, net):
        with pytest.raises(TrainingError, match="mismatch"):
            render_loss(T.Tensor(np.zeros((8, 8, 3))), np.zeros((4, 4, 3)), net)

    def test_nonnegative(self, rng, net):
        a = rng.uniform(0, 1, (16, 16, 3))
        b = rng.uniform(0, 1, (16, 16, 3))
        assert render_loss(T.Tensor(a), b, net).item() >= 0


class TestDepthSmoothLoss:
    def test_constant_depth_is_zero(self, rng):
        img = rng.uniform(0, 1, (8, 8, 3))
        loss = depth_smooth_loss(img, T.Tensor(np.full((8, 8), 2.0)))
        assert loss.item() == 0.0

    def test_unit_ramp_on_constant_image(self):
        img = np.full((2, 2, 3), 0.5)
        depth = T.Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]))
        loss = depth_smooth_loss(img, depth)
        assert loss.item() == pytest.approx(1.0, rel=1e-6)

    def test_edge_aware_weighting(self, rng):
        """A depth edge on a flat image costs more than on an image edge."""
        depth = np.zeros((8, 8))
        depth[:, 4:] = 1.0
        flat = np.full((8, 8, 3), 0.5)
        edged = flat.copy()
        edged[:, 4:] = 1.0  # collocated strong image edge
        flat_cost = depth_smooth_loss(flat, T.Tensor(depth)).item()
        edge_cost = depth_smooth_loss(edged, T.Tensor(depth)).item()
        assert edge_cost < flat_cost

    def test_differentiable_in_depth(self, f64, rng, net):
        from conftest import gradcheck

        img = rng.uniform(0, 1, (6, 6, 3))
        depth = T.Tensor(rng.uniform(1, 2, (6, 6)), requires_grad=True,
                         dtype=np.float64)
        gradcheck(lambda d: depth_smooth_loss(img, d), [depth], tol=1e-6)


class TestStageLosses:
    def test_stage1_reduces_to_render_loss_without_smoothness(self, rng, net):
        cfg = LossConfig(depth_smooth_weight=0.0)
        img = rng.uniform(0, 1, (8, 8, 3))
        pred = T.Tensor(rng.uniform(0, 1, (8, 8, 3)))
        full = stage1_loss([pred], [img], [], [], cfg, net)
        alone = render_loss(pred, img, net, cfg.perceptual_weight)
        assert full.item() == pytest.approx(alone.item(), rel=1e-6)

    def test_stage1_zero_on_perfect_input(self, rng, net):
        cfg = LossConfig()
        img = rng.uniform(0, 1, (8, 8, 3))
        depth = T.Tensor(np.full((8, 8), 1.5))
        loss = stage1_loss([T.Tensor(img)], [img], [img], [depth], cfg, net)
        assert loss.item() == 0.0

    def test_stage1_matches_hand_assembly(self, rng, net):
        cfg = LossConfig()
        imgs = [rng.uniform(0, 1, (8, 8, 3)) for _ in range(2)]
        preds = [T.Tensor(rng.uniform(0, 1, (8, 8, 3))) for _ in range(2)]
        ins = [rng.uniform(0, 1, (8, 8, 3)) for _ in range(2)]
        depths = [T.Tensor(rng.uniform(1, 2, (8, 8))) for _ in range(2)]
        full = stage1_loss(preds, imgs, ins, depths, cfg, net).item()
        hand = sum(
            render_loss(p, i, net, cfg.perceptual_weight).item()
            for p, i in zip(preds, imgs)
        ) + cfg.depth_smooth_weight * sum(
            depth_smooth_loss(i, d).item() for i, d in zip(ins, depths)
        )
        assert full == pytest.approx(hand, rel=1e-5)

    def test_stage1_no_targets_rejected(self, net):
        with pytest.raises(TrainingError, match="target"):
            stage1_loss([], [], [], [], LossConfig(), net)

    def test_stage2_weights_t3(self):
        assert stage2_weights(3, 0.9) == pytest.approx([0.81, 0.9, 1.0])

    def test_stage2_t1_is_plain_render_loss(self, rng, net):
        cfg = LossConfig()
        img = rng.uniform(0, 1, (8, 8, 3))
        pred = T.Tensor(rng.uniform(0, 1, (8, 8, 3)))
        loss = stage2_loss([[pred]], [img], cfg, net).item()
        assert loss == pytest.approx(
            render_loss(pred, img, net, cfg.perceptual_weight).item(), rel=1e-6
        )

    def test_stage2_gamma_one_is_unweighted_sum(self, rng, net):
        cfg = LossConfig(gamma=1.0)
        img = rng.uniform(0, 1, (8, 8, 3))
        preds = [T.Tensor(rng.uniform(0, 1, (8, 8, 3))) for _ in range(3)]
        loss = stage2_loss([[p] for p in preds], [img], cfg, net).item()
        hand = sum(render_loss(p, img, net, cfg.perceptual_weight).item() for p in preds)
        assert loss == pytest.approx(hand, rel=1e-5)

    def test_stage2_empty_trajectory_rejected(self, net):
        with pytest.raises(TrainingError, match="empty"):
            stage2_loss([], [], LossConfig(), net)


class TestOptimizer:
    def test_zero_grads_zero_decay_leave_params_unchanged(self, rng):
        p = T.Tensor(rng.normal(0, 1, (4, 4)), requires_grad=True)
        opt = AdamW([p], lr=1e-2, weight_decay=0.0)
        before = p.values.copy()
        p.grad = np.zeros_like(p.values)
        opt.step()
        np.testing.assert_array_equal(p.values, before)

    def test_quadratic_converges(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        opt = AdamW([x], lr=0.1, weight_decay=0.0)
        for _ in range(500):
            opt.zero_grad()
            with T.Tape() as tape:
                loss = T.tsum(T.square(x))
            T.backward(tape, loss)
            opt.step()
        assert abs(x.values[0]) < 1e-3

    def test_nan_grads_skip_step_and_count(self, rng):
        p = T.Tensor(rng.normal(0, 1, (3,)), requires_grad=True)
        opt = AdamW([p], lr=1e-2)
        before = p.values.copy()
        p.grad = np.array([1.0, np.nan, 0.0])
        assert opt.step() is False
        assert opt.skipped_steps == 1
        np.testing.assert_array_equal(p.values, before)

    def test_cosine_schedule_endpoint_hits_zero(self):
        sched = CosineSchedule(1e-3, total=1000, warmup_frac=0.05)
        assert sched(1000) == pytest.approx(0.0, abs=1e-12)
        assert sched(50) == pytest.approx(1e-3, rel=1e-9)  # end of warmup
        assert 0 < sched(1) < 1e-3

    def test_weight_decay_shrinks_weights(self, rng):
        p = T.Tensor(np.full(4, 2.0), requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(4)
        opt.step()
        assert np.all(np.abs(p.values) < 2.0)


class TestIterationSampler:
    def test_uniform_within_three_sigma(self):
        rng = np.random.default_rng(0)
        counts = np.bincount(sample_iteration_counts(rng, 3000, 3), minlength=4)[1:]
        expected = 1000
        sigma = np.sqrt(3000 * (1 / 3) * (2 / 3))
        for c in counts:
            assert abs(c - expected) <= 3 * sigma


class TestTrainLoops:
    def test_stage1_improves_loss_and_logs(self, tmp_path, tiny_dataset):
        model = tiny_model()
        log = tmp_path / "loss.csv"
        ckpt = tmp_path / "model.ckpt"
        losses = []
        train_stage1(
            tiny_dataset, model, TrainSettings(steps=30, lr=1e-3, seed=1, log_every=5),
            log_path=log, checkpoint_path=ckpt,
            progress=lambda s, l, q: losses.append(l),
        )
        assert np.mean(losses[-5:]) < np.mean(losses[:5])
        text = log.read_text().splitlines()
        assert text[0] == "# seed=1"
        assert text[1] == "step,stage,loss,psnr,lr"
        assert ckpt.exists()

    def test_stage2_freezes_stage1_weights(self, tmp_path, tiny_dataset):
        model = tiny_model()
        train_stage1(tiny_dataset, model, TrainSettings(steps=10, lr=1e-3, seed=1))
        before = {k: v.values.copy() for k, v in model.stage1_parameters().items()}
        train_stage2(tiny_dataset, model, TrainSettings(steps=6, lr=1e-3, seed=2))
        for k, v in model.stage1_parameters().items():
            np.testing.assert_array_equal(v.values, before[k], err_msg=k)
            assert v.grad is None, f"frozen parameter {k} accumulated gradient"
        # and the stage-2 side actually moved
        moved = [
            k for k, v in model.stage2_parameters().items()
            if np.abs(v.values).max() > 0
        ]
        assert moved

    def test_stage2_zero_error_ablation_runs(self, tiny_dataset):
        model = tiny_model()
        train_stage1(tiny_dataset, model, TrainSettings(steps=5, lr=1e-3, seed=1))
        train_stage2(
            tiny_dataset, model,
            TrainSettings(steps=4, lr=1e-3, seed=2, zero_error_input=True),
        )

    def test_empty_dataset_rejected(self):
        with pytest.raises(TrainingError, match="empty"):
            train_stage1([], tiny_model(), TrainSettings(steps=1))

    def test_seeded_reproducibility(self, tiny_dataset):
        losses_a, losses_b = [], []
        for sink in (losses_a, losses_b):
            model = tiny_model()
            train_stage1(
                tiny_dataset, model, TrainSettings(steps=8, lr=1e-3, seed=7),
                progress=lambda s, l, q: sink.append(l),
            )
        assert losses_a == losses_b
