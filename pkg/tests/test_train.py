import numpy as np
import pytest

from splatpose.camdfa import DecoderConfig
from splatpose.metrics import LossWeights
from splatpose.scenegen import SceneSpec, generate_dataset
from splatpose.train import (ABLATIONS, EvaluationError, TrainingError, TrainOptions, evaluate, load_model,
                             read_curve, rotmat_to_quat, run_ablation, scene_loss, train_loop,
                             transform_gaussians)
from splatpose.camgeom import quat_to_matrix, random_rotation


@pytest.fixture(scope="module")
def tiny_ds():
    spec = SceneSpec(n_gaussians=12, image_size=(16, 16), n_views=3, seed=30)
    return generate_dataset(spec, 3, ["large", "medium", "large"])


@pytest.fixture(scope="module")
def cfg():
    return DecoderConfig.miniature()


def test_zero_steps_checkpoint_equals_init(tmp_path, tiny_ds, cfg):
    from splatpose.camdfa import CaMDFA
    res = train_loop(tiny_ds, cfg, LossWeights(), TrainOptions(steps=0), tmp_path)
    model, extra = load_model(res.checkpoint)
    init = CaMDFA(cfg).parameters()
    for name, p in model.parameters().items():
        np.testing.assert_array_equal(p.data, init[name].data)
    assert extra["step"] == 0 and DecoderConfig.from_dict(extra["config"]) == cfg
    assert read_curve(tmp_path / "loss.csv") == []


def test_training_is_deterministic_and_writes_curve(tmp_path, tiny_ds, cfg):
    opt = TrainOptions(steps=4, lr=3e-3, seed=2, ckpt_every=2)
    a = train_loop(tiny_ds, cfg, LossWeights(), opt, tmp_path / "a")
    b = train_loop(tiny_ds, cfg, LossWeights(), opt, tmp_path / "b")
    assert a.curve == b.curve
    header = (tmp_path / "a" / "loss.csv").read_text().splitlines()[0]
    assert header == "step,loss_total,loss_3d,loss_rays"
    assert read_curve(tmp_path / "a" / "loss.csv") == a.curve
    assert (tmp_path / "a" / "checkpoint_2.bin").is_file() and (tmp_path / "a" / "checkpoint_4.json").is_file()
    for row in a.curve:
        assert row[1] == pytest.approx(row[2] + row[3])
    # loaded checkpoint reproduces the trained model's loss
    model, _ = load_model(a.checkpoint)
    sc = tiny_ds.scenes[0]
    assert float(scene_loss(model, sc, LossWeights())[0].data) == float(scene_loss(a.model, sc, LossWeights())[0].data)


def test_non_finite_loss_reports_step(tiny_ds, cfg):
    from splatpose.scenegen import Dataset
    bad = Dataset([tiny_ds.scenes[0]], tiny_ds.meta)
    sc = bad.scenes[0]
    images = sc.images.copy()
    images[sc.targets[0], 0, 0, 0] = np.nan
    bad.scenes[0] = type(sc)(sc.gaussians, sc.cameras, images, sc.inputs, sc.targets, sc.overlap, sc.bucket)
    with pytest.raises(TrainingError) as exc:
        train_loop(bad, cfg, LossWeights(), TrainOptions(steps=3))
    assert exc.value.step == 0


def test_empty_dataset_rejected(cfg):
    from splatpose.scenegen import Dataset
    with pytest.raises(TrainingError):
        train_loop(Dataset([]), cfg, LossWeights(), TrainOptions(steps=1))


def test_oracle_path_gives_perfect_auc(tiny_ds):
    rep = evaluate(None, tiny_ds, oracle=True)
    assert (rep["auc5"], rep["auc10"], rep["auc20"]) == (1.0, 1.0, 1.0)
    assert rep["psnr"] == 100.0 and rep["ssim"] == pytest.approx(1.0)
    with pytest.raises(EvaluationError):
        evaluate(None, tiny_ds)


def test_report_structure_and_purity(tiny_ds, cfg):
    from splatpose.camdfa import CaMDFA
    model = CaMDFA(cfg)
    a = evaluate(model, tiny_ds)
    b = evaluate(model, tiny_ds)
    assert a == b
    assert {"psnr", "ssim", "auc5", "auc10", "auc20", "e_rot", "e_trans", "bucket"} <= set(a)
    assert sum(v["count"] for v in a["bucket"].values()) == len(tiny_ds) == a["count"]
    assert all(0 <= a[k] <= 1 for k in ("auc5", "auc10", "auc20"))
    assert -1 <= a["ssim"] <= 1


def test_alignment_never_lowers_psnr(tiny_ds, cfg):
    from splatpose.camdfa import CaMDFA
    rep = evaluate(CaMDFA(cfg), tiny_ds, align=True, align_iters=10)
    for s in rep["per_scene"]:
        for plain, aligned in zip(s["psnr"], s["psnr_A"]):
            assert aligned >= plain - 0.01


def test_views_argument(tiny_ds, cfg):
    from splatpose.camdfa import CaMDFA
    rep = evaluate(CaMDFA(cfg.replace(V=3)), tiny_ds, views=3)
    assert len(rep["per_scene"][0]["e_rot"]) == 2
    with pytest.raises(EvaluationError):
        evaluate(CaMDFA(cfg), tiny_ds, views=4)


def test_rigid_transform_helpers():
    rng = np.random.default_rng(0)
    for _ in range(20):
        R = random_rotation(rng)
        np.testing.assert_allclose(quat_to_matrix(rotmat_to_quat(R)), R, atol=1e-12)
    from splatpose.render import GaussianSet
    g = GaussianSet.from_activated(rng.normal(size=(3, 3)), 0.1, 0.5, rng.uniform(size=(3, 3)))
    R, t = random_rotation(rng), rng.normal(size=3)
    h = transform_gaussians(g, R, t)
    np.testing.assert_allclose(h.mu.data, g.mu.data @ R.T + t)
    for q, q2 in zip(g.rot.data, h.rot.data):
        np.testing.assert_allclose(quat_to_matrix(q2), R @ quat_to_matrix(q), atol=1e-12)


def test_ablation_variants_share_everything_but_one_switch(tiny_ds, cfg):
    res = run_ablation(tiny_ds, tiny_ds, cfg, LossWeights(), TrainOptions(steps=1), ["refray", "6dpose"])
    assert res["6dpose"]["config_diff"] == {"camera_head": ["refray", "6d"]}
    assert "holds" in res["refray_vs_6d"]
    assert set(ABLATIONS) == {"refray", "6dpose", "pixel", "nocamdfa", "gtpose"}
    with pytest.raises(ValueError):
        run_ablation(tiny_ds, tiny_ds, cfg, LossWeights(), TrainOptions(steps=1), ["bogus"])
