import pytest
import yaml

from graphdiff import config as C


def test_defaults_build_valid_objects():
    cfg = C.resolve_config()
    assert C.denoiser_config(cfg).model_dim == 384
    assert C.train_config(cfg).lr_at(1) == pytest.approx(4e-5 * 0.995)
    assert C.sampler_config(cfg).mode == "ddpm"
    assert C.loss_config(cfg).norm == "l2_unsquared"
    assert C.normalization_spec(cfg).pose_scale_mm == 1000.0


def test_overrides_are_yaml_typed(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\ntrain:\n  epochs: 5\n")
    cfg = C.resolve_config(path, ["train.epochs=7", "loss.joint_weights=[1, 2]", "sampler.clip_x0=null"])
    assert cfg["seed"] == 3 and cfg["train"]["epochs"] == 7
    assert cfg["loss"]["joint_weights"] == [1, 2]
    assert cfg["sampler"]["clip_x0"] is None
    assert C.sampler_config(cfg).clip_x0 is None


@pytest.mark.parametrize("override", ["train.nope=1", "train=3", "noequals", "train.epochs=[unclosed"])
def test_bad_overrides(override):
    with pytest.raises(C.ConfigError):
        C.resolve_config(None, [override])


def test_bad_files(tmp_path):
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    (tmp_path / "unknown.yaml").write_text("optimizer: sgd\n")
    for name in ("list.yaml", "unknown.yaml"):
        with pytest.raises(C.ConfigError):
            C.resolve_config(tmp_path / name)
    with pytest.raises(FileNotFoundError):
        C.resolve_config(tmp_path / "missing.yaml")


def test_invalid_values_become_config_errors():
    cfg = C.resolve_config(None, ["sampler.mode=euler"])
    with pytest.raises(C.ConfigError):
        C.sampler_config(cfg)
    cfg = C.resolve_config(None, ["train.learning_rate=-1"])
    with pytest.raises(C.ConfigError):
        C.train_config(cfg)


def test_dump_round_trips():
    cfg = C.resolve_config(None, ["seed=9"])
    assert yaml.safe_load(C.dump(cfg)) == cfg
