import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparse4d import config as C
from sparse4d.config import RunConfig, toy_config
from sparse4d.errors import ConfigError


def test_defaults_validate():
    RunConfig().validate()
    cfg = toy_config()
    m = cfg.model
    assert (m.num_anchors, m.embed_dims, m.num_learnable_keypoints, m.num_stages) == (32, 32, 4, 6)
    assert (cfg.camera.num_cameras, len(cfg.camera.strides), cfg.scene.num_frames) == (2, 2, 2)
    assert cfg.scene.box_count == (4, 8) and cfg.train.steps <= 2000


def test_toml_round_trip(tmp_path):
    cfg = toy_config(seed=9, model={"weight_norm": "sigmoid"})
    assert C.loads(cfg.dumps()) == cfg
    cfg.save(tmp_path / "c.toml")
    assert C.load(tmp_path / "c.toml") == cfg


@given(st.integers(0, 2 ** 31), st.integers(1, 14), st.floats(1e-6, 1.0), st.booleans())
def test_round_trip_preserves_overrides(seed, stages, lr, ego):
    cfg = toy_config(seed=seed, model={"num_stages": stages, "ego_compensation": ego}, train={"lr": lr})
    assert C.loads(cfg.dumps()) == cfg


def test_partial_file_keeps_defaults():
    cfg = C.loads("seed = 4\n[model]\nnum_stages = 3\n")
    assert cfg.seed == 4 and cfg.model.num_stages == 3
    assert cfg.model.embed_dims == RunConfig().model.embed_dims


@pytest.mark.parametrize("text, field", [
    ("[model]\nnum_stages = 0\n", "model.num_stages"),
    ("[model]\nnum_stages = 15\n", "model.num_stages"),
    ("[model]\nembed_dims = 30\nnum_groups = 8\n", "model.num_groups"),
    ("[model]\nweight_norm = \"max\"\n", "model.weight_norm"),
    ("[model]\nbogus = 1\n", "model.bogus"),
    ("[model]\nnum_anchors = 2.5\n", "model.num_anchors"),
    ("[model]\nego_compensation = 1\n", "model.ego_compensation"),
    ("[scene]\nbox_count = [5, 2]\n", "scene.box_count"),
    ("[scene]\nx_range = [1.0]\n", "scene.x_range"),
    ("[camera]\nnum_cameras = 0\n", "camera.num_cameras"),
    ("[train]\nlr = -1.0\n", "train.lr"),
    ("[loss]\nfocal_alpha = 1.5\n", "loss.focal_alpha"),
    ("[eval]\nerror_threshold = 3.0\n", "eval.error_threshold"),
    ("threads = 0\n", "threads"),
    ("unknown = 1\n", "unknown"),
    ("model = 3\n", "model"),
    ("[model]\nembed_dims = 8\nnum_groups = 2\n", "model.embed_dims"),
    ("this is = not toml [\n", "<file>"),
])
def test_invalid_values_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        C.loads(text)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        C.load(tmp_path / "absent.toml")


def test_replace_merges_sections_and_validates():
    cfg = toy_config()
    out = cfg.replace(model={"num_stages": 2}, seed=7)
    assert out.model.num_stages == 2 and out.seed == 7 and out.model.num_anchors == 32
    assert cfg.model.num_stages == 6
    with pytest.raises(ConfigError):
        cfg.replace(model={"num_groups": 5})


def test_keypoint_count():
    assert toy_config().model.num_keypoints == 11
